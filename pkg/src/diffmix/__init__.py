"""Diffusion-based synthesis of nuclei image/label pairs for imbalanced
pathology datasets, plus the evaluation metrics used to judge them."""

__version__ = "0.1.0"
