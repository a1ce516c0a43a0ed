"""Partial-noising + guided DDIM synthesis of image/label pairs."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .diffusion import NoiseSchedule, guided_eps, q_sample
from .errors import IncompatibleCheckpoint, InvalidConfig, ShapeMismatch, StepOrderViolation
from .label_space import SemanticLabelMap, one_hot_encode
from .tiles import image_to_unit, unit_to_image


@dataclass(frozen=True)
class SamplerConfig:
    """t_noise counts DDIM-subsequence steps: 55 of 100 starts at step 550 of 1000."""

    ddim_steps: int = 100
    t_noise: int = 55
    guidance_scale: float = 1.5
    eta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.ddim_steps < 1:
            raise InvalidConfig("sampler.ddim_steps must be >= 1")
        if not 1 <= self.t_noise <= self.ddim_steps:
            raise InvalidConfig(f"sampler.t_noise must lie in [1, ddim_steps={self.ddim_steps}], got {self.t_noise}")
        if self.guidance_scale < 0:
            raise InvalidConfig("sampler.guidance_scale must be >= 0")
        if not 0.0 <= self.eta <= 1.0:
            raise InvalidConfig("sampler.eta must lie in [0, 1]")

    def check_against(self, T: int):
        if self.ddim_steps > T:
            raise InvalidConfig(f"sampler.ddim_steps={self.ddim_steps} exceeds schedule T={T}")


@dataclass(frozen=True)
class SynthesisRecord:
    source_tile_id: str
    map_mode: str
    seed: int
    t_noise: int
    guidance_scale: float
    ddim_steps: int
    output_tile_id: str
    eta: float = 0.0
    start_step: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def ddim_subsequence(T: int, ddim_steps: int) -> list[int]:
    """Evenly spaced ascending steps ((i + 1) * T) // n, ending at T."""
    if not 1 <= ddim_steps <= T:
        raise InvalidConfig(f"need 1 <= ddim_steps <= T, got {ddim_steps}, {T}")
    return [((i + 1) * T) // ddim_steps for i in range(ddim_steps)]


def ddim_step(y_t: torch.Tensor, t: int, t_prev: int, eps: torch.Tensor, eta: float, sched: NoiseSchedule,
              generator: torch.Generator | None = None) -> torch.Tensor:
    """Move from step t to t_prev < t using the predicted clean image."""
    if not t > t_prev >= 0 or t > sched.T:
        raise StepOrderViolation(f"need T >= t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    if y_t.shape != eps.shape:
        raise ShapeMismatch(f"ddim_step: {tuple(y_t.shape)} vs {tuple(eps.shape)}")
    a_t = float(sched.bar(t))
    a_prev = float(sched.bar(t_prev))
    y0_hat = (y_t - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
    sigma = eta * np.sqrt((1.0 - a_prev) / (1.0 - a_t)) * np.sqrt(1.0 - a_t / a_prev)
    out = np.sqrt(a_prev) * y0_hat + np.sqrt(max(1.0 - a_prev - sigma ** 2, 0.0)) * eps
    if sigma > 0:
        z = torch.randn(y_t.shape, generator=generator, dtype=y_t.dtype, device=y_t.device)
        out = out + sigma * z
    return out


def stream_seed(seed: int, key: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{key}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


@torch.no_grad()
def guided_ddim(model, y_start: torch.Tensor, cond: torch.Tensor, steps: list[int], config: SamplerConfig,
                sched: NoiseSchedule, generators: list[torch.Generator] | None = None) -> torch.Tensor:
    """Denoise a batch from steps[-1] down to 0.

    Each step evaluates the model on the map and on the null map in one
    doubled batch, then combines them with the guidance scale.
    """
    y = y_start
    n = y.shape[0]
    null = torch.zeros_like(cond)
    cond2 = torch.cat([cond, null])
    seq = list(steps)
    for t, t_prev in zip(reversed(seq), list(reversed(seq[:-1])) + [0]):
        tt = torch.full((2 * n,), t, dtype=torch.long)
        eps2, _ = model(torch.cat([y, y]), tt, cond2)
        eps = guided_eps(eps2[:n], eps2[n:], config.guidance_scale)
        if config.eta > 0 and generators is not None:
            y = torch.stack([ddim_step(y[i], t, t_prev, eps[i], config.eta, sched, generators[i]) for i in range(n)])
        else:
            y = ddim_step(y, t, t_prev, eps, config.eta, sched)
    return y


def check_compatible(model, label_map: SemanticLabelMap, image: np.ndarray):
    c = model.config
    if label_map.shape != image.shape[:2]:
        raise ShapeMismatch(f"map {label_map.shape} does not match image {image.shape[:2]}")
    if len(label_map.vocab) != c.condition_channels:
        raise IncompatibleCheckpoint(f"map has {len(label_map.vocab)} classes, model expects {c.condition_channels}")
    if label_map.shape != (c.patch_size, c.patch_size):
        raise IncompatibleCheckpoint(f"model patch size {c.patch_size} does not match map {label_map.shape}")


def synthesize_batch(model, sched: NoiseSchedule, items, config: SamplerConfig, batch_size: int = 16):
    """Synthesize many tiles.

    `items` yields (output_tile_id, source_tile_id, map_mode, image uint8, label map).
    Each tile draws its noise from a private generator seeded by
    (config.seed, output_tile_id), so results do not depend on batching.
    Returns a list of (output_tile_id, image uint8, label map, SynthesisRecord).
    """
    config.check_against(sched.T)
    steps = ddim_subsequence(sched.T, config.ddim_steps)[: config.t_noise]
    start = steps[-1]
    model.eval()
    items = list(items)
    out = []
    for lo in range(0, len(items), batch_size):
        chunk = items[lo: lo + batch_size]
        y0s, conds, gens = [], [], []
        for out_id, _, _, image, label in chunk:
            check_compatible(model, label, image)
            y0s.append(torch.from_numpy(image_to_unit(image)))
            conds.append(torch.from_numpy(one_hot_encode(label)))
            gens.append(torch.Generator().manual_seed(stream_seed(config.seed, out_id)))
        y0 = torch.stack(y0s)
        eps = torch.stack([torch.randn(y0.shape[1:], generator=g) for g in gens])
        y_start = q_sample(y0, start, eps, sched)
        y = guided_ddim(model, y_start, torch.stack(conds), steps, config, sched, gens)
        y = y.clamp(-1.0, 1.0)
        for (out_id, src_id, mode, _, label), arr in zip(chunk, y.numpy()):
            rec = SynthesisRecord(src_id, mode, config.seed, config.t_noise, config.guidance_scale,
                                  config.ddim_steps, out_id, config.eta, start)
            out.append((out_id, unit_to_image(arr), label, rec))
    return out


def synthesize(y0: np.ndarray, x: SemanticLabelMap, model, sched: NoiseSchedule, config: SamplerConfig,
               source_tile_id: str = "source", map_mode: str = "original", output_tile_id: str | None = None):
    """Single-tile form: returns (image uint8, x unchanged, SynthesisRecord)."""
    out_id = output_tile_id or f"{source_tile_id}_{map_mode}"
    [(_, image, label, rec)] = synthesize_batch(model, sched, [(out_id, source_tile_id, map_mode, y0, x)], config)
    return image, label, rec
