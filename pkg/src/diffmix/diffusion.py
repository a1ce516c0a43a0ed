"""Gaussian diffusion: noise schedule, forward process, training losses,
reverse-step statistics and classifier-free guidance.

Timesteps are 1-based (t in [1, T]); alpha_bar at t = 0 is 1. Tables are
float64 numpy arrays; tensor math follows the dtype of the inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidSchedule, ShapeMismatch, StepOutOfRange


@dataclass(eq=False)
class NoiseSchedule:
    beta: np.ndarray
    beta_start: float
    beta_end: float

    def __post_init__(self):
        beta = self.beta = np.asarray(self.beta, dtype=np.float64)
        self.alpha = 1.0 - beta
        self.alpha_bar = np.cumprod(self.alpha)
        self.alpha_bar_prev = np.r_[1.0, self.alpha_bar[:-1]]
        self.posterior_variance = beta * (1.0 - self.alpha_bar_prev) / (1.0 - self.alpha_bar)
        # beta_tilde_1 = 0; borrow step 2 for its log as in learned-variance DDPMs
        first = self.posterior_variance[1] if len(beta) > 1 else beta[0]
        self.posterior_log_variance_clipped = np.log(np.r_[first, self.posterior_variance[1:]])
        self.posterior_mean_coef_y0 = beta * np.sqrt(self.alpha_bar_prev) / (1.0 - self.alpha_bar)
        self.posterior_mean_coef_yt = (1.0 - self.alpha_bar_prev) * np.sqrt(self.alpha) / (1.0 - self.alpha_bar)

    @property
    def T(self) -> int:
        return len(self.beta)

    def sigma(self, kind: str = "small") -> np.ndarray:
        """Fixed per-step sampling std: sqrt(beta_tilde) ("small") or sqrt(beta) ("large")."""
        if kind == "small":
            return np.sqrt(self.posterior_variance)
        if kind == "large":
            return np.sqrt(self.beta)
        raise ValueError(f"unknown variance kind {kind!r}")

    def bar(self, t) -> np.ndarray:
        """alpha_bar at 0-based-safe step t (t = 0 gives 1)."""
        t = np.asarray(t)
        return np.where(t == 0, 1.0, self.alpha_bar[np.maximum(t, 1) - 1])

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise InvalidSchedule(f"T must be a positive integer, got {T!r}")
    if not 0 < beta_start <= beta_end < 1:
        raise InvalidSchedule(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    return NoiseSchedule(beta, float(beta_start), float(beta_end))


def _check_t(t, sched: NoiseSchedule, low: int = 1):
    arr = t.detach().cpu().numpy() if torch.is_tensor(t) else np.asarray(t)
    if arr.size and (arr.min() < low or arr.max() > sched.T):
        raise StepOutOfRange(f"t must lie in [{low}, {sched.T}], got {arr.min()}..{arr.max()}")
    return arr.astype(np.int64)


def _gather(table: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """table[t-1] broadcast against `like` (scalar t or one t per batch item)."""
    idx = np.asarray(t) - 1
    vals = torch.as_tensor(table[idx], dtype=like.dtype, device=like.device)
    if vals.ndim == 0:
        return vals
    return vals.reshape(-1, *([1] * (like.ndim - 1)))


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def q_sample(y0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Closed-form marginal: sqrt(abar_t) y0 + sqrt(1 - abar_t) eps."""
    _same_shape(y0, eps, "q_sample")
    t = _check_t(t, sched)
    return _gather(np.sqrt(sched.alpha_bar), t, y0) * y0 + _gather(np.sqrt(1.0 - sched.alpha_bar), t, y0) * eps


def forward_step(y_prev: torch.Tensor, t, sched: NoiseSchedule, generator: torch.Generator | None = None) -> torch.Tensor:
    """One noising step: draw from N(sqrt(1 - beta_t) y_prev, beta_t I)."""
    t = _check_t(t, sched)
    z = torch.randn(y_prev.shape, generator=generator, dtype=y_prev.dtype, device=y_prev.device)
    return _gather(np.sqrt(sched.alpha), t, y_prev) * y_prev + _gather(np.sqrt(sched.beta), t, y_prev) * z


def simple_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error between injected and predicted noise."""
    eps_hat = getattr(eps_hat, "eps_hat", eps_hat)
    _same_shape(eps, eps_hat, "simple_loss")
    return torch.mean((eps - eps_hat) ** 2)


def model_log_variance(v: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """log Sigma = v log beta_t + (1 - v) log beta_tilde_t (clipped at t = 1)."""
    return v * _gather(np.log(sched.beta), t, v) + (1.0 - v) * _gather(sched.posterior_log_variance_clipped, t, v)


def reverse_step_stats(y_t: torch.Tensor, t, eps_hat: torch.Tensor, v: torch.Tensor | None,
                       sched: NoiseSchedule, variance: str = "learned") -> tuple[torch.Tensor, torch.Tensor]:
    """Mean and variance of p(y_{t-1} | y_t).

    With variance="learned" the variance interpolates between beta_tilde_t
    and beta_t by v; "small"/"large" give the fixed sigma_t^2 choices.
    """
    _same_shape(y_t, eps_hat, "reverse_step_stats")
    t = _check_t(t, sched)
    coef = _gather(sched.beta / np.sqrt(1.0 - sched.alpha_bar), t, y_t)
    mean = (y_t - coef * eps_hat) / _gather(np.sqrt(sched.alpha), t, y_t)
    if variance == "learned":
        if v is None:
            raise ValueError("learned variance needs v")
        _same_shape(y_t, v, "reverse_step_stats")
        var = torch.exp(model_log_variance(v, t, sched))
    else:
        var = _gather(sched.sigma(variance) ** 2, t, y_t).expand_as(y_t)
    return mean, var


def posterior_mean_variance(y0: torch.Tensor, y_t: torch.Tensor, t, sched: NoiseSchedule):
    """Mean, variance and clipped log-variance of q(y_{t-1} | y_t, y0)."""
    t = _check_t(t, sched)
    mean = _gather(sched.posterior_mean_coef_y0, t, y0) * y0 + _gather(sched.posterior_mean_coef_yt, t, y0) * y_t
    var = _gather(sched.posterior_variance, t, y0).expand_as(y0)
    logvar = _gather(sched.posterior_log_variance_clipped, t, y0).expand_as(y0)
    return mean, var, logvar


def normal_kl(mean1, logvar1, mean2, logvar2) -> torch.Tensor:
    """Elementwise KL(N(mean1, e^logvar1) || N(mean2, e^logvar2)) in nats."""
    return 0.5 * (-1.0 + logvar2 - logvar1 + torch.exp(logvar1 - logvar2)
                  + (mean1 - mean2) ** 2 * torch.exp(-logvar2))


def discretized_gaussian_log_likelihood(y0: torch.Tensor, mean: torch.Tensor, log_scale: torch.Tensor) -> torch.Tensor:
    """Log-probability of 8-bit pixel bins (width 2/255 on [-1, 1]) under a Gaussian."""
    centered = y0 - mean
    inv_std = torch.exp(-log_scale)
    cdf_plus = torch.special.ndtr(inv_std * (centered + 1.0 / 255.0))
    cdf_min = torch.special.ndtr(inv_std * (centered - 1.0 / 255.0))
    tiny = 1e-12
    log_cdf_plus = torch.log(cdf_plus.clamp(min=tiny))
    log_one_minus_cdf_min = torch.log((1.0 - cdf_min).clamp(min=tiny))
    log_delta = torch.log((cdf_plus - cdf_min).clamp(min=tiny))
    return torch.where(y0 < -0.999, log_cdf_plus, torch.where(y0 > 0.999, log_one_minus_cdf_min, log_delta))


def vlb_terms(y0: torch.Tensor, y_t: torch.Tensor, t, eps_hat: torch.Tensor, v: torch.Tensor,
              sched: NoiseSchedule) -> torch.Tensor:
    """Per-sample variational bound term (nats, mean over elements).

    Batched (N, C, H, W) inputs give one value per sample; anything else is
    treated as a single sample.

    KL(q(y_{t-1}|y_t, y0) || p(y_{t-1}|y_t)) for t > 1 and the discretized
    decoder NLL at t = 1. The mean path is detached so only the variance
    head is trained by this term.
    """
    for a, name in ((y_t, "y_t"), (eps_hat, "eps_hat"), (v, "v")):
        _same_shape(y0, a, f"vlb_term {name}")
    t_arr = _check_t(t, sched)
    true_mean, _, true_logvar = posterior_mean_variance(y0, y_t, t_arr, sched)
    model_mean, _ = reverse_step_stats(y_t, t_arr, eps_hat.detach(), v, sched, variance="small")
    model_logvar = model_log_variance(v, t_arr, sched)
    kl = normal_kl(true_mean, true_logvar, model_mean, model_logvar)
    nll = -discretized_gaussian_log_likelihood(y0, model_mean, 0.5 * model_logvar)
    first = torch.as_tensor(t_arr == 1, device=y0.device)
    if first.ndim:
        first = first.reshape(-1, *([1] * (y0.ndim - 1)))
    per_elem = torch.where(first, nll, kl)
    if y0.ndim == 4:
        return per_elem.flatten(1).mean(1)
    return per_elem.mean().reshape(1)


def vlb_term(y0, y_t, t, eps_hat, v, sched: NoiseSchedule) -> torch.Tensor:
    return vlb_terms(y0, y_t, t, eps_hat, v, sched).mean()


def hybrid_loss(eps, eps_hat, v, y0, y_t, t, sched: NoiseSchedule, vlb_weight: float = 0.001) -> torch.Tensor:
    return simple_loss(eps, eps_hat) + vlb_weight * vlb_term(y0, y_t, t, eps_hat, v, sched)


def guided_eps(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, s: float) -> torch.Tensor:
    """Classifier-free guidance: eps_cond + s (eps_cond - eps_uncond)."""
    _same_shape(eps_cond, eps_uncond, "guided_eps")
    if s < 0:
        raise ValueError("guidance scale must be >= 0")
    return eps_cond + s * (eps_cond - eps_uncond)


def predict_y0(y_t: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    abar = _gather(sched.alpha_bar, _check_t(t, sched), y_t)
    return (y_t - torch.sqrt(1.0 - abar) * eps) / torch.sqrt(abar)
