"""Label-conditioned denoiser and its trainer.

The encoder sees only the noisy image and the timestep; the semantic map
enters the decoder through spatially-adaptive normalization (per-pixel scale
and bias predicted from the resized one-hot map at every resolution).
"""
from __future__ import annotations

import io
import math
import pickle
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import NoiseSchedule, build_schedule, hybrid_loss, q_sample, simple_loss
from .errors import (DataShapeMismatch, IncompatibleCheckpoint, InvalidConfig, NotInitialized,
                     ResumeStateCorrupt, ShapeMismatch)

CHECKPOINT_FORMAT = "diffmix-checkpoint/1"


@dataclass(frozen=True)
class DenoiserConfig:
    input_channels: int = 3
    condition_channels: int = 4
    base_width: int = 64
    depth: int = 3
    timestep_embedding_dim: int = 256
    patch_size: int = 64
    num_res_blocks: int = 1
    channel_mult: tuple[int, ...] = (1, 2, 2)
    spade_hidden: int = 32

    def __post_init__(self):
        object.__setattr__(self, "channel_mult", tuple(int(m) for m in self.channel_mult))
        for name in ("input_channels", "condition_channels", "base_width", "depth",
                     "timestep_embedding_dim", "patch_size", "num_res_blocks", "spade_hidden"):
            if getattr(self, name) <= 0:
                raise InvalidConfig(f"denoiser.{name} must be positive")
        if len(self.channel_mult) != self.depth:
            raise InvalidConfig(f"channel_mult needs {self.depth} entries, got {self.channel_mult}")
        if self.patch_size % 2 ** (self.depth - 1):
            raise InvalidConfig(f"patch_size {self.patch_size} not divisible by 2^(depth-1)")
        if self.base_width % 8:
            raise InvalidConfig("base_width must be a multiple of 8 (group norm)")


@dataclass
class DenoiserOutput:
    eps_hat: torch.Tensor
    v: torch.Tensor


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(ch: int, affine: bool = True) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch, affine=affine)


def _zero(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class SPADE(nn.Module):
    """Parameter-free group norm followed by map-predicted scale and bias."""

    def __init__(self, ch: int, label_nc: int, hidden: int):
        super().__init__()
        self.norm = _norm(ch, affine=False)
        self.shared = nn.Sequential(nn.Conv2d(label_nc, hidden, 3, padding=1), nn.ReLU())
        self.gamma = nn.Conv2d(hidden, ch, 3, padding=1)
        self.beta = nn.Conv2d(hidden, ch, 3, padding=1)

    def forward(self, h, segmap):
        segmap = F.interpolate(segmap, size=h.shape[2:], mode="nearest")
        actv = self.shared(segmap)
        return self.norm(h) * (1 + self.gamma(actv)) + self.beta(actv)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int, label_nc: int | None = None, hidden: int = 64):
        super().__init__()
        self.cond = label_nc is not None
        self.norm1 = SPADE(cin, label_nc, hidden) if self.cond else _norm(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, 2 * cout)
        self.norm2 = SPADE(cout, label_nc, hidden) if self.cond else _norm(cout)
        self.conv2 = _zero(nn.Conv2d(cout, cout, 3, padding=1))
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def _n(self, norm, h, seg):
        return norm(h, seg) if self.cond else norm(h)

    def forward(self, x, emb, seg=None):
        h = self.conv1(F.silu(self._n(self.norm1, x, seg)))
        scale, shift = self.temb(F.silu(emb))[:, :, None, None].chunk(2, dim=1)
        h = self._n(self.norm2, h, seg) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class Denoiser(nn.Module):
    """U-Net predicting (eps_hat, v) from (y_t, t) with decoder-side map conditioning."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = c = config
        w = c.base_width
        temb = c.timestep_embedding_dim
        self.time_mlp = nn.Sequential(nn.Linear(w, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv2d(c.input_channels, w, 3, padding=1)

        self.down = nn.ModuleList()
        skips = [w]
        ch = w
        for level, mult in enumerate(c.channel_mult):
            for _ in range(c.num_res_blocks):
                self.down.append(ResBlock(ch, w * mult, temb))
                ch = w * mult
                skips.append(ch)
            if level < c.depth - 1:
                self.down.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                skips.append(ch)

        self.mid = nn.ModuleList([ResBlock(ch, ch, temb), ResBlock(ch, ch, temb, c.condition_channels, c.spade_hidden)])

        self.up = nn.ModuleList()
        for level, mult in reversed(list(enumerate(c.channel_mult))):
            for i in range(c.num_res_blocks + 1):
                self.up.append(ResBlock(ch + skips.pop(), w * mult, temb, c.condition_channels, c.spade_hidden))
                ch = w * mult
            if level > 0:
                self.up.append(nn.Upsample(scale_factor=2, mode="nearest"))
                self.up.append(nn.Conv2d(ch, ch, 3, padding=1))

        self.norm_out = _norm(ch)
        self.conv_out = _zero(nn.Conv2d(ch, 2 * c.input_channels, 3, padding=1))

    def forward(self, y_t: torch.Tensor, t: torch.Tensor, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        emb = self.time_mlp(timestep_embedding(t, self.config.base_width))
        h = self.conv_in(y_t)
        hs = [h]
        for layer in self.down:
            h = layer(h, emb) if isinstance(layer, ResBlock) else layer(h)
            hs.append(h)
        h = self.mid[0](h, emb)
        h = self.mid[1](h, emb, x)
        for layer in self.up:
            if isinstance(layer, ResBlock):
                h = layer(torch.cat([h, hs.pop()], dim=1), emb, x)
            else:
                h = layer(h)
        out = self.conv_out(F.silu(self.norm_out(h)))
        eps_hat, v_raw = out.chunk(2, dim=1)
        return eps_hat, torch.sigmoid(v_raw)


def build_denoiser(config: DenoiserConfig, seed: int = 0) -> Denoiser:
    """Initialize weights from `seed` without touching the global RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Denoiser(config)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def denoise(model: Denoiser | None, y_t: torch.Tensor, t, x: torch.Tensor | None) -> DenoiserOutput:
    """Predict noise and variance coefficient.

    Accepts a single (C, H, W) sample or a batch. `x=None` uses the null map.
    """
    if model is None:
        raise NotInitialized("denoiser weights are not loaded")
    c = model.config
    single = y_t.ndim == 3
    if single:
        y_t = y_t[None]
        x = None if x is None else x[None]
    n = y_t.shape[0]
    expect = (c.input_channels, c.patch_size, c.patch_size)
    if tuple(y_t.shape[1:]) != expect:
        raise ShapeMismatch(f"y_t must be {expect}, got {tuple(y_t.shape[1:])}")
    if x is None:
        x = torch.zeros(n, c.condition_channels, c.patch_size, c.patch_size, dtype=y_t.dtype)
    if tuple(x.shape) != (n, c.condition_channels, c.patch_size, c.patch_size):
        raise ShapeMismatch(f"conditioning must be {(n, c.condition_channels, c.patch_size, c.patch_size)}, got {tuple(x.shape)}")
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(n)
    eps_hat, v = model(y_t, t, x)
    if single:
        eps_hat, v = eps_hat[0], v[0]
    return DenoiserOutput(eps_hat, v)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    batch_size: int = 16
    steps: int = 2000
    p_uncond: float = 0.2
    vlb_weight: float = 0.001
    grad_clip: float = 1.0
    weight_decay: float = 0.0
    checkpoint_every: int = 0
    hflip: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.steps < 0:
            raise InvalidConfig("train: lr >= 0, batch_size >= 1, steps >= 0 required")
        if not 0.0 <= self.p_uncond <= 1.0:
            raise InvalidConfig("train.p_uncond must lie in [0, 1]")
        if self.vlb_weight < 0:
            raise InvalidConfig("train.vlb_weight must be >= 0")


@dataclass
class PatchSet:
    """Training pairs: images (N, 3, H, W) in [-1, 1] and one-hot maps (N, C, H, W)."""

    images: torch.Tensor
    conds: torch.Tensor

    def __post_init__(self):
        if self.images.ndim != 4 or self.conds.ndim != 4:
            raise DataShapeMismatch("images and conds must be 4-D")
        if self.images.shape[0] != self.conds.shape[0] or self.images.shape[2:] != self.conds.shape[2:]:
            raise DataShapeMismatch(f"images {tuple(self.images.shape)} vs conds {tuple(self.conds.shape)}")
        if self.images.shape[0] == 0:
            raise DataShapeMismatch("empty training set")

    def __len__(self):
        return self.images.shape[0]


class Trainer:
    """Single-stream optimizer loop with exact resume.

    All randomness (batch order, timesteps, noise, conditioning dropout,
    flips) comes from one torch.Generator whose state is checkpointed.
    """

    def __init__(self, model: Denoiser, sched: NoiseSchedule, config: TrainConfig, data: PatchSet,
                 extra_meta: dict | None = None):
        c = model.config
        if tuple(data.images.shape[1:]) != (c.input_channels, c.patch_size, c.patch_size):
            raise DataShapeMismatch(f"images {tuple(data.images.shape[1:])} do not match denoiser config")
        if data.conds.shape[1] != c.condition_channels:
            raise DataShapeMismatch(f"maps have {data.conds.shape[1]} channels, denoiser expects {c.condition_channels}")
        self.model = model
        self.sched = sched
        self.config = config
        self.data = data
        self.meta = extra_meta or {}
        self.opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
        self.gen = torch.Generator().manual_seed(config.seed)
        self.step = 0
        self.losses: list[float] = []

    def _batch(self):
        g = self.gen
        n = len(self.data)
        idx = torch.randint(n, (self.config.batch_size,), generator=g)
        y0 = self.data.images[idx]
        x = self.data.conds[idx]
        if self.config.hflip:
            flip = torch.rand(len(idx), generator=g) < 0.5
            y0 = torch.where(flip[:, None, None, None], y0.flip(-1), y0)
            x = torch.where(flip[:, None, None, None], x.flip(-1), x)
        drop = torch.rand(len(idx), generator=g) < self.config.p_uncond
        x = x * (~drop).to(x.dtype)[:, None, None, None]
        t = torch.randint(1, self.sched.T + 1, (len(idx),), generator=g)
        eps = torch.randn(y0.shape, generator=g)
        return y0, x, t, eps

    def train_step(self) -> float:
        self.model.train()
        y0, x, t, eps = self._batch()
        y_t = q_sample(y0, t, eps, self.sched)
        eps_hat, v = self.model(y_t, t, x)
        if self.config.vlb_weight > 0:
            loss = hybrid_loss(eps, eps_hat, v, y0, y_t, t, self.sched, self.config.vlb_weight)
        else:
            loss = simple_loss(eps, eps_hat)
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        if self.config.grad_clip > 0:
            nn.utils.clip_grad_norm_(self.model.parameters(), self.config.grad_clip)
        self.opt.step()
        self.step += 1
        value = float(loss.detach())
        self.losses.append(value)
        return value

    def run(self, steps: int | None = None, checkpoint_dir: Path | None = None, log=None) -> list[float]:
        target = self.config.steps if steps is None else self.step + steps
        while self.step < target:
            loss = self.train_step()
            if log is not None and (self.step % 100 == 0 or self.step == target):
                log(f"step {self.step}/{target} loss {loss:.4f}")
            every = self.config.checkpoint_every
            if checkpoint_dir is not None and every and self.step % every == 0:
                self.save(Path(checkpoint_dir) / f"step_{self.step:07d}.pt")
        return self.losses

    def state(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "denoiser_config": asdict(self.model.config),
            "schedule": self.sched.to_dict(),
            "train_config": asdict(self.config),
            "model": self.model.state_dict(),
            "optimizer": self.opt.state_dict(),
            "step": self.step,
            "rng": self.gen.get_state(),
            "losses": list(self.losses),
            "meta": self.meta,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        buf = io.BytesIO()
        torch.save(self.state(), buf)
        path.write_bytes(buf.getvalue())
        return path

    @classmethod
    def resume(cls, path, data: PatchSet) -> "Trainer":
        state = load_checkpoint(path)
        try:
            model = Denoiser(DenoiserConfig(**state["denoiser_config"]))
            model.load_state_dict(state["model"])
            sched = build_schedule(**{k: state["schedule"][k] for k in ("T", "beta_start", "beta_end")})
            trainer = cls(model, sched, TrainConfig(**state["train_config"]), data, state.get("meta"))
            trainer.opt.load_state_dict(state["optimizer"])
            trainer.gen.set_state(state["rng"])
            trainer.step = int(state["step"])
            trainer.losses = list(state["losses"])
        except (KeyError, TypeError, RuntimeError) as e:
            raise ResumeStateCorrupt(f"{path}: {e}") from e
        return trainer


def load_checkpoint(path) -> dict:
    try:
        state = torch.load(Path(path), map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as e:
        raise IncompatibleCheckpoint(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(state, dict) or state.get("format") != CHECKPOINT_FORMAT:
        raise IncompatibleCheckpoint(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    return state


@dataclass
class LoadedModel:
    model: Denoiser
    sched: NoiseSchedule
    meta: dict = field(default_factory=dict)


def load_model(path) -> LoadedModel:
    state = load_checkpoint(path)
    try:
        model = Denoiser(DenoiserConfig(**state["denoiser_config"]))
        model.load_state_dict(state["model"])
        sched = build_schedule(**{k: state["schedule"][k] for k in ("T", "beta_start", "beta_end")})
    except (KeyError, TypeError, RuntimeError) as e:
        raise IncompatibleCheckpoint(f"{path}: {e}") from e
    model.eval()
    return LoadedModel(model, sched, state.get("meta", {}))


def seed_everything_deterministic():
    """Single-threaded deterministic kernels; needed for bit-identical reruns."""
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)
