"""Pipeline configuration: one INI-style key/value file.

Sections and keys (defaults in brackets)::

    [data]        dataset (path, required for `run`), output [runs/diffmix],
                  patch_size [64], stride [patch_size / 2], drop_empty [false]
    [schedule]    T [1000], beta_start [1e-4], beta_end [0.02]
    [denoiser]    base_width [64], depth [3], timestep_embedding_dim [256],
                  num_res_blocks [1], channel_mult [1,2,2], spade_hidden [32]
    [train]       lr, batch_size, steps, p_uncond [0.2], vlb_weight [0.001],
                  grad_clip, weight_decay, checkpoint_every, hflip
    [maps]        balance_target [uniform | name:frac,...], size_tolerance [0.5],
                  max_shift [25], max_retries [10], shift_fraction [1.0]
    [sampler]     ddim_steps [100], t_noise [55], guidance_scale [1.5], eta [0],
                  batch_size [16]
    [experiment]  seed [0], composition [diffmix | diffmix-b | diffmix-e],
                  synth_ratio [1.0], downstream_steps [10000], downstream_batch [8]

Unknown sections or keys are rejected. Path keys may be overridden with
DIFFMIX_DATASET and DIFFMIX_OUTPUT.
"""
from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .denoiser import TrainConfig
from .errors import InvalidConfig
from .sampler import SamplerConfig

ENV_OVERRIDES = {"DIFFMIX_DATASET": ("data", "dataset"), "DIFFMIX_OUTPUT": ("data", "output")}
COMPOSITIONS = ("diffmix", "diffmix-b", "diffmix-e")


@dataclass(frozen=True)
class DataConfig:
    dataset: str = ""
    output: str = "runs/diffmix"
    patch_size: int = 64
    stride: int = 0  # 0 -> patch_size // 2
    drop_empty: bool = False

    def __post_init__(self):
        if self.patch_size < 1:
            raise InvalidConfig("data.patch_size must be >= 1")
        if self.stride == 0:
            object.__setattr__(self, "stride", max(1, self.patch_size // 2))
        if self.stride < 1:
            raise InvalidConfig("data.stride must be >= 1")


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.T < 1:
            raise InvalidConfig("schedule.T must be >= 1")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise InvalidConfig("schedule: need 0 < beta_start <= beta_end < 1")


@dataclass(frozen=True)
class NetConfig:
    """Denoiser width/depth; channel counts and patch size come from the data."""

    base_width: int = 64
    depth: int = 3
    timestep_embedding_dim: int = 256
    num_res_blocks: int = 1
    channel_mult: tuple[int, ...] = (1, 2, 2)
    spade_hidden: int = 32

    def __post_init__(self):
        object.__setattr__(self, "channel_mult", tuple(self.channel_mult))
        if len(self.channel_mult) != self.depth:
            raise InvalidConfig(f"denoiser.channel_mult needs {self.depth} entries")


@dataclass(frozen=True)
class MapsConfig:
    balance_target: str = "uniform"
    size_tolerance: float = 0.5
    max_shift: int = 25
    max_retries: int = 10
    shift_fraction: float = 1.0

    def __post_init__(self):
        if not 0 < self.size_tolerance <= 1:
            raise InvalidConfig("maps.size_tolerance must lie in (0, 1]")
        if self.max_shift < 0 or self.max_retries < 1 or not 0 <= self.shift_fraction <= 1:
            raise InvalidConfig("maps: max_shift >= 0, max_retries >= 1, shift_fraction in [0, 1]")

    def targets(self, class_names) -> dict[int, float]:
        names = list(class_names)
        if self.balance_target.strip() == "uniform":
            k = len(names) - 1
            return {c: 1.0 / k for c in range(1, len(names))}
        out = {}
        for part in self.balance_target.split(","):
            name, _, frac = part.partition(":")
            name = name.strip()
            if name not in names[1:]:
                raise InvalidConfig(f"maps.balance_target: unknown class {name!r}")
            out[names.index(name)] = float(frac)
        if abs(sum(out.values()) - 1.0) > 1e-9:
            raise InvalidConfig("maps.balance_target fractions must sum to 1")
        return out


@dataclass(frozen=True)
class SamplingConfig:
    ddim_steps: int = 100
    t_noise: int = 55
    guidance_scale: float = 1.5
    eta: float = 0.0
    batch_size: int = 16

    def sampler(self, seed: int) -> SamplerConfig:
        return SamplerConfig(self.ddim_steps, self.t_noise, self.guidance_scale, self.eta, seed)


@dataclass(frozen=True)
class TrainingConfig:
    lr: float = 2e-4
    batch_size: int = 16
    steps: int = 2000
    p_uncond: float = 0.2
    vlb_weight: float = 0.001
    grad_clip: float = 1.0
    weight_decay: float = 0.0
    checkpoint_every: int = 0
    hflip: bool = True

    def trainer(self, seed: int) -> TrainConfig:
        return TrainConfig(**dataclasses.asdict(self), seed=seed)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    composition: str = "diffmix"
    synth_ratio: float = 1.0
    downstream_steps: int = 10000
    downstream_batch: int = 8

    def __post_init__(self):
        if self.composition not in COMPOSITIONS:
            raise InvalidConfig(f"experiment.composition must be one of {COMPOSITIONS}")
        if self.synth_ratio < 0:
            raise InvalidConfig("experiment.synth_ratio must be >= 0")


@dataclass(frozen=True)
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: NetConfig = field(default_factory=NetConfig)
    train: TrainingConfig = field(default_factory=TrainingConfig)
    maps: MapsConfig = field(default_factory=MapsConfig)
    sampler: SamplingConfig = field(default_factory=SamplingConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def __post_init__(self):
        # surface sampler constraints at load time, with field names
        try:
            SamplerConfig(self.sampler.ddim_steps, self.sampler.t_noise, self.sampler.guidance_scale,
                          self.sampler.eta).check_against(self.schedule.T)
            self.train.trainer(0)
        except InvalidConfig as e:
            raise InvalidConfig(str(e)) from None

    def to_ini(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"[{f.name}]")
            for sub in fields(getattr(self, f.name)):
                lines.append(f"{sub.name} = {_fmt(getattr(getattr(self, f.name), sub.name))}")
            lines.append("")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse(section: str, key: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool or kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
        if kind in ("tuple[int, ...]",):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise InvalidConfig(f"{section}.{key}: cannot parse {raw!r} as {kind}") from None


def load_config(path=None, text: str | None = None, check_paths: bool = True, env=None) -> PipelineConfig:
    """Parse and validate a config file (or `text`)."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if text is None and path is not None:
        p = Path(path)
        if not p.is_file():
            raise InvalidConfig(f"config file {p} not found")
        text = p.read_text()
    parser.read_string(text or "")
    values: dict[str, dict[str, Any]] = {}
    sections = {f.name: f for f in fields(PipelineConfig)}
    for sec in parser.sections():
        if sec not in sections:
            raise InvalidConfig(f"unknown section [{sec}]")
        cls = sections[sec].default_factory
        known = {f.name: f.type for f in fields(cls)}
        values[sec] = {}
        for key, raw in parser.items(sec):
            if key not in known:
                raise InvalidConfig(f"unknown key {sec}.{key}")
            values[sec][key] = _parse(sec, key, raw, known[key])
    for var, (sec, key) in ENV_OVERRIDES.items():
        val = (os.environ if env is None else env).get(var)
        if val:
            values.setdefault(sec, {})[key] = val
    try:
        built = {sec: sections[sec].default_factory(**values.get(sec, {})) for sec in sections}
    except TypeError as e:
        raise InvalidConfig(str(e)) from None
    cfg = PipelineConfig(**built)
    if check_paths and cfg.data.dataset and not Path(cfg.data.dataset).exists():
        raise InvalidConfig(f"data.dataset: path {cfg.data.dataset} does not exist")
    return cfg
