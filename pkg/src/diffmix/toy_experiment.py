"""Desk-scale end-to-end experiment on synthetic blob tiles.

Trains the denoiser on the training half of a toy dataset, synthesizes
tiles from enlarging and balancing maps, and measures

* label adherence: relocated nuclei painted with their own class colour;
* rare-class share of the balancing-map synthetic set;
* rare-class F1 of a logistic patch classifier (raw RGB crop centred on
  each nucleus) trained on real data vs. real + synthetic data, evaluated
  on held-out real tiles.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import f1_score
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .denoiser import DenoiserConfig, LoadedModel, PatchSet, TrainConfig, Trainer, build_denoiser, load_model
from .diffusion import build_schedule
from .label_space import class_histogram, extract_instances, one_hot_encode
from .map_synthesis import (BalanceSpec, DonorPool, ShiftSpec, make_balancing_map, make_enlarging_map,
                            tile_rng, uniform_targets)
from .errors import DonorExhausted
from .sampler import SamplerConfig, stream_seed, synthesize_batch
from .tiles import Tile, image_to_unit
from .toy import TOY_VOCAB, ToySpec, make_toy_dataset

RARE = 3


@dataclass(frozen=True)
class ToyExperimentConfig:
    toy: ToySpec = field(default_factory=ToySpec)
    n_train: int = 100
    net: DenoiserConfig = field(default_factory=lambda: DenoiserConfig(
        condition_channels=len(TOY_VOCAB), base_width=16, depth=3, timestep_embedding_dim=64,
        patch_size=64, num_res_blocks=1, channel_mult=(1, 2, 2), spade_hidden=16))
    train_steps: int = 3000
    batch_size: int = 8
    lr: float = 1e-3
    p_uncond: float = 0.2
    vlb_weight: float = 0.001
    max_shift: int = 12
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    crop: int = 15
    classifier_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    seed: int = 0


def nucleus_features(image: np.ndarray, label) -> tuple[np.ndarray, np.ndarray]:
    """Per-nucleus mean and std of RGB inside the mask."""
    feats, classes = [], []
    img = image.astype(np.float64)
    for n in extract_instances(label):
        px = img[n.coords[:, 0], n.coords[:, 1]]
        feats.append(np.r_[px.mean(0), px.std(0)])
        classes.append(n.class_id)
    return np.asarray(feats).reshape(-1, 6), np.asarray(classes, dtype=np.int64)


def nucleus_patches(image: np.ndarray, label, crop: int) -> tuple[np.ndarray, np.ndarray]:
    """Flattened crop x crop RGB window around each nucleus centroid, in [0, 1]."""
    h = crop // 2
    img = np.pad(image.astype(np.float64) / 255.0, ((h, h), (h, h), (0, 0)), mode="reflect")
    feats, classes = [], []
    for n in extract_instances(label):
        cy, cx = np.rint(n.coords.mean(0)).astype(int)
        feats.append(img[cy:cy + crop, cx:cx + crop].ravel())
        classes.append(n.class_id)
    return np.asarray(feats).reshape(-1, crop * crop * 3), np.asarray(classes, dtype=np.int64)


def class_prototypes(tiles: list[Tile]) -> np.ndarray:
    """Mean nucleus colour per class (row 0 unused)."""
    sums = np.zeros((len(TOY_VOCAB), 3))
    counts = np.zeros(len(TOY_VOCAB))
    for t in tiles:
        f, c = nucleus_features(t.image, t.label)
        np.add.at(sums, c, f[:, :3])
        np.add.at(counts, c, 1)
    return sums / np.maximum(counts, 1)[:, None]


def nearest_class(colors: np.ndarray, protos: np.ndarray) -> np.ndarray:
    d = ((colors[:, None, :] - protos[None, 1:, :]) ** 2).sum(-1)
    return np.argmin(d, axis=1) + 1


def _patch_set(tiles: list[Tile]) -> PatchSet:
    images = torch.stack([torch.from_numpy(image_to_unit(t.image)) for t in tiles])
    conds = torch.stack([torch.from_numpy(one_hot_encode(t.label)) for t in tiles])
    return PatchSet(images, conds)


def train_toy_model(train_tiles: list[Tile], cfg: ToyExperimentConfig, log=None):
    sched = build_schedule(1000, 1e-4, 0.02)
    model = build_denoiser(cfg.net, stream_seed(cfg.seed, "init"))
    tcfg = TrainConfig(lr=cfg.lr, batch_size=cfg.batch_size, steps=cfg.train_steps, p_uncond=cfg.p_uncond,
                       vlb_weight=cfg.vlb_weight, seed=stream_seed(cfg.seed, "train"))
    trainer = Trainer(model, sched, tcfg, _patch_set(train_tiles))
    trainer.run(log=log)
    model.eval()
    return trainer


def fit_rare_f1(train_x, train_y, test_x, test_y) -> float:
    clf = make_pipeline(StandardScaler(), LogisticRegression(max_iter=5000))
    clf.fit(train_x, train_y)
    return float(f1_score(test_y, clf.predict(test_x), labels=[RARE], average="macro", zero_division=0.0))


def run_toy_experiment(cfg: ToyExperimentConfig = ToyExperimentConfig(), out_dir=None, log=None,
                       trainer: Trainer | None = None) -> dict:
    t0 = time.perf_counter()
    tiles = make_toy_dataset(cfg.toy)
    train, test = tiles[: cfg.n_train], tiles[cfg.n_train:]
    if trainer is None:
        trainer = train_toy_model(train, cfg, log)
    t_train = time.perf_counter() - t0
    model, sched = trainer.model, trainer.sched
    protos = class_prototypes(train)

    # enlarging maps: every training tile
    enl_items, moved = [], {}
    for t in train:
        new, slog = make_enlarging_map(t.label, ShiftSpec(cfg.max_shift, 10, 1.0, cfg.seed), tile_rng(cfg.seed, t.tile_id))
        out_id = f"{t.tile_id}_enl_syn"
        enl_items.append((out_id, t.tile_id, "enlarge", t.image, new))
        moved[out_id] = {r.instance_id for r in slog if r.offset is not None}
    enl = synthesize_batch(model, sched, enl_items, cfg.sampler)

    hits = total = 0
    for out_id, image, label, _ in enl:
        for n in extract_instances(label):
            if n.id not in moved[out_id]:
                continue
            color = image[n.coords[:, 0], n.coords[:, 1]].astype(np.float64).mean(0)
            hits += int(nearest_class(color[None], protos)[0] == n.class_id)
            total += 1
    adherence = hits / total if total else 0.0

    # balancing maps: every training tile that has a donor match
    pool = DonorPool.from_maps([(t.tile_id, t.label) for t in train])
    spec = BalanceSpec(uniform_targets(len(TOY_VOCAB)), pool, 0.5, cfg.seed)
    bal_items = []
    for t in train:
        try:
            new, _ = make_balancing_map(t.label, spec)
        except DonorExhausted:
            continue
        bal_items.append((f"{t.tile_id}_bal_syn", t.tile_id, "balance", t.image, new))
    bal = synthesize_batch(model, sched, bal_items, cfg.sampler)
    bal_stats = class_histogram([lab for _, _, lab, _ in bal])
    rare_share = bal_stats.proportions[TOY_VOCAB.names[RARE]]

    # DiffMix set: as many synthetic tiles as real ones, half from each map family
    rng = np.random.default_rng(stream_seed(cfg.seed, "compose"))
    n_half = len(train) // 2
    pick_b = rng.permutation(len(bal))[: (len(train) + 1) // 2]
    pick_e = rng.permutation(len(enl))[:n_half]
    synth = [bal[i] for i in sorted(pick_b)] + [enl[i] for i in sorted(pick_e)]

    real_feats = [nucleus_patches(t.image, t.label, cfg.crop) for t in train]
    syn_feats = [nucleus_patches(img, lab, cfg.crop) for _, img, lab, _ in synth]
    test_x, test_y = map(np.concatenate, zip(*[nucleus_patches(t.image, t.label, cfg.crop) for t in test]))

    def stack(parts, idx):
        xs, ys = zip(*[parts[i] for i in idx])
        return np.concatenate(xs), np.concatenate(ys)

    per_seed = []
    for s in cfg.classifier_seeds:
        r = np.random.default_rng(s)
        ri = r.integers(len(real_feats), size=len(real_feats))
        si = r.integers(len(syn_feats), size=len(syn_feats))
        rx, ry = stack(real_feats, ri)
        sx, sy = stack(syn_feats, si)
        f_real = fit_rare_f1(rx, ry, test_x, test_y)
        f_mix = fit_rare_f1(np.concatenate([rx, sx]), np.concatenate([ry, sy]), test_x, test_y)
        per_seed.append({"seed": s, "f1_real": f_real, "f1_diffmix": f_mix})
    margin = float(np.mean([p["f1_diffmix"] - p["f1_real"] for p in per_seed]))

    result = {
        "train_seconds": t_train,
        "total_seconds": time.perf_counter() - t0,
        "train_steps": trainer.step,
        "loss_first100": float(np.mean(trainer.losses[:100])),
        "loss_last100": float(np.mean(trainer.losses[-100:])),
        "real_stats": class_histogram([t.label for t in tiles]).to_dict(),
        "enlarge_moved_nuclei": total,
        "label_adherence": adherence,
        "balance_tiles": len(bal),
        "balance_rare_share": rare_share,
        "classifier": per_seed,
        "rare_f1_margin": margin,
        "config": _jsonable(asdict(cfg)),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "toy_result.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
        trainer.save(out / "toy_checkpoint.pt")
    return result


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


# modules whose code changes what the trained weights look like
_TRAINING_SOURCES = ("denoiser.py", "diffusion.py", "label_space.py", "tiles.py", "toy.py")


def _digest(cfg_part, names) -> str:
    h = hashlib.sha256(repr(cfg_part).encode())
    for name in sorted(names):
        h.update(name.encode())
        h.update((Path(__file__).parent / name).read_bytes())
    return h.hexdigest()[:16]


def cached_toy_experiment(cache_root, cfg: ToyExperimentConfig = ToyExperimentConfig(),
                          log=None) -> tuple[dict, LoadedModel]:
    """Run the experiment once per (config, source) and reuse the result.

    The trained checkpoint is keyed on the training-relevant code only, so
    edits elsewhere re-run synthesis and scoring but not training.
    """
    root = Path(cache_root)
    train_cfg = (cfg.toy, cfg.n_train, cfg.net, cfg.train_steps, cfg.batch_size, cfg.lr, cfg.p_uncond,
                 cfg.vlb_weight, cfg.seed)
    ckpt = root / f"toy-train-{_digest(train_cfg, _TRAINING_SOURCES)}" / "toy_checkpoint.pt"
    all_sources = [p.name for p in Path(__file__).parent.glob("*.py")]
    res_path = root / f"toy-result-{_digest(cfg, all_sources)}" / "toy_result.json"
    if not res_path.is_file():
        train = make_toy_dataset(cfg.toy)[: cfg.n_train]
        timing = ckpt.with_name("train_seconds.json")
        if ckpt.is_file() and timing.is_file():
            trainer = Trainer.resume(ckpt, _patch_set(train))
        else:
            t0 = time.perf_counter()
            trainer = train_toy_model(train, cfg, log)
            trainer.save(ckpt)
            timing.write_text(json.dumps(time.perf_counter() - t0))
        result = run_toy_experiment(cfg, log=log, trainer=trainer)
        # report the original training time, not the time to reload it
        result["train_seconds"] = json.loads(timing.read_text())
        res_path.parent.mkdir(parents=True, exist_ok=True)
        res_path.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return json.loads(res_path.read_text()), load_model(ckpt)
