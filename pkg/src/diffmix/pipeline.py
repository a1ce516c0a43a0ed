"""Pipeline stages over tile-layout datasets."""
from __future__ import annotations

import json
import logging
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from . import __version__
from .config import PipelineConfig
from .denoiser import DenoiserConfig, PatchSet, Trainer, build_denoiser, load_model
from .diffusion import build_schedule
from .errors import DiffMixError, DonorExhausted, InvalidGeometry, StageError, TileCorrupt
from .label_space import (ClassVocabulary, DatasetStats, SemanticLabelMap, class_histogram,
                          fragmented_instances, one_hot_encode)
from .map_synthesis import BalanceSpec, DonorPool, ShiftSpec, make_balancing_map, make_enlarging_map, tile_rng
from .metrics import aggregate, score_tile, tile_report
from .sampler import SamplerConfig, stream_seed, synthesize_batch
from .tiles import DatasetWriter, Tile, image_to_unit, read_manifest, read_tile

log = logging.getLogger("diffmix")


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _jsonl(path: Path, records) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


@dataclass
class DatasetHandle:
    root: Path
    manifest: dict
    vocab: ClassVocabulary
    tile_ids: list[str]
    violations: list[dict] = field(default_factory=list)
    warnings: list[dict] = field(default_factory=list)

    def __len__(self):
        return len(self.tile_ids)

    def tiles(self) -> Iterator[Tile]:
        for tid in self.tile_ids:
            yield read_tile(self.root, tid, self.vocab)

    def labels(self) -> Iterator[SemanticLabelMap]:
        for t in self.tiles():
            yield t.label

    def validation_report(self) -> dict:
        return {"root": str(self.root), "tiles": len(self.tile_ids), "violations": self.violations,
                "warnings": self.warnings}


def ingest(src, strict: bool = True) -> DatasetHandle:
    """Validate every tile; strict mode raises TileCorrupt on the first violation."""
    root = Path(src)
    manifest = read_manifest(root)
    try:
        vocab = ClassVocabulary.from_dict(manifest["classes"])
        entries = sorted(manifest["tiles"], key=lambda e: e["id"])
    except (KeyError, TypeError) as e:
        raise TileCorrupt("<manifest>", f"malformed manifest: {e}") from e
    handle = DatasetHandle(root, manifest, vocab, [e["id"] for e in entries])
    for entry in entries:
        tid = entry["id"]
        try:
            tile = read_tile(root, tid, vocab)
            problems = tile.label.violations()
            if (entry.get("height"), entry.get("width")) != tile.label.shape:
                problems.append(f"manifest size {(entry.get('height'), entry.get('width'))} != {tile.label.shape}")
        except TileCorrupt as e:
            problems = [e.reason]
        if problems:
            handle.violations.append({"tile_id": tid, "problems": problems})
            if strict:
                raise TileCorrupt(tid, "; ".join(problems))
            continue
        frag = fragmented_instances(tile.label)
        if frag:
            handle.warnings.append({"tile_id": tid, "fragmented_instances": frag})
    return handle


def window_starts(size: int, patch: int, stride: int) -> list[int]:
    """Sliding-window origins; a final edge-aligned window covers the border."""
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def extract_patches(handle: DatasetHandle, patch_size: int, stride: int, drop_empty: bool = False) -> Iterator[Tile]:
    if patch_size < 1 or stride < 1:
        raise InvalidGeometry("patch_size and stride must be positive")
    for tile in handle.tiles():
        h, w = tile.label.shape
        if patch_size > h or patch_size > w:
            raise InvalidGeometry(f"patch {patch_size} larger than tile {tile.tile_id} ({h}x{w})")
        for r in window_starts(h, patch_size, stride):
            for c in window_starts(w, patch_size, stride):
                sl = np.s_[r: r + patch_size, c: c + patch_size]
                inst = tile.label.instance_ids[sl]
                if drop_empty and not inst.any():
                    continue
                label = SemanticLabelMap(inst.copy(), tile.label.class_ids[sl].copy(), handle.vocab)
                yield Tile(f"{tile.tile_id}_r{r:05d}_c{c:05d}", tile.image[sl].copy(), label)


def write_patches(handle: DatasetHandle, out, patch_size: int, stride: int, drop_empty: bool = False) -> Path:
    with DatasetWriter(out, handle.vocab, source=str(handle.root), patch_size=patch_size, stride=stride) as w:
        for p in extract_patches(handle, patch_size, stride, drop_empty):
            w.add(p)
    return Path(out)


def report(handle: DatasetHandle, out_dir=None, name: str = "imbalance_report") -> dict:
    stats = class_histogram(handle.labels())
    rep = stats.to_dict()
    rarest, prop = stats.rarest()
    rep["headline"] = f"{rarest} {100 * prop:.1f}%"
    if out_dir is not None:
        _dump(Path(out_dir) / f"{name}.json", rep)
        (Path(out_dir) / f"{name}.txt").write_text(format_stats(stats))
    return rep


def format_stats(stats: DatasetStats) -> str:
    props = stats.proportions
    width = max(len(n) for n in stats.counts) + 2
    lines = [f"{'class':<{width}}{'count':>8}  {'share':>7}"]
    for name, n in stats.counts.items():
        lines.append(f"{name:<{width}}{n:>8}  {100 * props[name]:>6.1f}%")
    lines.append(f"{'total':<{width}}{stats.total:>8}")
    rarest, prop = stats.rarest()
    lines.append(f"tiles: {stats.tile_count}; least represented: {rarest} {100 * prop:.1f}%")
    return "\n".join(lines) + "\n"


MAP_SUFFIX = {"balance": "bal", "enlarge": "enl"}


def make_maps(handle: DatasetHandle, mode: str, cfg: PipelineConfig, out, seed: int | None = None,
              sources: list[str] | None = None, limit: int | None = None) -> dict:
    """Write a dataset of custom maps (image.png keeps the source image).

    `sources` restricts and orders the source tiles; with `limit`, generation
    stops after that many maps (balancing skips tiles without donors).
    """
    if mode not in MAP_SUFFIX:
        raise ValueError(f"mode must be 'balance' or 'enlarge', got {mode!r}")
    seed = cfg.experiment.seed if seed is None else seed
    order = list(handle.tile_ids) if sources is None else list(sources)
    records, src_of, skipped = [], {}, []
    pool = None
    spec_b = None
    if mode == "balance":
        pool = DonorPool.from_maps((t.tile_id, t.label) for t in handle.tiles())
        spec_b = BalanceSpec(cfg.maps.targets(handle.vocab.names), pool, cfg.maps.size_tolerance, seed)
    out = Path(out)
    with DatasetWriter(out, handle.vocab, map_mode=mode, seed=seed) as w:
        for tid in order:
            if limit is not None and len(records) >= limit:
                break
            tile = read_tile(handle.root, tid, handle.vocab)
            out_id = f"{tid}_{MAP_SUFFIX[mode]}"
            if mode == "balance":
                try:
                    new, tlog = make_balancing_map(tile.label, spec_b)
                except DonorExhausted as e:
                    skipped.append({"tile_id": tid, "reason": str(e)})
                    continue
                rec = {"tile_id": out_id, "source": tid, "mode": mode, "transplants": [r.to_dict() for r in tlog]}
            else:
                spec = ShiftSpec(cfg.maps.max_shift, cfg.maps.max_retries, cfg.maps.shift_fraction, seed)
                new, slog = make_enlarging_map(tile.label, spec, tile_rng(seed, tid))
                rec = {"tile_id": out_id, "source": tid, "mode": mode, "shifts": [r.to_dict() for r in slog]}
            w.add(Tile(out_id, tile.image, new))
            src_of[out_id] = tid
            records.append(rec)
        w.extra["sources"] = src_of
    _jsonl(out / "maps_log.jsonl", records)
    if skipped:
        _jsonl(out / "maps_skipped.jsonl", skipped)
    return {"mode": mode, "maps": len(records), "skipped": len(skipped), "path": str(out)}


def load_patch_set(handle: DatasetHandle) -> PatchSet:
    imgs, conds = [], []
    for t in handle.tiles():
        imgs.append(torch.from_numpy(image_to_unit(t.image)))
        conds.append(torch.from_numpy(one_hot_encode(t.label)))
    return PatchSet(torch.stack(imgs), torch.stack(conds))


def train_denoiser(handle: DatasetHandle, cfg: PipelineConfig, out_path, seed: int | None = None,
                   resume: Path | None = None, progress=None) -> dict:
    seed = cfg.experiment.seed if seed is None else seed
    data = load_patch_set(handle)
    out_path = Path(out_path)
    if resume is not None:
        trainer = Trainer.resume(resume, data)
    else:
        n = cfg.denoiser
        dcfg = DenoiserConfig(3, len(handle.vocab), n.base_width, n.depth, n.timestep_embedding_dim,
                              data.images.shape[-1], n.num_res_blocks, n.channel_mult, n.spade_hidden)
        model = build_denoiser(dcfg, stream_seed(seed, "init"))
        sched = build_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)
        trainer = Trainer(model, sched, cfg.train.trainer(stream_seed(seed, "train")), data,
                          {"classes": list(handle.vocab.names), "version": __version__})
    trainer.run(checkpoint_dir=out_path.parent / "checkpoints", log=progress)
    trainer.save(out_path)
    losses = trainer.losses
    k = max(1, min(100, len(losses) // 10))
    return {
        "checkpoint": str(out_path),
        "steps": trainer.step,
        "patches": len(data),
        "loss_first": float(np.mean(losses[:k])) if losses else None,
        "loss_last": float(np.mean(losses[-k:])) if losses else None,
    }


def synthesize_dataset(checkpoint, maps_dir, out, sampler: SamplerConfig, batch_size: int = 16) -> dict:
    handle = ingest(maps_dir)
    loaded = load_model(checkpoint)
    mode = handle.manifest.get("map_mode", "original")
    sources = handle.manifest.get("sources", {})

    def items():
        for t in handle.tiles():
            yield f"{t.tile_id}_syn", sources.get(t.tile_id, t.tile_id), mode, t.image, t.label

    results = synthesize_batch(loaded.model, loaded.sched, items(), sampler, batch_size)
    out = Path(out)
    with DatasetWriter(out, handle.vocab, map_mode=mode) as w:
        for out_id, image, label, _ in results:
            w.add(Tile(out_id, image, label))
    _jsonl(out / "synthesis_log.jsonl", [r.to_dict() for *_, r in results])
    return {"tiles": len(results), "path": str(out), "mode": mode}


def merge_datasets(parts: list[Path], out) -> Path:
    """Concatenate tile datasets with a shared vocabulary into one."""
    out = Path(out)
    handles = [ingest(p) for p in parts]
    vocab = handles[0].vocab
    logs = []
    with DatasetWriter(out, vocab, parts=[str(p) for p in parts]) as w:
        for h in handles:
            if h.vocab != vocab:
                raise StageError("merge", "vocabularies differ")
            for t in h.tiles():
                w.add(t)
            lp = h.root / "synthesis_log.jsonl"
            if lp.is_file():
                logs.extend(lp.read_text().splitlines())
    if logs:
        (out / "synthesis_log.jsonl").write_text("\n".join(logs) + "\n")
    return out


def evaluate(gt_dir, pred_dir, out=None) -> dict:
    gt = ingest(gt_dir)
    pred = ingest(pred_dir, strict=False)
    missing = sorted(set(gt.tile_ids) - set(pred.tile_ids))
    if missing:
        raise TileCorrupt(missing[0], "tile missing from predictions")
    names = list(gt.vocab.names)
    scores = []
    for tid in gt.tile_ids:
        g = read_tile(gt.root, tid, gt.vocab).label
        p = read_tile(pred.root, tid, pred.vocab).label
        scores.append(score_tile(tid, g.instance_ids, g.class_ids, p.instance_ids, p.class_ids, len(names)))
    rep = {"aggregate": aggregate(scores, names), "tiles": [tile_report(s, names) for s in scores],
           "classes": names}
    if out is not None:
        _dump(Path(out), rep)
    return rep


def training_budgets(n_real: int, n_bal: int, n_enl: int, steps: int, batch: int) -> dict:
    """Equal optimizer-step budgets for each training-set variant."""
    sizes = {"baseline": n_real, "diffmix-b": n_real + n_bal, "diffmix-e": n_real + n_enl,
             "diffmix": n_real + n_bal + n_enl}
    return {k: {"train_patches": n, "optimizer_steps": steps, "batch_size": batch,
                "epochs": steps * batch / n if n else None} for k, n in sizes.items()}


def _stage(name):
    def wrap(fn):
        def inner(*a, **kw):
            try:
                return fn(*a, **kw)
            except StageError:
                raise
            except (DiffMixError, OSError, ValueError, RuntimeError) as e:
                raise StageError(name, f"{type(e).__name__}: {e}") from e
        return inner
    return wrap


def run_experiment(cfg: PipelineConfig, progress=None) -> Path:
    """ingest -> extract -> train -> make-maps -> synthesize -> report."""
    out = Path(cfg.data.output)
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    (out / "config.ini").write_text(cfg.to_ini())
    seed = cfg.experiment.seed
    timings = {}
    summary: dict = {"version": __version__, "config": cfg.to_dict(), "config_file": "config.ini", "stages": {}}

    def timed(name, fn, *a, **kw):
        t0 = time.perf_counter()
        res = _stage(name)(fn)(*a, **kw)
        timings[name] = round(time.perf_counter() - t0, 3)
        summary["stages"][name] = res
        return res

    handle = timed("ingest", lambda: ingest(cfg.data.dataset))
    summary["stages"]["ingest"] = {"tiles": len(handle), "warnings": len(handle.warnings)}
    _dump(out / "ingest_report.json", handle.validation_report())

    timed("extract", write_patches, handle, out / "patches", cfg.data.patch_size, cfg.data.stride,
          cfg.data.drop_empty)
    patches = ingest(out / "patches")
    summary["stages"]["extract"] = {"patches": len(patches), "path": "patches"}
    timed("report", report, patches, out, "imbalance_report")

    timed("train", train_denoiser, patches, cfg, out / "checkpoint.pt", seed, None, progress)
    summary["stages"]["train"]["checkpoint"] = "checkpoint.pt"

    n = len(patches)
    n_synth = int(round(cfg.experiment.synth_ratio * n))
    comp = cfg.experiment.composition
    if comp == "diffmix":
        want = {"balance": (n_synth + 1) // 2, "enlarge": n_synth // 2}
    elif comp == "diffmix-b":
        want = {"balance": n_synth, "enlarge": 0}
    else:
        want = {"balance": 0, "enlarge": n_synth}
    synth_parts = []
    made = {}
    for mode in ("balance", "enlarge"):
        rng = np.random.default_rng(stream_seed(seed, f"select-{mode}"))
        order = [patches.tile_ids[i] for i in rng.permutation(n)]
        res = timed(f"make-maps-{mode}", make_maps, patches, mode, cfg, out / f"maps_{mode}",
                    stream_seed(seed, f"maps-{mode}"), order, want[mode])
        made[mode] = res["maps"]
        if res["maps"]:
            res2 = timed(f"synthesize-{mode}", synthesize_dataset, out / "checkpoint.pt", out / f"maps_{mode}",
                         out / f"synth_{mode}", cfg.sampler.sampler(stream_seed(seed, f"sample-{mode}")),
                         cfg.sampler.batch_size)
            synth_parts.append(out / f"synth_{mode}")
            res2["path"] = f"synth_{mode}"
        res["path"] = f"maps_{mode}"
    if synth_parts:
        timed("merge", lambda: str(merge_datasets(synth_parts, out / "synthetic")))
        summary["stages"]["merge"] = {"path": "synthetic"}
        timed("report-synthetic", report, ingest(out / "synthetic"), out, "synthetic_report")
    summary["training_budgets"] = training_budgets(n, made["balance"], made["enlarge"],
                                                   cfg.experiment.downstream_steps, cfg.experiment.downstream_batch)
    _dump(out / "run_summary.json", summary)
    _dump(out / "timings.json", timings)
    return out
