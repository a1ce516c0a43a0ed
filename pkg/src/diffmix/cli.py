"""Command-line entry point.

Exit codes: 0 success, 2 validation failure, 3 stage failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import PipelineConfig, load_config
from .errors import DiffMixError, StageError, ValidationError
from .sampler import SamplerConfig

log = logging.getLogger("diffmix")


def _config(args) -> PipelineConfig:
    if getattr(args, "config", None):
        return load_config(args.config, check_paths=False)
    return PipelineConfig()


def cmd_ingest(args):
    from .pipeline import ingest

    handle = ingest(args.input, strict=not args.lenient)
    rep = handle.validation_report()
    text = json.dumps(rep, indent=2, sort_keys=True)
    if args.report:
        Path(args.report).write_text(text + "\n")
    print(f"{len(handle)} tiles, {len(handle.violations)} violations, {len(handle.warnings)} warnings")
    return 2 if handle.violations else 0


def cmd_report(args):
    from .pipeline import format_stats, ingest
    from .label_space import class_histogram

    handle = ingest(args.input)
    stats = class_histogram(handle.labels())
    if args.out:
        rep = stats.to_dict()
        rarest, prop = stats.rarest()
        rep["headline"] = f"{rarest} {100 * prop:.1f}%"
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    print(format_stats(stats), end="")
    return 0


def cmd_extract(args):
    from .pipeline import ingest, write_patches

    handle = ingest(args.input)
    stride = args.stride or max(1, args.patch_size // 2)
    write_patches(handle, args.out, args.patch_size, stride, args.drop_empty)
    print(f"patches written to {args.out}")
    return 0


def cmd_train(args):
    from .pipeline import ingest, train_denoiser

    cfg = _config(args)
    handle = ingest(args.data)
    res = train_denoiser(handle, cfg, args.out, resume=Path(args.resume) if args.resume else None,
                         progress=log.info)
    print(json.dumps(res, indent=2))
    return 0


def cmd_make_maps(args):
    from .pipeline import ingest, make_maps

    cfg = _config(args)
    res = make_maps(ingest(args.input), args.mode, cfg, args.out, seed=args.seed)
    print(json.dumps(res, indent=2))
    return 0


def cmd_synthesize(args):
    from .pipeline import synthesize_dataset

    sampler = SamplerConfig(args.ddim_steps, args.t_noise, args.guidance, args.eta, args.seed)
    res = synthesize_dataset(args.checkpoint, args.maps, args.out, sampler, args.batch_size)
    print(json.dumps(res, indent=2))
    return 0


def cmd_evaluate(args):
    from .pipeline import evaluate

    rep = evaluate(args.gt, args.pred, args.out)
    print(json.dumps(rep["aggregate"], indent=2))
    return 0


def cmd_run(args):
    from .pipeline import run_experiment

    cfg = load_config(args.config)
    out = run_experiment(cfg, progress=log.info)
    print(f"run artifacts in {out}")
    return 0


def cmd_make_toy(args):
    from .tiles import write_dataset
    from .toy import TOY_VOCAB, ToySpec, make_toy_dataset

    tiles = make_toy_dataset(ToySpec(n_tiles=args.tiles, size=args.size, seed=args.seed))
    write_dataset(args.out, tiles, TOY_VOCAB)
    print(f"{len(tiles)} toy tiles written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffmix", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="validate a tile dataset")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--report", help="write the validation report here")
    s.add_argument("--lenient", action="store_true", help="collect all violations instead of stopping")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("report", help="class composition of a dataset")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("extract", help="cut tiles into patches")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--patch-size", type=int, default=64)
    s.add_argument("--stride", type=int, default=0)
    s.add_argument("--drop-empty", action="store_true")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train", help="train the denoiser on a patch dataset")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="checkpoint file")
    s.add_argument("--resume")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("make-maps", help="generate balancing or enlarging label maps")
    s.add_argument("--mode", choices=("balance", "enlarge"), required=True)
    s.add_argument("--config")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_make_maps)

    s = sub.add_parser("synthesize", help="synthesize images for a maps dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--maps", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--t-noise", type=int, default=55)
    s.add_argument("--ddim-steps", type=int, default=100)
    s.add_argument("--guidance", type=float, default=1.5)
    s.add_argument("--eta", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--batch-size", type=int, default=16)
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("evaluate", help="score predicted instance/class maps")
    s.add_argument("--gt", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("run", help="end-to-end experiment from one config file")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("make-toy", help="write a synthetic blob dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--tiles", type=int, default=200)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_make_toy)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"validation error: {e}", file=sys.stderr)
        return 2
    except StageError as e:
        print(f"stage failure: {e}", file=sys.stderr)
        return 2 if isinstance(e.__cause__, ValidationError) else 3
    except DiffMixError as e:
        print(f"stage failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
