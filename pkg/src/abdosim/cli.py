"""Command-line front end: ``abdosim generate|sweep|evaluate|losses``.

Exit codes: 0 success, 1 configuration error, 2 partial failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

import numpy as np

from . import ganloss, rvol
from .dataset import DatasetConfig, generate
from .errors import AbdosimError, ConfigError
from .evaluate import evaluate_dataset
from .sweep import SweepConfig, run_sweep

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2
LOSS_WEIGHTS = {"ct": ganloss.CT_WEIGHTS, "cbct": ganloss.CBCT_WEIGHTS, "mri": ganloss.MRI_WEIGHTS}


def _dataset_config(args) -> DatasetConfig:
    cfg = DatasetConfig.load(args.config) if args.config else DatasetConfig()
    changes = {}
    if args.seed is not None:
        changes.update(base_seed=args.seed, seeds=None)
    if args.resolution is not None:
        changes.update(resolution=args.resolution, grid=None)
    if args.n_models is not None:
        changes["n_models"] = args.n_models
    if args.modalities:
        changes["modalities"] = tuple(args.modalities)
    if args.out:
        changes["output"] = args.out
    try:
        return dataclasses.replace(cfg, **changes) if changes else cfg
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_generate(args) -> int:
    cfg = _dataset_config(args)
    status = generate(cfg, cfg.output, workers=args.workers)
    failed = {k: v for k, v in status.items() if v.startswith("failed")}
    built = sum(v == "built" for v in status.values())
    print(f"{built} built, {len(status) - built - len(failed)} up to date, {len(failed)} failed")
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_sweep(args) -> int:
    cfg = SweepConfig.load(args.config) if args.config else SweepConfig()
    rows = run_sweep(args.dataset, cfg, out=args.out or cfg.output, workers=args.workers)
    bad = [r for r in rows if r["status"] != "ok"]
    print(f"{len(rows)} rows, {len(bad)} not ok")
    return EXIT_PARTIAL if bad else EXIT_OK


def cmd_evaluate(args) -> int:
    reports = evaluate_dataset(args.dataset, out=args.out, reference_root=args.reference)
    print(f"{len(reports)} volumes evaluated")
    return EXIT_OK if reports else EXIT_PARTIAL


def cmd_losses(args) -> int:
    a, b = rvol.read(args.a), rvol.read(args.b)
    if a.geometry != b.geometry:
        raise ConfigError("volumes must share geometry")
    k = args.slice if args.slice is not None else a.geometry.shape[0] // 2
    if not 0 <= k < a.geometry.shape[0]:
        raise ConfigError(f"slice {k} out of range")
    pair = ganloss.ImagePair(np.asarray(a.data[k]), np.asarray(b.data[k]))
    w = LOSS_WEIGHTS[args.weights]
    inten = float(np.mean(np.abs(pair.gx - pair.x)))
    gdl = ganloss.gradient_difference_loss(pair)
    out = {"slice": k, "intensity": inten, "gdl": gdl,
           "weighted": w.lambda_int * inten + w.lambda_gdl * gdl, "weights": dataclasses.asdict(w)}
    print(json.dumps(out, indent=1))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="abdosim", description="Multimodal abdominal phantom toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate the phantom dataset")
    g.add_argument("--config")
    g.add_argument("--out")
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--seed", type=int)
    g.add_argument("--resolution", choices=("desk", "paper"))
    g.add_argument("--n-models", type=int)
    g.add_argument("--modalities", nargs="+", choices=("CT", "CBCT", "MRI"))
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("sweep", help="registration sweep over a generated dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--config")
    s.add_argument("--out")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    e = sub.add_parser("evaluate", help="image quality reports for a generated dataset")
    e.add_argument("--dataset", required=True)
    e.add_argument("--reference", help="dataset whose same-named volumes serve as reference")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    lo = sub.add_parser("losses", help="generator loss terms between one slice of two volumes")
    lo.add_argument("a")
    lo.add_argument("b")
    lo.add_argument("--slice", type=int)
    lo.add_argument("--weights", choices=sorted(LOSS_WEIGHTS), default="ct")
    lo.set_defaults(func=cmd_losses)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AbdosimError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
