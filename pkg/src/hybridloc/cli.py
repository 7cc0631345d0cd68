"""Command-line entry point wiring datasets, training, map building,
localisation runs, and evaluation into reproducible experiments.

Every command takes --config/--seed/--jobs; outputs embed the resolved
config hash. Failures print a machine-readable error category to stderr and
exit nonzero."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import backend
from . import config as cfgmod
from . import gp, ndt, pipeline, sim
from .errors import ConfigError, HybridLocError
from .features import FeatureExtractor

log = logging.getLogger("hybridloc")

_LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING,
               "info": logging.INFO, "debug": logging.DEBUG}

_EXIT_CODES = {
    "missing-file": 3,
    "config": 4,
    "format": 5,
    "invalid-argument": 6,
    "invalid-state": 6,
    "out-of-bounds": 6,
    "numerical": 7,
    "degenerate": 8,
    "cannot-initialise": 8,
}

_METHOD_ALIASES = {"uniform": "uniform-mcl", "hybrid-gp": "hybrid-gp",
                   "hybrid-fixed": "hybrid-fixed", "uniform-mcl": "uniform-mcl"}


def _setup_logging() -> None:
    name = os.environ.get("HYBRIDLOC_LOG", "info").strip().lower()
    level = _LOG_LEVELS.get(name, logging.INFO)
    logging.basicConfig(level=level,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _setup_jobs(jobs) -> None:
    if jobs is None or not backend.use_numba():
        return
    try:
        import numba
        numba.set_num_threads(max(1, int(jobs)))
    except Exception:  # thread count is best effort only
        log.debug("could not set numba thread count", exc_info=True)


def _resolve(args):
    cfg = cfgmod.load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    return cfg, int(seed)


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="YAML experiment config")
    parser.add_argument("--seed", type=int, default=None,
                        help="root seed (overrides the config's)")
    parser.add_argument("--jobs", type=int, default=None,
                        help="worker threads for the numba kernels")


def cmd_gen_data(args) -> int:
    cfg, seed = _resolve(args)
    world, train, test = pipeline.generate_dataset(cfg, seed)
    pipeline.save_dataset(args.out, world, train, test, cfg, seed)
    log.info("dataset written to %s", args.out)
    return 0


def cmd_build_map(args) -> int:
    cfg, seed = _resolve(args)
    _, train, _, _ = pipeline.load_dataset(args.data)
    ndt_map = pipeline.build_ndt_map(train, cfg)
    ndt.save_map(ndt_map, args.out)
    log.info("map written to %s", args.out)
    return 0


def cmd_train(args) -> int:
    cfg, seed = _resolve(args)
    _, train, _, _ = pipeline.load_dataset(args.data)
    if args.stage in ("1", "both"):
        extractor, tset, center_rows, _ = pipeline.train_stage1(train, cfg, seed)
        if args.stage == "1":
            extractor.save(args.out)
            log.info("stage-1 weights written to %s", args.out)
            return 0
    else:
        if not args.weights:
            raise ConfigError("--stage 2 requires --weights from stage 1")
        extractor = FeatureExtractor.load(args.weights)
        seeds = pipeline._seeds(seed)
        tset, center_rows = sim.build_training_set(
            train, cfg.observation, cfg.features.input_px,
            input_blur=cfg.features.input_blur_px, seed=seeds["tset"])
    model, _ = pipeline.train_stage2(extractor, tset, center_rows, cfg, seed)
    gp.save_model(model, args.out)
    log.info("model written to %s", args.out)
    return 0


def cmd_localize(args) -> int:
    cfg, seed = _resolve(args)
    method = _METHOD_ALIASES[args.method]
    ndt_map = ndt.load_map(args.map, min_points=cfg.ndt.min_points)
    model = gp.load_model(args.model)
    world, train, test, _ = pipeline.load_dataset(args.data)
    session = train if args.session == "train" else test
    train_positions = np.stack([f.gt.p for f in train.frames])
    record = pipeline.localize_run(method, session, ndt_map, model,
                                   train_positions, cfg, seed,
                                   start=args.start, out_path=args.out)
    print(json.dumps(record, sort_keys=True))
    if not record["success"]:
        log.warning("run did not reach the success threshold")
    return 0


def cmd_evaluate(args) -> int:
    cfg, seed = _resolve(args)
    if args.trials is not None:
        if args.trials < 1:
            raise ConfigError("--trials must be at least 1")
        cfg.eval.trials = args.trials
    methods = [_METHOD_ALIASES[m] for m in args.methods] if args.methods \
        else list(cfg.eval.methods)
    ndt_map = ndt.load_map(args.map, min_points=cfg.ndt.min_points)
    model = gp.load_model(args.model)
    world, train, test, _ = pipeline.load_dataset(args.data)
    train_positions = np.stack([f.gt.p for f in train.frames])
    loc, reg = pipeline.evaluate_all(methods, test, ndt_map, model,
                                     train_positions, cfg, seed,
                                     out_dir=args.out)
    print(json.dumps(loc.aggregates, sort_keys=True, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hybridloc",
        description="GP-seeded Monte Carlo localisation, desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate world + train/test sessions")
    _common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("build-map", help="build the NDT map from a dataset")
    _common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output map file")
    p.set_defaults(func=cmd_build_map)

    p = sub.add_parser("train", help="train the extractor and/or the GP")
    _common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output model/weights file")
    p.add_argument("--stage", choices=("1", "2", "both"), default="both")
    p.add_argument("--weights", default=None,
                   help="stage-1 weights file (required for --stage 2)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("localize", help="run one localisation with a run log")
    _common(p)
    p.add_argument("--map", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--session", choices=("train", "test"), default="test")
    p.add_argument("--method", required=True,
                   choices=("hybrid-gp", "hybrid-fixed", "uniform"))
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--out", required=True, help="run log CSV path")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("evaluate", help="paired trials + regression report")
    _common(p)
    p.add_argument("--map", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--methods", nargs="*", default=None,
                   choices=("hybrid-gp", "hybrid-fixed", "uniform",
                            "uniform-mcl"))
    p.add_argument("--out", required=True, help="output report directory")
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_jobs(getattr(args, "jobs", None))
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(json.dumps({"error": "missing-file", "message": str(exc)}),
              file=sys.stderr)
        return _EXIT_CODES["missing-file"]
    except HybridLocError as exc:
        print(json.dumps({"error": exc.category, "message": str(exc)}),
              file=sys.stderr)
        return _EXIT_CODES.get(exc.category, 1)


if __name__ == "__main__":
    sys.exit(main())
