"""End-to-end orchestration used by the CLI and the acceptance suite:
dataset directories on disk, the two-stage training run, map building,
predictor assembly, localisation run logs, and the evaluate report bundle."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import features as ft
from . import geom, gp, mcl, ndt, observation as obs, sim
from .config import ExperimentConfig
from .errors import FormatError
from .geom import Pose

SCHEMA_VERSION = 1

log = logging.getLogger("hybridloc")


def _seeds(root_seed: int) -> dict:
    names = ("world", "train_session", "test_session", "tset", "stage1",
             "stage2", "eval", "localize")
    state = np.random.SeedSequence(root_seed).generate_state(len(names))
    return {name: int(v) for name, v in zip(names, state)}


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

def save_session(dirpath: Path, session: sim.Session) -> None:
    dirpath.mkdir(parents=True, exist_ok=True)
    times = [f.t for f in session.frames]
    geom.save_trajectory_csv(dirpath / "gt.csv", times,
                             [f.gt for f in session.frames])
    geom.save_trajectory_csv(dirpath / "odom.csv", times[1:],
                             [f.odom for f in session.frames[1:]])
    scans = dirpath / "scans"
    scans.mkdir(exist_ok=True)
    for i, frame in enumerate(session.frames):
        obs.save_cloud(frame.cloud, scans / f"{i:05d}.pcbin")


def load_session(dirpath: Path) -> sim.Session:
    times, gts = geom.load_trajectory_csv(dirpath / "gt.csv")
    _, odoms = geom.load_trajectory_csv(dirpath / "odom.csv")
    if len(odoms) != len(times) - 1:
        raise FormatError(f"{dirpath}: {len(odoms)} odometry rows for "
                          f"{len(times)} frames")
    frames = []
    for i, (t, gt) in enumerate(zip(times, gts)):
        cloud = obs.load_cloud(dirpath / "scans" / f"{i:05d}.pcbin")
        odom = odoms[i - 1] if i >= 1 else None
        frames.append(sim.Frame(cloud, odom, gt, t))
    return sim.Session(frames)


def save_dataset(path, world: sim.World, train: sim.Session, test: sim.Session,
                 cfg: ExperimentConfig, seed: int) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "kind": "hybridloc-dataset",
        "seed": seed,
        "config": cfgmod.config_to_dict(cfg),
        "config_hash": cfgmod.config_hash(cfg),
        "n_train_frames": len(train),
        "n_test_frames": len(test),
    }
    (path / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    world_doc = {"schema_version": SCHEMA_VERSION, "size": world.size,
                 "seed": world.seed, "boxes": world.boxes.tolist()}
    (path / "world.json").write_text(json.dumps(world_doc, indent=2) + "\n")
    save_session(path / "train", train)
    save_session(path / "test", test)


def load_dataset(path):
    """Returns (world, train session, test session, meta dict)."""
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"{path}: dataset schema {meta.get('schema_version')}, "
                          f"expected {SCHEMA_VERSION}")
    world_doc = json.loads((path / "world.json").read_text())
    if world_doc.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"{path}: world schema mismatch")
    world = sim.World(np.asarray(world_doc["boxes"]), world_doc["size"],
                      world_doc.get("seed"))
    return (world, load_session(path / "train"), load_session(path / "test"),
            meta)


# ---------------------------------------------------------------------------
# generation and training
# ---------------------------------------------------------------------------

def test_session_config(cfg: ExperimentConfig) -> sim.SessionConfig:
    base = cfg.session
    tr = dataclasses.replace(
        base.trajectory,
        start_angle=base.trajectory.start_angle + cfg.test_session.start_angle,
        wobble_amp=cfg.test_session.wobble_amp,
        wobble_freq=cfg.test_session.wobble_freq,
        wobble_phase=cfg.test_session.wobble_phase,
        n_steps=cfg.test_session.n_steps or base.trajectory.n_steps,
        pass_wobble_amps=(),
        pass_wobble_phases=(),
    )
    return dataclasses.replace(base, trajectory=tr)


def generate_dataset(cfg: ExperimentConfig, seed: int):
    """World plus train/test sessions, all derived from the root seed."""
    seeds = _seeds(seed)
    world = sim.generate_world(cfg.world, seed=seeds["world"])
    if cfg.world.drift_sigma > 0:
        test_world = sim.drift_world(world, cfg.world.drift_sigma,
                                     seed=seeds["world"] + 1)
    else:
        test_world = world
    log.info("world: %d landmark boxes", len(world.boxes))
    train = sim.simulate_session(world, cfg.session, seed=seeds["train_session"])
    test = sim.simulate_session(test_world, test_session_config(cfg),
                                seed=seeds["test_session"])
    log.info("sessions: %d train frames, %d test frames", len(train), len(test))
    return world, train, test


def build_ndt_map(session: sim.Session, cfg: ExperimentConfig) -> ndt.NdtMap:
    clouds = [f.cloud for f in session.frames]
    poses = [f.gt for f in session.frames]
    m = ndt.build_map(clouds, poses, cell_size=cfg.ndt.cell_size,
                      min_points=cfg.ndt.min_points)
    log.info("ndt map: %d cells (%d active)", m.n_cells, m.n_active)
    return m


def train_stage1(session: sim.Session, cfg: ExperimentConfig, seed: int):
    """Feature-extractor training; returns (extractor, tset, center_rows,
    loss curve)."""
    seeds = _seeds(seed)
    tset, center_rows = sim.build_training_set(
        session, cfg.observation, cfg.features.input_px,
        input_blur=cfg.features.input_blur_px, seed=seeds["tset"])
    extractor = ft.FeatureExtractor.create(
        image_px=cfg.observation.crop_px, input_px=cfg.features.input_px,
        layer_sizes=tuple(cfg.features.layer_sizes),
        feature_dim=cfg.features.feature_dim,
        input_blur=cfg.features.input_blur_px, seed=seeds["stage1"])
    extractor, curve = ft.train(extractor, tset, cfg.features.train_config(),
                                seed=seeds["stage1"])
    log.info("stage 1: loss %.4f -> %.4f over %d epochs",
             curve[0], curve[-1], len(curve))
    return extractor, tset, center_rows, curve


def train_stage2(extractor, tset, center_rows, cfg: ExperimentConfig, seed: int):
    """GP training on trunk features; returns (SvgpModel, elbo curve)."""
    seeds = _seeds(seed)
    x = tset.x[center_rows]
    feats = extractor.forward(x)["feat"]
    targets = tset.positions[center_rows]
    quats = tset.quats[center_rows]
    model = gp.make_svgp(feats, targets, m=cfg.gp.m,
                         seed=seeds["stage2"],
                         noise_var=cfg.gp.noise_var, jitter=cfg.gp.jitter,
                         extractor=extractor)
    inputs = None if cfg.gp.freeze_trunk else x
    model, curve = gp.train_svgp(model, feats, targets, cfg.gp.train_config(),
                                 seed=seeds["stage2"], quats=quats,
                                 inputs=inputs)
    log.info("stage 2: elbo %.1f -> %.1f over %d epochs",
             curve[0], curve[-1], len(curve))
    return model, curve


def make_predictor(model: gp.SvgpModel, cfg: ExperimentConfig):
    spread = tuple(cfg.mcl.rot_spread)

    def predictor(idx, bev):
        return gp.predict(model, bev, rot_spread=spread)

    return predictor


# ---------------------------------------------------------------------------
# localisation run log
# ---------------------------------------------------------------------------

RUN_LOG_COLUMNS = ["step", "n_particles", "est_x", "est_y", "est_z",
                   "est_yaw_deg", "pos_error_m", "rot_error_deg",
                   "converged_flag", "wall_ms"]


def write_run_log(path, rows, cfg_hash: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={cfg_hash}\n")
        w = csv.writer(fh)
        w.writerow(RUN_LOG_COLUMNS)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v
                        for v in (row[c] for c in RUN_LOG_COLUMNS)])


def localize_run(method: str, session: sim.Session, ndt_map, model,
                 train_positions, cfg: ExperimentConfig, seed: int,
                 start: int = 0, out_path=None):
    """Run one continuous localisation from ``start`` to the session end,
    logging every step; returns the trial summary record."""
    seeds = _seeds(seed)
    predictor = make_predictor(model, cfg) if model is not None else None
    eval_cfg = dataclasses.replace(cfg.eval.eval_config(),
                                   max_iterations=len(session) - start)
    rows = []
    record = sim.run_localisation_trial(
        method, session, start, ndt_map, predictor, train_positions,
        cfg.mcl.mcl_config(cfg.ndt), eval_cfg, cfg.observation,
        seed=seeds["localize"], log_rows=rows)
    if out_path is not None:
        write_run_log(out_path, rows, cfgmod.config_hash(cfg))
    return record


# ---------------------------------------------------------------------------
# full evaluation bundle
# ---------------------------------------------------------------------------

def evaluate_all(methods, test_session: sim.Session, ndt_map, model,
                 train_positions, cfg: ExperimentConfig, seed: int,
                 out_dir=None):
    """Localisation trials plus the regression/uncertainty report; writes
    report.json, trials.csv, regression.json, regression_frames.csv and
    uncertainty_hist.csv under ``out_dir`` when given."""
    seeds = _seeds(seed)
    echo = {"seed": seed, "config_hash": cfgmod.config_hash(cfg),
            "config": cfgmod.config_to_dict(cfg)}
    predictor = make_predictor(model, cfg)
    loc = sim.evaluate_localisation(
        methods, test_session, ndt_map, predictor, train_positions,
        cfg.mcl.mcl_config(cfg.ndt), cfg.eval.eval_config(), cfg.observation,
        seed=seeds["eval"], config_echo=echo)
    n_reg = min(cfg.eval.regression_frames, len(test_session))
    reg_session = sim.Session(test_session.frames[:n_reg])
    reg = sim.evaluate_regression(
        lambda bev: gp.predict(model, bev, rot_spread=tuple(cfg.mcl.rot_spread)),
        reg_session, cfg.observation, config_echo=echo)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        loc.save(out / "report.json", out / "trials.csv")
        reg.save(out / "regression.json", out / "regression_frames.csv")
        sim.write_histogram_csv(reg, out / "uncertainty_hist.csv")
    return loc, reg
