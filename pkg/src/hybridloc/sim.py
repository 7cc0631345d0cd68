"""Synthetic world, trajectory and session simulation, and the evaluation
harness: pose-regression metrics with uncertainty binning, and paired
kidnapped-robot localisation trials for the hybrid and baseline methods."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import geom, mcl, ndt, observation as obs
from .errors import InvalidArgumentError, OutOfBoundsError
from .geom import Pose, PoseDelta
from .observation import BevImage, PointCloud, SensorConfig

SCHEMA_VERSION = 1

#: Uncertainty-histogram intervals: [0,5), [5,10), ..., [45,50), [50, inf).
UNCERTAINTY_BIN_EDGES = [5.0 * i for i in range(11)]


# ---------------------------------------------------------------------------
# world
# ---------------------------------------------------------------------------

@dataclass
class WorldConfig:
    size: float = 200.0
    trajectory_radius: float = 60.0
    corridor_halfwidth: float = 8.0
    pillar_grid_step: float = 12.0
    pillar_keep_prob: float = 0.7
    pillar_size: tuple = (2.0, 5.0)
    pillar_height: tuple = (2.0, 9.0)
    wall_height: float = 5.0
    boundary_walls: bool = True
    margin: float = 4.0
    drift_sigma: float = 0.0


class World:
    """Axis-aligned landmark boxes inside a square boundary."""

    def __init__(self, boxes, size, seed=None):
        self.boxes = np.asarray(boxes, dtype=float).reshape(-1, 6)
        self.size = float(size)
        self.seed = seed

    def contains(self, p) -> bool:
        return bool(np.all(np.abs(np.asarray(p)[:2]) <= self.size / 2))


def generate_world(cfg: WorldConfig, seed=0) -> World:
    """Deterministic pillar-forest world with a free ring corridor along the
    nominal trajectory radius."""
    rng = np.random.default_rng(seed)
    boxes = []
    half = cfg.size / 2
    if cfg.boundary_walls:
        t, h = 1.0, cfg.wall_height
        boxes += [
            [half - t, -half, 0.0, half, half, h],
            [-half, -half, 0.0, -half + t, half, h],
            [-half, half - t, 0.0, half, half, h],
            [-half, -half, 0.0, half, -half + t, h],
        ]
    lo = -half + cfg.margin + cfg.pillar_grid_step / 2
    centers = np.arange(lo, half - cfg.margin, cfg.pillar_grid_step)
    clearance = cfg.corridor_halfwidth + cfg.pillar_size[1]
    for gx in centers:
        for gy in centers:
            keep = rng.uniform() < cfg.pillar_keep_prob
            jitter = rng.uniform(-cfg.pillar_grid_step / 4,
                                 cfg.pillar_grid_step / 4, size=2)
            w, d = rng.uniform(*cfg.pillar_size, size=2)
            h = rng.uniform(*cfg.pillar_height)
            if not keep:
                continue
            cx, cy = gx + jitter[0], gy + jitter[1]
            if abs(np.hypot(cx, cy) - cfg.trajectory_radius) < clearance:
                continue
            boxes.append([cx - w / 2, cy - d / 2, 0.0, cx + w / 2, cy + d / 2, h])
    if not boxes:
        raise InvalidArgumentError("world config produced zero landmarks")
    return World(boxes, cfg.size, seed)


def drift_world(world: World, sigma: float, seed=0) -> World:
    """Jitter landmark footprints to mimic appearance change across sessions."""
    if sigma <= 0:
        return world
    rng = np.random.default_rng(seed)
    shift = rng.normal(0.0, sigma, size=(len(world.boxes), 2))
    boxes = world.boxes.copy()
    boxes[:, [0, 3]] += shift[:, :1]
    boxes[:, [1, 4]] += shift[:, 1:]
    return World(boxes, world.size, world.seed)


# ---------------------------------------------------------------------------
# trajectories and sessions
# ---------------------------------------------------------------------------

@dataclass
class TrajectoryConfig:
    kind: str = "loop"  # or "straight"
    n_steps: int = 400
    step_m: float = 1.0
    radius: float = 60.0
    z: float = 1.5
    start_angle: float = 0.0
    wobble_amp: float = 0.0   # sinusoidal radial offset, pushes a session
    wobble_freq: int = 3      # sideways off the nominal ring
    wobble_phase: float = 0.0
    # a session may repeat the loop with per-pass wobble overrides so the
    # mapped region gets lateral coverage (the long-term multi-run analogue)
    pass_wobble_amps: tuple = ()
    pass_wobble_phases: tuple = ()


def _loop_xy(cfg: TrajectoryConfig, n_steps, amp, phase):
    dtheta = cfg.step_m / cfg.radius
    theta = cfg.start_angle + dtheta * np.arange(n_steps)
    r = cfg.radius + amp * np.sin(cfg.wobble_freq * theta + phase)
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)


def _headings(xy):
    if len(xy) > 1:
        head = np.diff(xy, axis=0)
        head = np.concatenate([head, head[-1:]], axis=0)
        return np.arctan2(head[:, 1], head[:, 0])
    return np.zeros(1)


def trajectory_poses(cfg: TrajectoryConfig):
    """Deterministic pose sequence; yaw follows the direction of motion."""
    if cfg.kind == "loop":
        if cfg.pass_wobble_amps:
            phases = cfg.pass_wobble_phases or (cfg.wobble_phase,) * len(cfg.pass_wobble_amps)
            chunks = []
            for amp, phase in zip(cfg.pass_wobble_amps, phases):
                xy = _loop_xy(cfg, cfg.n_steps, amp, phase)
                chunks.append((xy, _headings(xy)))
            xy = np.concatenate([c[0] for c in chunks])
            yaw = np.concatenate([c[1] for c in chunks])
        else:
            xy = _loop_xy(cfg, cfg.n_steps, cfg.wobble_amp, cfg.wobble_phase)
            yaw = _headings(xy)
    elif cfg.kind == "straight":
        x0 = -cfg.n_steps * cfg.step_m / 2
        xy = np.stack([x0 + cfg.step_m * np.arange(cfg.n_steps),
                       np.zeros(cfg.n_steps)], axis=1)
        yaw = _headings(xy)
    else:
        raise InvalidArgumentError(f"unknown trajectory kind {cfg.kind!r}")
    return [Pose.from_xyz_yaw(x, y, cfg.z, w) for (x, y), w in zip(xy, yaw)]


@dataclass
class SessionConfig:
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    sensor: SensorConfig = field(default_factory=SensorConfig)
    scan_noise: float = 0.03
    odom_trans_sigma: float = 0.01
    odom_rot_sigma: float = 0.002


@dataclass
class Frame:
    cloud: PointCloud
    odom: PoseDelta | None
    gt: Pose
    t: float


@dataclass
class Session:
    frames: list

    def __len__(self):
        return len(self.frames)


def simulate_session(world: World, cfg: SessionConfig, seed=0) -> Session:
    """Scans plus noisy odometry along the configured trajectory; ground
    truth is exact, odometry deltas carry seeded Gaussian noise."""
    poses = trajectory_poses(cfg.trajectory)
    for pose in poses:
        if not world.contains(pose.p):
            raise OutOfBoundsError(f"trajectory pose {pose.p} outside bounds")
    ss = np.random.SeedSequence(seed)
    scan_seeds = ss.spawn(len(poses))
    odom_rng = np.random.default_rng(ss.spawn(1)[0])
    frames = []
    for i, pose in enumerate(poses):
        cloud = obs.simulate_scan(world, pose, cfg.sensor, cfg.scan_noise,
                                  seed=scan_seeds[i])
        odom = None
        if i > 0:
            true = geom.delta(poses[i - 1], pose)
            dp = true.p + odom_rng.normal(0.0, cfg.odom_trans_sigma, size=3)
            e = odom_rng.normal(0.0, cfg.odom_rot_sigma, size=3)
            dq = geom.quat_multiply(true.r, geom.quat_from_euler(*e))
            odom = PoseDelta(dp, dq)
        frames.append(Frame(cloud, odom, pose, float(i)))
    return Session(frames)


def integrate_odometry(start: Pose, frames) -> list:
    """Dead-reckoned poses from the session's odometry chain."""
    out = [start]
    for frame in frames[1:]:
        out.append(geom.compose(out[-1], frame.odom))
    return out


# ---------------------------------------------------------------------------
# observation building
# ---------------------------------------------------------------------------

@dataclass
class ObservationConfig:
    scope: tuple = (100.0, 100.0, 10.0)
    resolution: float = 0.4
    k: int = 10
    crop_px: int = 188
    max_offset_m: float = 12.5
    augment_crops: int = 2
    augment_rotations: int = 2
    augment_yaw_deg: float = 25.0


def build_superimposed_cloud(session: Session, idx: int, cfg: ObservationConfig,
                             history_start: int = 0) -> PointCloud:
    """Union of up to k preceding frames (not reaching back before
    ``history_start``) mapped into frame ``idx`` via the odometry chain."""
    lo = max(history_start, idx - cfg.k)
    past = []
    acc = Pose.identity()  # delta mapping frame j points into frame idx
    for j in range(idx, lo, -1):
        acc = geom.compose(acc, geom.inverse(session.frames[j].odom))
        past.append((session.frames[j - 1].cloud, acc))
    return obs.superimpose(past[::-1], session.frames[idx].cloud)


def build_bev(session: Session, idx: int, cfg: ObservationConfig,
              history_start: int = 0) -> BevImage:
    """Un-cropped BEV raster of the superimposed observation at a frame."""
    cloud = build_superimposed_cloud(session, idx, cfg, history_start)
    return obs.rasterise(cloud, cfg.scope, cfg.resolution,
                         origin=session.frames[idx].gt)


def bev_for_model(session, idx, cfg: ObservationConfig, history_start=0) -> BevImage:
    """Centre-cropped BEV at the model's expected input size."""
    return obs.center_crop(build_bev(session, idx, cfg, history_start),
                           cfg.crop_px)


# ---------------------------------------------------------------------------
# training-set assembly
# ---------------------------------------------------------------------------

def _rotate_cloud_yaw(cloud: PointCloud, yaw: float) -> PointCloud:
    """The cloud as seen by a sensor rotated by +yaw at the same position."""
    c, s = np.cos(-yaw), np.sin(-yaw)
    pts = cloud.points
    out = pts.copy()
    out[:, 0] = c * pts[:, 0] - s * pts[:, 1]
    out[:, 1] = s * pts[:, 0] + c * pts[:, 1]
    return PointCloud(out)


def build_training_set(session: Session, cfg: ObservationConfig, input_px: int,
                       input_blur: float = 0.0, seed=0):
    """Stage-1/2 training data from a mapping session.

    Every frame contributes its centre crop, ``augment_crops`` random crops
    with offset-adjusted targets, and ``augment_rotations`` yaw-rotated
    views (the superimposed cloud re-rasterised under a heading offset, so
    the augmentation is exact). Consistency pairs link each frame to a
    random earlier frame within the superimposition window. Returns
    (TrainingSet, center_rows) where ``center_rows`` indexes the exact-pose
    centre-crop entries (the GP stage trains on those).
    """
    from .features import TrainingSet, preprocess_image

    rng = np.random.default_rng(seed)
    xs, positions, quats = [], [], []
    center_rows = []
    variant_rows = []
    max_yaw = np.radians(cfg.augment_yaw_deg)
    for i in range(len(session)):
        cloud = build_superimposed_cloud(session, i, cfg)
        gt = session.frames[i].gt
        bev = obs.rasterise(cloud, cfg.scope, cfg.resolution, origin=gt)
        entries = [(obs.center_crop(bev, cfg.crop_px), gt)]
        for _ in range(cfg.augment_crops):
            crop, off = obs.random_crop(bev, cfg.crop_px,
                                        seed=rng.integers(2**63),
                                        max_offset_m=cfg.max_offset_m)
            entries.append((crop, geom.compose(gt, off)))
        for _ in range(cfg.augment_rotations):
            yaw = rng.uniform(-max_yaw, max_yaw)
            turned = Pose(np.zeros(3), geom.quat_from_yaw(yaw))
            bev_r = obs.rasterise(_rotate_cloud_yaw(cloud, yaw), cfg.scope,
                                  cfg.resolution, origin=geom.compose(gt, turned))
            crop, off = obs.random_crop(bev_r, cfg.crop_px,
                                        seed=rng.integers(2**63),
                                        max_offset_m=cfg.max_offset_m)
            entries.append((crop, geom.compose(geom.compose(gt, turned), off)))
        variants = []
        for j, (img_j, target) in enumerate(entries):
            row = len(xs)
            xs.append(preprocess_image(img_j.cells, input_px, input_blur).ravel())
            positions.append(target.p)
            quats.append(target.r)
            variants.append(row)
            if j == 0:
                center_rows.append(row)
        variant_rows.append(variants)
    pairs = []
    for i in range(1, len(session)):
        j = i - int(rng.integers(1, min(cfg.k, i) + 1))
        pairs.append([int(rng.choice(variant_rows[j])),
                      int(rng.choice(variant_rows[i]))])
    tset = TrainingSet(np.asarray(xs), np.asarray(positions), np.asarray(quats),
                       np.asarray(pairs, dtype=int))
    return tset, np.asarray(center_rows, dtype=int)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    kind: str
    config: dict
    aggregates: dict
    trials: list

    def to_json(self) -> str:
        payload = {
            "schema_version": SCHEMA_VERSION,
            "kind": self.kind,
            "config": self.config,
            "aggregates": self.aggregates,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def save(self, json_path, csv_path=None) -> None:
        Path(json_path).write_text(self.to_json())
        if csv_path is not None and self.trials:
            cols = list(self.trials[0].keys())
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(cols)
                for rec in self.trials:
                    w.writerow([repr(v) if isinstance(v, float) else v
                                for v in (rec[c] for c in cols)])


def _median(vals):
    return float(np.median(vals)) if len(vals) else float("nan")


def _mean(vals):
    return float(np.mean(vals)) if len(vals) else float("nan")


# ---------------------------------------------------------------------------
# regression evaluation
# ---------------------------------------------------------------------------

def evaluate_regression(predict_fn, session: Session, cfg: ObservationConfig,
                        config_echo=None) -> EvalReport:
    """Per-frame pose-regression metrics with the 11-interval uncertainty
    histogram and its rank statistics.

    ``predict_fn`` maps a centre-cropped BevImage to a PosePrediction.
    """
    if len(session) == 0:
        raise InvalidArgumentError("empty evaluation session")
    records = []
    for i in range(len(session)):
        bev = bev_for_model(session, i, cfg)
        pred = predict_fn(bev)
        est = Pose(pred.position, pred.quat)
        records.append({
            "frame": i,
            "pos_error_m": geom.positional_error(est, session.frames[i].gt),
            "rot_error_deg": geom.rotational_error(est, session.frames[i].gt),
            "uncertainty": pred.uncertainty_magnitude,
        })
    pos = np.array([r["pos_error_m"] for r in records])
    rot = np.array([r["rot_error_deg"] for r in records])
    unc = np.array([r["uncertainty"] for r in records])
    bins = []
    for b, lo in enumerate(UNCERTAINTY_BIN_EDGES):
        hi = UNCERTAINTY_BIN_EDGES[b + 1] if b + 1 < len(UNCERTAINTY_BIN_EDGES) else np.inf
        mask = (unc >= lo) & (unc < hi)
        bins.append({
            "lo": lo,
            "hi": None if np.isinf(hi) else hi,
            "count": int(mask.sum()),
            "percent": float(100.0 * mask.mean()),
            "median_pos_error_m": _median(pos[mask]),
            "mean_pos_error_m": _mean(pos[mask]),
            "median_rot_error_deg": _median(rot[mask]),
            "mean_rot_error_deg": _mean(rot[mask]),
        })
    populated = [b["median_pos_error_m"] for b in bins if b["count"] > 0]
    inversions = sum(1 for a, b in zip(populated, populated[1:]) if b < a)
    if len(np.unique(unc)) > 1 and len(np.unique(pos)) > 1:
        rho = float(spearmanr(unc, pos).statistic)
    else:
        rho = 0.0
    aggregates = {
        "n_frames": len(records),
        "median_pos_error_m": _median(pos),
        "mean_pos_error_m": _mean(pos),
        "median_rot_error_deg": _median(rot),
        "mean_rot_error_deg": _mean(rot),
        "spearman_uncertainty_vs_pos_error": rho,
        "bin_median_inversions": inversions,
        "uncertainty_bins": bins,
    }
    return EvalReport("regression", config_echo or {}, aggregates, records)


def write_histogram_csv(report: EvalReport, path) -> None:
    """Plot-ready per-bin rows of the uncertainty histogram."""
    cols = ["lo", "hi", "count", "percent", "median_pos_error_m",
            "mean_pos_error_m", "median_rot_error_deg", "mean_rot_error_deg"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for b in report.aggregates["uncertainty_bins"]:
            w.writerow([b[c] for c in cols])


# ---------------------------------------------------------------------------
# localisation evaluation
# ---------------------------------------------------------------------------

METHODS = ("hybrid-gp", "hybrid-fixed", "uniform-mcl")


@dataclass
class EvalConfig:
    trials: int = 100
    success_threshold_m: float = 0.75
    max_iterations: int = 140


def run_localisation_trial(method: str, session: Session, start: int,
                           ndt_map, predictor, train_positions,
                           mcl_cfg: mcl.MclConfig, eval_cfg: EvalConfig,
                           obs_cfg: ObservationConfig, seed=0, log_rows=None):
    """One kidnapped-robot attempt from frame ``start``.

    ``predictor(frame_idx, bev) -> PosePrediction`` supplies the seeding
    distribution for the hybrid methods. Success is the first iteration
    whose estimate lands within the threshold of ground truth.
    """
    if method not in METHODS:
        raise InvalidArgumentError(f"unknown method {method!r}")
    ss = mcl._seed_sequence(seed)
    step_seeds = ss.spawn(eval_cfg.max_iterations)
    state = mcl.uniform_baseline_init(train_positions, mcl_cfg) \
        if method == "uniform-mcl" else None
    success = False
    iterations = eval_cfg.max_iterations
    final_error = float("nan")
    t0 = time.perf_counter()
    for it in range(eval_cfg.max_iterations):
        idx = start + it
        if idx >= len(session):
            break
        frame = session.frames[idx]
        u = frame.odom if it > 0 else None
        if method == "uniform-mcl":
            state, est = mcl.uniform_baseline_step(state, u, frame.cloud,
                                                   ndt_map, mcl_cfg,
                                                   seed=step_seeds[it])
        else:
            prediction = None
            needs_seed = (state is None or state.size == 0
                          or not state.converged
                          or mcl_cfg.injection == "always")
            if needs_seed:
                bev = bev_for_model(session, idx, obs_cfg, history_start=start)
                prediction = predictor(idx, bev)
                if method == "hybrid-fixed":
                    prediction = mcl.fixed_covariance_seed(
                        Pose(prediction.position, prediction.quat),
                        mcl_cfg.fixed_cov, prediction.rot_spread)
            state, est = mcl.hybrid_step(state, prediction, u, frame.cloud,
                                         ndt_map, mcl_cfg, seed=step_seeds[it])
        err = geom.positional_error(est, frame.gt)
        rot = geom.rotational_error(est, frame.gt)
        if log_rows is not None:
            log_rows.append({
                "step": it,
                "n_particles": state.size,
                "est_x": est.p[0], "est_y": est.p[1], "est_z": est.p[2],
                "est_yaw_deg": float(np.degrees(geom.quat_yaw(est.r))),
                "pos_error_m": err,
                "rot_error_deg": rot,
                "converged_flag": int(state.converged),
                "wall_ms": (time.perf_counter() - t0) * 1e3,
            })
        final_error = err
        if err < eval_cfg.success_threshold_m:
            success = True
            iterations = it + 1
            break
    wall = time.perf_counter() - t0
    return {
        "start": start,
        "method": method,
        "success": int(success),
        "iterations": iterations,
        "final_error_m": float(final_error),
        "wall_s": wall,
    }


def evaluate_localisation(methods, session: Session, ndt_map, predictor,
                          train_positions, mcl_cfg: mcl.MclConfig,
                          eval_cfg: EvalConfig, obs_cfg: ObservationConfig,
                          seed=0, config_echo=None) -> EvalReport:
    """Paired kidnapped-robot trials: every method sees the same start
    frames and the same per-trial seeds."""
    for m in methods:
        if m not in METHODS:
            raise InvalidArgumentError(f"unknown method {m!r}")
    if eval_cfg.trials < 1:
        raise InvalidArgumentError("need at least one trial")
    ss = np.random.SeedSequence(seed)
    start_rng = np.random.default_rng(ss.spawn(1)[0])
    max_start = len(session) - eval_cfg.max_iterations
    if max_start < 1:
        raise InvalidArgumentError(
            f"session too short: {len(session)} frames for "
            f"{eval_cfg.max_iterations} iterations")
    starts = start_rng.integers(0, max_start, size=eval_cfg.trials)
    trial_seeds = ss.spawn(eval_cfg.trials)
    records = []
    for t in range(eval_cfg.trials):
        for method in methods:
            rec = run_localisation_trial(
                method, session, int(starts[t]), ndt_map, predictor,
                train_positions, mcl_cfg, eval_cfg, obs_cfg,
                seed=trial_seeds[t])
            rec["trial"] = t
            records.append(rec)
    aggregates = {"per_method": {}}
    for method in methods:
        recs = [r for r in records if r["method"] == method]
        iters = [r["iterations"] for r in recs if r["success"]]
        aggregates["per_method"][method] = {
            "trials": len(recs),
            "success_rate": _mean([r["success"] for r in recs]),
            "median_iterations_to_success": _median(iters),
            "mean_iterations_to_success": _mean(iters),
            "failures": int(sum(1 - r["success"] for r in recs)),
        }
    ordered_cols = ["trial", "method", "start", "success", "iterations",
                    "final_error_m", "wall_s"]
    records = [{c: r[c] for c in ordered_cols} for r in records]
    return EvalReport("localisation", config_echo or {}, aggregates, records)


def recompute_localisation_aggregates(records) -> dict:
    """Re-derive the per-method aggregates from raw trial records (used to
    cross-check report integrity)."""
    methods = sorted({r["method"] for r in records},
                     key=lambda m: METHODS.index(m))
    out = {"per_method": {}}
    for method in methods:
        recs = [r for r in records if r["method"] == method]
        iters = [r["iterations"] for r in recs if r["success"]]
        out["per_method"][method] = {
            "trials": len(recs),
            "success_rate": _mean([r["success"] for r in recs]),
            "median_iterations_to_success": _median(iters),
            "mean_iterations_to_success": _mean(iters),
            "failures": int(sum(1 - r["success"] for r in recs)),
        }
    return out
