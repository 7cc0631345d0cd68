"""Particle filter: motion/weight/resample primitives, the hybrid step that
fuses GP-seeded particles with the running belief via importance sampling,
and the uniform lattice baseline initialiser."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geom, gp, ndt
from .errors import (CannotInitialiseError, DegenerateWeightsError,
                     InvalidArgumentError)
from .geom import Pose, PoseDelta
from .gp import PosePrediction
from .observation import PointCloud


@dataclass
class Particle:
    pose: Pose
    weight: float


class ParticleSet:
    """Weighted pose hypotheses stored as arrays.

    ``converged`` latches once the weighted position spread drops below the
    configured threshold (it gates GP injection); ``floor_streak`` counts
    consecutive steps in which every particle scored only the outlier floor.
    """

    def __init__(self, positions, quats, weights, generation=0,
                 converged=False, floor_streak=0, rng=None):
        self.positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        self.quats = np.asarray(quats, dtype=float).reshape(-1, 4)
        self.weights = np.asarray(weights, dtype=float).reshape(-1)
        if not (len(self.positions) == len(self.quats) == len(self.weights)):
            raise InvalidArgumentError("particle array lengths disagree")
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise InvalidArgumentError("weights must be finite and nonnegative")
        self.generation = int(generation)
        self.converged = bool(converged)
        self.floor_streak = int(floor_streak)
        self.rng = rng

    @classmethod
    def empty(cls) -> "ParticleSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0))

    @property
    def size(self) -> int:
        return len(self.weights)

    def particle(self, i: int) -> Particle:
        return Particle(Pose(self.positions[i], self.quats[i]), float(self.weights[i]))

    def normalized(self) -> bool:
        return bool(abs(self.weights.sum() - 1.0) < 1e-9)


def estimate(pset: ParticleSet) -> Pose:
    """Weighted mean position plus the eigen-averaged quaternion."""
    if pset.size == 0:
        raise InvalidArgumentError("cannot estimate from an empty particle set")
    w = pset.weights / pset.weights.sum()
    pos = w @ pset.positions
    quat = geom.quat_weighted_mean(pset.quats, w)
    return Pose(pos, quat)


def position_spread_trace(pset: ParticleSet) -> float:
    """Trace of the weighted position covariance (m^2)."""
    w = pset.weights / pset.weights.sum()
    mean = w @ pset.positions
    d = pset.positions - mean
    return float(np.sum(w[:, None] * d * d))


@dataclass
class MotionNoise:
    """Per-axis Gaussian motion noise: sigma = floor + per_unit * |motion|,
    with |motion| the translation length plus rotation angle of the step."""

    trans_per_unit: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rot_per_unit: np.ndarray = field(default_factory=lambda: np.zeros(3))
    trans_floor: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rot_floor: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("trans_per_unit", "rot_per_unit", "trans_floor", "rot_floor"):
            v = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (3,)).copy()
            if np.any(v < 0):
                raise InvalidArgumentError(f"{name} must be nonnegative")
            setattr(self, name, v)

    def sigmas(self, u: PoseDelta):
        mag = float(np.linalg.norm(u.p)) + np.radians(
            geom.rotational_error(Pose.identity(), Pose(np.zeros(3), u.r)))
        return (self.trans_floor + self.trans_per_unit * mag,
                self.rot_floor + self.rot_per_unit * mag)


def motion_update(pset: ParticleSet, u: PoseDelta, noise: MotionNoise,
                  seed=0) -> ParticleSet:
    """Compose every particle with the control delta perturbed by sampled
    noise (translation per axis, rotation as Euler perturbation)."""
    rng = np.random.default_rng(seed)
    n = pset.size
    sig_t, sig_r = noise.sigmas(u)
    dp = u.p + rng.standard_normal((n, 3)) * sig_t
    e = rng.standard_normal((n, 3)) * sig_r
    dq = geom.quat_multiply(np.broadcast_to(u.r, (n, 4)),
                            geom.quat_from_euler(e[:, 0], e[:, 1], e[:, 2]))
    positions = pset.positions + geom.quat_rotate(pset.quats, dp)
    quats = geom.quat_multiply(pset.quats, dq)
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return ParticleSet(positions, quats, pset.weights.copy(), pset.generation,
                       pset.converged, pset.floor_streak, pset.rng)


def weight_update(pset: ParticleSet, ndt_map: ndt.NdtMap, cloud: PointCloud,
                  c1=0.99, c0=0.01, subsample=None, seed=0) -> ParticleSet:
    """Multiply prior weights by the NDT likelihood (max-shifted for
    stability) and normalise. Raises DegenerateWeightsError when the whole
    set ends up with zero mass."""
    pts = cloud.points
    if subsample is not None and len(pts) > subsample:
        rng = np.random.default_rng(seed)
        pts = pts[rng.choice(len(pts), size=subsample, replace=False)]
    ll = ndt.loglik_batch(ndt_map, pts, pset.positions, pset.quats, c1, c0)
    top = ll.max() if len(ll) else -np.inf
    if not np.isfinite(top):
        raise DegenerateWeightsError("all particle likelihoods are zero")
    w = pset.weights * np.exp(ll - top)
    total = w.sum()
    if total <= 0:
        raise DegenerateWeightsError("particle weights collapsed to zero")
    floor_score = len(pts) * np.log(c0) if c0 > 0 else -np.inf
    all_floor = bool(top <= floor_score + 1e-9)
    return ParticleSet(pset.positions.copy(), pset.quats.copy(), w / total,
                       pset.generation, pset.converged,
                       pset.floor_streak + 1 if all_floor else 0, pset.rng)


def resample(pset: ParticleSet, target_size: int, seed=0) -> ParticleSet:
    """Systematic (low-variance) resampling to ``target_size`` particles
    with uniform output weights."""
    if pset.size == 0:
        raise InvalidArgumentError("cannot resample an empty set")
    if target_size < 1:
        raise InvalidArgumentError("target size must be positive")
    total = pset.weights.sum()
    if total <= 0:
        raise DegenerateWeightsError("cannot resample zero-mass weights")
    rng = np.random.default_rng(seed)
    cum = np.cumsum(pset.weights / total)
    cum[-1] = 1.0
    marks = (rng.uniform() + np.arange(target_size)) / target_size
    idx = np.searchsorted(cum, marks, side="left")
    return ParticleSet(pset.positions[idx], pset.quats[idx],
                       np.full(target_size, 1.0 / target_size),
                       pset.generation + 1, pset.converged, pset.floor_streak,
                       pset.rng)


# ---------------------------------------------------------------------------
# hybrid filtering
# ---------------------------------------------------------------------------

@dataclass
class MclConfig:
    n_sys1: int = 500
    n_sys2: int = 500
    max_particles: int = 1000
    injection: str = "until_converged"  # or "always"
    converged_trace: float = 2.0        # m^2
    noise: MotionNoise = field(default_factory=MotionNoise)
    c1: float = 0.99
    c0: float = 0.01
    subsample: int = 200
    rot_spread: tuple | None = None     # None: use the prediction's spread
    floor_reset_steps: int = 3
    fixed_cov: tuple = (70.0, 70.0, 3.0)
    uniform_voxel: float = 0.2
    uniform_yaws: int = 8
    uniform_fraction: float = 0.6
    uniform_min_particles: int = 1000

    def __post_init__(self):
        if self.injection not in ("until_converged", "always"):
            raise InvalidArgumentError(f"unknown injection policy {self.injection!r}")


def _seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def hybrid_step(state: ParticleSet | None, prediction: PosePrediction | None,
                u: PoseDelta | None, cloud: PointCloud, ndt_map: ndt.NdtMap,
                cfg: MclConfig, seed=0):
    """One filter iteration: inject GP-drawn particles (policy permitting),
    apply motion and NDT weighting, read the estimate off the weighted set,
    then resample back to the nominal size.

    Returns (new state, pose estimate). After ``floor_reset_steps``
    consecutive all-floor weightings the state comes back empty so the
    caller reseeds from the next prediction.
    """
    ss = _seed_sequence(seed)
    seed_draw, seed_motion, seed_sub, seed_res = ss.spawn(4)
    sys2 = state if state is not None else ParticleSet.empty()
    inject = prediction is not None and (
        cfg.injection == "always" or not sys2.converged or sys2.size == 0)
    n_inject = min(cfg.n_sys1, cfg.max_particles - sys2.size) if inject else 0
    if sys2.size == 0 and n_inject <= 0:
        raise CannotInitialiseError("empty belief and no seed distribution")
    if n_inject > 0:
        pos, quats = gp.sample_poses(prediction, n_inject, seed=seed_draw,
                                     rot_spread=cfg.rot_spread)
        w_new = np.full(n_inject, 1.0 / sys2.size if sys2.size else 1.0)
        merged = ParticleSet(
            np.concatenate([sys2.positions, pos]),
            np.concatenate([sys2.quats, quats]),
            np.concatenate([sys2.weights, w_new]),
            sys2.generation, sys2.converged, sys2.floor_streak)
    else:
        merged = sys2
    merged = ParticleSet(merged.positions, merged.quats,
                         merged.weights / merged.weights.sum(),
                         merged.generation, merged.converged, merged.floor_streak)
    if u is not None:
        merged = motion_update(merged, u, cfg.noise, seed=seed_motion)
    weighted = weight_update(merged, ndt_map, cloud, cfg.c1, cfg.c0,
                             cfg.subsample, seed=seed_sub)
    est = estimate(weighted)
    if weighted.floor_streak >= cfg.floor_reset_steps:
        return ParticleSet.empty(), est
    converged = weighted.converged or (position_spread_trace(weighted)
                                       < cfg.converged_trace)
    out = resample(weighted, cfg.n_sys2, seed=seed_res)
    out.converged = converged
    return out, est


def uniform_baseline_init(train_positions, cfg: MclConfig) -> ParticleSet:
    """Deterministic global lattice: 3x3x3 voxel offsets around every
    explored position, deduplicated on the same voxel grid, with evenly
    spaced yaw hypotheses at each surviving point."""
    pts = np.asarray(train_positions, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise InvalidArgumentError("need at least one training position")
    v = cfg.uniform_voxel
    offsets = np.array([(i, j, k) for i in (-v, 0, v) for j in (-v, 0, v)
                        for k in (-v, 0, v)])
    seeded = (pts[:, None, :] + offsets[None, :, :]).reshape(-1, 3)
    keys = np.unique(np.floor(seeded / v).astype(np.int64), axis=0)
    centers = (keys + 0.5) * v
    yaw = 2.0 * np.pi * np.arange(cfg.uniform_yaws) / cfg.uniform_yaws
    positions = np.repeat(centers, cfg.uniform_yaws, axis=0)
    quats = np.tile(geom.quat_from_yaw(yaw), (len(centers), 1))
    n = len(positions)
    return ParticleSet(positions, quats, np.full(n, 1.0 / n))


def uniform_baseline_step(state: ParticleSet, u: PoseDelta | None,
                          cloud: PointCloud, ndt_map: ndt.NdtMap,
                          cfg: MclConfig, seed=0):
    """Plain NDT-MCL iteration for the baseline: motion, weight, then a
    resampling step that shrinks the set by ``uniform_fraction`` until the
    minimum particle count is reached."""
    ss = _seed_sequence(seed)
    seed_motion, seed_sub, seed_res = ss.spawn(3)
    cur = state
    if u is not None:
        cur = motion_update(cur, u, cfg.noise, seed=seed_motion)
    weighted = weight_update(cur, ndt_map, cloud, cfg.c1, cfg.c0,
                             cfg.subsample, seed=seed_sub)
    est = estimate(weighted)
    target = max(int(np.floor(weighted.size * cfg.uniform_fraction)),
                 cfg.uniform_min_particles)
    target = min(target, weighted.size)
    out = resample(weighted, target, seed=seed_res)
    out.converged = (position_spread_trace(weighted) < cfg.converged_trace)
    return out, est


def fixed_covariance_seed(center: Pose, fixed_cov=(70.0, 70.0, 3.0),
                          rot_spread=gp.DEFAULT_ROT_SPREAD) -> PosePrediction:
    """PosePrediction with a fixed diagonal position covariance, for the
    fixed-covariance ablation."""
    return PosePrediction(center.p.copy(), np.diag(np.asarray(fixed_cov, dtype=float)),
                          center.r.copy(), np.asarray(rot_spread, dtype=float))
