"""Normal-distributions-transform map: per-voxel Gaussians built from posed
scans, and the point-to-map measurement log-likelihood used for particle
weights."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import geom, kernels
from .errors import FormatError, InvalidArgumentError
from .geom import Pose
from .observation import PointCloud

MAGIC = b"NDTM"
VERSION = 1
EIG_FLOOR = 1e-6  # m^2, minimum covariance eigenvalue for active cells


@dataclass
class NdtCell:
    mean: np.ndarray
    cov: np.ndarray
    count: int


class NdtMap:
    """Sparse voxel grid of Gaussians plus a dense index for fast lookups.

    ``keys`` are integer voxel coordinates (floor of world position divided
    by ``cell_size``). Cells with at least ``min_points`` points are active:
    their covariance is eigenvalue-floored to stay invertible and they carry
    a precision matrix for scoring. Cells below the threshold are stored
    (and serialised) but contribute only the outlier floor to likelihoods.
    """

    def __init__(self, cell_size, keys, means, covs, counts, min_points=3):
        self.cell_size = float(cell_size)
        self.min_points = int(min_points)
        order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0])) if len(keys) else []
        self.keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)[order]
        self.means = np.asarray(means, dtype=float).reshape(-1, 3)[order]
        self.covs = np.asarray(covs, dtype=float).reshape(-1, 3, 3)[order]
        self.counts = np.asarray(counts, dtype=np.int64).reshape(-1)[order]
        self.active = self.counts >= self.min_points
        self._index = {tuple(k): i for i, k in enumerate(self.keys)}
        self._build_grid()

    def _build_grid(self):
        act = self.active
        if not np.any(act):
            self._grid = np.full((1, 1, 1), -1, dtype=np.int32)
            self._grid_origin = np.zeros(3)
            self._act_means = np.zeros((0, 3))
            self._act_precs = np.zeros((0, 3, 3))
            return
        akeys = self.keys[act]
        gmin = akeys.min(axis=0)
        dims = akeys.max(axis=0) - gmin + 1
        grid = np.full(tuple(dims), -1, dtype=np.int32)
        rel = akeys - gmin
        grid[rel[:, 0], rel[:, 1], rel[:, 2]] = np.arange(len(akeys), dtype=np.int32)
        self._grid = grid
        self._grid_origin = gmin.astype(float) * self.cell_size
        self._act_means = np.ascontiguousarray(self.means[act])
        self._act_precs = np.ascontiguousarray(np.linalg.inv(self.covs[act]))

    @property
    def n_cells(self) -> int:
        return len(self.keys)

    @property
    def n_active(self) -> int:
        return int(self.active.sum())

    @property
    def bounds(self):
        """World-coordinate (min, max) corners of the occupied voxels."""
        if not len(self.keys):
            return np.zeros(3), np.zeros(3)
        return (self.keys.min(axis=0) * self.cell_size,
                (self.keys.max(axis=0) + 1) * self.cell_size)

    def cell_at(self, key) -> NdtCell | None:
        i = self._index.get(tuple(int(v) for v in key))
        if i is None:
            return None
        return NdtCell(self.means[i].copy(), self.covs[i].copy(), int(self.counts[i]))


def build_map(clouds, poses, cell_size=1.0, min_points=3) -> NdtMap:
    """Accumulate posed scans into per-voxel sample statistics.

    Every point lands in exactly one voxel; a voxel's mean/covariance are
    the sample mean and (n-1)-normalised sample covariance of its points.
    Active-cell covariances get an eigenvalue floor so Cholesky/inversion
    always succeeds.
    """
    if len(clouds) != len(poses):
        raise InvalidArgumentError(f"{len(clouds)} clouds vs {len(poses)} poses")
    parts = [pose.transform(cloud.points) for cloud, pose in zip(clouds, poses)
             if len(cloud)]
    if not parts:
        return NdtMap(cell_size, np.zeros((0, 3), dtype=np.int64),
                      np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros(0),
                      min_points)
    pts = np.concatenate(parts, axis=0)
    idx = np.floor(pts / cell_size).astype(np.int64)
    keys, inv = np.unique(idx, axis=0, return_inverse=True)
    n_cells = len(keys)
    counts = np.bincount(inv, minlength=n_cells)
    sums = np.zeros((n_cells, 3))
    np.add.at(sums, inv, pts)
    means = sums / counts[:, None]
    outer = np.zeros((n_cells, 3, 3))
    np.add.at(outer, inv, pts[:, None, :] * pts[:, :, None])
    covs = np.zeros((n_cells, 3, 3))
    multi = counts >= 2
    cm = counts[multi].astype(float)
    centered = outer[multi] - cm[:, None, None] * (means[multi, :, None]
                                                   * means[multi, None, :])
    covs[multi] = centered / (cm - 1.0)[:, None, None]
    covs = 0.5 * (covs + covs.transpose(0, 2, 1))
    active = counts >= min_points
    if np.any(active):
        vals, vecs = np.linalg.eigh(covs[active])
        vals = np.maximum(vals, EIG_FLOOR)
        reg = np.einsum("cij,cj,ckj->cik", vecs, vals, vecs)
        covs[active] = 0.5 * (reg + reg.transpose(0, 2, 1))  # exact symmetry
    return NdtMap(cell_size, keys, means, covs, counts, min_points)


def loglik_batch(ndt_map: NdtMap, points, positions, quats,
                 c1=0.99, c0=0.01) -> np.ndarray:
    """NDT measurement log-likelihood of sensor-frame ``points`` under each
    particle pose. Per point the score is c1*exp(-0.5 d'P d) + c0 inside an
    active voxel, else c0; the result is the per-particle sum of log scores.
    """
    points = np.ascontiguousarray(points, dtype=float)
    positions = np.ascontiguousarray(positions, dtype=float).reshape(-1, 3)
    rots = np.ascontiguousarray(geom.quat_to_matrix(np.asarray(quats, dtype=float)))
    if rots.ndim == 2:
        rots = rots[None]
    if points.shape[0] == 0:
        return np.zeros(positions.shape[0])
    return kernels.ndt_loglik(points, rots, positions, ndt_map._grid,
                              ndt_map._grid_origin, ndt_map.cell_size,
                              ndt_map._act_means, ndt_map._act_precs,
                              float(c1), float(c0))


def measurement_likelihood(ndt_map: NdtMap, cloud: PointCloud, pose: Pose,
                           c1=0.99, c0=0.01, subsample=None, seed=0) -> float:
    """Log-likelihood of one scan at one pose, optionally on a seeded point
    subsample (without replacement)."""
    pts = cloud.points
    if subsample is not None and len(pts) > subsample:
        rng = np.random.default_rng(seed)
        pts = pts[rng.choice(len(pts), size=subsample, replace=False)]
    return float(loglik_batch(ndt_map, pts, pose.p[None], pose.r, c1, c0)[0])


# ---------------------------------------------------------------------------
# map file format
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sId6d I")  # magic, version, cell_size, bounds, n_cells
_CELL = struct.Struct("<3i 3d 6d I")

_TRIU = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]


def save_map(ndt_map: NdtMap, path) -> None:
    lo, hi = ndt_map.bounds
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, ndt_map.cell_size,
                              *lo, *hi, ndt_map.n_cells))
        for i in range(ndt_map.n_cells):
            tri = [ndt_map.covs[i][a, b] for a, b in _TRIU]
            fh.write(_CELL.pack(*ndt_map.keys[i], *ndt_map.means[i], *tri,
                                int(ndt_map.counts[i])))


def load_map(path, min_points=3) -> NdtMap:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated map file")
    magic, version, cell_size, *rest = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: map version {version}, expected {VERSION}")
    n_cells = int(rest[-1])
    if len(raw) != _HEADER.size + n_cells * _CELL.size:
        raise FormatError(f"{path}: size mismatch for {n_cells} cells")
    keys = np.zeros((n_cells, 3), dtype=np.int64)
    means = np.zeros((n_cells, 3))
    covs = np.zeros((n_cells, 3, 3))
    counts = np.zeros(n_cells, dtype=np.int64)
    off = _HEADER.size
    for i in range(n_cells):
        vals = _CELL.unpack_from(raw, off)
        off += _CELL.size
        keys[i] = vals[0:3]
        means[i] = vals[3:6]
        for (a, b), v in zip(_TRIU, vals[6:12]):
            covs[i, a, b] = v
            covs[i, b, a] = v
        counts[i] = vals[12]
    return NdtMap(cell_size, keys, means, covs, counts, min_points)
