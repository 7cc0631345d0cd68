"""Dual-backend numeric kernels.

Every public function here dispatches on :mod:`hybridloc.backend`: the loop
implementations (``*_loops``) are compiled with numba's ``@njit`` on first
use, the ``*_numpy`` versions are vectorised fallbacks. Both compute the
same quantity; tests assert agreement to float precision.

Kernels:
  - ``ndt_loglik``:  NDT measurement log-likelihood for a batch of particles.
  - ``raycast``:     first-hit distances of rays against axis-aligned boxes.
  - ``bev_max``:     per-pixel max-height scatter for BEV rasterisation.
"""

import numpy as np

from . import backend

_EPS_DIR = 1e-12
_EPS_T = 1e-9


# ---------------------------------------------------------------------------
# plain-python loop bodies (njit-compiled lazily)
# ---------------------------------------------------------------------------

def _ndt_loglik_loops(points, rots, trans, grid, origin, cell, means, precs, c1, c0):
    n = rots.shape[0]
    m = points.shape[0]
    dx, dy, dz = grid.shape
    out = np.empty(n)
    for i in range(n):
        r00 = rots[i, 0, 0]; r01 = rots[i, 0, 1]; r02 = rots[i, 0, 2]
        r10 = rots[i, 1, 0]; r11 = rots[i, 1, 1]; r12 = rots[i, 1, 2]
        r20 = rots[i, 2, 0]; r21 = rots[i, 2, 1]; r22 = rots[i, 2, 2]
        tx = trans[i, 0]; ty = trans[i, 1]; tz = trans[i, 2]
        total = 0.0
        for j in range(m):
            ax = points[j, 0]; ay = points[j, 1]; az = points[j, 2]
            px = r00 * ax + r01 * ay + r02 * az + tx
            py = r10 * ax + r11 * ay + r12 * az + ty
            pz = r20 * ax + r21 * ay + r22 * az + tz
            ix = int(np.floor((px - origin[0]) / cell))
            iy = int(np.floor((py - origin[1]) / cell))
            iz = int(np.floor((pz - origin[2]) / cell))
            val = c0
            if 0 <= ix < dx and 0 <= iy < dy and 0 <= iz < dz:
                k = grid[ix, iy, iz]
                if k >= 0:
                    ex = px - means[k, 0]
                    ey = py - means[k, 1]
                    ez = pz - means[k, 2]
                    q = (ex * (precs[k, 0, 0] * ex + precs[k, 0, 1] * ey + precs[k, 0, 2] * ez)
                         + ey * (precs[k, 1, 0] * ex + precs[k, 1, 1] * ey + precs[k, 1, 2] * ez)
                         + ez * (precs[k, 2, 0] * ex + precs[k, 2, 1] * ey + precs[k, 2, 2] * ez))
                    val = c1 * np.exp(-0.5 * q) + c0
            total += np.log(val)
        out[i] = total
    return out


def _raycast_loops(origin, dirs, boxes, max_range):
    n = dirs.shape[0]
    nb = boxes.shape[0]
    out = np.full(n, np.inf)
    for i in range(n):
        best = np.inf
        for b in range(nb):
            tnear = -np.inf
            tfar = np.inf
            ok = True
            for ax in range(3):
                d = dirs[i, ax]
                o = origin[ax]
                lo = boxes[b, ax]
                hi = boxes[b, 3 + ax]
                if abs(d) < _EPS_DIR:
                    if o < lo or o > hi:
                        ok = False
                        break
                else:
                    t1 = (lo - o) / d
                    t2 = (hi - o) / d
                    if t1 > t2:
                        t1, t2 = t2, t1
                    if t1 > tnear:
                        tnear = t1
                    if t2 < tfar:
                        tfar = t2
                    if tnear > tfar:
                        ok = False
                        break
            if ok and tnear <= tfar and tnear > _EPS_T and tnear <= max_range:
                if tnear < best:
                    best = tnear
        out[i] = best
    return out


def _bev_max_loops(zs, rows, cols, height, width):
    out = np.full((height, width), -np.inf)
    for j in range(zs.shape[0]):
        r = rows[j]
        c = cols[j]
        if zs[j] > out[r, c]:
            out[r, c] = zs[j]
    return out


# ---------------------------------------------------------------------------
# vectorised numpy fallbacks
# ---------------------------------------------------------------------------

def _ndt_loglik_numpy(points, rots, trans, grid, origin, cell, means, precs, c1, c0,
                      chunk=4096):
    n = rots.shape[0]
    out = np.empty(n)
    dims = np.asarray(grid.shape, dtype=np.int64)
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        pw = np.einsum("nij,pj->npi", rots[s:e], points) + trans[s:e, None, :]
        idx = np.floor((pw - origin) / cell).astype(np.int64)
        inb = np.all((idx >= 0) & (idx < dims), axis=-1)
        cidx = np.full(pw.shape[:2], -1, dtype=np.int64)
        ii = idx[inb]
        cidx[inb] = grid[ii[:, 0], ii[:, 1], ii[:, 2]]
        act = cidx >= 0
        val = np.full(pw.shape[:2], c0)
        if np.any(act):
            d = pw[act] - means[cidx[act]]
            q = np.einsum("ki,kij,kj->k", d, precs[cidx[act]], d)
            val[act] = c1 * np.exp(-0.5 * q) + c0
        with np.errstate(divide="ignore"):
            out[s:e] = np.sum(np.log(val), axis=1)
    return out


def _raycast_numpy(origin, dirs, boxes, max_range):
    lo = boxes[:, :3]
    hi = boxes[:, 3:]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs  # (R,3), +-inf on zero components
        t1 = (lo[None, :, :] - origin) * inv[:, None, :]
        t2 = (hi[None, :, :] - origin) * inv[:, None, :]
    near = np.minimum(t1, t2)
    far = np.maximum(t1, t2)
    # zero-direction axes constrain only through origin-in-slab membership
    zero = np.abs(dirs) < _EPS_DIR  # (R,3)
    inside = (origin >= lo[None, :, :]) & (origin <= hi[None, :, :])  # (1|R,B,3)
    zmask = np.broadcast_to(zero[:, None, :], near.shape)
    inside = np.broadcast_to(inside, near.shape)
    near = np.where(zmask, np.where(inside, -np.inf, np.inf), near)
    far = np.where(zmask, np.where(inside, np.inf, -np.inf), far)
    tnear = near.max(axis=2)
    tfar = far.min(axis=2)
    hit = (tnear <= tfar) & (tnear > _EPS_T) & (tnear <= max_range)
    t = np.where(hit, tnear, np.inf)
    return t.min(axis=1)


def _bev_max_numpy(zs, rows, cols, height, width):
    out = np.full((height, width), -np.inf)
    np.maximum.at(out, (rows, cols), zs)
    return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

_jitted: dict = {}


def _jit(name, func):
    if name not in _jitted:
        from numba import njit

        _jitted[name] = njit(cache=True)(func)
    return _jitted[name]


def ndt_loglik(points, rots, trans, grid, origin, cell, means, precs, c1, c0):
    """Sum of per-point NDT mixture log-scores for each particle.

    points: (P,3) sensor-frame points. rots/trans: (N,3,3)/(N,3) particle
    poses. grid: dense int32 cell index (-1 = no active cell), anchored at
    ``origin`` with spacing ``cell``. means/precs: per active cell Gaussian
    mean and precision. Per point the score is c1*exp(-0.5 d'P d) + c0, or
    c0 alone outside active cells; returns (N,) sums of log-scores.
    """
    args = (points, rots, trans, grid, origin, cell, means, precs, c1, c0)
    if backend.use_numba():
        return _jit("ndt", _ndt_loglik_loops)(*args)
    return _ndt_loglik_numpy(*args)


def raycast(origin, dirs, boxes, max_range):
    """First-hit distance per ray against a set of AABBs (inf = miss).

    origin: (3,) world start. dirs: (R,3) unit directions. boxes: (B,6)
    rows of (minx,miny,minz,maxx,maxy,maxz). Hits behind the origin or
    beyond ``max_range`` are misses; rays starting inside a box do not hit
    that box.
    """
    args = (origin, dirs, boxes, max_range)
    if backend.use_numba():
        return _jit("raycast", _raycast_loops)(*args)
    return _raycast_numpy(*args)


def bev_max(zs, rows, cols, height, width):
    """Scatter-max of point heights into an image grid (-inf = empty cell)."""
    args = (zs, rows, cols, height, width)
    if backend.use_numba():
        return _jit("bev", _bev_max_loops)(*args)
    return _bev_max_numpy(*args)
