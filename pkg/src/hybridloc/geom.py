"""SE(3) poses, quaternion algebra, and pose-error metrics.

Quaternions are stored in (qx, qy, qz, qw) order throughout the package and
in every file format. All quaternion helpers broadcast over leading axes so
particle sets can be manipulated as arrays.
"""

from __future__ import annotations

import csv

import numpy as np

from .errors import InvalidArgumentError

_UNIT_TOL = 1e-9


# ---------------------------------------------------------------------------
# quaternion helpers (xyzw, batched)
# ---------------------------------------------------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise InvalidArgumentError("cannot normalise a zero quaternion")
    return q / n


def quat_conjugate(q):
    q = np.asarray(q, dtype=float)
    out = q.copy()
    out[..., :3] *= -1.0
    return out


def quat_multiply(q1, q2):
    """Hamilton product q1 * q2, broadcasting over leading axes."""
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    x1, y1, z1, w1 = q1[..., 0], q1[..., 1], q1[..., 2], q1[..., 3]
    x2, y2, z2, w2 = q2[..., 0], q2[..., 1], q2[..., 2], q2[..., 3]
    return np.stack(
        [
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        ],
        axis=-1,
    )


def quat_to_matrix(q):
    """Rotation matrix (…,3,3) of a unit quaternion (…,4)."""
    q = np.asarray(q, dtype=float)
    x, y, z, w = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], axis=-1)
    row1 = np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], axis=-1)
    row2 = np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def quat_rotate(q, v):
    """Rotate vectors v (…,3) by unit quaternions q (…,4)."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    u = q[..., :3]
    w = q[..., 3:4]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * float(angle)
    return np.concatenate([axis * np.sin(half), [np.cos(half)]])


def quat_from_euler(ex, ey, ez):
    """Quaternion of intrinsic x-y-z Euler rotations (radians), broadcasting
    over array-valued angles."""
    ex, ey, ez = np.broadcast_arrays(np.asarray(ex, dtype=float),
                                     np.asarray(ey, dtype=float),
                                     np.asarray(ez, dtype=float))
    zero = np.zeros_like(ex)
    qx = np.stack([np.sin(ex / 2), zero, zero, np.cos(ex / 2)], axis=-1)
    qy = np.stack([zero, np.sin(ey / 2), zero, np.cos(ey / 2)], axis=-1)
    qz = np.stack([zero, zero, np.sin(ez / 2), np.cos(ez / 2)], axis=-1)
    return quat_multiply(quat_multiply(qx, qy), qz)


def quat_from_yaw(yaw):
    """Rotation about +z, batched over yaw angles."""
    yaw = np.asarray(yaw, dtype=float)
    half = 0.5 * yaw
    z = np.zeros_like(half)
    return np.stack([z, z, np.sin(half), np.cos(half)], axis=-1)


def quat_yaw(q):
    """Heading angle (rad) of the body x-axis projected to the xy-plane."""
    fwd = quat_rotate(q, np.array([1.0, 0.0, 0.0]))
    return np.arctan2(fwd[..., 1], fwd[..., 0])


def quat_weighted_mean(quats, weights):
    """Weight-averaged quaternion: dominant eigenvector of sum w q q^T.

    Sign-invariant, so mixing q and -q representations is safe.
    """
    quats = np.asarray(quats, dtype=float)
    weights = np.asarray(weights, dtype=float)
    acc = np.einsum("n,ni,nj->ij", weights, quats, quats)
    vals, vecs = np.linalg.eigh(acc)
    mean = vecs[:, np.argmax(vals)]
    if mean[3] < 0:
        mean = -mean
    return quat_normalize(mean)


# ---------------------------------------------------------------------------
# Pose
# ---------------------------------------------------------------------------

class Pose:
    """Rigid transform: position p (metres) plus unit quaternion r (xyzw).

    The constructor renormalises r and rejects non-finite or strongly
    non-unit input, so every Pose in circulation satisfies ||r|| = 1 within
    1e-9. Instances are treated as immutable values.
    """

    __slots__ = ("p", "r")

    def __init__(self, p, r):
        p = np.asarray(p, dtype=float).reshape(3)
        r = np.asarray(r, dtype=float).reshape(4)
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(r))):
            raise InvalidArgumentError("pose fields must be finite")
        n = np.linalg.norm(r)
        if n < 1e-6:
            raise InvalidArgumentError("quaternion norm too small")
        self.p = p.copy()
        self.r = r / n

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), np.array([0.0, 0.0, 0.0, 1.0]))

    @classmethod
    def from_xyz_yaw(cls, x, y, z, yaw) -> "Pose":
        return cls(np.array([x, y, z], dtype=float), quat_from_yaw(float(yaw)))

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.r)
        m[:3, 3] = self.p
        return m

    def transform(self, points):
        """Map frame-local points (N,3) into the parent frame."""
        return quat_rotate(self.r, np.asarray(points, dtype=float)) + self.p

    def __repr__(self):
        px, py, pz = self.p
        return f"Pose(p=({px:.3f},{py:.3f},{pz:.3f}), r={np.round(self.r, 4)})"


#: A Pose used as a relative transform between two frames.
PoseDelta = Pose


def compose(a: Pose, b: Pose) -> Pose:
    """Rigid composition a ∘ b (apply b in a's frame)."""
    return Pose(a.p + quat_rotate(a.r, b.p), quat_multiply(a.r, b.r))


def inverse(a: Pose) -> Pose:
    rc = quat_conjugate(a.r)
    return Pose(-quat_rotate(rc, a.p), rc)


def delta(a: Pose, b: Pose) -> Pose:
    """Relative transform D with compose(a, D) = b."""
    return compose(inverse(a), b)


# ---------------------------------------------------------------------------
# error metrics
# ---------------------------------------------------------------------------

def angular_distance_loss(r_hat, r_gt) -> float:
    """Quaternion distance surrogate 1 - <r_hat, r_gt>^2, in [0, 1].

    Invariant to a sign flip of either argument (double cover). Used as the
    rotation term of the training loss; report angles via
    :func:`rotational_error` instead.
    """
    d = float(np.dot(np.asarray(r_hat, dtype=float), np.asarray(r_gt, dtype=float)))
    return 1.0 - d * d


def positional_error(a: Pose, b: Pose) -> float:
    return float(np.linalg.norm(a.p - b.p))


def rotational_error(a: Pose, b: Pose) -> float:
    """Geodesic angle between two orientations, in degrees."""
    d = abs(float(np.dot(a.r, b.r)))
    return float(np.degrees(2.0 * np.arccos(min(d, 1.0))))


# ---------------------------------------------------------------------------
# trajectory file I/O
# ---------------------------------------------------------------------------

_TRAJ_HEADER = ["timestamp_s", "px", "py", "pz", "qx", "qy", "qz", "qw"]


def save_trajectory_csv(path, times, poses) -> None:
    """One row per frame: timestamp_s, px, py, pz, qx, qy, qz, qw."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_TRAJ_HEADER)
        for t, pose in zip(times, poses):
            w.writerow([repr(float(t))]
                       + [repr(float(v)) for v in pose.p]
                       + [repr(float(v)) for v in pose.r])


def load_trajectory_csv(path):
    times = []
    poses = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != _TRAJ_HEADER:
            raise InvalidArgumentError(f"unexpected trajectory header: {header}")
        for row in r:
            vals = [float(v) for v in row]
            times.append(vals[0])
            poses.append(Pose(vals[1:4], vals[4:8]))
    return times, poses
