"""Observation building: scan superimposition, bird's-eye-view rasterisation,
crop augmentation, and ray-cast scan simulation against a landmark world."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import geom, kernels
from .errors import FormatError, InvalidArgumentError, OutOfBoundsError
from .geom import Pose, PoseDelta


@dataclass
class PointCloud:
    """3D points (N,3) in frame-local metres."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidArgumentError(f"points must be (N,3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidArgumentError("points must be finite")
        self.points = pts

    def __len__(self):
        return self.points.shape[0]


def transform_cloud(cloud: PointCloud, delta: PoseDelta) -> PointCloud:
    return PointCloud(delta.transform(cloud.points))


def superimpose(frames, current: PointCloud) -> PointCloud:
    """Union of past clouds mapped into the current frame, plus the current
    cloud. ``frames`` is a sequence of (PointCloud, PoseDelta) where each
    delta is the relative transform from that frame to the current one."""
    parts = [transform_cloud(c, d).points for c, d in frames]
    parts.append(current.points)
    return PointCloud(np.concatenate(parts, axis=0))


@dataclass
class BevImage:
    """Square grayscale height raster of a point cloud, values in [0,1].

    ``origin`` is the pose of the image centre in whatever frame the source
    cloud lived in; ``resolution`` is metres per pixel.
    """

    cells: np.ndarray
    resolution: float
    origin: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=float)
        if cells.ndim != 2 or cells.shape[0] != cells.shape[1]:
            raise InvalidArgumentError(f"BEV image must be square, got {cells.shape}")
        if cells.size and (cells.min() < -1e-12 or cells.max() > 1 + 1e-12):
            raise InvalidArgumentError("BEV cells must lie in [0,1]")
        self.cells = cells

    @property
    def size(self) -> int:
        return self.cells.shape[0]


def rasterise(cloud: PointCloud, scope=(100.0, 100.0, 10.0), resolution=0.4,
              origin: Pose | None = None) -> BevImage:
    """Rasterise a cloud into a BEV height image centred on the local origin.

    Each pixel holds the max point height in its column, min-max normalised
    over the occupied pixels of the image; empty pixels are 0. Points
    outside the (sx, sy, sz) scope box are discarded. sx and sy must agree
    (square image).
    """
    sx, sy, sz = (float(v) for v in scope)
    if resolution <= 0 or sx <= 0 or sy <= 0 or sz <= 0:
        raise InvalidArgumentError("scope and resolution must be positive")
    if abs(sx - sy) > 1e-12:
        raise InvalidArgumentError("BEV scope must be square in x/y")
    n = int(round(sx / resolution))
    pts = cloud.points
    if len(cloud):
        keep = (
            (pts[:, 0] >= -sx / 2) & (pts[:, 0] < sx / 2)
            & (pts[:, 1] >= -sy / 2) & (pts[:, 1] < sy / 2)
            & (np.abs(pts[:, 2]) <= sz / 2)
        )
        pts = pts[keep]
    if pts.shape[0] == 0:
        return BevImage(np.zeros((n, n)), resolution, origin or Pose.identity())
    cols = np.floor((pts[:, 0] + sx / 2) / resolution).astype(np.int64)
    rows = np.floor((pts[:, 1] + sy / 2) / resolution).astype(np.int64)
    cols = np.minimum(cols, n - 1)  # guard the x==sx/2-epsilon float edge
    rows = np.minimum(rows, n - 1)
    grid = kernels.bev_max(pts[:, 2].copy(), rows, cols, n, n)
    occupied = np.isfinite(grid)
    heights = grid[occupied]
    lo, hi = heights.min(), heights.max()
    cells = np.zeros((n, n))
    if hi - lo < 1e-12:
        cells[occupied] = 1.0
    else:
        cells[occupied] = (heights - lo) / (hi - lo)
    return BevImage(cells, resolution, origin or Pose.identity())


def center_crop(img: BevImage, crop_px: int) -> BevImage:
    cropped, _ = _crop_at(img, crop_px, 0, 0)
    return cropped


def random_crop(img: BevImage, crop_px: int, seed, max_offset_m: float = 12.5):
    """Crop a window at a random integer-pixel offset from the centre.

    Returns the cropped image and the PoseDelta (pure translation, image
    frame) to apply to the pose target so the pair stays consistent.
    Offsets are clamped so the implied translation stays within
    ``max_offset_m`` per axis.
    """
    if crop_px > img.size:
        raise InvalidArgumentError(f"crop {crop_px} exceeds image size {img.size}")
    rng = np.random.default_rng(seed)
    lim = min((img.size - crop_px) // 2, int(np.floor(max_offset_m / img.resolution)))
    ox, oy = (int(v) for v in rng.integers(-lim, lim + 1, size=2)) if lim > 0 else (0, 0)
    return _crop_at(img, crop_px, ox, oy)


def _crop_at(img: BevImage, crop_px: int, ox: int, oy: int):
    if crop_px > img.size:
        raise InvalidArgumentError(f"crop {crop_px} exceeds image size {img.size}")
    base = (img.size - crop_px) // 2
    r0 = base + oy
    c0 = base + ox
    cells = img.cells[r0:r0 + crop_px, c0:c0 + crop_px].copy()
    offset = PoseDelta(
        np.array([ox * img.resolution, oy * img.resolution, 0.0]),
        np.array([0.0, 0.0, 0.0, 1.0]),
    )
    return BevImage(cells, img.resolution, geom.compose(img.origin, offset)), offset


# ---------------------------------------------------------------------------
# synthetic scanning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SensorConfig:
    """Spinning range sensor: evenly spaced azimuths per elevation ring."""

    azimuth_count: int = 120
    elevation_deg: tuple = (-2.0, 1.0, 4.0, 7.0, 10.0, 13.0)
    max_range: float = 80.0

    def directions(self) -> np.ndarray:
        az = np.linspace(0.0, 2.0 * np.pi, self.azimuth_count, endpoint=False)
        out = []
        for e in self.elevation_deg:
            el = np.radians(e)
            out.append(
                np.stack(
                    [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az),
                     np.full_like(az, np.sin(el))],
                    axis=-1,
                )
            )
        return np.concatenate(out, axis=0)


def simulate_scan(world, pose: Pose, sensor: SensorConfig,
                  noise_sigma: float = 0.0, seed=0) -> PointCloud:
    """Ray-cast a scan of ``world`` from ``pose``; returns sensor-frame points.

    ``world`` must expose ``boxes`` (B,6 AABB rows) and ``contains(p)``.
    Each returned point is the first box intersection along its beam plus
    isotropic Gaussian noise of std ``noise_sigma``. Deterministic per seed.
    """
    if not world.contains(pose.p):
        raise OutOfBoundsError(f"sensor pose {pose.p} outside world bounds")
    d_local = sensor.directions()
    d_world = geom.quat_rotate(pose.r, d_local)
    t = kernels.raycast(pose.p, d_world, world.boxes, sensor.max_range)
    hit = np.isfinite(t)
    pts = t[hit, None] * d_local[hit]
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        pts = pts + rng.normal(0.0, noise_sigma, size=pts.shape)
    return PointCloud(pts)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def save_cloud(cloud: PointCloud, path) -> None:
    """Binary little-endian: u32 count, then count x 3 float64."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(cloud)))
        fh.write(np.ascontiguousarray(cloud.points, dtype="<f8").tobytes())


def load_cloud(path) -> PointCloud:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated point cloud file")
    (count,) = struct.unpack_from("<I", raw, 0)
    expect = 4 + count * 24
    if len(raw) != expect:
        raise FormatError(f"{path}: expected {expect} bytes for {count} points, got {len(raw)}")
    pts = np.frombuffer(raw, dtype="<f8", offset=4).reshape(count, 3)
    return PointCloud(pts.astype(float))


def save_pgm(img: BevImage, path) -> None:
    """8-bit binary PGM export for eyeballing rasters."""
    data = np.clip(np.round(img.cells * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.size} {img.size}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
