import numpy as np
import pytest

from hybridloc import geom, ndt
from hybridloc.errors import FormatError, InvalidArgumentError
from hybridloc.geom import Pose
from hybridloc.observation import PointCloud


def brute_force_loglik(ndt_map, points, pose, c1, c0):
    """Independent oracle: per-point Gaussian mixture evaluated directly."""
    total = 0.0
    for p in pose.transform(points):
        key = tuple(np.floor(p / ndt_map.cell_size).astype(int))
        cell = ndt_map.cell_at(key)
        val = c0
        if cell is not None and cell.count >= ndt_map.min_points:
            d = p - cell.mean
            val = c1 * np.exp(-0.5 * d @ np.linalg.inv(cell.cov) @ d) + c0
        with np.errstate(divide="ignore"):
            total += np.log(val)
    return total


class TestBuildMap:
    def test_identical_points_floor_covariance(self):
        pts = np.tile([[0.3, 0.4, 0.5]], (20, 1))
        m = ndt.build_map([PointCloud(pts)], [Pose.identity()], cell_size=1.0)
        assert m.n_cells == 1
        cell = m.cell_at((0, 0, 0))
        np.testing.assert_allclose(cell.mean, [0.3, 0.4, 0.5], atol=1e-12)
        vals = np.linalg.eigvalsh(cell.cov)
        np.testing.assert_allclose(vals, ndt.EIG_FLOOR, atol=1e-15)

    def test_sample_statistics_oracle(self):
        rng = np.random.default_rng(0)
        n = 10_000
        true_mean = np.array([0.5, 0.5, 0.5])
        sigma = 0.05
        pts = rng.normal(true_mean, sigma, size=(n, 3))
        m = ndt.build_map([PointCloud(pts)], [Pose.identity()], cell_size=1.0)
        assert m.n_cells == 1
        cell = m.cell_at((0, 0, 0))
        se_mean = sigma / np.sqrt(n)
        assert np.all(np.abs(cell.mean - true_mean) < 3 * se_mean)
        se_var = sigma**2 * np.sqrt(2.0 / n)
        assert np.all(np.abs(np.diag(cell.cov) - sigma**2) < 3.5 * se_var)

    def test_split_equals_concatenated(self):
        rng = np.random.default_rng(1)
        pts = rng.uniform(-3, 3, size=(200, 3))
        whole = ndt.build_map([PointCloud(pts)], [Pose.identity()])
        split = ndt.build_map([PointCloud(pts[:90]), PointCloud(pts[90:])],
                              [Pose.identity(), Pose.identity()])
        np.testing.assert_array_equal(whole.keys, split.keys)
        np.testing.assert_allclose(whole.means, split.means, atol=1e-12)
        np.testing.assert_allclose(whole.covs, split.covs, atol=1e-12)

    def test_poses_applied(self):
        pts = np.tile([[1.0, 0.0, 0.0]], (5, 1))
        pose = Pose.from_xyz_yaw(0.0, 0.0, 0.0, np.pi / 2)  # x -> y
        m = ndt.build_map([PointCloud(pts)], [pose])
        assert m.cell_at((0, 1, 0)) is not None

    def test_length_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            ndt.build_map([PointCloud(np.zeros((1, 3)))], [])

    def test_inactive_below_min_points(self):
        pts = np.array([[0.5, 0.5, 0.5], [0.6, 0.5, 0.5]])
        m = ndt.build_map([PointCloud(pts)], [Pose.identity()], min_points=3)
        assert m.n_cells == 1
        assert m.n_active == 0


class TestLikelihood:
    def _scene_map(self, rng, n=400):
        pts = rng.uniform(-4, 4, size=(n, 3))
        return ndt.build_map([PointCloud(pts)], [Pose.identity()]), pts

    def test_point_at_mean_max_score(self):
        pts = np.tile([[0.5, 0.5, 0.5]], (10, 1))
        m = ndt.build_map([PointCloud(pts)], [Pose.identity()])
        cell = m.cell_at((0, 0, 0))
        ll = ndt.measurement_likelihood(m, PointCloud(cell.mean[None]),
                                        Pose.identity(), c1=0.99, c0=0.01)
        assert ll == pytest.approx(np.log(0.99 + 0.01), abs=1e-12)

    def test_empty_cells_floor(self):
        pts = np.tile([[0.5, 0.5, 0.5]], (10, 1))
        m = ndt.build_map([PointCloud(pts)], [Pose.identity()])
        cloud = PointCloud(np.array([[50.0, 50.0, 50.0], [60.0, 0.0, 0.0]]))
        ll = ndt.measurement_likelihood(m, cloud, Pose.identity(), c1=0.99, c0=0.01)
        assert ll == pytest.approx(2 * np.log(0.01), abs=1e-12)

    def test_hand_evaluated_exponent(self):
        # one cell with identity covariance, offset (1,0,0), c1=1, c0=0
        keys = np.array([[0, 0, 0]])
        means = np.array([[0.5, 0.5, 0.5]])
        covs = np.eye(3)[None]
        m = ndt.NdtMap(10.0, keys, means, covs, np.array([10]))
        cloud = PointCloud(means + np.array([[1.0, 0.0, 0.0]]))
        ll = ndt.measurement_likelihood(m, cloud, Pose.identity(), c1=1.0, c0=0.0)
        assert ll == pytest.approx(-0.5, abs=1e-12)

    def test_brute_force_equivalence(self):
        rng = np.random.default_rng(2)
        for trial in range(10):
            centers = rng.integers(-2, 3, size=(rng.integers(2, 10), 3)).astype(float)
            pts = np.concatenate([c + rng.normal(0, 0.2, size=(6, 3)) for c in centers])
            m = ndt.build_map([PointCloud(pts)], [Pose.identity()], cell_size=1.0)
            assert m.n_cells <= 10 or True
            cloud = PointCloud(rng.uniform(-3, 3, size=(10, 3)))
            pose = Pose(rng.normal(0, 0.5, 3),
                        geom.quat_normalize(rng.normal(size=4)))
            got = ndt.measurement_likelihood(m, cloud, pose, c1=0.7, c0=0.05)
            want = brute_force_loglik(m, cloud.points, pose, c1=0.7, c0=0.05)
            assert got == pytest.approx(want, abs=1e-12)

    def test_true_pose_dominates_perturbations(self):
        rng = np.random.default_rng(3)
        # structured scene: three wall-like point slabs
        walls = [
            np.stack([np.full(300, 5.0), rng.uniform(-6, 6, 300), rng.uniform(0, 3, 300)], 1),
            np.stack([rng.uniform(-6, 6, 300), np.full(300, -4.0), rng.uniform(0, 3, 300)], 1),
            np.stack([rng.uniform(-6, 0, 300), np.full(300, 6.0), rng.uniform(0, 3, 300)], 1),
        ]
        scene = np.concatenate(walls)
        true_pose = Pose.from_xyz_yaw(0.5, 0.3, 1.0, 0.2)
        local = geom.inverse(true_pose).transform(scene)
        m = ndt.build_map([PointCloud(scene)], [Pose.identity()], cell_size=1.0)
        cloud = PointCloud(local)
        best = ndt.measurement_likelihood(m, cloud, true_pose)
        for k in range(120):
            r = rng.uniform(0.5, 5.0)
            ang = rng.uniform(0, 2 * np.pi)
            dp = np.array([r * np.cos(ang), r * np.sin(ang), rng.uniform(-0.5, 0.5)])
            pert = Pose(true_pose.p + dp, true_pose.r)
            assert ndt.measurement_likelihood(m, cloud, pert) <= best

    def test_subsample_deterministic(self):
        rng = np.random.default_rng(4)
        m, pts = self._scene_map(rng)
        cloud = PointCloud(pts)
        a = ndt.measurement_likelihood(m, cloud, Pose.identity(), subsample=50, seed=9)
        b = ndt.measurement_likelihood(m, cloud, Pose.identity(), subsample=50, seed=9)
        c = ndt.measurement_likelihood(m, cloud, Pose.identity(), subsample=50, seed=10)
        assert a == b
        assert a != c

    def test_batch_matches_single(self):
        rng = np.random.default_rng(5)
        m, pts = self._scene_map(rng, n=200)
        cloud = PointCloud(pts[:40])
        poses = [Pose(rng.normal(0, 1, 3), geom.quat_normalize(rng.normal(size=4)))
                 for _ in range(8)]
        batch = ndt.loglik_batch(m, cloud.points,
                                 np.stack([p.p for p in poses]),
                                 np.stack([p.r for p in poses]))
        for i, pose in enumerate(poses):
            single = ndt.measurement_likelihood(m, cloud, pose)
            assert batch[i] == pytest.approx(single, rel=1e-12)


class TestMapIo:
    def test_empty_roundtrip(self, tmp_path):
        m = ndt.build_map([], [], cell_size=2.0)
        path = tmp_path / "empty.ndt"
        ndt.save_map(m, path)
        back = ndt.load_map(path)
        assert back.n_cells == 0
        assert back.cell_size == 2.0

    def test_random_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(6)
        pts = rng.uniform(-10, 10, size=(500, 3))
        m = ndt.build_map([PointCloud(pts)], [Pose.identity()])
        path = tmp_path / "m.ndt"
        ndt.save_map(m, path)
        back = ndt.load_map(path)
        np.testing.assert_array_equal(back.keys, m.keys)
        np.testing.assert_array_equal(back.means, m.means)
        np.testing.assert_array_equal(back.covs, m.covs)
        np.testing.assert_array_equal(back.counts, m.counts)

    def test_corrupt_magic(self, tmp_path):
        rng = np.random.default_rng(7)
        pts = rng.uniform(-5, 5, size=(50, 3))
        m = ndt.build_map([PointCloud(pts)], [Pose.identity()])
        path = tmp_path / "m.ndt"
        ndt.save_map(m, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            ndt.load_map(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "m.ndt"
        ndt.save_map(ndt.build_map([], []), path)
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            ndt.load_map(path)
