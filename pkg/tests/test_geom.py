import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from hybridloc import geom
from hybridloc.errors import InvalidArgumentError
from hybridloc.geom import Pose, compose, delta, inverse


def random_pose(rng, span=10.0):
    q = rng.normal(size=4)
    return Pose(rng.uniform(-span, span, 3), q / np.linalg.norm(q))


def homogeneous(pose):
    # independent oracle: scipy rotation + explicit 4x4 assembly
    m = np.eye(4)
    m[:3, :3] = Rotation.from_quat(pose.r).as_matrix()
    m[:3, 3] = pose.p
    return m


class TestCompose:
    def test_identity_left(self):
        rng = np.random.default_rng(0)
        x = random_pose(rng)
        out = compose(Pose.identity(), x)
        np.testing.assert_allclose(out.p, x.p, atol=1e-12)
        np.testing.assert_allclose(out.r, x.r, atol=1e-12)

    def test_inverse_gives_identity(self):
        rng = np.random.default_rng(1)
        x = random_pose(rng)
        out = compose(x, inverse(x))
        np.testing.assert_allclose(out.p, np.zeros(3), atol=1e-9)
        assert geom.rotational_error(out, Pose.identity()) < 1e-7

    def test_matches_matrix_oracle(self):
        a = Pose.from_xyz_yaw(1.0, 0.0, 0.0, np.pi / 2)
        b = Pose.from_xyz_yaw(1.0, 0.0, 0.0, 0.0)
        out = compose(a, b)
        np.testing.assert_allclose(out.p, [1.0, 1.0, 0.0], atol=1e-12)
        expect = homogeneous(a) @ homogeneous(b)
        np.testing.assert_allclose(out.matrix(), expect, atol=1e-12)

    def test_random_against_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            a, b = random_pose(rng), random_pose(rng)
            expect = homogeneous(a) @ homogeneous(b)
            np.testing.assert_allclose(compose(a, b).matrix(), expect, atol=1e-9)

    def test_associative(self):
        rng = np.random.default_rng(3)
        a, b, c = (random_pose(rng) for _ in range(3))
        lhs = compose(compose(a, b), c)
        rhs = compose(a, compose(b, c))
        np.testing.assert_allclose(lhs.matrix(), rhs.matrix(), atol=1e-9)

    def test_delta_roundtrip(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            a, d = random_pose(rng), random_pose(rng)
            d2 = delta(a, compose(a, d))
            np.testing.assert_allclose(d2.p, d.p, atol=1e-9)
            assert min(np.linalg.norm(d2.r - d.r), np.linalg.norm(d2.r + d.r)) < 1e-9

    def test_delta_satisfies_definition(self):
        rng = np.random.default_rng(5)
        a, b = random_pose(rng), random_pose(rng)
        back = compose(a, delta(a, b))
        np.testing.assert_allclose(back.p, b.p, atol=1e-9)
        assert geom.rotational_error(back, b) < 1e-7


class TestAngularDistanceLoss:
    def test_identical_is_zero(self):
        rng = np.random.default_rng(6)
        q = geom.quat_normalize(rng.normal(size=4))
        assert geom.angular_distance_loss(q, q) == pytest.approx(0.0, abs=1e-12)

    def test_double_cover(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            q = geom.quat_normalize(rng.normal(size=4))
            assert geom.angular_distance_loss(q, -q) == pytest.approx(0.0, abs=1e-12)

    def test_quarter_turn(self):
        # <identity, 90deg about z> = cos(45deg) = sqrt(2)/2, loss = 1 - 1/2
        q90 = geom.quat_from_axis_angle([0, 0, 1], np.pi / 2)
        qid = np.array([0.0, 0.0, 0.0, 1.0])
        assert geom.angular_distance_loss(qid, q90) == pytest.approx(0.5, abs=1e-12)

    def test_range(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            q1 = geom.quat_normalize(rng.normal(size=4))
            q2 = geom.quat_normalize(rng.normal(size=4))
            loss = geom.angular_distance_loss(q1, q2)
            assert 0.0 - 1e-12 <= loss <= 1.0 + 1e-12


class TestErrors:
    def test_zero_for_same_pose(self):
        rng = np.random.default_rng(9)
        x = random_pose(rng)
        assert geom.positional_error(x, x) == 0.0
        assert geom.rotational_error(x, x) == pytest.approx(0.0, abs=1e-6)

    def test_345_triangle(self):
        a = Pose([0, 0, 0], [0, 0, 0, 1])
        b = Pose([3, 4, 0], [0, 0, 0, 1])
        assert geom.positional_error(a, b) == pytest.approx(5.0)

    def test_90_degrees(self):
        a = Pose.identity()
        b = Pose([0, 0, 0], geom.quat_from_axis_angle([0, 0, 1], np.pi / 2))
        assert geom.rotational_error(a, b) == pytest.approx(90.0, abs=1e-9)
        # oracle: angle recovered from the relative rotation matrix trace
        rel = Rotation.from_quat(a.r).inv() * Rotation.from_quat(b.r)
        tr = np.trace(rel.as_matrix())
        assert np.degrees(np.arccos((tr - 1) / 2)) == pytest.approx(90.0, abs=1e-9)

    def test_rotational_error_is_metric(self):
        rng = np.random.default_rng(10)
        for _ in range(50):
            qs = [geom.quat_normalize(rng.normal(size=4)) for _ in range(3)]
            ps = [Pose(np.zeros(3), q) for q in qs]
            d01 = geom.rotational_error(ps[0], ps[1])
            d12 = geom.rotational_error(ps[1], ps[2])
            d02 = geom.rotational_error(ps[0], ps[2])
            assert d01 == pytest.approx(geom.rotational_error(ps[1], ps[0]))
            assert d02 <= d01 + d12 + 1e-9
        # zero iff same rotation mod sign
        q = geom.quat_normalize(rng.normal(size=4))
        assert geom.rotational_error(Pose(np.zeros(3), q), Pose(np.zeros(3), -q)) < 1e-6


class TestQuatHelpers:
    def test_rotate_matches_matrix(self):
        rng = np.random.default_rng(11)
        q = geom.quat_normalize(rng.normal(size=4))
        v = rng.normal(size=(10, 3))
        np.testing.assert_allclose(
            geom.quat_rotate(q, v), v @ Rotation.from_quat(q).as_matrix().T, atol=1e-12
        )

    def test_to_matrix_matches_scipy(self):
        rng = np.random.default_rng(12)
        q = geom.quat_normalize(rng.normal(size=(7, 4)))
        np.testing.assert_allclose(
            geom.quat_to_matrix(q), Rotation.from_quat(q).as_matrix(), atol=1e-12
        )

    def test_multiply_matches_scipy(self):
        rng = np.random.default_rng(13)
        q1 = geom.quat_normalize(rng.normal(size=4))
        q2 = geom.quat_normalize(rng.normal(size=4))
        expect = (Rotation.from_quat(q1) * Rotation.from_quat(q2)).as_quat()
        got = geom.quat_multiply(q1, q2)
        assert min(np.linalg.norm(got - expect), np.linalg.norm(got + expect)) < 1e-12

    def test_euler_matches_scipy(self):
        q = geom.quat_from_euler(0.1, -0.2, 0.3)
        expect = Rotation.from_euler("XYZ", [0.1, -0.2, 0.3]).as_quat()
        assert min(np.linalg.norm(q - expect), np.linalg.norm(q + expect)) < 1e-12

    def test_yaw(self):
        q = geom.quat_from_yaw(0.7)
        assert geom.quat_yaw(q) == pytest.approx(0.7)

    def test_weighted_mean_recovers_consensus(self):
        rng = np.random.default_rng(14)
        q = geom.quat_normalize(rng.normal(size=4))
        quats = np.tile(q, (5, 1))
        quats[2] = -quats[2]  # sign flips must not matter
        mean = geom.quat_weighted_mean(quats, np.full(5, 0.2))
        assert geom.angular_distance_loss(mean, q) < 1e-12

    def test_unit_norm_enforced(self):
        rng = np.random.default_rng(15)
        x = random_pose(rng)
        assert abs(np.linalg.norm(x.r) - 1.0) < 1e-9
        y = compose(x, x)
        assert abs(np.linalg.norm(y.r) - 1.0) < 1e-9

    def test_invalid_inputs_rejected(self):
        with pytest.raises(InvalidArgumentError):
            Pose([0, 0, np.nan], [0, 0, 0, 1])
        with pytest.raises(InvalidArgumentError):
            Pose([0, 0, 0], [0, 0, 0, 0])


class TestTrajectoryCsv:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(16)
        poses = [random_pose(rng) for _ in range(5)]
        times = [0.1 * i for i in range(5)]
        path = tmp_path / "traj.csv"
        geom.save_trajectory_csv(path, times, poses)
        t2, p2 = geom.load_trajectory_csv(path)
        assert t2 == times
        for a, b in zip(poses, p2):
            np.testing.assert_array_equal(a.p, b.p)
            np.testing.assert_allclose(a.r, b.r, atol=1e-16)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(InvalidArgumentError):
            geom.load_trajectory_csv(path)
