import json

import numpy as np
import pytest

from hybridloc import geom, mcl, ndt, observation as obs, sim
from hybridloc.errors import InvalidArgumentError, OutOfBoundsError
from hybridloc.geom import Pose
from hybridloc.gp import PosePrediction
from hybridloc.observation import SensorConfig


def tiny_world_cfg():
    return sim.WorldConfig(size=60.0, trajectory_radius=18.0,
                           corridor_halfwidth=5.0, pillar_grid_step=8.0,
                           pillar_keep_prob=0.8)


def tiny_session_cfg(n_steps=40, kind="loop"):
    return sim.SessionConfig(
        trajectory=sim.TrajectoryConfig(kind=kind, n_steps=n_steps, step_m=1.0,
                                        radius=18.0),
        sensor=SensorConfig(azimuth_count=60, elevation_deg=(0.0, 5.0, 10.0),
                            max_range=40.0),
        scan_noise=0.0,
        odom_trans_sigma=0.0,
        odom_rot_sigma=0.0,
    )


@pytest.fixture(scope="module")
def tiny_world():
    return sim.generate_world(tiny_world_cfg(), seed=3)


class TestWorld:
    def test_deterministic(self):
        a = sim.generate_world(tiny_world_cfg(), seed=5)
        b = sim.generate_world(tiny_world_cfg(), seed=5)
        np.testing.assert_array_equal(a.boxes, b.boxes)

    def test_seed_changes_layout(self):
        a = sim.generate_world(tiny_world_cfg(), seed=5)
        b = sim.generate_world(tiny_world_cfg(), seed=6)
        assert a.boxes.shape != b.boxes.shape or not np.array_equal(a.boxes, b.boxes)

    def test_zero_landmarks_rejected(self):
        cfg = tiny_world_cfg()
        cfg.pillar_keep_prob = 0.0
        cfg.boundary_walls = False
        with pytest.raises(InvalidArgumentError):
            sim.generate_world(cfg, seed=0)

    def test_raycast_audit(self, tiny_world):
        # nearly every trajectory pose must return a healthy scan
        session = sim.simulate_session(tiny_world, tiny_session_cfg(60), seed=1)
        hits = np.array([len(f.cloud) for f in session.frames])
        assert np.mean(hits >= 50) >= 0.95

    def test_drift_world(self, tiny_world):
        drifted = sim.drift_world(tiny_world, 0.3, seed=9)
        assert drifted.boxes.shape == tiny_world.boxes.shape
        assert not np.array_equal(drifted.boxes, tiny_world.boxes)
        same = sim.drift_world(tiny_world, 0.0, seed=9)
        assert same is tiny_world


class TestSession:
    def test_zero_noise_odometry_matches_gt(self, tiny_world):
        session = sim.simulate_session(tiny_world, tiny_session_cfg(30), seed=2)
        dead = sim.integrate_odometry(session.frames[0].gt, session.frames)
        for est, frame in zip(dead, session.frames):
            assert geom.positional_error(est, frame.gt) < 1e-9

    def test_reproducible(self, tiny_world):
        cfg = tiny_session_cfg(10)
        cfg.scan_noise = 0.05
        cfg.odom_trans_sigma = 0.01
        a = sim.simulate_session(tiny_world, cfg, seed=7)
        b = sim.simulate_session(tiny_world, cfg, seed=7)
        for fa, fb in zip(a.frames, b.frames):
            np.testing.assert_array_equal(fa.cloud.points, fb.cloud.points)
            np.testing.assert_array_equal(fa.odom.p if fa.odom else np.zeros(3),
                                          fb.odom.p if fb.odom else np.zeros(3))

    def test_drift_random_walk_oracle(self):
        # straight line, pure translational noise: the final drift must sit
        # within 3 sigma of the random-walk prediction per axis
        world = sim.World(np.array([[100.0, -5, 0, 101.0, 5, 4]]), 400.0)
        cfg = tiny_session_cfg(100, kind="straight")
        cfg.odom_trans_sigma = 0.01  # 1% of the 1 m step
        session = sim.simulate_session(world, cfg, seed=11)
        dead = sim.integrate_odometry(session.frames[0].gt, session.frames)
        drift = dead[-1].p - session.frames[-1].gt.p
        sigma_total = 0.01 * np.sqrt(99)
        assert np.all(np.abs(drift) < 3 * sigma_total)

    def test_out_of_bounds_trajectory(self, tiny_world):
        cfg = tiny_session_cfg(10)
        cfg.trajectory.radius = 500.0
        with pytest.raises(OutOfBoundsError):
            sim.simulate_session(tiny_world, cfg, seed=0)

    def test_unknown_kind(self):
        with pytest.raises(InvalidArgumentError):
            sim.trajectory_poses(sim.TrajectoryConfig(kind="spiral"))


class TestBevBuilding:
    def test_superimposition_matches_gt_oracle(self, tiny_world):
        # with exact odometry the chained deltas equal ground-truth deltas
        session = sim.simulate_session(tiny_world, tiny_session_cfg(12), seed=4)
        cfg = sim.ObservationConfig(scope=(40.0, 40.0, 10.0), resolution=0.5,
                                    k=4, crop_px=60, augment_crops=0)
        got = sim.build_bev(session, 8, cfg)
        parts = []
        for j in range(4, 8):
            d = geom.delta(session.frames[8].gt, session.frames[j].gt)
            parts.append((session.frames[j].cloud, d))
        cloud = obs.superimpose(parts, session.frames[8].cloud)
        want = obs.rasterise(cloud, cfg.scope, cfg.resolution)
        np.testing.assert_allclose(got.cells, want.cells, atol=1e-9)

    def test_history_start_limits_window(self, tiny_world):
        session = sim.simulate_session(tiny_world, tiny_session_cfg(12), seed=4)
        cfg = sim.ObservationConfig(scope=(40.0, 40.0, 10.0), resolution=0.5,
                                    k=4, crop_px=60, augment_crops=0)
        alone = sim.build_bev(session, 8, cfg, history_start=8)
        want = obs.rasterise(session.frames[8].cloud, cfg.scope, cfg.resolution)
        np.testing.assert_allclose(alone.cells, want.cells, atol=1e-12)


class TestTrainingSet:
    def test_shapes_and_targets(self, tiny_world):
        session = sim.simulate_session(tiny_world, tiny_session_cfg(10), seed=5)
        cfg = sim.ObservationConfig(scope=(40.0, 40.0, 10.0), resolution=0.5,
                                    k=3, crop_px=56, augment_crops=2,
                                    augment_rotations=0, max_offset_m=3.0)
        tset, center_rows = sim.build_training_set(session, cfg, input_px=16,
                                                   seed=6)
        assert len(tset) == 10 * 3
        assert tset.x.shape == (30, 256)
        assert len(center_rows) == 10
        for i, row in enumerate(center_rows):
            np.testing.assert_array_equal(tset.positions[row],
                                          session.frames[i].gt.p)
        # augmented targets stay within the (rotated) per-axis clamp
        for i in range(10):
            for r in range(3 * i, 3 * i + 3):
                d = tset.positions[r] - session.frames[i].gt.p
                assert np.linalg.norm(d) <= 3.0 * np.sqrt(2) + 1e-9
        assert tset.pairs.shape == (9, 2)

    def test_deterministic(self, tiny_world):
        session = sim.simulate_session(tiny_world, tiny_session_cfg(6), seed=5)
        cfg = sim.ObservationConfig(scope=(40.0, 40.0, 10.0), resolution=0.5,
                                    k=2, crop_px=56, augment_crops=1,
                                    augment_rotations=1)
        a, _ = sim.build_training_set(session, cfg, input_px=16, seed=8)
        b, _ = sim.build_training_set(session, cfg, input_px=16, seed=8)
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.pairs, b.pairs)


def oracle_predictor(session, cov=1e-6):
    def predict(idx, bev):
        gt = session.frames[idx].gt
        return PosePrediction(gt.p.copy(), np.eye(3) * cov, gt.r.copy(),
                              np.zeros(3))
    return predict


class TestEvaluateRegression:
    def test_oracle_model_zero_errors(self, tiny_world):
        session = sim.simulate_session(tiny_world, tiny_session_cfg(8), seed=9)
        cfg = sim.ObservationConfig(scope=(40.0, 40.0, 10.0), resolution=0.5,
                                    k=2, crop_px=56, augment_crops=0)

        def predict(bev):
            return PosePrediction(bev.origin.p.copy(), np.zeros((3, 3)),
                                  bev.origin.r.copy(), np.zeros(3))

        report = sim.evaluate_regression(predict, session, cfg)
        assert report.aggregates["median_pos_error_m"] == 0.0
        assert report.aggregates["mean_rot_error_deg"] == pytest.approx(0.0, abs=1e-6)
        assert report.aggregates["n_frames"] == 8

    def test_bin_edges(self, tiny_world):
        session = sim.simulate_session(tiny_world, tiny_session_cfg(4), seed=9)
        cfg = sim.ObservationConfig(scope=(40.0, 40.0, 10.0), resolution=0.5,
                                    k=1, crop_px=56, augment_crops=0)
        rng = np.random.default_rng(0)

        def predict(bev):
            unc = rng.uniform(0, 60)
            return PosePrediction(bev.origin.p + rng.normal(size=3),
                                  np.eye(3) * unc / np.sqrt(3),
                                  bev.origin.r.copy(), np.zeros(3))

        report = sim.evaluate_regression(predict, session, cfg)
        bins = report.aggregates["uncertainty_bins"]
        assert len(bins) == 11
        assert [b["lo"] for b in bins] == [5.0 * i for i in range(11)]
        assert bins[-1]["hi"] is None
        assert sum(b["count"] for b in bins) == 4

    def test_histogram_csv(self, tiny_world, tmp_path):
        session = sim.simulate_session(tiny_world, tiny_session_cfg(4), seed=9)
        cfg = sim.ObservationConfig(scope=(40.0, 40.0, 10.0), resolution=0.5,
                                    k=1, crop_px=56, augment_crops=0)
        report = sim.evaluate_regression(
            lambda bev: PosePrediction(bev.origin.p, np.zeros((3, 3)),
                                       bev.origin.r, np.zeros(3)),
            session, cfg)
        path = tmp_path / "hist.csv"
        sim.write_histogram_csv(report, path)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 12  # header + 11 bins


@pytest.fixture(scope="module")
def setup(tiny_world):
    cfg = tiny_session_cfg(40)
    cfg.scan_noise = 0.02
    session = sim.simulate_session(tiny_world, cfg, seed=10)
    clouds = [f.cloud for f in session.frames]
    poses = [f.gt for f in session.frames]
    ndt_map = ndt.build_map(clouds, poses, cell_size=1.0)
    train_positions = np.stack([p.p for p in poses])
    return session, ndt_map, train_positions


class TestEvaluateLocalisation:
    def _cfgs(self):
        mcl_cfg = mcl.MclConfig(n_sys1=120, n_sys2=120, max_particles=240,
                                subsample=80, uniform_min_particles=200,
                                noise=mcl.MotionNoise(trans_floor=0.03,
                                                      rot_floor=0.01))
        eval_cfg = sim.EvalConfig(trials=3, success_threshold_m=0.75,
                                  max_iterations=12)
        obs_cfg = sim.ObservationConfig(scope=(40.0, 40.0, 10.0), resolution=0.5,
                                        k=2, crop_px=56, augment_crops=0)
        return mcl_cfg, eval_cfg, obs_cfg

    def test_oracle_gp_always_succeeds(self, setup):
        session, ndt_map, train_positions = setup
        mcl_cfg, eval_cfg, obs_cfg = self._cfgs()
        report = sim.evaluate_localisation(
            ["hybrid-gp"], session, ndt_map, oracle_predictor(session),
            train_positions, mcl_cfg, eval_cfg, obs_cfg, seed=1)
        agg = report.aggregates["per_method"]["hybrid-gp"]
        assert agg["success_rate"] == 1.0
        assert agg["median_iterations_to_success"] <= 3

    def test_paired_starts_across_methods(self, setup):
        session, ndt_map, train_positions = setup
        mcl_cfg, eval_cfg, obs_cfg = self._cfgs()
        report = sim.evaluate_localisation(
            ["hybrid-gp", "hybrid-fixed"], session, ndt_map,
            oracle_predictor(session), train_positions, mcl_cfg, eval_cfg,
            obs_cfg, seed=2)
        by_trial = {}
        for rec in report.trials:
            by_trial.setdefault(rec["trial"], set()).add(rec["start"])
        assert all(len(starts) == 1 for starts in by_trial.values())

    def test_unknown_method_rejected(self, setup):
        session, ndt_map, train_positions = setup
        mcl_cfg, eval_cfg, obs_cfg = self._cfgs()
        with pytest.raises(InvalidArgumentError):
            sim.evaluate_localisation(["warp-drive"], session, ndt_map,
                                      oracle_predictor(session),
                                      train_positions, mcl_cfg, eval_cfg,
                                      obs_cfg, seed=0)

    def test_aggregates_recomputable_and_json_stable(self, setup, tmp_path):
        session, ndt_map, train_positions = setup
        mcl_cfg, eval_cfg, obs_cfg = self._cfgs()
        report = sim.evaluate_localisation(
            ["hybrid-gp", "uniform-mcl"], session, ndt_map,
            oracle_predictor(session), train_positions, mcl_cfg, eval_cfg,
            obs_cfg, seed=3, config_echo={"seed": 3})
        recomputed = sim.recompute_localisation_aggregates(report.trials)
        assert recomputed == report.aggregates
        # per-trial CSV roundtrip preserves the aggregate inputs bit-exactly
        jp, cp = tmp_path / "r.json", tmp_path / "r.csv"
        report.save(jp, cp)
        rows = []
        import csv as _csv
        with open(cp) as fh:
            for row in _csv.DictReader(fh):
                rows.append({
                    "trial": int(row["trial"]),
                    "method": row["method"],
                    "start": int(row["start"]),
                    "success": int(row["success"]),
                    "iterations": int(row["iterations"]),
                    "final_error_m": float(row["final_error_m"]),
                    "wall_s": float(row["wall_s"]),
                })
        assert sim.recompute_localisation_aggregates(rows) == report.aggregates
        # the JSON report carries no wall-clock numbers
        payload = json.loads(jp.read_text())
        assert "wall_s" not in json.dumps(payload)

    def test_report_json_excludes_trials(self, setup):
        session, ndt_map, train_positions = setup
        mcl_cfg, eval_cfg, obs_cfg = self._cfgs()
        report = sim.evaluate_localisation(
            ["hybrid-gp"], session, ndt_map, oracle_predictor(session),
            train_positions, mcl_cfg, eval_cfg, obs_cfg, seed=4)
        payload = json.loads(report.to_json())
        assert payload["schema_version"] == sim.SCHEMA_VERSION
        assert "trials" not in payload
