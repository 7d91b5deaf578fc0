import math

import numpy as np
import pytest

from mmntp.manoeuvre import ManoeuvreType, ManoeuvreVector
from mmntp.metrics import (
    EvalSample,
    EvaluationBatch,
    OVERLAP_LAT_M,
    OVERLAP_LONG_M,
    batch_div_k,
    build_report,
    collision_rate,
    div_k,
    max_acc_k,
    mean_nll,
    min_rmse_k,
    offroad_rate,
)
from mmntp.model import ModePrediction
from mmntp.scene import LaneGeometry, Scene, Track
from mmntp.training import bvn_nll

LK = ManoeuvreType.LK


def make_mode(mean_traj, prob, labels=None, sigma=1.0, rho=0.0):
    mean = np.asarray(mean_traj, dtype=float)
    t = mean.shape[0]
    params = np.concatenate([
        mean, np.full((t, 1), sigma), np.full((t, 1), sigma), np.full((t, 1), rho)
    ], axis=1)
    if labels is None:
        labels = np.zeros(t, dtype=np.int64)
    mv = ManoeuvreVector(types=(LK, LK), times=(-1.0,))
    return ModePrediction(manoeuvre=mv, traj_params=params, prob=prob,
                          labels=np.asarray(labels, dtype=np.int64))


def straight_gt(t=10, step=4.0):
    return np.stack([step * np.arange(1, t + 1), np.zeros(t)], axis=1)


def random_batch(rng, n_samples=6, n_modes=4, t=10, fps=5, scene=None):
    samples = []
    for _ in range(n_samples):
        gt = rng.normal(scale=3.0, size=(t, 2)).cumsum(axis=0)
        raw_probs = rng.uniform(0.05, 1.0, size=n_modes)
        probs = raw_probs / raw_probs.sum()
        modes = [
            make_mode(gt + rng.normal(scale=rng.uniform(0.1, 6.0), size=(t, 2)),
                      float(probs[m]),
                      labels=rng.integers(0, 3, size=t),
                      sigma=float(rng.uniform(0.5, 2.0)),
                      rho=float(rng.uniform(-0.8, 0.8)))
            for m in range(n_modes)
        ]
        modes.sort(key=lambda m: -m.prob)
        samples.append(EvalSample(
            modes=modes, gt_traj=gt,
            gt_labels=rng.integers(0, 3, size=t),
            tv_pos=(float(rng.uniform(0, 100)), float(rng.uniform(0, 10.5))),
            scene=scene,
        ))
    return EvaluationBatch(samples=samples, fps=fps)


class TestMinRmseK:
    def test_exact_mode_gives_zero(self):
        gt = straight_gt()
        batch = EvaluationBatch(samples=[EvalSample(
            modes=[make_mode(gt, 1.0)], gt_traj=gt,
            gt_labels=np.zeros(10, dtype=np.int64), tv_pos=(0.0, 0.0),
        )], fps=5)
        assert np.allclose(min_rmse_k(batch, 1), 0.0)

    def test_non_increasing_in_k(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            batch = random_batch(rng)
            values = [min_rmse_k(batch, k) for k in range(1, 5)]
            for a, b in zip(values, values[1:]):
                assert np.all(b <= a + 1e-12)

    def test_matches_bruteforce_enumeration(self):
        rng = np.random.default_rng(1)
        batch = random_batch(rng, n_samples=5, n_modes=4)
        for k in (1, 2, 3, 4):
            got = min_rmse_k(batch, k)
            for j, h in enumerate(batch.default_horizons()):
                step = h * batch.fps - 1
                total = 0.0
                for s in batch.samples:
                    order = np.argsort([-m.prob for m in s.modes], kind="stable")[:k]
                    best = min(
                        np.sum((s.modes[i].mean_traj[step] - s.gt_traj[step]) ** 2)
                        for i in order
                    )
                    total += best
                assert got[j] == pytest.approx(math.sqrt(total / len(batch.samples)), abs=1e-12)

    def test_k_out_of_range(self):
        rng = np.random.default_rng(2)
        batch = random_batch(rng, n_modes=3)
        with pytest.raises(ValueError):
            min_rmse_k(batch, 4)


class TestMeanNll:
    def test_single_mode_reduces_to_plain_nll(self):
        rng = np.random.default_rng(3)
        gt = straight_gt()
        mode = make_mode(gt + rng.normal(size=(10, 2)), 1.0, sigma=1.3)
        batch = EvaluationBatch(samples=[EvalSample(
            modes=[mode], gt_traj=gt, gt_labels=np.zeros(10, dtype=np.int64),
            tv_pos=(0.0, 0.0))], fps=5)
        got = mean_nll(batch)
        for j, h in enumerate(batch.default_horizons()):
            step = h * 5 - 1
            assert got[j] == pytest.approx(bvn_nll(mode.traj_params[step], gt[step]), abs=1e-12)

    def test_probability_preserving_duplication_invariant(self):
        rng = np.random.default_rng(4)
        gt = straight_gt()
        mode = make_mode(gt + 1.0, 1.0, sigma=0.9)
        half_a = make_mode(mode.mean_traj, 0.5, sigma=0.9)
        half_b = make_mode(mode.mean_traj, 0.5, sigma=0.9)
        single = EvaluationBatch(samples=[EvalSample(
            modes=[mode], gt_traj=gt, gt_labels=np.zeros(10, dtype=np.int64),
            tv_pos=(0.0, 0.0))], fps=5)
        split = EvaluationBatch(samples=[EvalSample(
            modes=[half_a, half_b], gt_traj=gt, gt_labels=np.zeros(10, dtype=np.int64),
            tv_pos=(0.0, 0.0))], fps=5)
        assert np.allclose(mean_nll(single), mean_nll(split), atol=1e-12)

    def test_matches_weighted_sum_oracle(self):
        rng = np.random.default_rng(5)
        batch = random_batch(rng, n_samples=4, n_modes=3)
        got = mean_nll(batch)
        for j, h in enumerate(batch.default_horizons()):
            step = h * batch.fps - 1
            expected = np.mean([
                sum(m.prob * bvn_nll(m.traj_params[step], s.gt_traj[step]) for m in s.modes)
                for s in batch.samples
            ])
            assert got[j] == pytest.approx(expected, abs=1e-10)


class TestMaxAccK:
    def test_exact_match_contributes_one(self):
        gt_labels = np.array([0, 0, 1, 1, 1], dtype=np.int64)
        gt = straight_gt(5)
        modes = [
            make_mode(gt, 0.6, labels=np.array([2, 2, 2, 2, 2])),
            make_mode(gt, 0.4, labels=gt_labels),
        ]
        batch = EvaluationBatch(samples=[EvalSample(
            modes=modes, gt_traj=gt, gt_labels=gt_labels, tv_pos=(0.0, 0.0))], fps=5)
        assert max_acc_k(batch, 2) == pytest.approx(1.0)
        assert max_acc_k(batch, 1) == pytest.approx(0.0)

    def test_non_decreasing_in_k(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            batch = random_batch(rng)
            accs = [max_acc_k(batch, k) for k in range(1, 5)]
            assert all(b >= a - 1e-12 for a, b in zip(accs, accs[1:]))

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(7)
        batch = random_batch(rng, n_samples=5, n_modes=4)
        for k in (1, 2, 4):
            expected = np.mean([
                max(
                    float(np.mean(s.modes[i].labels == s.gt_labels))
                    for i in np.argsort([-m.prob for m in s.modes], kind="stable")[:k]
                )
                for s in batch.samples
            ])
            assert max_acc_k(batch, k) == pytest.approx(expected, abs=1e-12)


def collision_scene(sv_positions, n_frames=20, fps=5):
    """Scene with stationary SVs at given (x, lat) positions."""
    tracks = {}
    for vid, (x, lat) in enumerate(sv_positions, start=100):
        states = np.zeros((n_frames, 6))
        states[:, 0] = x
        states[:, 1] = lat
        tracks[vid] = Track(first_frame=0, states=states, length=4.5, width=2.0)
    geometry = LaneGeometry.straight(3)
    return Scene(geometry=geometry, tracks=tracks, duration=n_frames, fps=fps)


class TestCollisionOffroad:
    def test_clear_road_zero_rates(self):
        scene = collision_scene([(500.0, 1.75)])
        gt = straight_gt()
        batch = EvaluationBatch(samples=[EvalSample(
            modes=[make_mode(gt, 1.0)], gt_traj=gt,
            gt_labels=np.zeros(10, dtype=np.int64),
            tv_pos=(0.0, 5.25), scene=scene)], fps=5)
        assert collision_rate(batch) == 0.0
        assert offroad_rate(batch) == 0.0

    def test_pinned_on_stationary_sv_collides(self):
        scene = collision_scene([(30.0, 5.25)])
        gt = straight_gt()
        mode = make_mode(gt, 1.0)  # passes x=30 at lat 5.25
        batch = EvaluationBatch(samples=[EvalSample(
            modes=[mode], gt_traj=gt, gt_labels=np.zeros(10, dtype=np.int64),
            tv_pos=(0.0, 5.25), scene=scene)], fps=5)
        assert collision_rate(batch) == 1.0

    def test_offroad_when_centre_exits_bounds(self):
        scene = collision_scene([(500.0, 1.75)])
        gt = straight_gt()
        drift = gt.copy()
        drift[:, 1] = np.linspace(0, -8.0, 10)  # drifts below lat 0 bound
        batch = EvaluationBatch(samples=[EvalSample(
            modes=[make_mode(drift, 0.5), make_mode(gt, 0.5)],
            gt_traj=gt, gt_labels=np.zeros(10, dtype=np.int64),
            tv_pos=(0.0, 5.25), scene=scene)], fps=5)
        assert offroad_rate(batch) == 0.5

    def test_matches_bruteforce_geometry(self):
        rng = np.random.default_rng(8)
        for trial in range(20):
            svs = [(float(rng.uniform(0, 60)), float(rng.uniform(0, 10.5))) for _ in range(4)]
            scene = collision_scene(svs)
            batch = random_batch(rng, n_samples=4, n_modes=3, scene=scene)
            got_coll = collision_rate(batch)
            got_off = offroad_rate(batch)

            coll_flags, off_flags = [], []
            lo, hi = scene.geometry.road_bounds
            for s in batch.samples:
                for m in s.modes:
                    hit = False
                    off = False
                    for step in range(m.mean_traj.shape[0]):
                        px = s.tv_pos[0] + m.mean_traj[step, 0]
                        py = s.tv_pos[1] + m.mean_traj[step, 1]
                        if py < lo or py > hi:
                            off = True
                        frame = s.t_end + 1 + step
                        for vid in scene.ids_present_at(frame):
                            sv = scene.state_of(vid, frame)
                            if (abs(px - sv.position[0]) < (s.tv_length + sv.length) / 2
                                    and abs(py - sv.position[1]) < (s.tv_width + sv.width) / 2):
                                hit = True
                    coll_flags.append(hit)
                    off_flags.append(off)
            assert got_coll == pytest.approx(np.mean(coll_flags), abs=1e-12)
            assert got_off == pytest.approx(np.mean(off_flags), abs=1e-12)


class TestDivK:
    def test_identical_modes_zero(self):
        gt = straight_gt()
        modes = [make_mode(gt, 0.5), make_mode(gt, 0.5)]
        assert div_k(modes, 2) == 0.0

    def test_separated_modes_one(self):
        gt = straight_gt()
        far = gt.copy()
        far[-1, 0] += 10.0
        assert div_k([make_mode(gt, 0.5), make_mode(far, 0.5)], 2) == 1.0

    def test_three_modes_one_coincident_pair(self):
        gt = straight_gt()
        apart = gt.copy()
        apart[-1] += [20.0, 5.0]
        modes = [make_mode(gt, 0.4), make_mode(gt, 0.35), make_mode(apart, 0.25)]
        assert div_k(modes, 3) == pytest.approx(2 / 3, abs=1e-12)

    def test_thresholds_are_strict(self):
        gt = straight_gt()
        at_threshold = gt.copy()
        at_threshold[-1] += [OVERLAP_LONG_M, 0.0]
        assert div_k([make_mode(gt, 0.5), make_mode(at_threshold, 0.5)], 2) == 1.0
        just_inside = gt.copy()
        just_inside[-1] += [OVERLAP_LONG_M - 1e-9, OVERLAP_LAT_M - 1e-9]
        assert div_k([make_mode(gt, 0.5), make_mode(just_inside, 0.5)], 2) == 0.0

    def test_k_validation(self):
        gt = straight_gt()
        modes = [make_mode(gt, 1.0)]
        with pytest.raises(ValueError):
            div_k(modes, 1)
        with pytest.raises(ValueError):
            div_k(modes, 2)

    def test_relabeling_symmetry(self):
        rng = np.random.default_rng(9)
        gt = straight_gt()
        modes = [make_mode(gt + rng.normal(scale=3, size=gt.shape), 1 / 3) for _ in range(3)]
        base = div_k(modes, 3)
        for perm in ([1, 0, 2], [2, 1, 0], [1, 2, 0]):
            assert div_k([modes[i] for i in perm], 3) == pytest.approx(base, abs=1e-12)


class TestUntrainedModelEvaluation:
    def test_freshly_seeded_model_yields_finite_report(self):
        from mmntp.dataset import DatasetConfig, build_dataset
        from mmntp.metrics import build_evaluation_batch
        from mmntp.model import ModelConfig, new_model
        from mmntp.scene import GeneratorConfig, generate_scene

        scene = generate_scene(GeneratorConfig(n_vehicles=6, lc_rate=0.5, duration_s=25), seed=3)
        samples = build_dataset([scene], DatasetConfig(t_obs=8, t_pred=10, t_change=5, stride=10))
        model = new_model(ModelConfig(
            t_obs=8, t_pred=10, t_change=5, n_modes=3,
            d_model=16, n_heads=2, d_ff=8, mlp_hidden=16,
        ), seed=0)
        batch = build_evaluation_batch(model, samples, {"scene_0000": scene})
        report = build_report(batch, ks=[1, 3])
        assert all(np.isfinite(v) for vals in report.min_rmse.values() for v in vals)
        assert all(np.isfinite(v) for v in report.mean_nll)
        assert np.isfinite(report.collision_rate) and np.isfinite(report.offroad_rate)


class TestReferenceFixtures:
    def test_full_scale_reference_values_recorded(self):
        from mmntp.metrics import FULL_SCALE_REFERENCE

        ref = FULL_SCALE_REFERENCE
        assert ref["min_rmse_6_at_5s_ngsim_m"] == 1.96
        assert ref["max_acc_1_highd"] == 0.8204
        assert ref["max_acc_6_highd"] == 0.9603
        assert ref["collision_rate_mmp"] == 0.0246
        assert ref["offroad_rate_mmp"] == 0.0006
        assert 0 < ref["collision_rate_mmp"] < 1
        assert ref["max_acc_1_highd"] < ref["max_acc_6_highd"]


class TestReport:
    def test_report_round_trip_and_table(self):
        rng = np.random.default_rng(10)
        scene = collision_scene([(30.0, 5.0)])
        batch = random_batch(rng, scene=scene)
        report = build_report(batch, ks=[1, 3], meta={"seed": 0})
        obj = report.to_json_dict()
        assert obj["seed"] == 0
        assert len(obj["min_rmse"]["1"]) == len(report.horizons_s)
        table = report.to_text_table()
        assert "minRMSE-1" in table and "CollisionRate" in table
        csv_text = report.to_csv()
        assert csv_text.splitlines()[0].startswith("metric,k,")
        assert batch_div_k(batch, 3) == pytest.approx(report.div[3])
