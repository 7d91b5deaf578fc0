import numpy as np
import pytest

from mmntp.dataset import (
    DatasetConfig,
    balance_dataset,
    build_dataset,
    class_counts,
    dominant_class,
    read_samples_jsonl,
    split_dataset,
    write_samples_jsonl,
)
from mmntp.errors import DataError
from mmntp.features import ABSENT_DISTANCE, FeatureScaler, N_FEATURES, extract_features
from mmntp.manoeuvre import ManoeuvreType
from mmntp.scene import GeneratorConfig, LaneGeometry, Scene, Track, generate_scene, select_svs


def make_scene(tracks_spec, lanes=3, n=40, fps=5):
    tracks = {}
    for vid, (x0, lat, speed) in tracks_spec.items():
        times = np.arange(n) / fps
        states = np.stack([
            x0 + speed * times, np.full(n, lat),
            np.full(n, speed), np.zeros(n),
            np.zeros(n), np.zeros(n),
        ], axis=1)
        tracks[vid] = Track(first_frame=0, states=states, length=4.5, width=2.0)
    return Scene(geometry=LaneGeometry.straight(lanes), tracks=tracks, duration=n, fps=fps)


class TestExtractFeatures:
    def test_stationary_tv_no_svs(self):
        scene = make_scene({0: (50.0, 1.75, 0.0)})
        feats = extract_features(scene, 0, 10, 5)
        assert feats.shape == (5, N_FEATURES)
        assert np.all(feats[:, 0:4] == 0.0)          # motion features
        assert np.all(feats[:, 4] == 0.0)            # centred in lane
        assert np.all(feats[:, 8] == ABSENT_DISTANCE)
        assert np.all(feats[:, 16:18] == 0.0)

    def test_constant_speed_column(self):
        scene = make_scene({0: (0.0, 1.75, 20.0)})
        feats = extract_features(scene, 0, 20, 10)
        assert np.all(feats[:, 2] == 20.0)

    def test_matches_direct_recomputation_on_random_scene(self):
        cfg = GeneratorConfig(lanes=3, n_vehicles=10, lc_rate=0.4)
        scene = generate_scene(cfg, seed=11)
        geo = scene.geometry
        for tv in scene.vehicle_ids()[:4]:
            t_end, t_obs = 60, 8
            feats = extract_features(scene, tv, t_end, t_obs)
            for i, frame in enumerate(range(t_end - t_obs + 1, t_end + 1)):
                tv_state = scene.state_of(tv, frame)
                lane = geo.lane_index_of(tv_state.position[1])
                assert feats[i, 0] == tv_state.velocity[1]
                assert feats[i, 1] == tv_state.acceleration[1]
                assert feats[i, 2] == tv_state.velocity[0]
                assert feats[i, 3] == tv_state.acceleration[0]
                assert feats[i, 4] == pytest.approx(
                    tv_state.position[1] - geo.lane_center(lane))
                assert feats[i, 5] == float(lane + 1 < geo.lane_count)
                assert feats[i, 6] == float(lane - 1 >= 0)
                slots = select_svs(scene, tv, frame)
                for j, name in enumerate(("preceding", "following", "left_1", "right_1")):
                    vid = slots[name]
                    if vid is None:
                        assert feats[i, 8 + 2 * j] == ABSENT_DISTANCE
                        assert feats[i, 9 + 2 * j] == 0.0
                    else:
                        sv = scene.state_of(vid, frame)
                        expected = np.clip(sv.position[0] - tv_state.position[0],
                                           -ABSENT_DISTANCE, ABSENT_DISTANCE)
                        assert feats[i, 8 + 2 * j] == pytest.approx(expected)
                        assert feats[i, 9 + 2 * j] == pytest.approx(
                            sv.velocity[0] - tv_state.velocity[0])

    def test_insufficient_history_rejected(self):
        scene = make_scene({0: (0.0, 1.75, 20.0)}, n=10)
        with pytest.raises(DataError):
            extract_features(scene, 0, 5, 10)

    def test_scaler_round_trip_and_constant_columns(self):
        rng = np.random.default_rng(0)
        mats = [rng.normal(size=(6, N_FEATURES)) for _ in range(5)]
        for m in mats:
            m[:, 5] = 1.0  # constant column must not blow up
        scaler = FeatureScaler.fit(mats)
        z = scaler.transform(mats[0])
        assert np.all(np.isfinite(z))
        assert np.allclose(z[:, 5], 0.0)


class TestBuildDataset:
    def test_windows_and_relative_future(self):
        cfg = GeneratorConfig(lanes=2, n_vehicles=4, lc_rate=0.5, duration_s=30)
        scene = generate_scene(cfg, seed=3)
        dcfg = DatasetConfig(t_obs=10, t_pred=20, t_change=10, stride=7)
        samples = build_dataset([scene], dcfg)
        assert samples
        for s in samples:
            assert s.features.shape == (10, N_FEATURES)
            assert s.future_traj.shape == (20, 2)
            assert s.future_labels.shape == (20,)
            assert np.all(np.isfinite(s.features))
            assert np.all(np.isfinite(s.future_traj))
            track = scene.tracks[s.tv_id]
            rel = s.t_end - track.first_frame
            expected = track.states[rel + 1:rel + 21, :2] - track.states[rel, :2]
            assert np.allclose(s.future_traj, expected)

    def test_order_stable_by_scene_vehicle_time(self):
        cfg = GeneratorConfig(lanes=2, n_vehicles=3, duration_s=25)
        scenes = [generate_scene(cfg, seed=s) for s in (0, 1)]
        dcfg = DatasetConfig(t_obs=5, t_pred=10, t_change=5, stride=10)
        samples = build_dataset(scenes, dcfg)
        keys = [(s.scene_ref, s.tv_id, s.t_end) for s in samples]
        assert keys == sorted(keys)


class TestBalanceAndSplit:
    def _samples_with_classes(self, counts):
        cfg = GeneratorConfig(lanes=2, n_vehicles=2, duration_s=20)
        scene = generate_scene(cfg, seed=0)
        base = build_dataset([scene], DatasetConfig(t_obs=5, t_pred=10, t_change=5, stride=20))[0]
        out = []
        for cls, n in counts.items():
            for _ in range(n):
                import copy
                s = copy.deepcopy(base)
                s.future_labels = np.full(10, cls, dtype=np.int64)
                out.append(s)
        return out

    def test_undersampling_definition(self):
        samples = self._samples_with_classes({int(ManoeuvreType.LK): 90,
                                              int(ManoeuvreType.LLC): 10})
        balanced = balance_dataset(samples, seed=0)
        counts = class_counts(balanced)
        assert counts[int(ManoeuvreType.LK)] == 10
        assert counts[int(ManoeuvreType.LLC)] == 10

    def test_balance_deterministic(self):
        samples = self._samples_with_classes({0: 40, 1: 25, 2: 10})
        a = balance_dataset(samples, seed=5)
        b = balance_dataset(samples, seed=5)
        assert [(s.tv_id, s.t_end, s.future_labels[0]) for s in a] == \
               [(s.tv_id, s.t_end, s.future_labels[0]) for s in b]

    def test_counts_equal_min_present_class(self):
        samples = self._samples_with_classes({0: 33, 1: 21, 2: 7})
        counts = class_counts(balance_dataset(samples, seed=1))
        assert set(counts.values()) == {7}

    def test_dominant_class_tie_breaks_low(self):
        labels = np.array([0, 0, 1, 1], dtype=np.int64)
        assert dominant_class(labels) == 0

    def test_split_deterministic_and_disjoint(self):
        samples = self._samples_with_classes({0: 30, 1: 30})
        tr1, te1 = split_dataset(samples, 0.2, seed=3)
        tr2, te2 = split_dataset(samples, 0.2, seed=3)
        assert len(te1) == 12 and len(tr1) == 48
        assert [id(s) for s in tr1] == [id(s) for s in tr2]
        assert [id(s) for s in te1] == [id(s) for s in te2]


class TestJsonl:
    def test_round_trip(self, tmp_path):
        cfg = GeneratorConfig(lanes=2, n_vehicles=4, lc_rate=0.5, duration_s=25)
        scene = generate_scene(cfg, seed=4)
        samples = build_dataset([scene], DatasetConfig(t_obs=5, t_pred=10, t_change=5, stride=9))
        path = tmp_path / "samples.jsonl"
        write_samples_jsonl(samples, path, run_config={"seed": 4})
        loaded = read_samples_jsonl(path)
        assert len(loaded) == len(samples)
        for a, b in zip(samples, loaded):
            assert np.allclose(a.features, b.features, atol=1e-8)
            assert np.allclose(a.future_traj, b.future_traj, atol=1e-8)
            assert np.array_equal(a.future_labels, b.future_labels)
            assert np.array_equal(a.mv_types, b.mv_types)
            assert (a.tv_id, a.scene_ref, a.t_end) == (b.tv_id, b.scene_ref, b.t_end)

    def test_malformed_record_raises(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"features": [[0.0]], "future_traj": [], "future_labels": "K"}\n')
        with pytest.raises(DataError):
            read_samples_jsonl(path)
