"""Sliding-window samples: building, balancing, splitting, and JSONL I/O."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, MultipleTransitionsInPeriod
from .features import N_FEATURES, extract_features
from .manoeuvre import (
    HorizonConfig,
    auto_label_trajectory,
    encode_manoeuvre_vector,
    labels_from_str,
    labels_to_str,
)
from .scene import Scene

log = logging.getLogger(__name__)


@dataclass
class DatasetSample:
    """One training/evaluation record for a single target vehicle window."""

    features: np.ndarray        # (t_obs, F) raw features
    future_traj: np.ndarray     # (t_pred, 2), relative to the TV at t_end
    future_labels: np.ndarray   # (t_pred,) manoeuvre type values
    mv_types: np.ndarray        # (C + 1,) anchor types of the encoded labels
    mv_times: np.ndarray        # (C,) normalised transition times (-1 sentinel)
    tv_id: int
    scene_ref: str
    t_end: int
    tv_pos: tuple[float, float]
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DatasetConfig:
    t_obs: int = 15
    t_pred: int = 25
    t_change: int = 13
    stride: int = 5
    lateral_speed_eps: float = 0.05

    def horizon(self, fps: int) -> HorizonConfig:
        return HorizonConfig(t_pred=self.t_pred, t_change=self.t_change, fps=fps)


def dominant_class(labels: np.ndarray) -> int:
    """Most frequent label; ties resolve to the smaller manoeuvre value."""
    values, counts = np.unique(np.asarray(labels), return_counts=True)
    return int(values[np.argmax(counts)])


def build_dataset(
    scenes: list[Scene],
    cfg: DatasetConfig,
    scene_refs: list[str] | None = None,
) -> list[DatasetSample]:
    """Slide observation/prediction windows over every vehicle of every scene.

    Windows whose future labels violate the one-transition-per-period rule are
    dropped (and counted in the log); everything else becomes a sample, ordered
    by (scene, vehicle, time).
    """
    if scene_refs is None:
        scene_refs = [f"scene_{i:04d}" for i in range(len(scenes))]
    if len(scene_refs) != len(scenes):
        raise DataError("scene_refs must match scenes")
    samples: list[DatasetSample] = []
    dropped = 0
    for scene, ref in zip(scenes, scene_refs):
        horizon = cfg.horizon(scene.fps)
        for vid in scene.vehicle_ids():
            track = scene.tracks[vid]
            labels = auto_label_trajectory(
                track.states[:, :2],
                scene.geometry.marking_lats,
                scene.fps,
                lateral_speed_eps=cfg.lateral_speed_eps,
                lat_velocities=track.states[:, 3],
            )
            first_end = track.first_frame + cfg.t_obs - 1
            last_end = track.last_frame - cfg.t_pred
            for t_end in range(first_end, last_end + 1, cfg.stride):
                rel = t_end - track.first_frame
                future_labels = labels[rel + 1:rel + 1 + cfg.t_pred]
                try:
                    mv = encode_manoeuvre_vector(future_labels, horizon)
                except MultipleTransitionsInPeriod:
                    dropped += 1
                    continue
                tv_pos = track.states[rel, :2]
                future = track.states[rel + 1:rel + 1 + cfg.t_pred, :2] - tv_pos
                samples.append(DatasetSample(
                    features=extract_features(scene, vid, t_end, cfg.t_obs),
                    future_traj=future.copy(),
                    future_labels=future_labels.copy(),
                    mv_types=np.array([int(u) for u in mv.types], dtype=np.int64),
                    mv_times=np.array(mv.times, dtype=float),
                    tv_id=vid,
                    scene_ref=ref,
                    t_end=t_end,
                    tv_pos=(float(tv_pos[0]), float(tv_pos[1])),
                ))
    if dropped:
        log.info("dropped %d windows with multiple transitions in one period", dropped)
    return samples


def balance_dataset(samples: list[DatasetSample], seed: int) -> list[DatasetSample]:
    """Undersample so every present dominant-manoeuvre class has equal count.

    Deterministic for a given seed; output keeps the original sample order.
    """
    by_class: dict[int, list[int]] = {}
    for idx, sample in enumerate(samples):
        by_class.setdefault(dominant_class(sample.future_labels), []).append(idx)
    if not by_class:
        return []
    target = min(len(v) for v in by_class.values())
    rng = np.random.default_rng(seed)
    keep: list[int] = []
    for cls in sorted(by_class):
        idxs = by_class[cls]
        chosen = rng.choice(len(idxs), size=target, replace=False)
        keep.extend(idxs[i] for i in chosen)
    return [samples[i] for i in sorted(keep)]


def split_dataset(
    samples: list[DatasetSample], test_fraction: float, seed: int
) -> tuple[list[DatasetSample], list[DatasetSample]]:
    """Deterministic shuffled train/test split, order-stable within each part."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(samples))
    n_test = int(round(len(samples) * test_fraction))
    test_idx = sorted(perm[:n_test].tolist())
    train_idx = sorted(perm[n_test:].tolist())
    return [samples[i] for i in train_idx], [samples[i] for i in test_idx]


def class_counts(samples: list[DatasetSample]) -> Counter:
    return Counter(dominant_class(s.future_labels) for s in samples)


def write_samples_jsonl(samples: list[DatasetSample], path, run_config: dict | None = None) -> None:
    """One JSON object per line: {features, future_traj, future_labels, meta}."""
    with open(path, "w", encoding="utf-8") as fh:
        if run_config is not None:
            fh.write(json.dumps({"run_config": run_config}, sort_keys=True) + "\n")
        for s in samples:
            record = {
                "features": np.round(s.features, 9).tolist(),
                "future_traj": np.round(s.future_traj, 9).tolist(),
                "future_labels": labels_to_str(s.future_labels),
                "meta": {
                    "tv_id": s.tv_id,
                    "scene_ref": s.scene_ref,
                    "t_end": s.t_end,
                    "tv_pos": [s.tv_pos[0], s.tv_pos[1]],
                    # Manoeuvre vectors serialise with single-character type
                    # codes, matching the codec's JSON convention.
                    "mv": {
                        "U": [labels_to_str([u]) for u in s.mv_types],
                        "V": s.mv_times.tolist(),
                    },
                    **s.meta,
                },
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_samples_jsonl(path) -> list[DatasetSample]:
    samples: list[DatasetSample] = []
    try:
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                if "run_config" in obj and "features" not in obj:
                    continue
                try:
                    meta = obj["meta"]
                    features = np.asarray(obj["features"], dtype=float)
                    if features.shape[1] != N_FEATURES:
                        raise DataError(
                            f"{path}:{line_no}: expected {N_FEATURES} features per step"
                        )
                    samples.append(DatasetSample(
                        features=features,
                        future_traj=np.asarray(obj["future_traj"], dtype=float),
                        future_labels=labels_from_str(obj["future_labels"]),
                        mv_types=labels_from_str("".join(meta["mv"]["U"])),
                        mv_times=np.asarray(meta["mv"]["V"], dtype=float),
                        tv_id=int(meta["tv_id"]),
                        scene_ref=str(meta["scene_ref"]),
                        t_end=int(meta["t_end"]),
                        tv_pos=(float(meta["tv_pos"][0]), float(meta["tv_pos"][1])),
                    ))
                except (KeyError, IndexError, TypeError) as exc:
                    raise DataError(f"{path}:{line_no}: malformed sample record ({exc})") from exc
    except OSError as exc:
        raise DataError(f"cannot read samples file {path}: {exc}") from exc
    return samples
