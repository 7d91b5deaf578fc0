"""Interaction-aware observation features for one target vehicle.

Fixed 18-feature schema per timestep (raw physical units; standardisation is
applied separately with statistics stored alongside the model):

 0  tv_lat_velocity          m/s
 1  tv_lat_acceleration      m/s^2
 2  tv_long_velocity         m/s
 3  tv_long_acceleration     m/s^2
 4  tv_lane_offset           m, lateral offset from the current lane centre
 5  lane_exists_left         0/1
 6  lane_exists_right        0/1
 7  tv_lane_index            lane index normalised to [0, 1]
 8  preceding_rel_distance   m, sv.x - tv.x, clamped to [-200, 200]
 9  preceding_rel_velocity   m/s, sv.vx - tv.vx
10  following_rel_distance
11  following_rel_velocity
12  left_rel_distance        nearest vehicle in the left adjacent lane
13  left_rel_velocity
14  right_rel_distance       nearest vehicle in the right adjacent lane
15  right_rel_velocity
16  preceding_exists         0/1
17  following_exists         0/1

Absent slots use the sentinel distance 200 m and relative velocity 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .scene import Scene, select_svs

ABSENT_DISTANCE = 200.0

FEATURE_NAMES = (
    "tv_lat_velocity", "tv_lat_acceleration", "tv_long_velocity", "tv_long_acceleration",
    "tv_lane_offset", "lane_exists_left", "lane_exists_right", "tv_lane_index",
    "preceding_rel_distance", "preceding_rel_velocity",
    "following_rel_distance", "following_rel_velocity",
    "left_rel_distance", "left_rel_velocity",
    "right_rel_distance", "right_rel_velocity",
    "preceding_exists", "following_exists",
)
N_FEATURES = len(FEATURE_NAMES)


def extract_features(scene: Scene, tv_id: int, t_end: int, t_obs: int) -> np.ndarray:
    """Raw (t_obs, 18) feature matrix for the window ending at frame t_end."""
    track = scene.tracks.get(tv_id)
    if track is None:
        raise DataError(f"unknown vehicle id {tv_id}")
    t_start = t_end - t_obs + 1
    if t_start < track.first_frame or t_end > track.last_frame:
        raise DataError(
            f"vehicle {tv_id} lacks {t_obs} frames of history ending at {t_end}"
        )
    geo = scene.geometry
    out = np.empty((t_obs, N_FEATURES), dtype=float)
    for i, frame in enumerate(range(t_start, t_end + 1)):
        tv = scene.state_of(tv_id, frame)
        lane = geo.lane_index_of(tv.position[1])
        out[i, 0] = tv.velocity[1]
        out[i, 1] = tv.acceleration[1]
        out[i, 2] = tv.velocity[0]
        out[i, 3] = tv.acceleration[0]
        out[i, 4] = tv.position[1] - geo.lane_center(lane)
        out[i, 5] = 1.0 if lane + 1 < geo.lane_count else 0.0
        out[i, 6] = 1.0 if lane - 1 >= 0 else 0.0
        out[i, 7] = lane / (geo.lane_count - 1) if geo.lane_count > 1 else 0.0

        slots = select_svs(scene, tv_id, frame)
        for j, name in enumerate(("preceding", "following", "left_1", "right_1")):
            vid = slots[name]
            if vid is None:
                out[i, 8 + 2 * j] = ABSENT_DISTANCE
                out[i, 9 + 2 * j] = 0.0
            else:
                sv = scene.state_of(vid, frame)
                rel = sv.position[0] - tv.position[0]
                out[i, 8 + 2 * j] = float(np.clip(rel, -ABSENT_DISTANCE, ABSENT_DISTANCE))
                out[i, 9 + 2 * j] = sv.velocity[0] - tv.velocity[0]
        out[i, 16] = 0.0 if slots["preceding"] is None else 1.0
        out[i, 17] = 0.0 if slots["following"] is None else 1.0
    return out


@dataclass
class FeatureScaler:
    """Per-feature standardisation statistics fitted on a training set."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, feature_matrices) -> "FeatureScaler":
        mats = [np.asarray(m, dtype=float) for m in feature_matrices]
        width = mats[0].shape[-1]
        stacked = np.concatenate([m.reshape(-1, width) for m in mats], axis=0)
        mean = stacked.mean(axis=0)
        std = stacked.std(axis=0)
        std = np.where(std < 1e-8, 1.0, std)
        return cls(mean=mean, std=std)

    def transform(self, features: np.ndarray) -> np.ndarray:
        return (np.asarray(features, dtype=float) - self.mean) / self.std

    @classmethod
    def identity(cls) -> "FeatureScaler":
        return cls(mean=np.zeros(N_FEATURES), std=np.ones(N_FEATURES))
