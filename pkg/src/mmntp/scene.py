"""Highway scenes: lane geometry, vehicle tracks, synthetic generation, CSV I/O.

Conventions: the longitudinal axis x points along the road, the lateral axis y
increases to the left.  Lane 0 is the rightmost lane; lane markings are stored
as increasing lateral positions (lane_count + 1 of them).  All tracks share a
global frame grid at a fixed fps; a vehicle occupies frames
[first_frame, first_frame + len(states)).

Track state columns: x, y, xVelocity, yVelocity, xAcceleration, yAcceleration.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, InfeasibleSceneConfig

STATE_COLUMNS = ("x", "y", "xVelocity", "yVelocity", "xAcceleration", "yAcceleration")
CSV_COLUMNS = (
    "frame", "id", "x", "y", "xVelocity", "yVelocity",
    "xAcceleration", "yAcceleration", "width", "height", "laneId",
)
_META_PREFIX = "# mmntp: "

SV_SLOTS = (
    "preceding", "following",
    "left_1", "left_2", "left_3",
    "right_1", "right_2", "right_3",
)


@dataclass(frozen=True)
class LaneGeometry:
    """Straight-road lane layout in road-aligned coordinates."""

    lane_count: int
    lane_width: float
    marking_lats: np.ndarray
    road_bounds: tuple[float, float]
    centerline: np.ndarray | None = None

    def __post_init__(self) -> None:
        markings = np.asarray(self.marking_lats, dtype=float)
        object.__setattr__(self, "marking_lats", markings)
        if markings.size != self.lane_count + 1:
            raise ValueError("need lane_count + 1 marking positions")
        if np.any(np.diff(markings) <= 0):
            raise ValueError("marking positions must be strictly increasing")
        lo, hi = self.road_bounds
        if lo > markings[0] or hi < markings[-1]:
            raise ValueError("road bounds must bracket all markings")

    @classmethod
    def straight(cls, lane_count: int, lane_width: float = 3.5) -> "LaneGeometry":
        markings = np.arange(lane_count + 1, dtype=float) * lane_width
        return cls(
            lane_count=lane_count,
            lane_width=lane_width,
            marking_lats=markings,
            road_bounds=(float(markings[0]), float(markings[-1])),
        )

    def lane_index_of(self, lat: float) -> int:
        """Lane containing the lateral position, clipped to the outer lanes."""
        idx = int(np.searchsorted(self.marking_lats, lat, side="right")) - 1
        return min(max(idx, 0), self.lane_count - 1)

    def lane_center(self, lane_idx: int) -> float:
        return float(0.5 * (self.marking_lats[lane_idx] + self.marking_lats[lane_idx + 1]))

    def to_json_dict(self) -> dict:
        return {
            "lane_count": self.lane_count,
            "lane_width": self.lane_width,
            "marking_lats": [float(v) for v in self.marking_lats],
            "road_bounds": [float(self.road_bounds[0]), float(self.road_bounds[1])],
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "LaneGeometry":
        return cls(
            lane_count=int(obj["lane_count"]),
            lane_width=float(obj["lane_width"]),
            marking_lats=np.asarray(obj["marking_lats"], dtype=float),
            road_bounds=(float(obj["road_bounds"][0]), float(obj["road_bounds"][1])),
        )


@dataclass(frozen=True)
class VehicleState:
    """Snapshot of one vehicle at one timestep."""

    vehicle_id: int
    position: tuple[float, float]
    velocity: tuple[float, float]
    acceleration: tuple[float, float]
    length: float
    width: float

    def __post_init__(self) -> None:
        if self.length <= 0 or self.width <= 0:
            raise ValueError("vehicle dimensions must be positive")


@dataclass
class Track:
    """Time-indexed states of one vehicle on the shared frame grid."""

    first_frame: int
    states: np.ndarray
    length: float
    width: float

    @property
    def last_frame(self) -> int:
        return self.first_frame + self.states.shape[0] - 1

    def present_at(self, frame: int) -> bool:
        return self.first_frame <= frame <= self.last_frame

    def row(self, frame: int) -> np.ndarray:
        if not self.present_at(frame):
            raise DataError(f"frame {frame} outside track range "
                            f"[{self.first_frame}, {self.last_frame}]")
        return self.states[frame - self.first_frame]


@dataclass
class Scene:
    """Lane geometry plus per-vehicle tracks over a shared frame grid."""

    geometry: LaneGeometry
    tracks: dict[int, Track]
    duration: int
    fps: int
    meta: dict = field(default_factory=dict)

    def vehicle_ids(self) -> list[int]:
        return sorted(self.tracks)

    def ids_present_at(self, frame: int) -> list[int]:
        return [vid for vid in self.vehicle_ids() if self.tracks[vid].present_at(frame)]

    def state_of(self, vehicle_id: int, frame: int) -> VehicleState:
        track = self.tracks[vehicle_id]
        row = track.row(frame)
        return VehicleState(
            vehicle_id=vehicle_id,
            position=(float(row[0]), float(row[1])),
            velocity=(float(row[2]), float(row[3])),
            acceleration=(float(row[4]), float(row[5])),
            length=track.length,
            width=track.width,
        )


@dataclass(frozen=True)
class GeneratorConfig:
    """Knobs for the synthetic highway generator."""

    lanes: int = 3
    lane_width: float = 3.5
    fps: int = 5
    duration_s: float = 40.0
    n_vehicles: int = 12
    lc_rate: float = 0.4
    speed_min: float = 18.0
    speed_max: float = 30.0
    placement_span: float = 400.0
    min_gap: float = 30.0
    lc_duration_min_s: float = 2.0
    lc_duration_max_s: float = 6.0
    vehicle_length: float = 4.5
    vehicle_width: float = 2.0

    def __post_init__(self) -> None:
        if self.lanes < 1 or self.n_vehicles < 1 or self.fps < 1:
            raise InfeasibleSceneConfig("lanes, n_vehicles and fps must be positive")
        if not 0.0 <= self.lc_rate <= 1.0:
            raise InfeasibleSceneConfig("lc_rate must lie in [0, 1]")
        if self.speed_min > self.speed_max or self.speed_min <= 0:
            raise InfeasibleSceneConfig("speed range must be positive and ordered")
        if self.lc_duration_min_s > self.lc_duration_max_s or self.lc_duration_min_s <= 0:
            raise InfeasibleSceneConfig("lane-change duration range must be positive and ordered")


def _quintic(tau: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Quintic ease 0->1 with zero boundary velocity/acceleration, plus d/dtau, d2/dtau2."""
    s = 10 * tau**3 - 15 * tau**4 + 6 * tau**5
    ds = 30 * tau**2 - 60 * tau**3 + 30 * tau**4
    dds = 60 * tau - 180 * tau**2 + 120 * tau**3
    return s, ds, dds


def generate_scene(config: GeneratorConfig, seed: int) -> Scene:
    """Generate a synthetic straight-highway scene, deterministic per seed.

    Vehicles hold constant longitudinal speed; vehicles selected by lc_rate
    execute exactly one lane change with a quintic lateral profile (analytic
    lateral velocity/acceleration columns).
    """
    rng = np.random.default_rng(seed)
    geometry = LaneGeometry.straight(config.lanes, config.lane_width)
    n_frames = int(round(config.duration_s * config.fps))
    if n_frames < 2:
        raise InfeasibleSceneConfig("duration too short for the requested fps")
    dt = 1.0 / config.fps
    times = np.arange(n_frames) * dt

    lanes_of = rng.integers(0, config.lanes, size=config.n_vehicles)
    starts: dict[int, list[float]] = {i: [] for i in range(config.lanes)}
    x0 = np.empty(config.n_vehicles)
    for vid in range(config.n_vehicles):
        lane = int(lanes_of[vid])
        placed = False
        for _ in range(1000):
            cand = float(rng.uniform(0.0, config.placement_span))
            if all(abs(cand - other) >= config.min_gap for other in starts[lane]):
                starts[lane].append(cand)
                x0[vid] = cand
                placed = True
                break
        if not placed:
            raise InfeasibleSceneConfig(
                f"cannot place {config.n_vehicles} vehicles with {config.min_gap} m gaps "
                f"in a {config.placement_span} m span"
            )

    speeds = rng.uniform(config.speed_min, config.speed_max, size=config.n_vehicles)

    tracks: dict[int, Track] = {}
    commanded: dict[int, dict] = {}
    for vid in range(config.n_vehicles):
        lane = int(lanes_of[vid])
        lat0 = geometry.lane_center(lane)
        x = x0[vid] + speeds[vid] * times
        lat = np.full(n_frames, lat0)
        v_lat = np.zeros(n_frames)
        a_lat = np.zeros(n_frames)

        options = [d for d in (-1, +1) if 0 <= lane + d < config.lanes]
        wants_lc = bool(options) and rng.random() < config.lc_rate
        if wants_lc:
            direction = int(rng.choice(options))
            dur_steps = int(rng.integers(
                round(config.lc_duration_min_s * config.fps),
                round(config.lc_duration_max_s * config.fps) + 1,
            ))
            latest_start = n_frames - dur_steps - config.fps
            if latest_start > config.fps:
                start_step = int(rng.integers(config.fps, latest_start))
                delta = geometry.lane_center(lane + direction) - lat0
                duration = dur_steps * dt
                tau = np.clip((times - start_step * dt) / duration, 0.0, 1.0)
                s, ds, dds = _quintic(tau)
                inside = (tau > 0.0) & (tau < 1.0)
                lat = lat0 + delta * s
                v_lat = np.where(inside, delta * ds / duration, 0.0)
                a_lat = np.where(inside, delta * dds / duration**2, 0.0)
                commanded[vid] = {
                    "direction": "left" if direction > 0 else "right",
                    "start_step": start_step,
                    "duration_steps": dur_steps,
                }

        states = np.stack([
            x, lat,
            np.full(n_frames, speeds[vid]), v_lat,
            np.zeros(n_frames), a_lat,
        ], axis=1)
        tracks[vid] = Track(
            first_frame=0,
            states=states,
            length=config.vehicle_length,
            width=config.vehicle_width,
        )

    return Scene(
        geometry=geometry,
        tracks=tracks,
        duration=n_frames,
        fps=config.fps,
        meta={"seed": int(seed), "lane_changes": commanded},
    )


def select_svs(scene: Scene, tv_id: int, frame: int) -> dict[str, int | None]:
    """Assign up to eight surrounding vehicles to their interaction slots.

    Same lane: nearest vehicle ahead (preceding) and behind (following).
    Each adjacent lane: up to three vehicles nearest by absolute longitudinal
    gap, ordered closest first.  Empty slots are None.  Ties break on the
    smaller gap first, then lower vehicle id.
    """
    tv = scene.state_of(tv_id, frame)
    tv_lane = scene.geometry.lane_index_of(tv.position[1])
    slots: dict[str, int | None] = {name: None for name in SV_SLOTS}

    same, left, right = [], [], []
    for vid in scene.ids_present_at(frame):
        if vid == tv_id:
            continue
        sv = scene.state_of(vid, frame)
        lane = scene.geometry.lane_index_of(sv.position[1])
        gap = sv.position[0] - tv.position[0]
        if lane == tv_lane:
            same.append((gap, vid))
        elif lane == tv_lane + 1:
            left.append((abs(gap), vid))
        elif lane == tv_lane - 1:
            right.append((abs(gap), vid))

    ahead = sorted(((g, v) for g, v in same if g > 0))
    behind = sorted(((-g, v) for g, v in same if g <= 0))
    if ahead:
        slots["preceding"] = ahead[0][1]
    if behind:
        slots["following"] = behind[0][1]
    for prefix, pool in (("left", left), ("right", right)):
        for rank, (_, vid) in enumerate(sorted(pool)[:3], start=1):
            slots[f"{prefix}_{rank}"] = vid
    return slots


def _format_float(value: float) -> str:
    return f"{value:.6f}"


def scene_to_csv(scene: Scene, path, run_config: dict | None = None) -> None:
    """Write a scene as a highD-style CSV (header row, one row per vehicle-frame).

    The CSV "width" column is the vehicle length (longitudinal extent) and
    "height" the vehicle width, following the highD column conventions.  A
    leading comment line carries the geometry/fps metadata our reader uses.
    """
    meta = {
        "fps": scene.fps,
        "duration": scene.duration,
        "geometry": scene.geometry.to_json_dict(),
    }
    if run_config is not None:
        meta["run_config"] = run_config
    buf = io.StringIO()
    buf.write(_META_PREFIX + json.dumps(meta, sort_keys=True) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for vid in scene.vehicle_ids():
        track = scene.tracks[vid]
        for offset, row in enumerate(track.states):
            frame = track.first_frame + offset
            lane_id = scene.geometry.lane_index_of(float(row[1])) + 1
            writer.writerow(
                [frame, vid]
                + [_format_float(v) for v in row]
                + [_format_float(track.length), _format_float(track.width), lane_id]
            )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())


def scene_from_csv(path, fps: int | None = None, geometry: LaneGeometry | None = None) -> Scene:
    """Read a highD-schema CSV back into a Scene.

    Files written by scene_to_csv carry geometry and fps in a comment line;
    external recordings must supply both explicitly.  Frames of each vehicle
    must be contiguous.
    """
    meta: dict = {}
    try:
        with open(path, encoding="utf-8") as fh:
            first = fh.readline()
            if first.startswith(_META_PREFIX):
                meta = json.loads(first[len(_META_PREFIX):])
                header_line = fh.readline()
            else:
                header_line = first
            header = next(csv.reader([header_line]))
            missing = [c for c in CSV_COLUMNS if c not in header]
            if missing:
                raise DataError(f"CSV {path} is missing columns {missing}")
            col = {name: header.index(name) for name in CSV_COLUMNS}
            rows: dict[int, list[tuple[int, list[float], float, float]]] = {}
            for parts in csv.reader(fh):
                if not parts:
                    continue
                vid = int(parts[col["id"]])
                frame = int(parts[col["frame"]])
                state = [float(parts[col[c]]) for c in STATE_COLUMNS]
                rows.setdefault(vid, []).append(
                    (frame, state, float(parts[col["width"]]), float(parts[col["height"]]))
                )
    except OSError as exc:
        raise DataError(f"cannot read scene CSV {path}: {exc}") from exc

    if fps is None:
        fps = int(meta.get("fps", 0))
        if fps <= 0:
            raise DataError("fps not in CSV metadata; pass it explicitly")
    if geometry is None:
        if "geometry" not in meta:
            raise DataError("lane geometry not in CSV metadata; pass it explicitly")
        geometry = LaneGeometry.from_json_dict(meta["geometry"])

    tracks: dict[int, Track] = {}
    duration = 0
    for vid, entries in rows.items():
        entries.sort(key=lambda e: e[0])
        frames = [e[0] for e in entries]
        if frames != list(range(frames[0], frames[0] + len(frames))):
            raise DataError(f"vehicle {vid} has non-contiguous frames")
        states = np.array([e[1] for e in entries], dtype=float)
        tracks[vid] = Track(
            first_frame=frames[0],
            states=states,
            length=entries[0][2],
            width=entries[0][3],
        )
        duration = max(duration, frames[-1] + 1)

    if not tracks:
        raise DataError(f"scene CSV {path} contains no vehicle rows")
    extra = {"run_config": meta["run_config"]} if "run_config" in meta else {}
    return Scene(geometry=geometry, tracks=tracks, duration=duration, fps=fps, meta=extra)
