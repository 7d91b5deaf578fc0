"""Manoeuvre labels and their compact vector representation.

A per-timestep label sequence over the prediction horizon is summarised by a
pair (U, V): U holds C+1 manoeuvre types anchored at the change-period
boundaries, V holds C transition times, each normalised to the duration of
its change period, with -1 marking periods without a transition.  At most one
transition may occur per change period.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np

from .errors import MultipleTransitionsInPeriod

NO_TRANSITION = -1.0


class ManoeuvreType(IntEnum):
    """Highway manoeuvre classes; the value order is the fixed tie-break order."""

    LK = 0
    RLC = 1
    LLC = 2

    @property
    def code(self) -> str:
        return _TYPE_TO_CODE[self]


_TYPE_TO_CODE = {ManoeuvreType.LK: "K", ManoeuvreType.RLC: "R", ManoeuvreType.LLC: "L"}
_CODE_TO_TYPE = {v: k for k, v in _TYPE_TO_CODE.items()}


def labels_to_str(labels: Iterable[int]) -> str:
    """Serialise a label sequence as single-character codes (K/R/L)."""
    return "".join(_TYPE_TO_CODE[ManoeuvreType(int(v))] for v in labels)


def labels_from_str(text: str) -> np.ndarray:
    try:
        return np.array([_CODE_TO_TYPE[c] for c in text], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"unknown manoeuvre code {exc.args[0]!r}") from None


def num_change_periods(t_pred: int, t_change: int) -> int:
    """Number of change periods C = ceil(t_pred / t_change)."""
    if t_pred <= 0 or t_change <= 0:
        raise ValueError(f"horizon lengths must be positive, got ({t_pred}, {t_change})")
    return -(-int(t_pred) // int(t_change))


@dataclass(frozen=True)
class HorizonConfig:
    """Prediction horizon layout: t_pred timesteps split into change periods."""

    t_pred: int
    t_change: int
    fps: int = 5

    def __post_init__(self) -> None:
        if self.t_pred <= 0 or self.t_change <= 0 or self.fps <= 0:
            raise ValueError("t_pred, t_change and fps must be positive")
        if self.t_change > self.t_pred:
            raise ValueError("t_change must not exceed t_pred")

    @property
    def n_periods(self) -> int:
        return num_change_periods(self.t_pred, self.t_change)

    def period_bounds(self, i: int) -> tuple[int, int]:
        """Half-open 0-based index range [start, stop) of period i in 1..C."""
        start = (i - 1) * self.t_change
        stop = min(i * self.t_change, self.t_pred)
        return start, stop


@dataclass(frozen=True)
class ManoeuvreVector:
    """(U, V) pair: C+1 anchor types plus C normalised transition times."""

    types: tuple[ManoeuvreType, ...]
    times: tuple[float, ...] = field(default=())

    def __post_init__(self) -> None:
        if len(self.types) != len(self.times) + 1:
            raise ValueError("need exactly one more type anchor than transition times")
        for i, v in enumerate(self.times, start=1):
            same = self.types[i - 1] == self.types[i]
            if same and v != NO_TRANSITION:
                raise ValueError(f"v_{i} must be -1 when u_{i-1} == u_{i}")
            if not same and not 0.0 <= v <= 1.0:
                raise ValueError(f"v_{i} must lie in [0, 1] when u_{i-1} != u_{i}")

    @property
    def n_periods(self) -> int:
        return len(self.times)

    def to_json_dict(self) -> dict:
        return {
            "U": [t.code for t in self.types],
            "V": [float(v) for v in self.times],
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "ManoeuvreVector":
        types = tuple(_CODE_TO_TYPE[c] for c in obj["U"])
        return cls(types=types, times=tuple(float(v) for v in obj["V"]))


def _as_label_array(labels: Sequence[int] | np.ndarray) -> np.ndarray:
    arr = np.asarray(labels, dtype=np.int64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("labels must be a non-empty 1-d sequence")
    return arr


def encode_manoeuvre_vector(labels: Sequence[int] | np.ndarray, cfg: HorizonConfig) -> ManoeuvreVector:
    """Compress a per-timestep label sequence into its (U, V) representation.

    A transition at 0-based step k (the first step carrying the new label) is
    attributed to period ceil(k / t_change); a transition landing exactly on a
    period boundary therefore closes the preceding period with v = 1.
    Raises MultipleTransitionsInPeriod when a period contains more than one
    transition.
    """
    arr = _as_label_array(labels)
    if arr.size != cfg.t_pred:
        raise ValueError(f"expected {cfg.t_pred} labels, got {arr.size}")
    c = cfg.n_periods

    anchors = [0] + [i * cfg.t_change for i in range(1, c)] + [cfg.t_pred - 1]
    types = tuple(ManoeuvreType(int(arr[a])) for a in anchors)

    transition_steps = np.flatnonzero(arr[1:] != arr[:-1]) + 1
    per_period: dict[int, list[int]] = {}
    for k in transition_steps.tolist():
        period = -(-k // cfg.t_change)
        per_period.setdefault(period, []).append(k)

    times = []
    for i in range(1, c + 1):
        steps = per_period.get(i, [])
        if len(steps) > 1:
            raise MultipleTransitionsInPeriod(
                f"{len(steps)} transitions in change period {i} (steps {steps})"
            )
        if not steps:
            times.append(NO_TRANSITION)
        else:
            start, stop = cfg.period_bounds(i)
            times.append((steps[0] - start) / (stop - start))
    return ManoeuvreVector(types=types, times=tuple(times))


def decode_manoeuvre_vector(mv: ManoeuvreVector, cfg: HorizonConfig) -> np.ndarray:
    """Expand a (U, V) pair back into a per-timestep label sequence.

    Within period i the labels switch from u_{i-1} to u_i at
    start_of_period + round(v_i * period_length); exact inverse of
    encode_manoeuvre_vector for grid-aligned transitions.
    """
    if mv.n_periods != cfg.n_periods:
        raise ValueError(f"vector has {mv.n_periods} periods, horizon expects {cfg.n_periods}")
    out = np.empty(cfg.t_pred, dtype=np.int64)
    for i in range(1, cfg.n_periods + 1):
        start, stop = cfg.period_bounds(i)
        before, after = int(mv.types[i - 1]), int(mv.types[i])
        if before == after:
            out[start:stop] = before
            continue
        switch = start + int(round(mv.times[i - 1] * (stop - start)))
        out[start:stop] = before
        out[max(switch, start):stop] = after
    # The final anchor pins the last timestep even when the switch lands on it.
    out[-1] = int(mv.types[-1])
    return out


def auto_label_trajectory(
    traj: np.ndarray,
    lane_markings: Sequence[float] | np.ndarray,
    fps: int,
    lateral_speed_eps: float = 0.05,
    lat_velocities: np.ndarray | None = None,
) -> np.ndarray:
    """Label each timestep of a (long, lat) trajectory as LK/RLC/LLC.

    Steps belonging to a lane-marking crossing episode are labelled RLC
    (rightward, decreasing lateral coordinate) or LLC (leftward); the episode
    extends backward and forward from the crossing while the absolute lateral
    speed stays above lateral_speed_eps.  Everything else is LK.

    lat_velocities, when given, replaces the finite-difference lateral speed
    estimate (generated scenes carry exact analytic values).
    """
    pts = np.asarray(traj, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
        raise ValueError("trajectory must be an (n >= 2, 2) array of (long, lat) points")
    markings = np.asarray(lane_markings, dtype=float)
    lat = pts[:, 1]
    n = pts.shape[0]

    if lat_velocities is not None:
        v_lat = np.asarray(lat_velocities, dtype=float)
        if v_lat.shape != (n,):
            raise ValueError("lat_velocities must match the trajectory length")
    else:
        v_lat = np.gradient(lat) * fps

    labels = np.full(n, ManoeuvreType.LK, dtype=np.int64)
    moving = np.abs(v_lat) > lateral_speed_eps
    for m in markings:
        side = np.sign(lat - m)
        # Samples exactly on the marking take the side they are moving to, so
        # a grid-aligned touch during a crossing is still detected (and a
        # touch-and-return is not).
        for t in range(n - 2, -1, -1):
            if side[t] == 0:
                side[t] = side[t + 1]
        for t in range(1, n):
            if side[t] == 0:
                side[t] = side[t - 1]
        crossed = np.flatnonzero(side[1:] * side[:-1] < 0)
        for t in crossed.tolist():
            direction = ManoeuvreType.LLC if lat[t + 1] > lat[t] else ManoeuvreType.RLC
            lo = t
            while lo > 0 and moving[lo - 1]:
                lo -= 1
            hi = t + 1
            while hi < n - 1 and moving[hi + 1]:
                hi += 1
            labels[lo:hi + 1] = direction
    return labels
