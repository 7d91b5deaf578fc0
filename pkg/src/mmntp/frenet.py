"""Cartesian <-> Frenet conversion against a polyline reference centerline.

The Frenet frame is (s, d): s is the arc-length position of the foot point,
d the signed lateral offset with left of the travel direction positive.

The polyline is treated as a curve with linearly interpolated headings at the
vertices, which keeps the (s, d) chart smooth across polyline corners and
makes the two transforms exact inverses of each other: frenet_to_cartesian is
the closed-form map, and cartesian_to_frenet inverts it numerically from a
nearest-segment initial guess.
"""

from __future__ import annotations

import numpy as np

from .errors import FrenetRangeError

_NEWTON_TOL = 1e-10
_NEWTON_MAX_ITER = 60


class Centerline:
    """Arc-length parameterised polyline with per-vertex tangents."""

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise ValueError("centerline needs at least two (x, y) points")
        seg = np.diff(pts, axis=0)
        lengths = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(lengths <= 0):
            raise ValueError("centerline contains zero-length segments")
        self.points = pts
        self.seg = seg
        self.lengths = lengths
        self.cum = np.concatenate([[0.0], np.cumsum(lengths)])
        self.dirs = seg / lengths[:, None]
        vertex_t = np.empty_like(pts)
        vertex_t[0] = self.dirs[0]
        vertex_t[-1] = self.dirs[-1]
        if pts.shape[0] > 2:
            mid = self.dirs[:-1] + self.dirs[1:]
            norms = np.hypot(mid[:, 0], mid[:, 1])
            if np.any(norms < 1e-12):
                raise ValueError("centerline reverses direction at a vertex")
            vertex_t[1:-1] = mid / norms[:, None]
        self.vertex_tangents = vertex_t

    @property
    def total_length(self) -> float:
        return float(self.cum[-1])

    def frame(self, s: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Base point, unit tangent, and unit left normal at arc position s."""
        s_cl = min(max(s, 0.0), self.total_length)
        idx = int(np.searchsorted(self.cum, s_cl, side="right") - 1)
        idx = min(max(idx, 0), self.seg.shape[0] - 1)
        alpha = (s_cl - self.cum[idx]) / self.lengths[idx]
        base = self.points[idx] + alpha * self.seg[idx]
        raw = (1.0 - alpha) * self.vertex_tangents[idx] + alpha * self.vertex_tangents[idx + 1]
        tangent = raw / np.hypot(raw[0], raw[1])
        normal = np.array([-tangent[1], tangent[0]])
        return base, tangent, normal

    def nearest_segment_arc(self, p: np.ndarray, prev_idx: int | None) -> tuple[float, int, float]:
        """Clamped-projection initial guess: (s, segment index, unclamped t)."""
        rel = p - self.points[:-1]
        t = np.einsum("ij,ij->i", rel, self.seg) / (self.lengths**2)
        t_cl = np.clip(t, 0.0, 1.0)
        feet = self.points[:-1] + t_cl[:, None] * self.seg
        dist2 = np.sum((feet - p) ** 2, axis=1)
        best = float(dist2.min())
        candidates = np.flatnonzero(dist2 <= best + 1e-12)
        if prev_idx is None or candidates.size == 1:
            idx = int(candidates[0])
        else:
            idx = int(candidates[np.argmin(np.abs(candidates - prev_idx))])
        return float(self.cum[idx] + t_cl[idx] * self.lengths[idx]), idx, float(t[idx])


def cartesian_to_frenet(
    points: np.ndarray,
    centerline: Centerline | np.ndarray,
    out_of_bounds: str = "clamp",
) -> np.ndarray:
    """Convert (x, y) points to (s, d) rows against the centerline.

    The foot point starts from the nearest segment (distance ties broken in
    favour of the segment continuing the previous point's match) and is then
    refined so that the residual is purely lateral in the interpolated frame.
    Points projecting beyond the centerline ends are clamped (s pinned to the
    end) or rejected, per out_of_bounds ("clamp" / "raise").
    """
    if out_of_bounds not in ("clamp", "raise"):
        raise ValueError("out_of_bounds must be 'clamp' or 'raise'")
    cl = centerline if isinstance(centerline, Centerline) else Centerline(centerline)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.empty_like(pts)
    prev_idx = None
    n_seg = cl.seg.shape[0]
    for row, p in enumerate(pts):
        s, idx, t_raw = cl.nearest_segment_arc(p, prev_idx)
        prev_idx = idx
        beyond = (idx == 0 and t_raw < 0.0) or (idx == n_seg - 1 and t_raw > 1.0)
        for _ in range(_NEWTON_MAX_ITER):
            base, tangent, _ = cl.frame(s)
            u = float(np.dot(p - base, tangent))
            s_new = s + u
            if s_new < -_NEWTON_TOL or s_new > cl.total_length + _NEWTON_TOL:
                beyond = True
            s = min(max(s_new, 0.0), cl.total_length)
            if abs(u) < _NEWTON_TOL or beyond:
                break
        if beyond and out_of_bounds == "raise":
            raise FrenetRangeError(f"point {p.tolist()} projects beyond the centerline extent")
        base, _, normal = cl.frame(s)
        out[row, 0] = s
        out[row, 1] = float(np.dot(p - base, normal))
    return out if np.asarray(points).ndim == 2 else out[0]


def frenet_to_cartesian(sd: np.ndarray, centerline: Centerline | np.ndarray) -> np.ndarray:
    """Map (s, d) rows back to Cartesian coordinates; s is clamped to extent."""
    cl = centerline if isinstance(centerline, Centerline) else Centerline(centerline)
    rows = np.atleast_2d(np.asarray(sd, dtype=float))
    out = np.empty_like(rows)
    for row, (s, d) in enumerate(rows):
        base, _, normal = cl.frame(float(s))
        out[row] = base + d * normal
    return out if np.asarray(sd).ndim == 2 else out[0]
