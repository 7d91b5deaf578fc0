"""Multimodal evaluation suite: trajectory error, likelihood, manoeuvre
accuracy, plausibility (collision/offroad), and mode diversity.

All metrics are pure folds over an EvaluationBatch.  Per-horizon metrics
report values at whole seconds (step h*fps of the prediction window).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Final

import numpy as np

from .dataset import DatasetSample
from .errors import DataError
from .model import ManoeuvreTrajectoryPredictor, ModePrediction
from .scene import Scene
from .training import bvn_nll

OVERLAP_LAT_M: Final = 2.0
OVERLAP_LONG_M: Final = 5.0

# Published full-scale reference results for this framework (N=6 modes,
# trained on the public NGSIM/highD benchmark recordings).  Desk-scale
# synthetic runs are not expected to reproduce them; they document the
# target operating points of the metric suite.
FULL_SCALE_REFERENCE: Final = {
    "min_rmse_6_at_5s_ngsim_m": 1.96,
    "max_acc_1_highd": 0.8204,
    "max_acc_6_highd": 0.9603,
    "collision_rate_mmp": 0.0246,
    "offroad_rate_mmp": 0.0006,
}


@dataclass
class EvalSample:
    """One evaluated window: predicted modes plus ground truth and context."""

    modes: list[ModePrediction]       # sorted by probability, descending
    gt_traj: np.ndarray               # (T, 2) TV-relative ground truth
    gt_labels: np.ndarray             # (T,)
    tv_pos: tuple[float, float]       # absolute TV position at t_end
    tv_id: int = -1
    t_end: int = -1
    scene: Scene | None = None
    tv_length: float = 4.5
    tv_width: float = 2.0


@dataclass
class EvaluationBatch:
    samples: list[EvalSample]
    fps: int

    def __post_init__(self) -> None:
        lengths = {s.gt_traj.shape[0] for s in self.samples}
        if len(lengths) > 1:
            raise DataError(f"inconsistent horizon lengths in batch: {sorted(lengths)}")

    @property
    def t_pred(self) -> int:
        return self.samples[0].gt_traj.shape[0] if self.samples else 0

    def default_horizons(self) -> list[int]:
        return list(range(1, self.t_pred // self.fps + 1))


def _horizon_steps(batch: EvaluationBatch, horizons_s: list[int] | None) -> tuple[list[int], list[int]]:
    horizons = batch.default_horizons() if horizons_s is None else list(horizons_s)
    steps = []
    for h in horizons:
        step = h * batch.fps - 1
        if not 0 <= step < batch.t_pred:
            raise ValueError(f"horizon {h}s exceeds the prediction window")
        steps.append(step)
    return horizons, steps


def _top_k(modes: list[ModePrediction], k: int) -> list[ModePrediction]:
    order = np.argsort([-m.prob for m in modes], kind="stable")
    return [modes[i] for i in order[:k]]


def min_rmse_k(batch: EvaluationBatch, k: int, horizons_s: list[int] | None = None) -> np.ndarray:
    """Per-horizon RMSE of the best of the top-k most probable modes.

    At each horizon the squared displacement is minimised over the top-k modes
    per sample, then averaged over the batch and rooted; the result is
    non-increasing in k at every horizon.
    """
    _validate_k(batch, k)
    _, steps = _horizon_steps(batch, horizons_s)
    per_horizon = np.zeros(len(steps))
    for sample in batch.samples:
        top = _top_k(sample.modes, k)
        errs = np.stack([
            np.sum((m.mean_traj[steps] - sample.gt_traj[steps]) ** 2, axis=1) for m in top
        ])
        per_horizon += errs.min(axis=0)
    return np.sqrt(per_horizon / len(batch.samples))


def mean_nll(batch: EvaluationBatch, horizons_s: list[int] | None = None) -> np.ndarray:
    """Probability-weighted average NLL over all prediction modes, per horizon."""
    _, steps = _horizon_steps(batch, horizons_s)
    totals = np.zeros(len(steps))
    for sample in batch.samples:
        for mode in sample.modes:
            for j, step in enumerate(steps):
                totals[j] += mode.prob * bvn_nll(mode.traj_params[step], sample.gt_traj[step])
    return totals / len(batch.samples)


def max_acc_k(batch: EvaluationBatch, k: int) -> float:
    """Best per-step manoeuvre accuracy among the top-k modes, batch mean."""
    _validate_k(batch, k)
    total = 0.0
    for sample in batch.samples:
        top = _top_k(sample.modes, k)
        total += max(float(np.mean(m.labels == sample.gt_labels)) for m in top)
    return total / len(batch.samples)


def _boxes_overlap(pos_a, dims_a, pos_b, dims_b) -> bool:
    """Axis-aligned (road frame) rectangle overlap, strict."""
    return (
        abs(pos_a[0] - pos_b[0]) < (dims_a[0] + dims_b[0]) / 2.0
        and abs(pos_a[1] - pos_b[1]) < (dims_a[1] + dims_b[1]) / 2.0
    )


def _mode_collides(sample: EvalSample, mode: ModePrediction) -> bool:
    scene = sample.scene
    if scene is None:
        raise DataError("collision metric needs the scene reference")
    tv_dims = (sample.tv_length, sample.tv_width)
    for step in range(mode.mean_traj.shape[0]):
        frame = sample.t_end + 1 + step
        pred_abs = (sample.tv_pos[0] + mode.mean_traj[step, 0],
                    sample.tv_pos[1] + mode.mean_traj[step, 1])
        for vid in scene.ids_present_at(frame):
            if vid == sample.tv_id:
                continue
            sv = scene.state_of(vid, frame)
            if _boxes_overlap(pred_abs, tv_dims, sv.position, (sv.length, sv.width)):
                return True
    return False


def _mode_offroad(sample: EvalSample, mode: ModePrediction) -> bool:
    scene = sample.scene
    if scene is None:
        raise DataError("offroad metric needs the scene reference")
    lo, hi = scene.geometry.road_bounds
    lat = sample.tv_pos[1] + mode.mean_traj[:, 1]
    return bool(np.any((lat < lo) | (lat > hi)))


def collision_rate(batch: EvaluationBatch) -> float:
    """Fraction of (sample, mode) pairs whose predicted box ever overlaps an SV box."""
    flags = [
        _mode_collides(sample, mode)
        for sample in batch.samples for mode in sample.modes
    ]
    return float(np.mean(flags)) if flags else 0.0


def offroad_rate(batch: EvaluationBatch) -> float:
    """Fraction of (sample, mode) pairs whose predicted centre exits the road bounds."""
    flags = [
        _mode_offroad(sample, mode)
        for sample in batch.samples for mode in sample.modes
    ]
    return float(np.mean(flags)) if flags else 0.0


def div_k(modes: list[ModePrediction], k: int) -> float:
    """Pairwise endpoint diversity of the top-k modes, in [0, 1].

    A pair overlaps when both endpoint gaps are small: |lat| < 2 m and
    |long| < 5 m.  div = 1 - (overlapping ordered pairs) / (k * (k - 1)).
    """
    if k < 2:
        raise ValueError("div_k needs k >= 2")
    if k > len(modes):
        raise ValueError(f"k={k} exceeds the {len(modes)} available modes")
    top = _top_k(modes, k)
    ends = np.stack([m.mean_traj[-1] for m in top])
    overlaps = 0
    for i in range(k):
        for j in range(k):
            if i == j:
                continue
            d_long = abs(ends[i, 0] - ends[j, 0])
            d_lat = abs(ends[i, 1] - ends[j, 1])
            if d_lat < OVERLAP_LAT_M and d_long < OVERLAP_LONG_M:
                overlaps += 1
    return 1.0 - overlaps / (k * (k - 1))


def batch_div_k(batch: EvaluationBatch, k: int) -> float:
    return float(np.mean([div_k(s.modes, k) for s in batch.samples]))


def _validate_k(batch: EvaluationBatch, k: int) -> None:
    n_modes = min(len(s.modes) for s in batch.samples) if batch.samples else 0
    if k < 1 or k > n_modes:
        raise ValueError(f"k={k} outside [1, {n_modes}]")


# ----------------------------------------------------------------------
# Report
# ----------------------------------------------------------------------

@dataclass
class MetricsReport:
    horizons_s: list[int]
    ks: list[int]
    min_rmse: dict[int, list[float]]
    mean_nll: list[float]
    max_acc: dict[int, float]
    div: dict[int, float]
    collision_rate: float
    offroad_rate: float
    n_samples: int
    n_modes: int
    meta: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "horizons_s": self.horizons_s,
            "ks": self.ks,
            "min_rmse": {str(k): v for k, v in self.min_rmse.items()},
            "mean_nll": self.mean_nll,
            "max_acc": {str(k): v for k, v in self.max_acc.items()},
            "div": {str(k): v for k, v in self.div.items()},
            "collision_rate": self.collision_rate,
            "offroad_rate": self.offroad_rate,
            "n_samples": self.n_samples,
            "n_modes": self.n_modes,
            **self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n"

    def to_text_table(self) -> str:
        """Aligned per-horizon table in the style of the result tables."""
        header = ["metric"] + [f"{h} s" for h in self.horizons_s]
        rows = [header]
        for k in self.ks:
            rows.append([f"minRMSE-{k}"] + [f"{v:.3f}" for v in self.min_rmse[k]])
        rows.append(["meanNLL"] + [f"{v:.3f}" for v in self.mean_nll])
        for k in self.ks:
            rows.append([f"maxACC-{k}", f"{self.max_acc[k]:.3f}"] + [""] * (len(self.horizons_s) - 1))
        for k in self.ks:
            if k >= 2:
                rows.append([f"div-{k}", f"{self.div[k]:.3f}"] + [""] * (len(self.horizons_s) - 1))
        rows.append(["CollisionRate", f"{self.collision_rate * 100:.2f}%"] + [""] * (len(self.horizons_s) - 1))
        rows.append(["OffroadRate", f"{self.offroad_rate * 100:.2f}%"] + [""] * (len(self.horizons_s) - 1))
        widths = [max(len(r[c]) for r in rows) for c in range(len(header))]
        lines = []
        for i, row in enumerate(rows):
            lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
            if i == 0:
                lines.append("-" * (sum(widths) + 2 * (len(widths) - 1)))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        """Delimited per-horizon table: one row per (metric, K)."""
        lines = ["metric,k," + ",".join(f"h{h}s" for h in self.horizons_s)]
        for k in self.ks:
            lines.append(f"minRMSE,{k}," + ",".join(f"{v:.6f}" for v in self.min_rmse[k]))
        lines.append("meanNLL,," + ",".join(f"{v:.6f}" for v in self.mean_nll))
        pad = "," * (len(self.horizons_s) - 1)
        for k in self.ks:
            lines.append(f"maxACC,{k},{self.max_acc[k]:.6f}" + pad)
        for k in self.ks:
            if k >= 2:
                lines.append(f"div,{k},{self.div[k]:.6f}" + pad)
        lines.append(f"CollisionRate,,{self.collision_rate:.6f}" + pad)
        lines.append(f"OffroadRate,,{self.offroad_rate:.6f}" + pad)
        return "\n".join(lines) + "\n"


def build_report(
    batch: EvaluationBatch,
    ks: list[int],
    horizons_s: list[int] | None = None,
    meta: dict | None = None,
    plausibility: bool = True,
) -> MetricsReport:
    horizons, _ = _horizon_steps(batch, horizons_s)
    n_modes = min(len(s.modes) for s in batch.samples)
    report = MetricsReport(
        horizons_s=horizons,
        ks=list(ks),
        min_rmse={k: min_rmse_k(batch, k, horizons).tolist() for k in ks},
        mean_nll=mean_nll(batch, horizons).tolist(),
        max_acc={k: max_acc_k(batch, k) for k in ks},
        div={k: batch_div_k(batch, k) for k in ks if k >= 2},
        collision_rate=collision_rate(batch) if plausibility else float("nan"),
        offroad_rate=offroad_rate(batch) if plausibility else float("nan"),
        n_samples=len(batch.samples),
        n_modes=n_modes,
        meta=meta or {},
    )
    return report


def build_evaluation_batch(
    model: ManoeuvreTrajectoryPredictor,
    samples: list[DatasetSample],
    scenes_by_ref: dict[str, Scene] | None = None,
) -> EvaluationBatch:
    """Run batched inference over dataset samples and attach ground truth."""
    if not samples:
        raise DataError("no samples to evaluate")
    observations = np.stack([s.features for s in samples])
    per_sample_modes = model.infer_batch(observations)
    eval_samples = []
    for sample, modes in zip(samples, per_sample_modes):
        scene = scenes_by_ref.get(sample.scene_ref) if scenes_by_ref else None
        tv_length, tv_width = 4.5, 2.0
        if scene is not None and sample.tv_id in scene.tracks:
            track = scene.tracks[sample.tv_id]
            tv_length, tv_width = track.length, track.width
        eval_samples.append(EvalSample(
            modes=modes,
            gt_traj=sample.future_traj,
            gt_labels=sample.future_labels,
            tv_pos=sample.tv_pos,
            tv_id=sample.tv_id,
            t_end=sample.t_end,
            scene=scene,
            tv_length=tv_length,
            tv_width=tv_width,
        ))
    return EvaluationBatch(samples=eval_samples, fps=model.config.fps)
