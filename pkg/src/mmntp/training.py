"""Loss stack, winner-takes-all mode selection, and the training loop.

The per-sample loss is the sum of a teacher-forced trajectory likelihood term
and a multimodal manoeuvre term: the winner mode n* (chosen by manoeuvre-type
likelihood, or by final-point distance for the ablation rule) contributes its
mode-probability NLL, its manoeuvre-type NLL, and the masked Euclidean error
of its transition times.  Only the winner's manoeuvre outputs receive
gradients; mode probabilities couple through the shared softmax.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .dataset import DatasetSample
from .errors import NumericalError
from .features import FeatureScaler
from .manoeuvre import NO_TRANSITION
from .model import GaussianParams, ManoeuvrePrediction, ManoeuvreTrajectoryPredictor

PROB_FLOOR = 1e-12
SQRT_GUARD = 1e-30
MODE_SELECTION_RULES = ("MMP", "MTP")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    warmup_epochs: int = 10
    seed: int = 0
    mode_selection: str = "MMP"

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate < 0 or self.warmup_epochs < 0:
            raise ValueError("learning_rate and warmup_epochs must be non-negative")
        if self.mode_selection not in MODE_SELECTION_RULES:
            raise ValueError(f"mode_selection must be one of {MODE_SELECTION_RULES}")


# ----------------------------------------------------------------------
# Elementary losses.  Each accepts torch tensors (differentiable path) or
# numpy/scalar inputs (returns plain floats).
# ----------------------------------------------------------------------

def _bvn_nll_tensor(params: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Elementwise bivariate-Gaussian NLL; params rows are (mu_l, mu_t, s_l, s_t, rho)."""
    dx = (points[..., 0] - params[..., 0]) / params[..., 2]
    dy = (points[..., 1] - params[..., 1]) / params[..., 3]
    rho = params[..., 4]
    one_minus = 1.0 - rho**2
    z = (dx * dx - 2.0 * rho * dx * dy + dy * dy) / one_minus
    return (
        math.log(2.0 * math.pi)
        + torch.log(params[..., 2])
        + torch.log(params[..., 3])
        + 0.5 * torch.log(one_minus)
        + 0.5 * z
    )


def bvn_nll(params, point) -> float | torch.Tensor:
    """Negative log density of a bivariate Gaussian at a point, in log space.

    No density underflow: the value stays finite for Mahalanobis distances far
    beyond 50.  Accepts a GaussianParams, a 5-sequence, or torch tensors.
    """
    if torch.is_tensor(params):
        return _bvn_nll_tensor(params, point)
    if isinstance(params, GaussianParams):
        row = (params.mu_long, params.mu_lat, params.sigma_long, params.sigma_lat, params.rho)
    else:
        row = tuple(float(v) for v in params)
    arr = np.asarray(row, dtype=float)
    pt = np.asarray(point, dtype=float)
    if not (np.all(np.isfinite(arr)) and np.all(np.isfinite(pt))):
        raise NumericalError("bvn_nll received non-finite inputs")
    dx = (pt[0] - arr[0]) / arr[2]
    dy = (pt[1] - arr[1]) / arr[3]
    rho = arr[4]
    one_minus = 1.0 - rho**2
    z = (dx * dx - 2.0 * rho * dx * dy + dy * dy) / one_minus
    return float(
        math.log(2.0 * math.pi) + math.log(arr[2]) + math.log(arr[3])
        + 0.5 * math.log(one_minus) + 0.5 * z
    )


def traj_loss(params_seq, gt_traj) -> float | torch.Tensor:
    """Sum over timesteps of the bivariate NLL at the ground-truth points."""
    if torch.is_tensor(params_seq):
        if params_seq.shape[-2] != gt_traj.shape[-2]:
            raise ValueError("params and trajectory lengths differ")
        return _bvn_nll_tensor(params_seq, gt_traj).sum(dim=-1)
    params = np.asarray(params_seq, dtype=float)
    traj = np.asarray(gt_traj, dtype=float)
    if params.shape[0] != traj.shape[0]:
        raise ValueError("params and trajectory lengths differ")
    return float(sum(bvn_nll(p, y) for p, y in zip(params, traj)))


def manoeuvre_type_nll(type_probs, gt_types) -> float | torch.Tensor:
    """-sum_c log q_c where q_c is the probability of the true type in slot c."""
    if torch.is_tensor(type_probs):
        gt = gt_types if torch.is_tensor(gt_types) else torch.as_tensor(gt_types)
        q = type_probs.gather(-1, gt.unsqueeze(-1)).squeeze(-1)
        return -torch.log(q.clamp_min(PROB_FLOOR)).sum(dim=-1)
    probs = np.asarray(type_probs, dtype=float)
    gt = np.asarray(gt_types, dtype=np.int64)
    q = probs[np.arange(probs.shape[0]), gt]
    return float(-np.log(np.maximum(q, PROB_FLOOR)).sum())


def transition_time_loss(times_hat, gt_times) -> float | torch.Tensor:
    """Euclidean norm of the transition-time error over unmasked periods.

    Ground-truth entries equal to the -1 sentinel are masked out; if all
    periods are masked the loss is exactly 0.
    """
    if torch.is_tensor(times_hat):
        gt = gt_times if torch.is_tensor(gt_times) else torch.as_tensor(gt_times, dtype=times_hat.dtype)
        mask = gt != NO_TRANSITION
        if not bool(mask.any()):
            return times_hat.sum() * 0.0
        diff = (times_hat - gt) * mask.to(times_hat.dtype)
        return torch.sqrt((diff * diff).sum() + SQRT_GUARD)
    hat = np.asarray(times_hat, dtype=float)
    gt = np.asarray(gt_times, dtype=float)
    mask = gt != NO_TRANSITION
    if not mask.any():
        return 0.0
    return float(np.linalg.norm(hat[mask] - gt[mask]))


# ----------------------------------------------------------------------
# Mode selection (1-based winner indices, ties to the lowest index)
# ----------------------------------------------------------------------

def select_mode_mmp(pred, gt_types) -> int:
    """Winner = argmin over modes of the manoeuvre-type NLL (1-based)."""
    type_probs = pred.type_probs if isinstance(pred, ManoeuvrePrediction) else pred
    if torch.is_tensor(type_probs):
        type_probs = type_probs.detach().numpy()
    probs = np.asarray(type_probs, dtype=float)
    gt = np.asarray(gt_types, dtype=np.int64)
    q = probs[:, np.arange(probs.shape[1]), gt]
    nll = -np.log(np.maximum(q, PROB_FLOOR)).sum(axis=1)
    return int(np.argmin(nll)) + 1


def select_mode_mtp(mode_mean_trajs, gt_traj) -> int:
    """Winner = argmin over modes of the final-point L1 distance (1-based)."""
    trajs = mode_mean_trajs.detach().numpy() if torch.is_tensor(mode_mean_trajs) else np.asarray(mode_mean_trajs, dtype=float)
    gt = gt_traj.detach().numpy() if torch.is_tensor(gt_traj) else np.asarray(gt_traj, dtype=float)
    dist = np.abs(trajs[:, -1, :] - gt[-1, :]).sum(axis=1)
    return int(np.argmin(dist)) + 1


# ----------------------------------------------------------------------
# Combined loss
# ----------------------------------------------------------------------

@dataclass
class ModelOutputs:
    """Tensors produced by one training forward pass (batch-first)."""

    mode_probs: torch.Tensor                 # (B, N)
    type_probs: torch.Tensor                 # (B, N, C+1, 3)
    transition_times: torch.Tensor           # (B, N, C)
    traj_params: torch.Tensor | None         # (B, T, 5) gt-conditioned decode
    mode_traj_params: torch.Tensor | None    # (B, N, T, 5) per-mode decodes


@dataclass
class LossBreakdown:
    l_traj: float
    l_p: float
    l_u: float
    l_v: float
    l_total: float
    winner: int                               # 1-based mode index
    tensor: torch.Tensor | None = field(default=None, repr=False, compare=False)


@dataclass
class SampleBatch:
    """Tensorised mini-batch of dataset samples."""

    features: torch.Tensor      # (B, t_obs, F)
    future_traj: torch.Tensor   # (B, T, 2)
    future_labels: torch.Tensor  # (B, T)
    mv_types: torch.Tensor      # (B, C+1)
    mv_times: torch.Tensor      # (B, C)

    @classmethod
    def from_samples(cls, samples: list[DatasetSample]) -> "SampleBatch":
        return cls(
            features=torch.from_numpy(np.stack([s.features for s in samples]).astype(float)),
            future_traj=torch.from_numpy(np.stack([s.future_traj for s in samples]).astype(float)),
            future_labels=torch.from_numpy(np.stack([s.future_labels for s in samples]).astype(np.int64)),
            mv_types=torch.from_numpy(np.stack([s.mv_types for s in samples]).astype(np.int64)),
            mv_times=torch.from_numpy(np.stack([s.mv_times for s in samples]).astype(float)),
        )

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, idx: np.ndarray) -> "SampleBatch":
        sel = torch.from_numpy(np.asarray(idx, dtype=np.int64))
        return SampleBatch(
            features=self.features[sel],
            future_traj=self.future_traj[sel],
            future_labels=self.future_labels[sel],
            mv_types=self.mv_types[sel],
            mv_times=self.mv_times[sel],
        )


def _hardened_labels_per_mode(
    model: ManoeuvreTrajectoryPredictor,
    type_probs: torch.Tensor,
    transition_times: torch.Tensor,
) -> torch.Tensor:
    """(B, N, T) per-step labels from argmax-hardened manoeuvre vectors."""
    from .model import decode_labels_fast

    types = type_probs.detach().numpy().argmax(axis=-1)
    times = transition_times.detach().numpy()
    labels = decode_labels_fast(types, times, model.config.t_pred, model.config.t_change)
    return torch.from_numpy(labels)


def forward_training(
    model: ManoeuvreTrajectoryPredictor,
    batch: SampleBatch,
    mode_selection: str,
) -> ModelOutputs:
    """Run the training-time forward pass producing everything the loss needs."""
    memory = model.encode(batch.features)
    mode_probs, type_probs, transition_times = model.predict_manoeuvres(memory)
    conditioned = model.config.manoeuvre_conditioning

    traj_params = None
    mode_traj_params = None
    if conditioned:
        if mode_selection == "MTP":
            # One fused decoder pass: row 0 is the gt-conditioned decode, rows
            # 1..N the hardened-label decodes used only for winner selection.
            labels_pm = _hardened_labels_per_mode(model, type_probs, transition_times)
            labels_all = torch.cat([batch.future_labels.unsqueeze(1), labels_pm], dim=1)
            params_all = model.decode_modes_teacher_forced(
                memory, labels_all, batch.future_traj
            )
            traj_params = params_all[:, 0]
            mode_traj_params = params_all[:, 1:].detach()
        else:
            traj_params = model.decode_trajectory_teacher_forced(
                memory, batch.future_labels, batch.future_traj
            )
    else:
        # Shared-head variant: all modes decode (labels are ignored by the
        # head routing); the winner's decode carries the trajectory loss.
        b = len(batch)
        labels_pm = batch.future_labels.unsqueeze(1).expand(b, model.config.n_modes, -1)
        mode_traj_params = model.decode_modes_teacher_forced(
            memory, labels_pm, batch.future_traj
        )
    return ModelOutputs(
        mode_probs=mode_probs,
        type_probs=type_probs,
        transition_times=transition_times,
        traj_params=traj_params,
        mode_traj_params=mode_traj_params,
    )


def _select_winners(outputs: ModelOutputs, batch: SampleBatch, mode_selection: str) -> np.ndarray:
    """0-based winner index per sample (vectorised argmin, first index on ties)."""
    if mode_selection == "MMP":
        b, n = outputs.type_probs.shape[0], outputs.type_probs.shape[1]
        gt = batch.mv_types.view(b, 1, -1, 1).expand(-1, n, -1, -1)
        q = outputs.type_probs.detach().gather(3, gt).squeeze(-1)
        nll = -q.clamp_min(PROB_FLOOR).log().sum(dim=-1)
        return nll.numpy().argmin(axis=1)
    if outputs.mode_traj_params is None:
        raise ValueError("MTP selection needs per-mode trajectories")
    ends = outputs.mode_traj_params[:, :, -1, 0:2].detach()
    gt_end = batch.future_traj[:, -1, :].unsqueeze(1)
    dist = (ends - gt_end).abs().sum(dim=-1)
    return dist.numpy().argmin(axis=1)


def _trajectory_term(outputs: ModelOutputs, batch: SampleBatch, win: torch.Tensor) -> torch.Tensor:
    if outputs.traj_params is not None:
        return traj_loss(outputs.traj_params, batch.future_traj)
    rows = torch.arange(len(batch))
    return traj_loss(outputs.mode_traj_params[rows, win], batch.future_traj)


def _winner_terms(
    outputs: ModelOutputs, batch: SampleBatch, win: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    rows = torch.arange(len(batch))
    l_p = -torch.log(outputs.mode_probs[rows, win].clamp_min(PROB_FLOOR))
    l_u = manoeuvre_type_nll(outputs.type_probs[rows, win], batch.mv_types)

    v_hat = outputs.transition_times[rows, win]
    mask = batch.mv_times != NO_TRANSITION
    diff = (v_hat - batch.mv_times) * mask.to(v_hat.dtype)
    sq = (diff * diff).sum(dim=1)
    has_any = mask.any(dim=1)
    sq_safe = torch.where(has_any, sq, torch.ones_like(sq))
    # The norm is not differentiable at an exact zero error; the guard keeps
    # the gradient finite (and zero) there while perturbing the value by
    # less than 1e-15.
    l_v = torch.where(has_any, torch.sqrt(sq_safe + SQRT_GUARD), torch.zeros_like(sq))
    return l_p, l_u, l_v


def total_losses_both_rules(
    outputs: ModelOutputs, batch: SampleBatch
) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean totals under the MMP and the MTP selection rules, sharing the
    trajectory term when it does not depend on the winner and the manoeuvre
    terms when both rules pick the same winners."""
    shared_traj = None
    if outputs.traj_params is not None:
        shared_traj = _trajectory_term(outputs, batch, torch.zeros(len(batch), dtype=torch.int64))
    winners = [_select_winners(outputs, batch, rule) for rule in MODE_SELECTION_RULES]
    totals = []
    cache: dict = {}
    for chosen in winners:
        key = chosen.tobytes()
        if key not in cache:
            win = torch.from_numpy(chosen)
            l_traj = shared_traj if shared_traj is not None else _trajectory_term(outputs, batch, win)
            l_p, l_u, l_v = _winner_terms(outputs, batch, win)
            cache[key] = (l_traj + l_p + l_u + l_v).mean()
        totals.append(cache[key])
    return totals[0], totals[1]


def batch_loss(
    outputs: ModelOutputs,
    batch: SampleBatch,
    mode_selection: str,
) -> tuple[torch.Tensor, list[LossBreakdown]]:
    """Mean total loss over the batch plus per-sample breakdowns.

    The reduction is a mean of per-sample sums, so the value is invariant to
    the sample order within the batch.
    """
    if mode_selection not in MODE_SELECTION_RULES:
        raise ValueError(f"unknown mode selection rule {mode_selection!r}")
    b = len(batch)
    winners = _select_winners(outputs, batch, mode_selection)
    win = torch.from_numpy(winners)
    l_traj = _trajectory_term(outputs, batch, win)
    l_p, l_u, l_v = _winner_terms(outputs, batch, win)

    total = (l_traj + l_p + l_u + l_v).mean()
    if not torch.isfinite(total):
        raise NumericalError(
            "non-finite training loss "
            f"(traj={l_traj.detach().tolist()}, p={l_p.detach().tolist()}, "
            f"u={l_u.detach().tolist()}, v={l_v.detach().tolist()})"
        )
    parts = [t.detach() for t in (l_traj, l_p, l_u, l_v)]
    breakdowns = [
        LossBreakdown(
            l_traj=float(parts[0][i]),
            l_p=float(parts[1][i]),
            l_u=float(parts[2][i]),
            l_v=float(parts[3][i]),
            l_total=float(parts[0][i] + parts[1][i] + parts[2][i] + parts[3][i]),
            winner=int(winners[i]) + 1,
        )
        for i in range(b)
    ]
    return total, breakdowns


def total_loss(
    outputs: ModelOutputs,
    sample: DatasetSample | SampleBatch,
    mode_selection: str,
) -> LossBreakdown:
    """Single-sample loss; the returned breakdown carries the differentiable
    scalar in .tensor."""
    batch = sample if isinstance(sample, SampleBatch) else SampleBatch.from_samples([sample])
    if len(batch) != 1:
        raise ValueError("total_loss expects exactly one sample")
    tensor, breakdowns = batch_loss(outputs, batch, mode_selection)
    bd = breakdowns[0]
    bd.tensor = tensor
    return bd


# ----------------------------------------------------------------------
# Training loop
# ----------------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    l_total: float
    l_traj: float
    l_p: float
    l_u: float
    l_v: float
    wall_time_s: float


LOSS_CSV_COLUMNS = ("epoch", "L_total", "L_traj", "L_p", "L_U", "L_V", "wall_time_s")


def fit(
    model: ManoeuvreTrajectoryPredictor,
    samples: list[DatasetSample],
    cfg: TrainConfig,
    fit_scaler: bool = True,
) -> list[EpochStats]:
    """Mini-batch Adam training with linear learning-rate warmup.

    Deterministic for a given (model init, cfg.seed): batching order comes
    from a dedicated numpy generator and torch runs on CPU float64.
    """
    if not samples:
        raise ValueError("training set is empty")
    if fit_scaler:
        model.set_feature_stats(FeatureScaler.fit([s.features for s in samples]))
    data = SampleBatch.from_samples(samples)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    history: list[EpochStats] = []
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        if cfg.warmup_epochs > 0:
            factor = min(1.0, epoch / cfg.warmup_epochs)
        else:
            factor = 1.0
        for group in optimizer.param_groups:
            group["lr"] = cfg.learning_rate * factor

        perm = rng.permutation(len(samples))
        sums = np.zeros(5)
        count = 0
        for lo in range(0, len(samples), cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            batch = data.subset(idx)
            outputs = forward_training(model, batch, cfg.mode_selection)
            loss, breakdowns = batch_loss(outputs, batch, cfg.mode_selection)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            for bd in breakdowns:
                sums += (bd.l_total, bd.l_traj, bd.l_p, bd.l_u, bd.l_v)
            count += len(breakdowns)
        means = sums / count
        history.append(EpochStats(
            epoch=epoch,
            l_total=float(means[0]),
            l_traj=float(means[1]),
            l_p=float(means[2]),
            l_u=float(means[3]),
            l_v=float(means[4]),
            wall_time_s=time.perf_counter() - start,
        ))
    return history


def history_to_csv(history: list[EpochStats], path, run_config: dict | None = None) -> None:
    """Training log CSV; wall_time_s is informational and excluded from any
    byte-level comparison of outputs."""
    lines = []
    if run_config is not None:
        lines.append("# mmntp: " + json.dumps({"run_config": run_config}, sort_keys=True))
    lines.append(",".join(LOSS_CSV_COLUMNS))
    for h in history:
        lines.append(
            f"{h.epoch},{h.l_total:.9f},{h.l_traj:.9f},{h.l_p:.9f},"
            f"{h.l_u:.9f},{h.l_v:.9f},{h.wall_time_s:.3f}"
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
