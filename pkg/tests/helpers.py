"""Shared test utilities: random sample construction and the finite-difference
gradient oracle used by both the unit tests and the acceptance suite."""

import numpy as np
import torch

from mmntp.dataset import DatasetSample
from mmntp.model import ManoeuvreTrajectoryPredictor, ModelConfig, new_model
from mmntp.training import SampleBatch, forward_training


def grid_aligned_labels(rng, horizon):
    labels = np.empty(horizon.t_pred, dtype=np.int64)
    current = int(rng.integers(0, 3))
    for i in range(1, horizon.n_periods + 1):
        start, stop = horizon.period_bounds(i)
        labels[start:stop] = current
        hi = stop if stop < horizon.t_pred else horizon.t_pred - 1
        if hi > start and rng.random() < 0.6:
            current = int(rng.choice([v for v in range(3) if v != current]))
            labels[int(rng.integers(start + 1, hi + 1)):stop] = current
    return labels


def random_sample(rng, cfg: ModelConfig) -> DatasetSample:
    """Random but self-consistent training sample for a model config."""
    from mmntp.manoeuvre import encode_manoeuvre_vector

    horizon = cfg.horizon
    labels = grid_aligned_labels(rng, horizon)
    mv = encode_manoeuvre_vector(labels, horizon)
    traj = rng.normal(scale=1.5, size=(cfg.t_pred, 2)).cumsum(axis=0)
    return DatasetSample(
        features=rng.normal(size=(cfg.t_obs, cfg.n_features)),
        future_traj=traj,
        future_labels=labels,
        mv_types=np.array([int(u) for u in mv.types], dtype=np.int64),
        mv_times=np.array(mv.times, dtype=float),
        tv_id=0,
        scene_ref="synthetic",
        t_end=cfg.t_obs - 1,
        tv_pos=(0.0, 0.0),
    )


def losses_under_both_rules(model: ManoeuvreTrajectoryPredictor, batch: SampleBatch):
    """One forward pass evaluated under both mode-selection rules."""
    from mmntp.training import total_losses_both_rules

    outputs = forward_training(model, batch, "MTP")
    return total_losses_both_rules(outputs, batch)


def stable_gradient_batch(rng, model, margin=1e-2, max_tries=50) -> SampleBatch:
    """Random sample whose mode selections sit away from argmin boundaries.

    The total loss is piecewise smooth; central differences are only valid at
    points where the winner (under either rule) is locally constant.  Samples
    whose best-vs-second selection margin falls below `margin` are redrawn.
    """
    for _ in range(max_tries):
        batch = SampleBatch.from_samples([random_sample(rng, model.config)])
        with torch.no_grad():
            outputs = forward_training(model, batch, "MTP")
            gt = batch.mv_types.view(1, 1, -1, 1).expand(-1, model.config.n_modes, -1, -1)
            q = outputs.type_probs.gather(3, gt).squeeze(-1)
            nll = -q.clamp_min(1e-12).log().sum(dim=-1).numpy()[0]
            ends = outputs.mode_traj_params[0, :, -1, 0:2].numpy()
            gt_end = batch.future_traj[0, -1, :].numpy()
            dist = np.abs(ends - gt_end).sum(axis=1)
        margins = []
        for scores in (nll, dist):
            ordered = np.sort(scores)
            margins.append(ordered[1] - ordered[0] if scores.size > 1 else np.inf)
        if min(margins) > margin:
            return batch
    raise RuntimeError("could not find a selection-stable random sample")


def _staged_evaluator(model, batch):
    """Loss evaluator with stage caching keyed on the perturbed block.

    Perturbing a decoder-side parameter cannot change the encoder memory or
    the manoeuvre outputs, so those stages are reused between finite-
    difference evaluations; the values are identical to a full forward pass
    (guarded by a unit test).  Returns (evaluate, invalidate(block)).
    """
    import torch

    from mmntp.training import ModelOutputs, _hardened_labels_per_mode, total_losses_both_rules

    state = {"memory": None, "man": None}
    n = model.config.n_modes

    def invalidate(block: str) -> None:
        if block == "enc":
            state["memory"] = None
            state["man"] = None
        elif block == "man":
            state["man"] = None

    def evaluate():
        if state["memory"] is None:
            state["memory"] = model.encode(batch.features)
        memory = state["memory"]
        if state["man"] is None:
            probs, types, times = model.predict_manoeuvres(memory)
            labels_pm = _hardened_labels_per_mode(model, types, times)
            state["man"] = (probs, types, times, labels_pm)
        probs, types, times, labels_pm = state["man"]
        if model.config.manoeuvre_conditioning:
            labels_all = torch.cat([batch.future_labels.unsqueeze(1), labels_pm], dim=1)
            params_all = model.decode_modes_teacher_forced(memory, labels_all, batch.future_traj)
            outputs = ModelOutputs(probs, types, times, params_all[:, 0], params_all[:, 1:])
        else:
            labels_rep = batch.future_labels.unsqueeze(1).expand(-1, n, -1)
            params = model.decode_modes_teacher_forced(memory, labels_rep, batch.future_traj)
            outputs = ModelOutputs(probs, types, times, None, params)
        return total_losses_both_rules(outputs, batch)

    return evaluate, invalidate


def _block_of(name: str) -> str:
    if name.startswith(("input_proj.", "enc_layers.")):
        return "enc"
    if name.startswith("man_mlp."):
        return "man"
    return "dec"


def gradient_max_rel_errors(model, batch, step=1e-4):
    """Max relative error between analytic and central-difference gradients.

    Returns (err_mmp, err_mtp).  Coordinates are compared as
    |a - f| / max(|a|, |f|, floor), with floor = max(1e-6, 1e-4 * gmax):
    gradients four orders of magnitude below the dominant one are inside the
    finite-difference noise floor and are held to the scale floor instead.
    """
    named = sorted(model.named_parameters())
    params = [p for _, p in named]
    loss_mmp, loss_mtp = losses_under_both_rules(model, batch)
    grads_mmp = torch.autograd.grad(loss_mmp, params, retain_graph=True, allow_unused=True)
    grads_mtp = torch.autograd.grad(loss_mtp, params, allow_unused=True)

    def flat(grads):
        return np.concatenate([
            (g if g is not None else torch.zeros_like(p)).detach().numpy().ravel()
            for g, p in zip(grads, params)
        ])

    analytic = {"MMP": flat(grads_mmp), "MTP": flat(grads_mtp)}

    n_total = sum(p.numel() for p in params)
    fd = {"MMP": np.empty(n_total), "MTP": np.empty(n_total)}
    pos = 0
    evaluate, invalidate = _staged_evaluator(model, batch)
    with torch.no_grad():
        for name, p in named:
            block = _block_of(name)
            view = p.view(-1)
            for j in range(view.shape[0]):
                orig = view[j].item()
                view[j] = orig + step
                invalidate(block)
                up_mmp, up_mtp = evaluate()
                view[j] = orig - step
                invalidate(block)
                dn_mmp, dn_mtp = evaluate()
                view[j] = orig
                invalidate(block)
                fd["MMP"][pos] = (up_mmp.item() - dn_mmp.item()) / (2 * step)
                fd["MTP"][pos] = (up_mtp.item() - dn_mtp.item()) / (2 * step)
                pos += 1

    errs = {}
    for rule in ("MMP", "MTP"):
        a, f = analytic[rule], fd[rule]
        gmax = max(np.abs(a).max(), np.abs(f).max())
        floor = max(1e-6, 1e-4 * gmax)
        errs[rule] = float(np.max(np.abs(a - f) / np.maximum.reduce(
            [np.abs(a), np.abs(f), np.full_like(a, floor)]
        )))
    return errs["MMP"], errs["MTP"]


def tiny_training_model(seed=0, **overrides) -> ManoeuvreTrajectoryPredictor:
    base = dict(
        n_features=4, t_obs=4, t_pred=5, t_change=3, n_modes=2,
        d_model=8, n_heads=2, n_layers=1, d_ff=4, mlp_hidden=4,
    )
    base.update(overrides)
    return new_model(ModelConfig(**base), seed=seed)
