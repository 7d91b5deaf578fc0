"""Transformer encoder-decoder predicting multimodal manoeuvres and trajectories.

The network has three parts: an encoder over the interaction-aware observation
sequence, a manoeuvre generator emitting N (U, V) hypotheses with mode
probabilities from the final-timestep encoder state, and a causal decoder with
cross-attention whose output is routed through one linear head per manoeuvre
type.  Heads emit per-step conditional bivariate Gaussians over displacements;
position-space parameters are obtained by anchoring each step's mean at the
previous (ground-truth or predicted) point.

All parameters and computations use float64 on CPU.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .errors import DataError
from .features import N_FEATURES, FeatureScaler
from .manoeuvre import (
    HorizonConfig,
    ManoeuvreType,
    ManoeuvreVector,
    decode_manoeuvre_vector,
    num_change_periods,
    NO_TRANSITION,
)

N_MANOEUVRE_TYPES = 3
GAUSSIAN_PARAM_COLUMNS = ("mu_long", "mu_lat", "sigma_long", "sigma_lat", "rho")
SIGMA_LOG_MIN = math.log(1e-3)
SIGMA_LOG_MAX = math.log(1e3)
RHO_SCALE = 0.999

_CHECKPOINT_MAGIC = b"MMNTPCK1"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults follow the full-scale setup."""

    n_features: int = N_FEATURES
    t_obs: int = 15
    t_pred: int = 25
    t_change: int = 13
    n_modes: int = 6
    d_model: int = 512
    n_heads: int = 8
    n_layers: int = 1
    d_ff: int = 128
    mlp_hidden: int = 256
    fps: int = 5
    manoeuvre_conditioning: bool = True

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_modes < 1 or self.n_layers < 1:
            raise ValueError("n_modes and n_layers must be positive")
        if self.t_change > self.t_pred:
            raise ValueError("t_change must not exceed t_pred")

    @property
    def n_periods(self) -> int:
        return num_change_periods(self.t_pred, self.t_change)

    @property
    def head_count(self) -> int:
        return N_MANOEUVRE_TYPES

    @property
    def horizon(self) -> HorizonConfig:
        return HorizonConfig(t_pred=self.t_pred, t_change=self.t_change, fps=self.fps)

    @property
    def manoeuvre_output_width(self) -> int:
        n, c = self.n_modes, self.n_periods
        return n + n * (c + 1) * N_MANOEUVRE_TYPES + n * c


def desk_config(**overrides) -> ModelConfig:
    """CPU-friendly small configuration, trainable in minutes."""
    base = dict(d_model=64, n_heads=4, d_ff=32, mlp_hidden=64, n_modes=3)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass(frozen=True)
class GaussianParams:
    """One bivariate Gaussian over (long, lat), in meters."""

    mu_long: float
    mu_lat: float
    sigma_long: float
    sigma_lat: float
    rho: float

    def __post_init__(self) -> None:
        if not (self.sigma_long > 0 and self.sigma_lat > 0):
            raise ValueError("sigmas must be positive")
        if not abs(self.rho) < 1:
            raise ValueError("|rho| must be < 1")
        values = (self.mu_long, self.mu_lat, self.sigma_long, self.sigma_lat, self.rho)
        if not all(math.isfinite(v) for v in values):
            raise ValueError("parameters must be finite")

    @classmethod
    def from_row(cls, row) -> "GaussianParams":
        return cls(*(float(v) for v in row))


@dataclass
class ManoeuvrePrediction:
    """Raw multimodal manoeuvre outputs for one observation."""

    mode_probs: np.ndarray        # (N,)
    type_probs: np.ndarray        # (N, C+1, 3)
    transition_times: np.ndarray  # (N, C)


@dataclass
class ModePrediction:
    """One predicted future mode: manoeuvre vector, trajectory, probability."""

    manoeuvre: ManoeuvreVector
    traj_params: np.ndarray       # (t_pred, 5) position-space Gaussian rows
    prob: float
    labels: np.ndarray            # (t_pred,) per-step manoeuvre types

    @property
    def mean_traj(self) -> np.ndarray:
        return self.traj_params[:, :2]


def decode_labels_fast(
    types: np.ndarray, times: np.ndarray, t_pred: int, t_change: int
) -> np.ndarray:
    """Vectorised manoeuvre-vector expansion over leading batch dimensions.

    Semantically identical to decode_manoeuvre_vector (switch at
    start + round(v * period_length), final step pinned to the last anchor)
    for hardened vectors whose transition times are only consulted when the
    adjacent anchors differ.
    """
    lead = types.shape[:-1]
    c = times.shape[-1]
    out = np.empty(lead + (t_pred,), dtype=np.int64)
    for i in range(1, c + 1):
        start = (i - 1) * t_change
        stop = min(i * t_change, t_pred)
        before = types[..., i - 1]
        after = types[..., i]
        differs = before != after
        switch = np.where(
            differs,
            start + np.rint(times[..., i - 1] * (stop - start)).astype(np.int64),
            stop,
        )
        steps = np.arange(start, stop)
        seg = np.where(steps >= switch[..., None], after[..., None], before[..., None])
        out[..., start:stop] = seg
    out[..., -1] = types[..., -1]
    return out


def positional_encoding(length: int, d_model: int) -> torch.Tensor:
    """Sinusoidal position table: pe[pos, 2i] = sin(pos / 10000^(2i/d))."""
    position = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(
        torch.arange(0, d_model, 2, dtype=torch.float64) * (-math.log(10000.0) / d_model)
    )
    pe = torch.zeros(length, d_model, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(position * div)
    pe[:, 1::2] = torch.cos(position * div[: d_model // 2])
    return pe


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def forward(self, query: torch.Tensor, key_value: torch.Tensor, causal: bool = False) -> torch.Tensor:
        b, t, d = query.shape
        s = key_value.shape[1]
        linear = torch.nn.functional.linear
        q = linear(query, self.q_proj.weight, self.q_proj.bias).view(b, t, self.n_heads, self.d_head).transpose(1, 2)
        k = linear(key_value, self.k_proj.weight, self.k_proj.bias).view(b, s, self.n_heads, self.d_head).transpose(1, 2)
        v = linear(key_value, self.v_proj.weight, self.v_proj.bias).view(b, s, self.n_heads, self.d_head).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        if causal:
            mask = torch.triu(torch.ones(t, s, dtype=torch.bool, device=scores.device), diagonal=1)
            scores = scores.masked_fill(mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return linear(out, self.out_proj.weight, self.out_proj.bias)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        self.lin1 = nn.Linear(d_model, d_ff)
        self.lin2 = nn.Linear(d_ff, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        linear = torch.nn.functional.linear
        hidden = torch.relu(linear(x, self.lin1.weight, self.lin1.bias))
        return linear(hidden, self.lin2.weight, self.lin2.bias)


def _layer_norm(norm: nn.LayerNorm, x: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.layer_norm(x, norm.normalized_shape, norm.weight, norm.bias, norm.eps)


class EncoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.norm1 = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff)
        self.norm2 = nn.LayerNorm(d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = _layer_norm(self.norm1, x + self.attn.forward(x, x))
        return _layer_norm(self.norm2, x + self.ff.forward(x))


class DecoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.norm1 = nn.LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff)
        self.norm3 = nn.LayerNorm(d_model)

    def forward(self, x: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        x = _layer_norm(self.norm1, x + self.self_attn.forward(x, x, causal=True))
        x = _layer_norm(self.norm2, x + self.cross_attn.forward(x, memory))
        return _layer_norm(self.norm3, x + self.ff.forward(x))


class ManoeuvreTrajectoryPredictor(nn.Module):
    """Encoder, multimodal manoeuvre generator, and head-routed decoder."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.input_proj = nn.Linear(config.n_features, d)
        self.enc_layers = nn.ModuleList(
            EncoderLayer(d, config.n_heads, config.d_ff) for _ in range(config.n_layers)
        )
        self.man_mlp = nn.Sequential(
            nn.Linear(d, config.mlp_hidden),
            nn.ReLU(),
            nn.Linear(config.mlp_hidden, config.manoeuvre_output_width),
        )
        self.dec_proj = nn.Linear(2 + N_MANOEUVRE_TYPES, d)
        self.start_token = nn.Parameter(torch.zeros(d, dtype=torch.float64))
        self.mode_embedding = nn.Parameter(torch.zeros(config.n_modes, d, dtype=torch.float64))
        self.dec_layers = nn.ModuleList(
            DecoderLayer(d, config.n_heads, config.d_ff) for _ in range(config.n_layers)
        )
        self.heads = nn.ModuleList(nn.Linear(d, 5) for _ in range(N_MANOEUVRE_TYPES))
        self.register_buffer("feature_mean", torch.zeros(config.n_features, dtype=torch.float64))
        self.register_buffer("feature_std", torch.ones(config.n_features, dtype=torch.float64))
        self.register_buffer(
            "pe_obs", positional_encoding(config.t_obs, d), persistent=False
        )
        self.register_buffer(
            "pe_pred", positional_encoding(config.t_pred, d), persistent=False
        )
        self.double()

    # ------------------------------------------------------------------
    # Feature standardisation
    # ------------------------------------------------------------------

    def set_feature_stats(self, scaler: FeatureScaler) -> None:
        self.feature_mean.copy_(torch.from_numpy(np.asarray(scaler.mean, dtype=float)))
        self.feature_std.copy_(torch.from_numpy(np.asarray(scaler.std, dtype=float)))

    def feature_scaler(self) -> FeatureScaler:
        return FeatureScaler(
            mean=self.feature_mean.detach().numpy().copy(),
            std=self.feature_std.detach().numpy().copy(),
        )

    # ------------------------------------------------------------------
    # Encoder + manoeuvre generator
    # ------------------------------------------------------------------

    def encode(self, observation: torch.Tensor | np.ndarray) -> torch.Tensor:
        """(B, t_obs, F) raw features -> (B, t_obs, d_model) memory."""
        obs = self._as_batched(observation, (self.config.t_obs, self.config.n_features))
        if not torch.isfinite(obs).all():
            raise DataError("observation contains non-finite values")
        x = (obs - self.feature_mean) / self.feature_std
        x = torch.nn.functional.linear(x, self.input_proj.weight, self.input_proj.bias) + self.pe_obs
        for layer in self.enc_layers:
            x = layer.forward(x)
        return x

    def predict_manoeuvres(
        self, memory: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Memory -> (mode_probs (B,N), type_probs (B,N,C+1,3), times (B,N,C))."""
        cfg = self.config
        pooled = memory[:, -1, :]
        raw = self.man_mlp(pooled)
        n, c = cfg.n_modes, cfg.n_periods
        mode_logits = raw[:, :n]
        type_logits = raw[:, n:n + n * (c + 1) * 3].reshape(-1, n, c + 1, 3)
        trans_raw = raw[:, n + n * (c + 1) * 3:].reshape(-1, n, c)
        return (
            torch.softmax(mode_logits, dim=-1),
            torch.softmax(type_logits, dim=-1),
            torch.sigmoid(trans_raw),
        )

    def manoeuvre_prediction(self, observation: np.ndarray) -> ManoeuvrePrediction:
        with torch.no_grad():
            memory = self.encode(observation)
            probs, types, times = self.predict_manoeuvres(memory)
        return ManoeuvrePrediction(
            mode_probs=probs[0].numpy(),
            type_probs=types[0].numpy(),
            transition_times=times[0].numpy(),
        )

    # ------------------------------------------------------------------
    # Decoder
    # ------------------------------------------------------------------

    def _decode_hidden(
        self,
        prev_points: torch.Tensor,
        labels: torch.Tensor,
        memory: torch.Tensor,
        mode_idx: torch.Tensor | None,
    ) -> torch.Tensor:
        """Run the causal decoder over t steps of (prev point, manoeuvre) tokens."""
        b, t, _ = prev_points.shape
        if self.config.manoeuvre_conditioning:
            onehot = torch.nn.functional.one_hot(labels, N_MANOEUVRE_TYPES).to(prev_points.dtype)
        else:
            onehot = torch.zeros(b, t, N_MANOEUVRE_TYPES, dtype=prev_points.dtype)
        x = torch.nn.functional.linear(
            torch.cat([prev_points, onehot], dim=-1), self.dec_proj.weight, self.dec_proj.bias
        )
        x = x + self.pe_pred[:t]
        start = self.start_token.unsqueeze(0)
        x = torch.cat([(x[:, :1] + start), x[:, 1:]], dim=1)
        if not self.config.manoeuvre_conditioning and mode_idx is not None:
            x = x + self.mode_embedding[mode_idx].unsqueeze(1)
        for layer in self.dec_layers:
            x = layer.forward(x, memory)
        return x

    def _head_params(self, hidden: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        """Route each step through its manoeuvre head; returns (B, t, 5) raw-free
        params where mu is still a per-step displacement."""
        linear = torch.nn.functional.linear
        stacked = torch.stack(
            [linear(hidden, head.weight, head.bias) for head in self.heads], dim=2
        )  # (B,t,3,5)
        if self.config.manoeuvre_conditioning:
            idx = labels.unsqueeze(-1).unsqueeze(-1).expand(-1, -1, 1, 5)
            raw = stacked.gather(2, idx).squeeze(2)
        else:
            raw = stacked[:, :, 0, :]
        mu = raw[..., 0:2]
        sigma = torch.exp(torch.clamp(raw[..., 2:4], SIGMA_LOG_MIN, SIGMA_LOG_MAX))
        rho = RHO_SCALE * torch.tanh(raw[..., 4:5])
        return torch.cat([mu, sigma, rho], dim=-1)

    def decode_trajectory_teacher_forced(
        self,
        memory: torch.Tensor,
        gt_labels: torch.Tensor | np.ndarray,
        gt_traj: torch.Tensor | np.ndarray,
        mode_idx: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Position-space Gaussian params (B, t_pred, 5) conditioned on ground truth.

        Step t consumes the ground-truth previous point and the ground-truth
        manoeuvre type at t; its mean is anchored at the ground-truth previous
        point, which makes the sequence exactly the per-step conditionals of
        the trajectory likelihood under teacher forcing.
        """
        cfg = self.config
        labels = self._as_batched_long(gt_labels, (cfg.t_pred,))
        traj = self._as_batched(gt_traj, (cfg.t_pred, 2))
        prev = torch.cat([torch.zeros_like(traj[:, :1, :]), traj[:, :-1, :]], dim=1)
        hidden = self._decode_hidden(prev, labels, memory, mode_idx)
        params = self._head_params(hidden, labels)
        mu_pos = prev + params[..., 0:2]
        return torch.cat([mu_pos, params[..., 2:]], dim=-1)

    def decode_modes_teacher_forced(
        self,
        memory: torch.Tensor,
        labels_per_mode: torch.Tensor,
        gt_traj: torch.Tensor,
    ) -> torch.Tensor:
        """Per-mode teacher-forced position-space params (B, N, t_pred, 5).

        For the manoeuvre-conditioned model the modes differ via their decoded
        label sequences; for the unconditioned variant via the learned mode
        embeddings.  Used for endpoint-based mode selection and for the
        winner-mode trajectory loss of the unconditioned variant.
        """
        b, n, t = labels_per_mode.shape
        mem_rep = memory.repeat_interleave(n, dim=0)
        labels = labels_per_mode.reshape(b * n, t)
        traj_rep = gt_traj.repeat_interleave(n, dim=0)
        mode_idx = torch.arange(n).repeat(b)
        params = self.decode_trajectory_teacher_forced(mem_rep, labels, traj_rep, mode_idx)
        return params.reshape(b, n, t, 5)

    # ------------------------------------------------------------------
    # Inference
    # ------------------------------------------------------------------

    def harden_manoeuvres(
        self,
        type_probs: np.ndarray,
        transition_times: np.ndarray,
    ) -> tuple[list[ManoeuvreVector], np.ndarray]:
        """Per mode: per-slot argmax of type probabilities plus sentinel-fixed
        transition times, decoded to per-step labels."""
        horizon = self.config.horizon
        vectors: list[ManoeuvreVector] = []
        all_labels = np.empty((type_probs.shape[0], self.config.t_pred), dtype=np.int64)
        for mode in range(type_probs.shape[0]):
            types = tuple(ManoeuvreType(int(i)) for i in type_probs[mode].argmax(axis=-1))
            times = tuple(
                NO_TRANSITION if types[i - 1] == types[i] else float(transition_times[mode, i - 1])
                for i in range(1, len(types))
            )
            mv = ManoeuvreVector(types=types, times=times)
            vectors.append(mv)
            all_labels[mode] = decode_manoeuvre_vector(mv, horizon)
        return vectors, all_labels

    def infer_batch(self, observations: np.ndarray) -> list[list[ModePrediction]]:
        """Autoregressive multimodal inference for a batch of observations.

        Returns, per sample, N modes sorted by probability (descending, stable).
        """
        cfg = self.config
        obs = np.asarray(observations, dtype=float)
        if obs.ndim == 2:
            obs = obs[None]
        b, n, t = obs.shape[0], cfg.n_modes, cfg.t_pred
        with torch.no_grad():
            memory = self.encode(obs)
            probs_t, types_t, times_t = self.predict_manoeuvres(memory)
            probs = probs_t.numpy()
            vectors: list[list[ManoeuvreVector]] = []
            labels = np.empty((b, n, t), dtype=np.int64)
            for i in range(b):
                vecs, lab = self.harden_manoeuvres(types_t[i].numpy(), times_t[i].numpy())
                vectors.append(vecs)
                labels[i] = lab

            mem_rep = memory.repeat_interleave(n, dim=0)
            labels_t = torch.from_numpy(labels.reshape(b * n, t))
            mode_idx = torch.arange(n).repeat(b)
            prev = torch.zeros(b * n, 1, 2, dtype=torch.float64)
            params_steps: list[torch.Tensor] = []
            for step in range(t):
                hidden = self._decode_hidden(prev, labels_t[:, : step + 1], mem_rep, mode_idx)
                raw = self._head_params(hidden[:, -1:, :], labels_t[:, step:step + 1])
                mu_pos = prev[:, -1:, :] + raw[..., 0:2]
                params_steps.append(torch.cat([mu_pos, raw[..., 2:]], dim=-1))
                prev = torch.cat([prev, mu_pos], dim=1)
            params = torch.cat(params_steps, dim=1).reshape(b, n, t, 5).numpy()

        results: list[list[ModePrediction]] = []
        for i in range(b):
            order = np.argsort(-probs[i], kind="stable")
            results.append([
                ModePrediction(
                    manoeuvre=vectors[i][m],
                    traj_params=params[i, m],
                    prob=float(probs[i, m]),
                    labels=labels[i, m],
                )
                for m in order
            ])
        return results

    def infer(self, observation: np.ndarray) -> list[ModePrediction]:
        """Single-observation inference; modes sorted by probability."""
        return self.infer_batch(np.asarray(observation, dtype=float)[None])[0]

    # ------------------------------------------------------------------
    # Utilities
    # ------------------------------------------------------------------

    def _as_batched(self, value, trailing_shape) -> torch.Tensor:
        tensor = value if torch.is_tensor(value) else torch.from_numpy(np.asarray(value, dtype=float))
        tensor = tensor.to(torch.float64)
        if tensor.dim() == len(trailing_shape):
            tensor = tensor.unsqueeze(0)
        if tuple(tensor.shape[1:]) != tuple(trailing_shape):
            raise DataError(f"expected trailing shape {trailing_shape}, got {tuple(tensor.shape[1:])}")
        return tensor

    def _as_batched_long(self, value, trailing_shape) -> torch.Tensor:
        tensor = value if torch.is_tensor(value) else torch.from_numpy(np.asarray(value, dtype=np.int64))
        tensor = tensor.to(torch.int64)
        if tensor.dim() == len(trailing_shape):
            tensor = tensor.unsqueeze(0)
        if tuple(tensor.shape[1:]) != tuple(trailing_shape):
            raise DataError(f"expected trailing shape {trailing_shape}, got {tuple(tensor.shape[1:])}")
        return tensor


def init_parameters(model: ManoeuvreTrajectoryPredictor, seed: int) -> None:
    """Deterministic scaled-uniform initialisation from a numpy generator.

    Weights and biases use the usual +-1/sqrt(fan_in) uniform ranges (random
    biases also keep the N manoeuvre modes from starting as exact duplicates);
    LayerNorm parameters start at identity.  Parameters are visited in sorted
    name order so values depend only on the seed and the architecture.
    """
    rng = np.random.default_rng(seed)
    named = dict(model.named_parameters())
    for name, param in sorted(named.items()):
        with torch.no_grad():
            if "norm" in name:
                values = np.ones(tuple(param.shape)) if name.endswith("weight") \
                    else np.zeros(tuple(param.shape))
            elif param.dim() >= 2:
                bound = 1.0 / math.sqrt(param.shape[-1])
                values = rng.uniform(-bound, bound, size=tuple(param.shape))
            elif name.endswith(".bias"):
                weight = named.get(name[:-5] + ".weight")
                fan_in = weight.shape[-1] if weight is not None else param.shape[0]
                bound = 1.0 / math.sqrt(fan_in)
                values = rng.uniform(-bound, bound, size=tuple(param.shape))
            else:
                values = rng.uniform(-0.1, 0.1, size=tuple(param.shape))
            param.copy_(torch.from_numpy(np.asarray(values, dtype=float)))


def new_model(config: ModelConfig, seed: int, scaler: FeatureScaler | None = None) -> ManoeuvreTrajectoryPredictor:
    model = ManoeuvreTrajectoryPredictor(config)
    init_parameters(model, seed)
    if scaler is not None:
        model.set_feature_stats(scaler)
    return model


# ----------------------------------------------------------------------
# Checkpoints: json header + raw float64 parameter blob, byte-reproducible
# ----------------------------------------------------------------------

def save_checkpoint(path, model: ManoeuvreTrajectoryPredictor, run_config: dict | None = None) -> None:
    names = sorted(name for name, _ in model.named_parameters())
    params = dict(model.named_parameters())
    header = {
        "format": "mmntp-checkpoint",
        "version": 1,
        "config": asdict(model.config),
        "feature_mean": model.feature_mean.numpy().tolist(),
        "feature_std": model.feature_std.numpy().tolist(),
        "parameters": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    if run_config is not None:
        header["run_config"] = run_config
    blob = b"".join(
        params[n].detach().numpy().astype("<f8").tobytes(order="C") for n in names
    )
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        fh.write(blob)


def load_checkpoint(path) -> tuple[ManoeuvreTrajectoryPredictor, dict]:
    try:
        with open(path, "rb") as fh:
            magic = fh.read(len(_CHECKPOINT_MAGIC))
            if magic != _CHECKPOINT_MAGIC:
                raise DataError(f"{path} is not a model checkpoint")
            (header_len,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(header_len).decode("utf-8"))
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc

    config = ModelConfig(**header["config"])
    model = ManoeuvreTrajectoryPredictor(config)
    offset = 0
    with torch.no_grad():
        params = dict(model.named_parameters())
        for entry in header["parameters"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            values = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
            offset += count * 8
            params[entry["name"]].copy_(torch.from_numpy(values.reshape(shape).copy()))
        model.feature_mean.copy_(torch.tensor(header["feature_mean"], dtype=torch.float64))
        model.feature_std.copy_(torch.tensor(header["feature_std"], dtype=torch.float64))
    return model, header
