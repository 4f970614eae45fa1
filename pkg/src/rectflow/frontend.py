"""Condition frontend: token encoder, duration predictor, length regulator,
and the sinusoidal step embedding.

The encoder is a token embedding followed by residual width-3 convolutions;
the duration predictor is two convolutions plus a linear head regressing
log-durations. Ground-truth durations drive the length regulator during
training, predicted ones at inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

STEP_CHANNELS = 256
# maps continuous t in [0,1] onto the integer-position regime the sinusoidal
# embedding was designed for
STEP_TIME_SCALE = 1000.0


@dataclass
class FrontendConfig:
    vocab_size: int
    enc_channels: int = 64
    dur_channels: int = 64
    n_enc_layers: int = 3

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.enc_channels < 1 or self.dur_channels < 1 or self.n_enc_layers < 1:
            raise ValueError("frontend channel/layer counts must be >= 1")


@dataclass
class TokenSequence:
    ids: list[int]

    def __len__(self):
        return len(self.ids)

    def validate(self, vocab_size, max_tokens=None):
        if not self.ids:
            raise ValueError("token sequence must contain at least one id")
        if max_tokens is not None and len(self.ids) > max_tokens:
            raise ValueError(f"token sequence length {len(self.ids)} exceeds {max_tokens}")
        for i in self.ids:
            if not 0 <= i < vocab_size:
                raise ValueError(f"token id {i} outside vocabulary [0, {vocab_size})")


@dataclass
class DurationPlan:
    durations: list[int]

    @property
    def total_frames(self):
        return int(sum(self.durations))

    def validate(self):
        for d in self.durations:
            if d < 1:
                raise ValueError(f"durations must be >= 1 frame, got {d}")


@dataclass
class ConditionGrid:
    """Per-frame condition features, shape [frames, channels]."""

    features: Tensor
    frames: int = field(init=False)
    channels: int = field(init=False)

    def __post_init__(self):
        if self.features.data.ndim != 2:
            raise ad.ShapeMismatch(
                f"ConditionGrid features must be [frames, channels], got {self.features.shape}"
            )
        self.frames, self.channels = self.features.data.shape


def embed_step(t, dtype=np.float64):
    """Sinusoidal embedding of the flow time t in [0, 1].

    Returns 256 channels: the first 128 are sin(t*s*w_k), the last 128
    cos(t*s*w_k) with w_k = 10000^(-2k/256) and time scale s = 1000.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"embed_step: t must lie in [0, 1], got {t}")
    half = STEP_CHANNELS // 2
    k = np.arange(half, dtype=dtype)
    omega = 10000.0 ** (-2.0 * k / STEP_CHANNELS)
    angles = t * STEP_TIME_SCALE * omega
    return np.concatenate([np.sin(angles), np.cos(angles)]).astype(dtype)


def embed_step_batch(t, dtype=np.float64):
    """Vectorized ``embed_step`` over a batch of times, shape [B, 256]."""
    t = np.asarray(t, dtype=dtype)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("embed_step: t must lie in [0, 1]")
    half = STEP_CHANNELS // 2
    k = np.arange(half, dtype=dtype)
    omega = 10000.0 ** (-2.0 * k / STEP_CHANNELS)
    angles = t[:, None] * STEP_TIME_SCALE * omega[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1).astype(dtype)


def _one_hot(ids, vocab_size, dtype):
    eye = np.zeros((len(ids), vocab_size), dtype=dtype)
    eye[np.arange(len(ids)), ids] = 1.0
    return eye


def encode_tokens(params, cfg: FrontendConfig, seq: TokenSequence) -> Tensor:
    """Token ids -> hidden features [tokens, enc_channels].

    Embedding lookup (one-hot matmul, so gradients reach the table) followed
    by residual tanh convolutions over the token axis.
    """
    seq.validate(cfg.vocab_size)
    onehot = Tensor(_one_hot(seq.ids, cfg.vocab_size, params["enc.embed.w"].data.dtype))
    h = ad.matmul(onehot, params["enc.embed.w"])
    h = h.reshape(1, len(seq.ids), cfg.enc_channels)
    for i in range(cfg.n_enc_layers):
        h = h + ad.conv1d(h, params[f"enc.conv{i}.w"], params[f"enc.conv{i}.b"]).tanh()
    return h.reshape(len(seq.ids), cfg.enc_channels)


def predict_durations(params, cfg: FrontendConfig, hidden: Tensor) -> Tensor:
    """Encoder features [tokens, C] -> real-valued log-durations [tokens]."""
    tokens = hidden.data.shape[0]
    h = hidden.reshape(1, tokens, cfg.enc_channels)
    h = ad.conv1d(h, params["dur.conv0.w"], params["dur.conv0.b"]).relu()
    h = ad.conv1d(h, params["dur.conv1.w"], params["dur.conv1.b"]).relu()
    h = h.reshape(tokens, cfg.dur_channels)
    out = ad.matmul(h, params["dur.out.w"]) + params["dur.out.b"]
    return out.reshape(tokens)


def durations_to_frames(log_durations):
    """Inference rounding: exp, round half to even, clamp to >= 1 frame."""
    frames = np.rint(np.exp(np.asarray(log_durations, dtype=np.float64)))
    return np.maximum(frames, 1.0).astype(np.int64)


def length_regulate(hidden: Tensor, plan: DurationPlan) -> ConditionGrid:
    """Repeat row k of ``hidden`` durations[k] times, preserving order."""
    plan.validate()
    tokens = hidden.data.shape[0]
    if len(plan.durations) != tokens:
        raise ad.ShapeMismatch(
            f"length_regulate: {len(plan.durations)} durations for {tokens} token rows"
        )
    frames = plan.total_frames
    # selection matrix keeps the expansion differentiable through matmul
    select = np.zeros((frames, tokens), dtype=hidden.data.dtype)
    row = 0
    for k, d in enumerate(plan.durations):
        select[row : row + d, k] = 1.0
        row += d
    return ConditionGrid(features=ad.matmul(Tensor(select), hidden))
