"""Velocity network: gated residual convolution stack over the frame grid.

Each block adds a projected step embedding to its input, runs a width-3
convolution to twice the channel count, injects the condition through a 1x1
convolution, gates with tanh * sigmoid, and feeds separate 1x1 residual and
skip convolutions. Skip sums pass through relu and a zero-initialized 1x1
output head, so a fresh model starts at velocity zero.

Two forward paths exist: the taped one used for training and gradient
checks, and a pure-numpy closure (``velocity_field``) used by the ODE
samplers. They compute identical floating-point results; a test pins that.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import frontend as fe
from .autodiff import NonFiniteError, Tensor
from .frontend import ConditionGrid, DurationPlan, FrontendConfig, TokenSequence


@dataclass
class DecoderConfig:
    n_blocks: int = 4
    channels: int = 64
    mel_bins: int = 16
    condition_channels: int = 64
    step_mlp_hidden: int = 256

    def __post_init__(self):
        for name in ("n_blocks", "channels", "mel_bins", "condition_channels", "step_mlp_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")


class VelocityModel:
    """Parameter container for the frontend + decoder, with NFE bookkeeping.

    ``generation`` is 1 for a model trained on independent couplings and
    increments once per rectification round. ``nfe_count`` counts every
    decoder evaluation made through ``velocity`` or a ``velocity_field``
    closure.
    """

    def __init__(self, cfg: DecoderConfig, frontend_cfg: FrontendConfig | None,
                 params: dict[str, Tensor], generation: int = 1):
        self.cfg = cfg
        self.frontend_cfg = frontend_cfg
        self.params = params
        self.generation = generation
        self.nfe_count = 0

    @property
    def dtype(self):
        return self.params["dec.in.w"].data.dtype

    def manifest(self):
        return {name: tuple(p.data.shape) for name, p in self.params.items()}

    def parameters(self):
        return list(self.params.values())

    def config_dict(self):
        d = {
            "n_blocks": self.cfg.n_blocks,
            "channels": self.cfg.channels,
            "mel_bins": self.cfg.mel_bins,
            "condition_channels": self.cfg.condition_channels,
            "step_mlp_hidden": self.cfg.step_mlp_hidden,
            "dtype": str(np.dtype(self.dtype)),
        }
        if self.frontend_cfg is not None:
            d["frontend"] = {
                "vocab_size": self.frontend_cfg.vocab_size,
                "enc_channels": self.frontend_cfg.enc_channels,
                "dur_channels": self.frontend_cfg.dur_channels,
                "n_enc_layers": self.frontend_cfg.n_enc_layers,
            }
        return d

    # -- frontend passthroughs --

    def encode_tokens(self, seq: TokenSequence) -> Tensor:
        if self.frontend_cfg is None:
            raise ValueError("model has no text frontend (unconditional task)")
        return fe.encode_tokens(self.params, self.frontend_cfg, seq)

    def predict_durations(self, hidden: Tensor) -> Tensor:
        if self.frontend_cfg is None:
            raise ValueError("model has no text frontend (unconditional task)")
        return fe.predict_durations(self.params, self.frontend_cfg, hidden)

    def condition(self, seq: TokenSequence, plan: DurationPlan | None = None) -> ConditionGrid:
        """Token sequence -> per-frame condition grid.

        With ``plan`` given (training, oracle durations) that plan drives the
        length regulator; otherwise durations come from the predictor.
        """
        hidden = self.encode_tokens(seq)
        if plan is None:
            with ad.no_grad():
                log_d = self.predict_durations(hidden)
            plan = DurationPlan(list(fe.durations_to_frames(log_d.data)))
        return fe.length_regulate(hidden, plan)

    def zero_condition(self, frames: int = 1) -> ConditionGrid:
        """All-zero condition grid for unconditional tasks."""
        z = np.zeros((frames, self.cfg.condition_channels), dtype=self.dtype)
        return ConditionGrid(features=Tensor(z))


def init_model(cfg: DecoderConfig, frontend_cfg: FrontendConfig | None,
               rng, dtype=np.float64) -> VelocityModel:
    """Kaiming-uniform weights, zero biases, zero output head."""
    dtype = np.dtype(dtype)
    params: dict[str, Tensor] = {}

    def kaiming(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    if frontend_cfg is not None:
        ec, dc = frontend_cfg.enc_channels, frontend_cfg.dur_channels
        params["enc.embed.w"] = kaiming((frontend_cfg.vocab_size, ec), frontend_cfg.vocab_size)
        for i in range(frontend_cfg.n_enc_layers):
            params[f"enc.conv{i}.w"] = kaiming((ec, ec, 3), ec * 3)
            params[f"enc.conv{i}.b"] = zeros((ec,))
        params["dur.conv0.w"] = kaiming((dc, ec, 3), ec * 3)
        params["dur.conv0.b"] = zeros((dc,))
        params["dur.conv1.w"] = kaiming((dc, dc, 3), dc * 3)
        params["dur.conv1.b"] = zeros((dc,))
        params["dur.out.w"] = kaiming((dc, 1), dc)
        params["dur.out.b"] = zeros((1,))

    ch, mel, cc, hid = cfg.channels, cfg.mel_bins, cfg.condition_channels, cfg.step_mlp_hidden
    params["step.mlp0.w"] = kaiming((fe.STEP_CHANNELS, hid), fe.STEP_CHANNELS)
    params["step.mlp0.b"] = zeros((hid,))
    params["step.mlp1.w"] = kaiming((hid, hid), hid)
    params["step.mlp1.b"] = zeros((hid,))
    params["dec.in.w"] = kaiming((ch, mel, 1), mel)
    params["dec.in.b"] = zeros((ch,))
    for i in range(cfg.n_blocks):
        params[f"dec.block{i}.step.w"] = kaiming((hid, ch), hid)
        params[f"dec.block{i}.step.b"] = zeros((ch,))
        params[f"dec.block{i}.conv.w"] = kaiming((2 * ch, ch, 3), ch * 3)
        params[f"dec.block{i}.conv.b"] = zeros((2 * ch,))
        params[f"dec.block{i}.cond.w"] = kaiming((2 * ch, cc, 1), cc)
        params[f"dec.block{i}.cond.b"] = zeros((2 * ch,))
        params[f"dec.block{i}.skip.w"] = kaiming((ch, ch, 1), ch)
        params[f"dec.block{i}.skip.b"] = zeros((ch,))
        params[f"dec.block{i}.res.w"] = kaiming((ch, ch, 1), ch)
        params[f"dec.block{i}.res.b"] = zeros((ch,))
    params["dec.head.w"] = zeros((mel, ch, 1))
    params["dec.head.b"] = zeros((mel,))
    return VelocityModel(cfg, frontend_cfg, params)


def param_count(model: VelocityModel) -> int:
    return int(sum(int(np.prod(shape)) for shape in model.manifest().values()))


def forward_batched(model: VelocityModel, xt: Tensor, t, cond: Tensor) -> Tensor:
    """Taped forward over a batch: xt [B,F,mel], t [B], cond [B,F|1,C]."""
    p = model.params
    cfg = model.cfg
    ch = cfg.channels
    bsz = xt.data.shape[0]

    e = Tensor(fe.embed_step_batch(t, dtype=model.dtype))
    e = (ad.matmul(e, p["step.mlp0.w"]) + p["step.mlp0.b"]).tanh()
    e = (ad.matmul(e, p["step.mlp1.w"]) + p["step.mlp1.b"]).tanh()

    x = ad.conv1d(xt, p["dec.in.w"], p["dec.in.b"]).relu()
    skip = None
    for i in range(cfg.n_blocks):
        try:
            s = (ad.matmul(e, p[f"dec.block{i}.step.w"]) + p[f"dec.block{i}.step.b"])
            h = x + s.reshape(bsz, 1, ch)
            y = ad.conv1d(h, p[f"dec.block{i}.conv.w"], p[f"dec.block{i}.conv.b"])
            y = y + ad.conv1d(cond, p[f"dec.block{i}.cond.w"], p[f"dec.block{i}.cond.b"])
            gate = y[:, :, :ch].tanh() * y[:, :, ch:].sigmoid()
            sk = ad.conv1d(gate, p[f"dec.block{i}.skip.w"], p[f"dec.block{i}.skip.b"])
            skip = sk if skip is None else skip + sk
            x = x + ad.conv1d(gate, p[f"dec.block{i}.res.w"], p[f"dec.block{i}.res.b"])
        except NonFiniteError as err:
            raise NonFiniteError(f"decoder block {i}: {err}") from None
    return ad.conv1d(skip.relu(), p["dec.head.w"], p["dec.head.b"])


def velocity(model: VelocityModel, xt, t, cond: ConditionGrid) -> Tensor:
    """Drift field evaluation v(xt, t, cond) for one sample [frames, mel]."""
    xt_t = xt if isinstance(xt, Tensor) else Tensor(np.asarray(xt, dtype=model.dtype))
    frames, mel = xt_t.data.shape
    if mel != model.cfg.mel_bins:
        raise ad.ShapeMismatch(
            f"velocity: xt has {mel} mel bins, model expects {model.cfg.mel_bins}"
        )
    if cond.frames != frames:
        raise ad.ShapeMismatch(
            f"velocity: condition frames {cond.frames} != state frames {frames}"
        )
    if not 0.0 <= float(t) <= 1.0:
        raise ValueError(f"velocity: t must lie in [0, 1], got {t}")
    model.nfe_count += 1
    xb = xt_t.reshape(1, frames, mel)
    cb = cond.features.reshape(1, cond.frames, cond.channels)
    out = forward_batched(model, xb, np.asarray([float(t)]), cb)
    return out.reshape(frames, mel)


# ---------------------------------------------------------------------------
# pure-numpy inference path (same math, no tape) used by the ODE samplers


def _np_conv1d(x, w, b, dilation=1):
    # mirrors autodiff.conv1d's accumulation order so results match bitwise
    out_ch, in_ch, k = w.shape
    frames = x.shape[1]
    pad = dilation * (k // 2)
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0))) if pad else x
    out = np.zeros((x.shape[0], frames, out_ch), dtype=x.dtype)
    for i in range(k):
        out += xp[:, i * dilation : i * dilation + frames, :] @ w[:, :, i].T
    if b is not None:
        out += b
    return out


def velocity_field(model: VelocityModel, cond: ConditionGrid | None):
    """Closure f(z [frames, mel], t) -> velocity, for the samplers.

    The condition's per-block 1x1 projections are fixed during one solve, so
    they are evaluated once up front. Each call increments the model's NFE
    counter by one.
    """
    p = {name: t.data for name, t in model.params.items()}
    cfg = model.cfg
    ch = cfg.channels
    if cond is None:
        cond_data = np.zeros((1, 1, cfg.condition_channels), dtype=model.dtype)
        cond_frames = None
    else:
        cond_data = cond.features.data[None, :, :]
        cond_frames = cond.frames
    cond_proj = [
        _np_conv1d(cond_data, p[f"dec.block{i}.cond.w"], p[f"dec.block{i}.cond.b"])
        for i in range(cfg.n_blocks)
    ]

    def field(z, t):
        if cond_frames is not None and z.shape[0] != cond_frames:
            raise ad.ShapeMismatch(
                f"velocity: condition frames {cond_frames} != state frames {z.shape[0]}"
            )
        model.nfe_count += 1
        e = fe.embed_step_batch(np.asarray([float(t)]), dtype=model.dtype)
        e = np.tanh(e @ p["step.mlp0.w"] + p["step.mlp0.b"])
        e = np.tanh(e @ p["step.mlp1.w"] + p["step.mlp1.b"])
        x = np.maximum(_np_conv1d(z[None, :, :], p["dec.in.w"], p["dec.in.b"]), 0.0)
        skip = None
        for i in range(cfg.n_blocks):
            s = e @ p[f"dec.block{i}.step.w"] + p[f"dec.block{i}.step.b"]
            h = x + s.reshape(1, 1, ch)
            y = _np_conv1d(h, p[f"dec.block{i}.conv.w"], p[f"dec.block{i}.conv.b"])
            y = y + cond_proj[i]
            gate = np.tanh(y[:, :, :ch]) * ad._sigmoid_stable(y[:, :, ch:])
            sk = _np_conv1d(gate, p[f"dec.block{i}.skip.w"], p[f"dec.block{i}.skip.b"])
            skip = sk if skip is None else skip + sk
            x = x + _np_conv1d(gate, p[f"dec.block{i}.res.w"], p[f"dec.block{i}.res.b"])
        out = _np_conv1d(np.maximum(skip, 0.0), p["dec.head.w"], p["dec.head.b"])
        return out[0]

    return field
