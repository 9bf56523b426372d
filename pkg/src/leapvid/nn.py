"""Neural building blocks: LSTM cell, frame and action encoders/decoders.

Blocks are pure functions of their inputs and parameters; the only
recurrent state is the explicit :class:`LstmState` threaded by callers.
Frames and feature maps are channels-last, ``(batch, H, W, C)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value


class Module:
    """Base class collecting :class:`Value` parameters from attributes."""

    def named_parameters(self, prefix=""):
        out = {}
        for key, val in vars(self).items():
            if isinstance(val, Value) and val.requires_grad:
                out[prefix + key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(f"{prefix}{key}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def state_dict(self):
        return {k: v.data for k, v in self.named_parameters().items()}

    def load_state_dict(self, state, prefix=""):
        own = self.named_parameters()
        for name, param in own.items():
            key = prefix + name
            if key not in state:
                raise KeyError(f"missing parameter {key!r}")
            arr = np.asarray(state[key])
            if arr.shape != param.shape:
                raise ValueError(f"parameter {key!r}: expected shape {param.shape}, got {arr.shape}")
            param.data = arr.astype(param.data.dtype, copy=True)


def _param(rng, shape, std, name=None):
    return Value(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)


def _zeros(shape, name=None):
    return Value(np.zeros(shape), requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, rng, n_in, n_out, gain=1.0):
        self.weight = _param(rng, (n_in, n_out), gain / np.sqrt(n_in))
        self.bias = _zeros((n_out,))
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x):
        return ad.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, kernel, stride=1, padding=0, gain=np.sqrt(2.0)):
        self.weight = _param(rng, (kernel, kernel, c_in, c_out), gain / np.sqrt(c_in * kernel * kernel))
        self.bias = _zeros((c_out,))
        self.stride, self.padding = stride, padding

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding)


# ---------------------------------------------------------------------------
# LSTM

@dataclass
class LstmState:
    hidden: Value
    cell: Value

    @classmethod
    def zeros(cls, batch, width):
        return cls(Value(np.zeros((batch, width))), Value(np.zeros((batch, width))))

    @property
    def width(self):
        return self.hidden.shape[-1]


class LstmCell(Module):
    """Single-layer LSTM with fused gate weights ``[input, forget, output, candidate]``."""

    def __init__(self, rng, n_in, width, forget_bias=1.0):
        self.weight = _param(rng, (n_in + width, 4 * width), 1.0 / np.sqrt(n_in + width))
        bias = np.zeros(4 * width)
        bias[width:2 * width] = forget_bias
        self.bias = Value(bias, requires_grad=True)
        self.n_in, self.width = n_in, width

    def initial_state(self, batch):
        return LstmState.zeros(batch, self.width)

    def __call__(self, state, x):
        return lstm_step(state, x, self)


def lstm_step(state: LstmState, x, params: LstmCell) -> LstmState:
    """Advance one LSTM step on a ``(batch, n_in)`` input."""
    if state is None:
        raise ValueError("lstm_step: missing recurrent state")
    x = x if isinstance(x, Value) else Value(x)
    g = params.width
    if x.shape[-1] != params.n_in:
        raise ValueError(f"lstm_step: input width {x.shape[-1]} != expected {params.n_in}")
    if state.hidden.shape[-1] != g or state.cell.shape[-1] != g:
        raise ValueError(f"lstm_step: state width {state.hidden.shape[-1]} != cell width {g}")
    gates = ad.linear(ad.concatenate([x, state.hidden], axis=1), params.weight, params.bias)
    act = ad.sigmoid(gates[:, :3 * g])
    cand = ad.tanh(gates[:, 3 * g:])
    cell = act[:, g:2 * g] * state.cell + act[:, :g] * cand
    hidden = act[:, 2 * g:] * ad.tanh(cell)
    return LstmState(hidden, cell)


class Recurrent(Module):
    """LSTM followed by a linear read-out: the shape of every RNN in the models."""

    def __init__(self, rng, n_in, width, n_out, squash=False):
        self.lstm = LstmCell(rng, n_in, width)
        self.head = Linear(rng, width, n_out)
        self.squash = squash
        self.n_in, self.n_out = n_in, n_out

    def initial_state(self, batch):
        return self.lstm.initial_state(batch)

    def __call__(self, state, x):
        state = lstm_step(state, x, self.lstm)
        out = self.head(state.hidden)
        return (ad.tanh(out) if self.squash else out), state


# ---------------------------------------------------------------------------
# frames

@dataclass
class FrameCode:
    code: Value
    skips: list | None = None


def _check_frames(x, shape):
    x = np.asarray(x)
    if x.shape[1:] != tuple(shape):
        raise ValueError(f"frame shape {x.shape[1:]} does not match configured {tuple(shape)}")
    if x.size and (x.min() < 0.0 or x.max() > 1.0 or not np.isfinite(x).all()):
        raise ValueError("frame pixels must lie in [0, 1]")
    return x


class FrameEncoder(Module):
    """Two strided convolutions (H -> H/2 -> H/4) then a tanh projection to ``g``."""

    def __init__(self, rng, frame_shape=(16, 16, 1), code_width=64, channels=(16, 32)):
        h, w, c = frame_shape
        if h % 4 or w % 4:
            raise ValueError("frame height and width must be divisible by 4")
        c1, c2 = channels
        self.conv1 = Conv2d(rng, c, c1, 4, stride=2, padding=1)
        self.conv2 = Conv2d(rng, c1, c2, 4, stride=2, padding=1)
        self.proj = Linear(rng, c2 * (h // 4) * (w // 4), code_width)
        self.frame_shape = tuple(frame_shape)
        self.code_width = code_width

    def __call__(self, x) -> FrameCode:
        f1 = ad.relu(self.conv1(x))
        f2 = ad.relu(self.conv2(f1))
        flat = ad.reshape(f2, (f2.shape[0], -1))
        return FrameCode(ad.tanh(self.proj(flat)), [f1, f2])


def depth_to_space(x, factor=2):
    """Rearrange ``(N, H, W, f*f*C)`` into ``(N, H*f, W*f, C)`` (sub-pixel upsampling)."""
    n, h, w, cff = x.shape
    c = cff // (factor * factor)
    y = ad.reshape(x, (n, h, w, factor, factor, c))
    y = ad.transpose(y, (0, 1, 3, 2, 4, 5))
    return ad.reshape(y, (n, h * factor, w * factor, c))


class FrameDecoder(Module):
    """Mirror of :class:`FrameEncoder` using sub-pixel upsampling.

    Sigmoid output keeps pixels in [0, 1]. With ``use_skips`` the encoder
    feature maps of a reference frame are concatenated at both scales.
    """

    def __init__(self, rng, frame_shape=(16, 16, 1), code_width=64, channels=(16, 32), use_skips=False):
        h, w, c = frame_shape
        c1, c2 = channels
        self.hq, self.wq, self.c2 = h // 4, w // 4, c2
        self.proj = Linear(rng, code_width, c2 * self.hq * self.wq, gain=np.sqrt(2.0))
        k = 2 if use_skips else 1
        self.conv1 = Conv2d(rng, k * c2, 4 * c1, 3, padding=1)
        self.conv2 = Conv2d(rng, k * c1, 4 * c, 3, padding=1, gain=1.0)
        self.use_skips = use_skips
        self.frame_shape = tuple(frame_shape)
        self.code_width = code_width

    def __call__(self, code, skips=None):
        if self.use_skips and skips is None:
            raise ValueError("decoder configured with skips but none were given")
        b = code.shape[0]
        y = ad.reshape(ad.relu(self.proj(code)), (b, self.hq, self.wq, self.c2))
        if self.use_skips:
            y = ad.concatenate([y, skips[1]], axis=-1)
        y = ad.relu(depth_to_space(self.conv1(y)))
        if self.use_skips:
            y = ad.concatenate([y, skips[0]], axis=-1)
        return ad.sigmoid(depth_to_space(self.conv2(y)))


def encode_frame(x, params: FrameEncoder) -> FrameCode:
    """Encode a batch of ``(B, H, W, C)`` frames in [0, 1]."""
    if not isinstance(x, Value):
        x = _check_frames(x, params.frame_shape)
    return params(x if isinstance(x, Value) else Value(x))


def decode_frame(code, params: FrameDecoder, skips=None) -> Value:
    """Decode a ``(B, g)`` code into ``(B, H, W, C)`` frames in [0, 1]."""
    code = code.code if isinstance(code, FrameCode) else code
    if code.shape[-1] != params.code_width:
        raise ValueError(f"code width {code.shape[-1]} != decoder width {params.code_width}")
    return params(code, skips)


# ---------------------------------------------------------------------------
# actions

class ActionEncoder(Module):
    """Affine lift of an ``n``-vector to ``g_a`` dimensions with tanh."""

    def __init__(self, rng, action_dim=2, code_width=16):
        if code_width <= action_dim:
            raise ValueError("action code width must exceed the action dimension")
        self.fc = Linear(rng, action_dim, code_width, gain=2.0)
        self.action_dim, self.code_width = action_dim, code_width

    def __call__(self, a):
        return ad.tanh(self.fc(a))


class ActionDecoder(Module):
    def __init__(self, rng, action_dim=2, code_width=16):
        self.fc = Linear(rng, code_width, action_dim)
        self.action_dim, self.code_width = action_dim, code_width

    def __call__(self, code):
        return ad.sigmoid(self.fc(code))


def encode_action(a, params: ActionEncoder) -> Value:
    if not isinstance(a, Value):
        a = np.asarray(a)
        if a.ndim == 1:
            a = a[None]
        if a.shape[-1] != params.action_dim:
            raise ValueError(f"action length {a.shape[-1]} != configured {params.action_dim}")
        if a.size and (a.min() < 0.0 or a.max() > 1.0):
            raise ValueError("actions must lie in [0, 1]")
        a = Value(a)
    elif a.shape[-1] != params.action_dim:
        raise ValueError(f"action length {a.shape[-1]} != configured {params.action_dim}")
    return params(a)


def decode_action(code, params: ActionDecoder) -> Value:
    code = code if isinstance(code, Value) else Value(np.atleast_2d(code))
    if code.shape[-1] != params.code_width:
        raise ValueError(f"action code width {code.shape[-1]} != {params.code_width}")
    return params(code)
