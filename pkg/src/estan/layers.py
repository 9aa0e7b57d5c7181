"""Differentiable layers with hand-written backward passes, plus Adam.

Every forward/backward here is a pure function of its arguments; the only
mutating operation is :func:`adam_step`. Convolutions are cross-correlations
with stride 1 and zero "same" padding, so spatial size is always preserved.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, UnsupportedKernelError
from .tensor import SeededRng, check_finite, default_dtype, he_normal_init


@dataclass
class ConvKernel:
    weights: np.ndarray  # (out_channels, in_channels, kh, kw)
    bias: np.ndarray  # (out_channels,)

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"kernel weights must be rank 4, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} output channels"
            )
        _check_geometry(self.kh, self.kw)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kh(self) -> int:
        return self.weights.shape[2]

    @property
    def kw(self) -> int:
        return self.weights.shape[3]

    @property
    def size(self) -> int:
        return self.weights.size + self.bias.size

    @classmethod
    def init(cls, out_ch: int, in_ch: int, kh: int, kw: int, rng: SeededRng, dtype=None) -> "ConvKernel":
        """He-normal weights (fan_in = in_ch * kh * kw), zero bias."""
        _check_geometry(kh, kw)
        dtype = dtype or default_dtype()
        w = he_normal_init((out_ch, in_ch, kh, kw), in_ch * kh * kw, rng, dtype=dtype)
        return cls(w, np.zeros(out_ch, dtype=dtype))


def _check_geometry(kh: int, kw: int) -> None:
    if kh < 1 or kw < 1:
        raise UnsupportedKernelError(f"kernel extent must be positive, got {kh}x{kw}")
    # same-padding needs (k - 1) / 2 on each side of each axis
    if kh % 2 == 0 or kw % 2 == 0:
        raise UnsupportedKernelError(f"kernel {kh}x{kw} has an even extent; same padding is undefined")


def _windows(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Padded sliding windows, shape (n, c, h, w, kh, kw); a view, no copy."""
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    return sliding_window_view(x, (kh, kw), axis=(2, 3))


def conv2d_forward(x: np.ndarray, k: ConvKernel) -> np.ndarray:
    if x.ndim != 4 or x.shape[1] != k.in_channels:
        raise ShapeError(f"input shape {x.shape} does not match kernel with {k.in_channels} input channels")
    if k.kh == 1 and k.kw == 1:
        out = np.tensordot(k.weights[:, :, 0, 0], x, axes=([1], [1])).transpose(1, 0, 2, 3)
    else:
        win = _windows(x, k.kh, k.kw)
        out = np.tensordot(win, k.weights, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    out += k.bias[None, :, None, None]
    return check_finite(out, "conv2d_forward")


def conv2d_backward(x: np.ndarray, k: ConvKernel, grad_out: np.ndarray, input_grad: bool = True):
    """Returns ``(grad_x, grad_w, grad_b)``; ``grad_x`` is None when ``input_grad`` is false."""
    expected = (x.shape[0], k.out_channels, x.shape[2], x.shape[3])
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output shape {expected}")
    grad_b = grad_out.sum(axis=(0, 2, 3))
    if k.kh == 1 and k.kw == 1:
        grad_w = np.tensordot(grad_out, x, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
    else:
        grad_w = np.tensordot(grad_out, _windows(x, k.kh, k.kw), axes=([0, 2, 3], [0, 2, 3]))
    if not input_grad:
        return None, np.ascontiguousarray(grad_w), grad_b
    # For odd kernels, the input gradient is a same-padded correlation of
    # grad_out with the spatially flipped, channel-transposed kernel.
    flipped = np.ascontiguousarray(k.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    back = ConvKernel(flipped, np.zeros(k.in_channels, dtype=k.weights.dtype))
    grad_x = conv2d_forward(grad_out, back)
    return grad_x, np.ascontiguousarray(grad_w), grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


@dataclass
class PoolIndices:
    """Flat (raveled NCHW) input index of each pooled maximum."""

    flat: np.ndarray
    in_dims: tuple


def maxpool2x2_forward(x: np.ndarray):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max-pool 2x2 needs even spatial dims, got {h}x{w}")
    # window order is row-major: (0,0), (0,1), (1,0), (1,1)
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)  # argmax returns the first maximum: the tie-break rule
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    ni, ci, hi, wi = np.indices(arg.shape, sparse=True)
    rows = 2 * hi + arg // 2
    cols = 2 * wi + arg % 2
    flat = ((ni * c + ci) * h + rows) * w + cols
    return np.ascontiguousarray(out), PoolIndices(flat, (n, c, h, w))


def maxpool2x2_backward(indices: PoolIndices, grad_out: np.ndarray, in_dims=None) -> np.ndarray:
    in_dims = tuple(in_dims or indices.in_dims)
    if grad_out.shape != indices.flat.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != pooled shape {indices.flat.shape}")
    grad = np.zeros(int(np.prod(in_dims)), dtype=grad_out.dtype)
    grad[indices.flat.ravel()] = grad_out.ravel()
    return grad.reshape(in_dims)


def upsample_nearest2x(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample_nearest2x_backward(grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = grad_out.shape
    return grad_out.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=1)


def concat_backward(grad_out: np.ndarray, a_channels: int):
    return grad_out[:, :a_channels], grad_out[:, a_channels:]


def sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * y * (1 - y)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """Bias-corrected Adam update, applied in place to ``params``."""
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {params[name].shape}")
    state.t += 1
    t = state.t
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name] = m.astype(p.dtype, copy=False)
        state.v[name] = v.astype(p.dtype, copy=False)
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p -= step.astype(p.dtype, copy=False)
        check_finite(p, f"adam_step[{name}]")
