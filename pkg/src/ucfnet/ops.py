"""Forward and backward kernels for the network's differentiable operations.

Conventions shared by every kernel:

* tensors are float64 ``(N, C, H, W)``;
* "convolution" is cross-correlation (no kernel flip);
* weights are stored ``(out_channels, in_channels, k, k)`` for both
  convolution and transposed convolution;
* convolutions accumulate one kernel tap at a time, in a fixed tap order,
  each tap contracting over input channels.

Channel contraction normally goes through BLAS, whose summation order may
depend on matrix sizes.  Inside :func:`ordered_accumulation` it is replaced
by a plain sequential multiply-add over channels.  Together with the fixed
tap order this makes :func:`deconv2d_forward` and
:func:`deconv_as_zero_insertion` agree bit for bit: per output element both
add the same non-zero products in the same order, the zero-insertion path
merely interleaves exact zeros.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .tensor import DTYPE, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    k: int
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.k < 1 or self.stride < 1:
            raise ValueError("kernel and stride must be positive")
        if self.pad < 0:
            raise ValueError("padding must be non-negative")

    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.k, self.k)


def conv_output_side(n: int, k: int, s: int, pad: int) -> int:
    if n + 2 * pad < k:
        raise ValueError(f"input side {n} with padding {pad} is smaller than kernel {k}")
    return (n + 2 * pad - k) // s + 1


def deconv_output_side(n: int, k: int, s: int, pad: int, t: int = 0) -> int:
    o = s * (n - 1) + k - 2 * pad + t
    if o <= 0:
        raise ValueError(f"transposed convolution output side {o} is not positive")
    return o


def _check_params(x, weight, bias, spec: ConvSpec):
    if x.ndim != 4:
        raise ShapeError(f"expected rank-4 input, got {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if weight.shape != spec.weight_shape():
        raise ShapeError(f"weight shape {weight.shape} != {spec.weight_shape()}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {bias.shape} != ({spec.out_channels},)")


_ORDERED = False


@contextlib.contextmanager
def ordered_accumulation():
    """Use a layout-independent summation order for forward channel contractions."""
    global _ORDERED
    previous = _ORDERED
    _ORDERED = True
    try:
        yield
    finally:
        _ORDERED = previous


def _contract(w, x):
    """``w @ x`` for ``w`` of shape (O, C) and ``x`` of shape (C, M)."""
    if not _ORDERED:
        return w @ x
    acc = w[:, 0:1] * x[0:1]
    for c in range(1, w.shape[1]):
        acc = acc + w[:, c:c + 1] * x[c:c + 1]
    return acc


def _tap_slice(start: int, count: int, step: int) -> slice:
    return slice(start, start + step * (count - 1) + 1, step)


def _pad(x, top: int, bottom: int | None = None):
    bottom = top if bottom is None else bottom
    if top == 0 and bottom == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (top, bottom), (top, bottom)))


# --- convolution -----------------------------------------------------------

def _im2col(xc, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix ``(C*k*k, N*Ho*Wo)`` from a padded channel-major input."""
    c, n = xc.shape[0], xc.shape[1]
    cols = np.empty((c, k, k, n, ho, wo), dtype=DTYPE)
    for a in range(k):
        for b in range(k):
            cols[:, a, b] = xc[:, :, _tap_slice(a, ho, s), _tap_slice(b, wo, s)]
    return cols.reshape(c * k * k, -1)


def conv2d_forward(x, weight, bias, spec: ConvSpec) -> np.ndarray:
    _check_params(x, weight, bias, spec)
    n, _, h, w = x.shape
    k, s = spec.k, spec.stride
    ho = conv_output_side(h, k, s, spec.pad)
    wo = conv_output_side(w, k, s, spec.pad)
    # channel-major layout: every product below is (O, .) @ (., N*Ho*Wo)
    xc = _pad(x, spec.pad).transpose(1, 0, 2, 3)
    if _ORDERED:
        out = np.zeros((spec.out_channels, n * ho * wo), dtype=DTYPE)
        for a in range(k):
            for b in range(k):
                patch = xc[:, :, _tap_slice(a, ho, s), _tap_slice(b, wo, s)].reshape(spec.in_channels, -1)
                out += _contract(weight[:, :, a, b], patch)
    else:
        out = weight.reshape(spec.out_channels, -1) @ _im2col(xc, k, s, ho, wo)
    out = out.reshape(spec.out_channels, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(grad_out, x, weight, spec: ConvSpec):
    """Return ``(grad_x, grad_w, grad_b)`` for :func:`conv2d_forward`."""
    _check_params(x, weight, None, spec)
    n, c, h, w = x.shape
    k, s = spec.k, spec.stride
    ho = conv_output_side(h, k, s, spec.pad)
    wo = conv_output_side(w, k, s, spec.pad)
    if grad_out.shape != (n, spec.out_channels, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(n, spec.out_channels, ho, wo)}")
    xc = _pad(x, spec.pad).transpose(1, 0, 2, 3)
    go = grad_out.transpose(1, 0, 2, 3).reshape(spec.out_channels, -1)
    grad_w = (go @ _im2col(xc, k, s, ho, wo).T).reshape(weight.shape)
    dcols = (weight.reshape(spec.out_channels, -1).T @ go).reshape(c, k, k, n, ho, wo)
    dxc = np.zeros(xc.shape, dtype=DTYPE)
    for a in range(k):
        for b in range(k):
            dxc[:, :, _tap_slice(a, ho, s), _tap_slice(b, wo, s)] += dcols[:, a, b]
    dx = dxc.transpose(1, 0, 2, 3)
    p = spec.pad
    if p:
        dx = dx[:, :, p:p + h, p:p + w]
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(dx), grad_w, grad_b


# --- transposed convolution ------------------------------------------------

def deconv2d_forward(x, weight, bias, spec: ConvSpec, t: int = 0) -> np.ndarray:
    """Transposed convolution by scatter-add.

    Each input unit multiplies the kernel into a stride-spaced output window.
    ``t`` adds extra rows/columns at the bottom/right (the output-size
    relaxation offset, ``0 <= t < stride``).
    """
    _check_params(x, weight, bias, spec)
    if not 0 <= t < spec.stride:
        raise ValueError(f"offset t={t} must satisfy 0 <= t < stride={spec.stride}")
    n, c, h, w = x.shape
    k, s, p = spec.k, spec.stride, spec.pad
    oh = deconv_output_side(h, k, s, p, t)
    ow = deconv_output_side(w, k, s, p, t)
    full_h = max(s * (h - 1) + k, p + oh)
    full_w = max(s * (w - 1) + k, p + ow)
    xr = x.transpose(1, 0, 2, 3).reshape(c, -1)
    full = np.zeros((spec.out_channels, n, full_h, full_w), dtype=DTYPE)
    # reversed tap order mirrors the flipped-kernel order of the equivalent convolution
    for i in reversed(range(k)):
        for j in reversed(range(k)):
            contrib = _contract(weight[:, :, i, j], xr).reshape(spec.out_channels, n, h, w)
            full[:, :, _tap_slice(i, h, s), _tap_slice(j, w, s)] += contrib
    out = full[:, :, p:p + oh, p:p + ow].transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return np.ascontiguousarray(out)


def deconv2d_backward(grad_out, x, weight, spec: ConvSpec, t: int = 0):
    """Return ``(grad_x, grad_w, grad_b)`` for :func:`deconv2d_forward`."""
    _check_params(x, weight, None, spec)
    n, c, h, w = x.shape
    k, s, p = spec.k, spec.stride, spec.pad
    oh = deconv_output_side(h, k, s, p, t)
    ow = deconv_output_side(w, k, s, p, t)
    if grad_out.shape != (n, spec.out_channels, oh, ow):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(n, spec.out_channels, oh, ow)}")
    full_h = max(s * (h - 1) + k, p + oh)
    full_w = max(s * (w - 1) + k, p + ow)
    gfull = np.zeros((spec.out_channels, n, full_h, full_w), dtype=DTYPE)
    gfull[:, :, p:p + oh, p:p + ow] = grad_out.transpose(1, 0, 2, 3)
    xr = x.transpose(1, 0, 2, 3).reshape(c, -1)
    dx = np.zeros((c, n * h * w), dtype=DTYPE)
    grad_w = np.empty_like(weight)
    for i in range(k):
        for j in range(k):
            g = gfull[:, :, _tap_slice(i, h, s), _tap_slice(j, w, s)].reshape(spec.out_channels, -1)
            dx += weight[:, :, i, j].T @ g
            grad_w[:, :, i, j] = g @ xr.T
    dx = dx.reshape(c, n, h, w).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(dx), grad_w, grad_out.sum(axis=(0, 2, 3))


def stretch(x, s: int) -> np.ndarray:
    """Insert ``s - 1`` zeros between neighbouring input units along both spatial axes."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, s * (h - 1) + 1, s * (w - 1) + 1), dtype=DTYPE)
    out[:, :, ::s, ::s] = x
    return out


def deconv_as_zero_insertion(x, weight, bias, spec: ConvSpec, t: int = 0) -> np.ndarray:
    """Transposed convolution computed as a stride-1 convolution.

    The input is stretched by zero insertion, padded with ``k - pad - 1``
    (plus ``t`` at the bottom/right) and convolved with the spatially flipped
    kernel.
    """
    _check_params(x, weight, bias, spec)
    border = spec.k - spec.pad - 1
    if border < 0:
        raise ValueError(f"k - pad - 1 = {border} < 0; no equivalent convolution exists")
    xs = _pad(stretch(x, spec.stride), border, border + t)
    flipped = np.ascontiguousarray(weight[:, :, ::-1, ::-1])
    unit = ConvSpec(spec.in_channels, spec.out_channels, spec.k, 1, 0)
    return conv2d_forward(xs, flipped, bias, unit)


# --- pooling ---------------------------------------------------------------

def _windows(x, window: int):
    n, c, h, w = x.shape
    if h % window or w % window:
        raise ShapeError(f"spatial size {h}x{w} not divisible by pooling window {window}")
    ho, wo = h // window, w // window
    v = x.reshape(n, c, ho, window, wo, window).transpose(0, 1, 2, 4, 3, 5)
    return v.reshape(n, c, ho, wo, window * window)


def maxpool_forward(x, window: int, stride: int | None = None):
    """Non-overlapping max pooling; returns ``(out, argmax)``.

    ``argmax`` holds the row-major index inside each window; ties go to the
    smallest index.
    """
    stride = window if stride is None else stride
    if stride != window:
        raise ValueError("only non-overlapping pooling (stride == window) is supported")
    v = _windows(x, window)
    idx = v.argmax(axis=-1)
    out = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool_backward(grad_out, argmax, window: int, input_shape) -> np.ndarray:
    n, c, h, w = input_shape
    ho, wo = h // window, w // window
    g = np.zeros((n, c, ho, wo, window * window), dtype=DTYPE)
    np.put_along_axis(g, argmax[..., None], grad_out[..., None], axis=-1)
    g = g.reshape(n, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(g.reshape(n, c, h, w))


# --- batch normalization ---------------------------------------------------

@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormState":
        return cls(
            np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels)
        )


def batchnorm_forward(x, state: BatchNormState, mode: str = "train"):
    """Return ``(y, cache)``.

    ``train`` normalizes with batch statistics and updates the running
    statistics in place; ``batch`` normalizes with batch statistics only;
    ``eval`` uses the running statistics.
    """
    if x.shape[1] != state.gamma.shape[0]:
        raise ShapeError(f"input has {x.shape[1]} channels, batch norm has {state.gamma.shape[0]}")
    if mode in ("train", "batch"):
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if mode == "train":
            count = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * count / (count - 1) if count > 1 else var
            state.running_mean[:] = state.momentum * state.running_mean + (1 - state.momentum) * mean
            state.running_var[:] = state.momentum * state.running_var + (1 - state.momentum) * unbiased
        mode = "train"
    elif mode == "eval":
        mean, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = state.gamma[None, :, None, None] * xhat + state.beta[None, :, None, None]
    return y, (xhat, inv_std, mode)


def batchnorm_backward(grad_out, cache, state: BatchNormState):
    """Return ``(grad_x, grad_gamma, grad_beta)``."""
    xhat, inv_std, mode = cache
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    scale = (state.gamma * inv_std)[None, :, None, None]
    if mode == "eval":
        return grad_out * scale, grad_gamma, grad_beta
    m = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
    dx = scale * (
        grad_out
        - grad_beta[None, :, None, None] / m
        - xhat * grad_gamma[None, :, None, None] / m
    )
    return dx, grad_gamma, grad_beta


# --- interpolation ---------------------------------------------------------

def interp_matrix(n_in: int, n_out: int, mode: str) -> np.ndarray:
    """Row-stochastic ``(n_out, n_in)`` resampling matrix for one spatial axis."""
    if n_in < 1 or n_out < 1:
        raise ValueError("interpolation sizes must be positive")
    A = np.zeros((n_out, n_in), dtype=DTYPE)
    dst = np.arange(n_out)
    if mode == "nearest":
        src = np.minimum((dst * n_in) // n_out, n_in - 1)
        A[dst, src] = 1.0
        return A
    if mode != "bilinear":
        raise ValueError(f"unknown interpolation mode {mode!r}")
    if n_out == 1 or n_in == 1:
        A[:, 0] = 1.0
        return A
    pos = dst * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    A[dst, lo] = 1.0 - frac
    A[dst, lo + 1] += frac
    return A


def interpolate(x, out_h: int, out_w: int, mode: str = "bilinear") -> np.ndarray:
    """Channel-wise spatial resize (bilinear uses the align-corners grid)."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be at least 1x1")
    h, w = x.shape[2], x.shape[3]
    if (h, w) == (out_h, out_w):
        return np.array(x, dtype=DTYPE)
    Ah = interp_matrix(h, out_h, mode)
    Aw = interp_matrix(w, out_w, mode)
    return np.ascontiguousarray(Ah @ x @ Aw.T)


def interpolate_backward(grad_out, in_h: int, in_w: int, mode: str = "bilinear") -> np.ndarray:
    out_h, out_w = grad_out.shape[2], grad_out.shape[3]
    if (in_h, in_w) == (out_h, out_w):
        return np.array(grad_out, dtype=DTYPE)
    Ah = interp_matrix(in_h, out_h, mode)
    Aw = interp_matrix(in_w, out_w, mode)
    return np.ascontiguousarray(Ah.T @ grad_out @ Aw)


# --- classifier ------------------------------------------------------------

def softmax_channels(x) -> np.ndarray:
    if x.shape[1] < 2:
        raise ShapeError("softmax needs at least two channels")
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_loss(logits, labels, reduction: str = "sum"):
    """Binary cross-entropy on the foreground softmax channel.

    ``logits`` is ``(N, 2, H, W)`` with channel 1 the foreground; ``labels``
    is ``(N, H, W)`` in {0, 1}.  Returns ``(loss, grad_logits)`` where the
    gradient matches the requested reduction (``sum`` or ``mean`` over pixels).
    """
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise ShapeError(f"expected (N, 2, H, W) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=DTYPE)
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    q_raw = softmax_channels(logits)[:, 1]
    q = np.clip(q_raw, PROB_CLAMP, 1.0 - PROB_CLAMP)
    pixel = -(labels * np.log(q) + (1.0 - labels) * np.log(1.0 - q))
    # clamped pixels have zero derivative through the clip
    live = (q_raw == q).astype(DTYPE)
    dz1 = (q_raw - labels) * live
    grad = np.stack([-dz1, dz1], axis=1)
    if reduction == "sum":
        return float(pixel.sum()), grad
    if reduction == "mean":
        return float(pixel.mean()), grad / pixel.size
    raise ValueError(f"unknown reduction {reduction!r}")
