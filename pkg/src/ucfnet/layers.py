"""Stateful layer wrappers around the kernels in :mod:`ucfnet.ops`.

A layer caches what its backward pass needs during ``forward`` and fills
``grads`` (same keys as ``params``) during ``backward``.  Buffers hold
non-trainable state such as batch-norm running statistics.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .rdropout import MaskGenerator
from .tensor import DTYPE, RngStream, get_activation


@dataclass(frozen=True)
class RunContext:
    """Forward-pass mode plus the key material for dropout masks.

    ``calibrate`` runs the deterministic test-time path everywhere except in
    batch norm, which normalizes with batch statistics and records them.
    """

    mode: str = "eval"
    seed: int = 0
    iteration: int = 0

    @property
    def training(self) -> bool:
        return self.mode == "train"

    def stream(self, layer_id: int) -> RngStream:
        return RngStream(self.seed, (layer_id, self.iteration))


class Layer:
    kind = "layer"

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x, ctx: RunContext):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def describe(self) -> str:
        return self.kind

    def __repr__(self):
        return f"{self.name}:{self.describe()}"


def fan_in_uniform(shape, fan_in: int, stream: RngStream) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return stream.uniform(shape, -bound, bound)


class Conv2d(Layer):
    kind = "conv"

    def __init__(self, name, spec: ops.ConvSpec, stream: RngStream | None = None):
        super().__init__(name)
        self.spec = spec
        fan_in = spec.in_channels * spec.k * spec.k
        if stream is None:
            weight = np.zeros(spec.weight_shape())
        else:
            weight = fan_in_uniform(spec.weight_shape(), fan_in, stream)
        self.params = {"weight": weight, "bias": np.zeros(spec.out_channels)}

    def describe(self):
        s = self.spec
        return f"conv({s.in_channels}->{s.out_channels},k={s.k},s={s.stride},p={s.pad})"

    def forward(self, x, ctx):
        self._x = x
        return ops.conv2d_forward(x, self.params["weight"], self.params["bias"], self.spec)

    def backward(self, grad):
        gx, gw, gb = ops.conv2d_backward(grad, self._x, self.params["weight"], self.spec)
        self.grads = {"weight": gw, "bias": gb}
        return gx


class Deconv2d(Layer):
    kind = "deconv"

    def __init__(self, name, spec: ops.ConvSpec, t: int = 0, stream: RngStream | None = None):
        super().__init__(name)
        self.spec = spec
        self.t = t
        # each output unit receives about (k/s)^2 taps per input channel
        fan_in = max(1, spec.in_channels * (spec.k // spec.stride) ** 2)
        if stream is None:
            weight = np.zeros(spec.weight_shape())
        else:
            weight = fan_in_uniform(spec.weight_shape(), fan_in, stream)
        self.params = {"weight": weight, "bias": np.zeros(spec.out_channels)}

    def describe(self):
        s = self.spec
        return f"deconv({s.in_channels}->{s.out_channels},k={s.k},s={s.stride},p={s.pad},t={self.t})"

    def forward(self, x, ctx):
        self._x = x
        return ops.deconv2d_forward(x, self.params["weight"], self.params["bias"], self.spec, self.t)

    def backward(self, grad):
        gx, gw, gb = ops.deconv2d_backward(grad, self._x, self.params["weight"], self.spec, self.t)
        self.grads = {"weight": gw, "bias": gb}
        return gx


class BatchNorm2d(Layer):
    kind = "bn"

    def __init__(self, name, channels: int):
        super().__init__(name)
        self.state = ops.BatchNormState.fresh(channels)
        self.params = {"gamma": self.state.gamma, "beta": self.state.beta}
        self.buffers = {"running_mean": self.state.running_mean, "running_var": self.state.running_var}
        self.calibration: list = []

    def describe(self):
        return f"bn({self.state.gamma.shape[0]})"

    def forward(self, x, ctx):
        if ctx.mode == "calibrate":
            y, self._cache = ops.batchnorm_forward(x, self.state, "batch")
            self.calibration.append((x.mean(axis=(0, 2, 3)), x.var(axis=(0, 2, 3)), x.size // x.shape[1]))
            return y
        y, self._cache = ops.batchnorm_forward(x, self.state, ctx.mode)
        return y

    def begin_calibration(self):
        self.calibration = []

    def end_calibration(self):
        """Replace the running statistics by the pooled statistics of all calibration batches."""
        if not self.calibration:
            return
        means = np.array([m for m, _, _ in self.calibration])
        vars_ = np.array([v for _, v, _ in self.calibration])
        counts = np.array([c for _, _, c in self.calibration], dtype=DTYPE)[:, None]
        total = counts.sum()
        mean = (counts * means).sum(axis=0) / total
        # law of total variance across batches, then the unbiased correction
        var = (counts * (vars_ + (means - mean) ** 2)).sum(axis=0) / total
        self.state.running_mean[:] = mean
        self.state.running_var[:] = var * total / max(total - 1, 1)
        self.calibration = []

    def backward(self, grad):
        gx, gg, gb = ops.batchnorm_backward(grad, self._cache, self.state)
        self.grads = {"gamma": gg, "beta": gb}
        return gx


class Activate(Layer):
    kind = "act"

    def __init__(self, name, activation: str = "relu"):
        super().__init__(name)
        self.act = get_activation(activation)

    def describe(self):
        return self.act.name

    def forward(self, x, ctx):
        self._x = x
        return self.act(x)

    def backward(self, grad):
        return grad * self.act.grad(self._x)


class _Masked(Layer):
    """Shared mask bookkeeping for the two dropout placements."""

    def __init__(self, name, layer_id: int, generator: MaskGenerator, activation: str):
        super().__init__(name)
        self.layer_id = layer_id
        self.generator = generator
        self.act = get_activation(activation)
        # a frozen mask, when set, replaces sampling (used by gradient checks)
        self.fixed_mask: np.ndarray | None = None

    def mask_for(self, x, ctx: RunContext):
        if self.fixed_mask is not None:
            return self.fixed_mask
        return self.generator.draw(ctx.stream(self.layer_id), x.shape)


class RDropout(_Masked):
    """``g(M * f)`` in training, ``p * g(f)`` at test time."""

    kind = "rdropout"

    def __init__(self, name, layer_id, generator=MaskGenerator(), activation="relu"):
        super().__init__(name, layer_id, generator, activation)
        if not self.act.zero_preserving():
            raise ValueError(f"R-dropout needs g(0) = 0, {self.act.name} violates it")

    def describe(self):
        return f"rdropout({self.act.name},{self.generator.kind},p={self.generator.mean()})"

    def forward(self, x, ctx):
        if not ctx.training:
            self._scale = self.generator.mean()
            self._x = x
            self._mask = None
            return self._scale * self.act(x)
        self._mask = self.mask_for(x, ctx)
        self._x = self._mask * x
        return self.act(self._x)

    def backward(self, grad):
        if self._mask is None:
            return self._scale * grad * self.act.grad(self._x)
        return grad * self.act.grad(self._x) * self._mask


class Dropout(_Masked):
    """Post-activation dropout ``M * g(f)``; the layer applies ``g`` itself."""

    kind = "dropout"

    def describe(self):
        return f"dropout({self.act.name},{self.generator.kind},p={self.generator.mean()})"

    def forward(self, x, ctx):
        self._x = x
        if not ctx.training:
            self._mask = np.full((1, 1, 1, 1), self.generator.mean())
        else:
            self._mask = self.mask_for(x, ctx)
        return self._mask * self.act(x)

    def backward(self, grad):
        return grad * self._mask * self.act.grad(self._x)


class MaxPool(Layer):
    kind = "pool"

    def __init__(self, name, window: int = 2):
        super().__init__(name)
        self.window = window

    def describe(self):
        return f"maxpool({self.window})"

    def forward(self, x, ctx):
        self._shape = x.shape
        out, self._idx = ops.maxpool_forward(x, self.window)
        return out

    def backward(self, grad):
        return ops.maxpool_backward(grad, self._idx, self.window, self._shape)


def zero_grads(layer: Layer) -> None:
    layer.grads = {k: np.zeros_like(v, dtype=DTYPE) for k, v in layer.params.items()}
