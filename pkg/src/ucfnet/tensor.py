"""Rank-4 float64 tensors, activations and counter-based random streams.

Every activation, weight and gradient in the package is a C-contiguous
``numpy.ndarray`` of dtype float64 and shape ``(N, C, H, W)``.  Helpers here
construct and validate such arrays; they never broadcast beyond
scalar-vs-tensor.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

DTYPE = np.float64
# hard cap on element count, anything above is a caller bug rather than a tensor
MAX_ELEMENTS = 2**40

Shape4 = tuple[int, int, int, int]
Fill = Union[float, int, "RngStream", Callable[[Shape4], np.ndarray]]


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent with an operation."""


def check_shape(shape) -> Shape4:
    shape = tuple(int(d) for d in shape)
    if len(shape) != 4:
        raise ShapeError(f"expected a 4-tuple shape, got {shape}")
    if any(d < 0 for d in shape):
        raise ShapeError(f"negative dimension in {shape}")
    if math.prod(shape) > MAX_ELEMENTS:
        raise OverflowError(f"tensor of shape {shape} exceeds {MAX_ELEMENTS} elements")
    return shape  # type: ignore[return-value]


def new_tensor(shape, fill: Fill = 0.0) -> np.ndarray:
    """Create an ``(N, C, H, W)`` tensor.

    ``fill`` is a constant, an :class:`RngStream` (standard normal draws) or a
    callable receiving the shape and returning an array of that shape.
    """
    shape = check_shape(shape)
    if isinstance(fill, RngStream):
        return fill.normal(shape)
    if callable(fill):
        out = np.ascontiguousarray(fill(shape), dtype=DTYPE)
        if out.shape != shape:
            raise ShapeError(f"generator returned {out.shape}, expected {shape}")
        return out
    return np.full(shape, float(fill), dtype=DTYPE)


def as_tensor4(x) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 tensor, got ndim={arr.ndim}")
    return arr


# --- activations -----------------------------------------------------------

def relu(x):
    return np.maximum(x, 0.0)


def tanh(x):
    return np.tanh(x)


def lrelu(x, alpha: float = 0.01):
    return np.where(x > 0, x, alpha * x)


@dataclass(frozen=True)
class Activation:
    """A pointwise nonlinearity with its derivative."""

    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]

    def __call__(self, x):
        return self.fn(x)

    def zero_preserving(self) -> bool:
        return float(np.asarray(self.fn(np.zeros(1)))[0]) == 0.0


def get_activation(name: str, alpha: float = 0.01) -> Activation:
    if name == "relu":
        return Activation("relu", relu, lambda x: (x > 0).astype(DTYPE))
    if name == "tanh":
        return Activation("tanh", tanh, lambda x: 1.0 - np.tanh(x) ** 2)
    if name == "lrelu":
        return Activation(
            f"lrelu({alpha})",
            lambda x: lrelu(x, alpha),
            lambda x: np.where(x > 0, 1.0, alpha),
        )
    if name == "identity":
        return Activation("identity", lambda x: np.asarray(x, dtype=DTYPE), np.ones_like)
    raise ValueError(f"unknown activation {name!r}")


_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def elementwise(op: str, a, b=None, alpha: float = 0.01) -> np.ndarray:
    """Apply a named elementwise op; binary ops take a same-shape tensor or a scalar."""
    a = np.asarray(a, dtype=DTYPE)
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} needs a second operand")
        if not np.isscalar(b):
            b = np.asarray(b, dtype=DTYPE)
            if b.shape != a.shape:
                raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
        return _BINARY[op](a, b)
    if op == "max_with_scalar":
        if not np.isscalar(b):
            raise ValueError("max_with_scalar needs a scalar operand")
        return np.maximum(a, float(b))
    if op == "relu":
        return relu(a)
    if op == "tanh":
        return tanh(a)
    if op == "lrelu":
        return lrelu(a, alpha)
    raise ValueError(f"unknown elementwise op {op!r}")


# --- randomness ------------------------------------------------------------

@dataclass(frozen=True)
class RngStream:
    """Counter-based random substream.

    The generator is derived from ``(seed, *key)`` alone, so draws for one key
    never depend on how many draws other keys consumed.
    """

    seed: int
    key: tuple[int, ...] = ()

    def child(self, *key: int) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(int(k) for k in key))

    def generator(self) -> np.random.Generator:
        entropy = [int(self.seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) & 0xFFFFFFFF for k in self.key]
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self.generator().uniform(low, high, size=tuple(shape))

    def normal(self, shape) -> np.ndarray:
        return self.generator().standard_normal(size=tuple(shape))


def draw_bernoulli(stream: RngStream, shape, p: float) -> np.ndarray:
    """Binary mask whose entries are 1 with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"retain probability must lie in [0, 1], got {p}")
    shape = check_shape(shape)
    u = stream.uniform(shape)
    return (u < p).astype(DTYPE)
