"""R-dropout: mask the pre-activation convolution output instead of the activation.

For any activation with ``g(0) = 0`` and a binary mask ``M``,
``M * g(f) == g(M * f)``, so dropping units before or after the nonlinearity
is the same in training.  Placed in front of a non-overlapping max pool the
masked layer samples the pooled value from a multinomial over the sorted
window activations: the i-th smallest of ``n`` survives as the maximum with
probability ``p * q**(n - i)`` and every unit is dropped with probability
``q**n``.
"""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import DTYPE, Activation, RngStream, ShapeError, draw_bernoulli, get_activation

DEFAULT_RATE = 0.5


class Placement(str, enum.Enum):
    POST_ACTIVATION = "post_activation"
    PRE_ACTIVATION = "pre_activation_rdropout"


class Context(str, enum.Enum):
    FOLLOWED_BY_CONV = "followed_by_conv"
    FOLLOWED_BY_POOL = "followed_by_pool"


@dataclass(frozen=True)
class DropoutPlacement:
    placement: Placement = Placement.PRE_ACTIVATION
    context: Context = Context.FOLLOWED_BY_POOL


@dataclass(frozen=True)
class MaskGenerator:
    """Source of dropout masks.

    ``bernoulli`` keeps each unit with probability ``p``; ``uniform01`` draws
    real-valued masks from U[0, 1]; ``table`` draws every entry from the
    discrete distribution ``values`` / ``probs``.
    """

    kind: str = "bernoulli"
    p: float = DEFAULT_RATE
    values: tuple[float, ...] = field(default=())
    probs: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if self.kind == "bernoulli":
            if not 0.0 <= self.p <= 1.0:
                raise ValueError(f"bernoulli retain rate must lie in [0, 1], got {self.p}")
        elif self.kind == "table":
            if len(self.values) == 0 or len(self.values) != len(self.probs):
                raise ValueError("table generator needs matching values and probs")
            if any(v < 0 or v > 1 for v in self.values):
                raise ValueError("table mask values must lie in [0, 1]")
            if any(q < 0 for q in self.probs) or not np.isclose(sum(self.probs), 1.0):
                raise ValueError("table probabilities must be non-negative and sum to 1")
        elif self.kind != "uniform01":
            raise ValueError(f"unknown mask generator {self.kind!r}")

    @property
    def binary(self) -> bool:
        return self.kind == "bernoulli"

    def mean(self) -> float:
        """Expected mask value, used as the test-time activation scale."""
        if self.kind == "bernoulli":
            return self.p
        if self.kind == "uniform01":
            return 0.5
        return float(np.dot(self.values, self.probs))

    def draw(self, stream: RngStream, shape) -> np.ndarray:
        if self.kind == "bernoulli":
            return draw_bernoulli(stream, shape, self.p)
        if self.kind == "uniform01":
            return stream.uniform(shape)
        idx = stream.generator().choice(len(self.values), size=tuple(shape), p=self.probs)
        return np.asarray(self.values, dtype=DTYPE)[idx]


def _resolve(g) -> Activation:
    return get_activation(g) if isinstance(g, str) else g


def _check_mask(f, mask):
    if mask.shape != f.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match activation {f.shape}")


def rdropout_forward(f, mask, g="relu", mode: str = "train", p: float = DEFAULT_RATE):
    """Pre-activation dropout ``g(M * f)``; eval mode returns ``p * g(f)``."""
    g = _resolve(g)
    if not g.zero_preserving():
        raise ValueError(f"activation {g.name} does not satisfy g(0) = 0")
    if mode == "eval":
        return p * g(f)
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    _check_mask(f, mask)
    return g(mask * f)


def dropout_forward(f, mask, g="relu", mode: str = "train", p: float = DEFAULT_RATE):
    """Classical post-activation dropout ``M * g(f)``; eval mode returns ``p * g(f)``."""
    g = _resolve(g)
    if mode == "eval":
        return p * g(f)
    _check_mask(f, mask)
    return mask * g(f)


def commutation_check(g, f, mask) -> bool:
    """Whether ``M * g(f)`` equals ``g(M * f)`` elementwise (values, so -0.0 == 0.0)."""
    g = _resolve(g)
    mask = np.asarray(mask, dtype=DTYPE)
    f = np.asarray(f, dtype=DTYPE)
    if not np.isin(mask, (0.0, 1.0)).all():
        raise ValueError("commutation holds only for binary masks")
    return bool(np.array_equal(mask * g(f), g(mask * f)))


# --- pooled-value distribution --------------------------------------------

def pooled_activation_distribution(activations, p: float) -> np.ndarray:
    """Closed-form ``(P_0, ..., P_n)`` of the surviving maximum.

    ``P_i`` is the probability that the i-th smallest activation is the
    pooled value, ``P_0`` that the whole window is dropped.
    """
    n = len(activations)
    if n < 1:
        raise ValueError("pooling window must contain at least one unit")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"retain rate must lie in [0, 1], got {p}")
    q = 1.0 - p
    probs = np.empty(n + 1, dtype=DTYPE)
    probs[0] = q**n
    probs[1:] = p * q ** (n - np.arange(1, n + 1))
    return probs


def enumerate_pooled_distribution(activations, p: float) -> np.ndarray:
    """Brute-force ``(P_0, ..., P_n)`` by visiting all ``2**n`` drop masks.

    Activations must be non-negative; outcome ``i`` is the sorted position
    (1-based) of the retained unit that realises the pooled maximum, ties
    resolved toward the larger position.
    """
    a = np.sort(np.asarray(activations, dtype=DTYPE))
    n = len(a)
    q = 1.0 - p
    probs = np.zeros(n + 1, dtype=DTYPE)
    for mask in itertools.product((0, 1), repeat=n):
        kept = [i for i, m in enumerate(mask) if m]
        weight = p ** len(kept) * q ** (n - len(kept))
        winner = 0
        if kept:
            masked = a * np.asarray(mask, dtype=DTYPE)
            top = masked.max()
            winner = max(i for i in kept if masked[i] == top) + 1
        probs[winner] += weight
    return probs


def pooled_value_distribution(window, p: float) -> dict[float, float]:
    """Distribution of the pooled value itself, merging equal activations.

    The all-dropped outcome contributes to value 0.
    """
    a = np.sort(np.asarray(window, dtype=DTYPE).ravel())
    if (a < 0).any():
        raise ValueError("closed form assumes non-negative (post-ReLU) activations")
    probs = pooled_activation_distribution(a, p)
    dist: dict[float, float] = {}
    for value, prob in zip(np.concatenate([[0.0], a]), probs):
        dist[float(value)] = dist.get(float(value), 0.0) + float(prob)
    return dist


def ties_and_duplicates_pool(window, p: float, stream: RngStream) -> float:
    """Draw one pooled value for a single window holding possibly repeated values."""
    w = np.asarray(window, dtype=DTYPE).ravel()
    mask = draw_bernoulli(stream, (1, 1, 1, w.size), p).ravel()
    return float((mask * w).max())


def rdropout_pool_forward(
    x,
    window: int,
    p: float,
    stream: RngStream | None,
    mode: str = "train",
    g="relu",
):
    """R-dropout on pre-activations ``x`` followed by non-overlapping max pooling."""
    g = _resolve(g)
    if mode == "eval":
        out, _ = ops.maxpool_forward(p * g(x), window)
        return out
    if stream is None:
        raise ValueError("train mode needs a random stream")
    mask = draw_bernoulli(stream, x.shape, p)
    out, _ = ops.maxpool_forward(rdropout_forward(x, mask, g, "train", p), window)
    return out
