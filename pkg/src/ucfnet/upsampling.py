"""Upsampling blocks and the arithmetic behind transposed-convolution artifacts.

A stride-``s`` transposed convolution with kernel ``k`` scatters every input
unit into a ``k x k`` window; when ``k`` is not a multiple of ``s`` the
windows overlap unevenly and each output phase ``(row mod s, col mod s)``
collects a different number of taps, which shows up as a checkerboard.
Restricting ``k = lambda * s`` makes the interior coverage uniform; the
hybrid block adds an interpolate-then-1x1-conv branch on top of such a
restricted deconvolution.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import ops
from .layers import Conv2d, Deconv2d, Layer, RunContext
from .tensor import DTYPE, RngStream

MODES = ("deconv_naive", "deconv_restricted", "interp_conv", "hybrid")
MODE_ALIASES = {
    "naive": "deconv_naive",
    "restricted": "deconv_restricted",
    "interp": "interp_conv",
}
SCORE_EPS = 1e-12


def canonical_mode(mode: str) -> str:
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"unknown upsampling mode {mode!r}; choose from {MODES}")
    return mode


@dataclass(frozen=True)
class DeconvArith:
    n_in: int
    k: int
    s: int
    pad: int
    t: int
    stretched: int
    out: int
    overlap: bool
    equiv_pad: int

    def lines(self) -> list[str]:
        return [
            f"deconv_in={self.n_in}",
            f"stretched={self.stretched}",
            f"deconv_out={self.out}",
            f"equiv_kernel={self.k}",
            f"equiv_stride=1",
            f"equiv_pad={self.equiv_pad}",
            f"overlap={'true' if self.overlap else 'false'}",
        ]


def arith_report(n_in: int, k: int, s: int, pad: int = 0, t: int = 0) -> DeconvArith:
    """Sizes of a transposed convolution and of its zero-insertion equivalent."""
    if n_in < 1 or k < 1 or s < 1 or pad < 0:
        raise ValueError("need n' >= 1, k >= 1, s >= 1, pad >= 0")
    if not 0 <= t < s:
        raise ValueError(f"offset t={t} must satisfy 0 <= t < s={s}")
    out = ops.deconv_output_side(n_in, k, s, pad, t)
    return DeconvArith(
        n_in=n_in,
        k=k,
        s=s,
        pad=pad,
        t=t,
        stretched=n_in + (n_in - 1) * (s - 1),
        out=out,
        overlap=k % s != 0,
        equiv_pad=k - pad - 1,
    )


@dataclass(frozen=True)
class UpsampleSpec:
    mode: str = "hybrid"
    s: int = 2
    k: int = 4
    pad: int = 1
    t: int = 0
    interpolation: str = "bilinear"
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "mode", canonical_mode(self.mode))
        if self.mode in ("deconv_restricted", "hybrid") and self.k % self.s:
            raise ValueError(
                f"{self.mode} needs the kernel to be a multiple of the stride (k={self.k}, s={self.s})"
            )
        if self.interpolation not in ("bilinear", "nearest"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")

    @property
    def conv_spec(self) -> ops.ConvSpec:
        return ops.ConvSpec(self.in_channels, self.out_channels, self.k, self.s, self.pad)

    def out_side(self, n: int) -> int:
        return ops.deconv_output_side(n, self.k, self.s, self.pad, self.t)


def doubling_spec(mode: str, in_channels: int, out_channels: int, interpolation="bilinear") -> UpsampleSpec:
    """Stride-2 block whose output side is exactly twice its input side."""
    mode = canonical_mode(mode)
    if mode == "deconv_naive":
        # k=3 cannot double with symmetric padding; the t offset supplies the last row
        return UpsampleSpec(mode, 2, 3, 1, 1, interpolation, in_channels, out_channels)
    return UpsampleSpec(mode, 2, 4, 1, 0, interpolation, in_channels, out_channels)


class Upsampler(Layer):
    """Deconvolution, interpolation + 1x1 conv, or the sum of both."""

    kind = "upsample"

    def __init__(self, name, spec: UpsampleSpec, stream: RngStream | None = None):
        super().__init__(name)
        self.spec = spec
        self.deconv = None
        self.proj = None
        if spec.mode != "interp_conv":
            self.deconv = Deconv2d(
                f"{name}.deconv", spec.conv_spec, spec.t, stream.child(0) if stream else None
            )
        if spec.mode in ("interp_conv", "hybrid"):
            self.proj = Conv2d(
                f"{name}.proj",
                ops.ConvSpec(spec.in_channels, spec.out_channels, 1),
                stream.child(1) if stream else None,
            )
        self._sync_params()

    def _branches(self):
        return [(prefix, layer) for prefix, layer in (("deconv", self.deconv), ("proj", self.proj)) if layer]

    def _sync_params(self):
        self.params = {
            f"{prefix}.{key}": value for prefix, layer in self._branches() for key, value in layer.params.items()
        }

    def describe(self):
        s = self.spec
        return f"upsample({s.mode},k={s.k},s={s.s},p={s.pad},t={s.t},{s.interpolation})"

    def forward(self, x, ctx=RunContext()):
        n_h, n_w = x.shape[2], x.shape[3]
        out = None
        if self.deconv is not None:
            out = self.deconv.forward(x, ctx)
        if self.proj is not None:
            self._in_hw = (n_h, n_w)
            up = ops.interpolate(x, self.spec.out_side(n_h), self.spec.out_side(n_w), self.spec.interpolation)
            branch = self.proj.forward(up, ctx)
            out = branch if out is None else out + branch
        return out

    def backward(self, grad):
        gx = 0.0
        if self.deconv is not None:
            gx = gx + self.deconv.backward(grad)
        if self.proj is not None:
            g_up = self.proj.backward(grad)
            gx = gx + ops.interpolate_backward(g_up, *self._in_hw, self.spec.interpolation)
        self.grads = {
            f"{prefix}.{key}": value for prefix, layer in self._branches() for key, value in layer.grads.items()
        }
        return gx


def build_upsampler(spec: UpsampleSpec, params: dict | None = None, stream: RngStream | None = None) -> Upsampler:
    """Create an upsampling block; ``params`` (keyed like ``Upsampler.params``) overrides initial values."""
    block = Upsampler("up", spec, stream)
    for key, value in (params or {}).items():
        if key not in block.params:
            raise KeyError(f"{key!r} is not a parameter of a {spec.mode} block")
        value = np.asarray(value, dtype=DTYPE)
        if value.shape != block.params[key].shape:
            raise ValueError(f"{key}: shape {value.shape} != {block.params[key].shape}")
        block.params[key][...] = value
    return block


# --- artifact analysis -----------------------------------------------------

def contribution_count_map(k: int, s: int, out_side: int) -> np.ndarray:
    """Per-output-pixel number of kernel taps under scatter-add, interior only.

    Uses an all-ones input and kernel, no padding; ``k`` border pixels are
    trimmed on every side.
    """
    if k < 1 or s < 1:
        raise ValueError("k and s must be positive")
    if out_side - 2 * k < 1:
        raise ValueError(f"output side {out_side} leaves no interior after trimming {k}")
    n_in = max(1, -(-(out_side - k) // s) + 1)
    full = s * (n_in - 1) + k
    counts = np.zeros((full, full), dtype=np.int64)
    for i in range(k):
        for j in range(k):
            counts[i:i + s * (n_in - 1) + 1:s, j:j + s * (n_in - 1) + 1:s] += 1
    return counts[:out_side, :out_side][k:out_side - k, k:out_side - k]


def checkerboard_score(y, s: int, trim: int = 0) -> float:
    """Stride-periodic structure in ``y``: variance of phase means over total variance.

    Pixels are grouped by ``(row mod s, col mod s)`` after trimming ``trim``
    pixels from each border.  0 means no structure with period ``s``.
    """
    y = np.asarray(y, dtype=DTYPE)
    if y.ndim == 2:
        y = y[None, None]
    h, w = y.shape[2], y.shape[3]
    interior = y[:, :, trim:h - trim, trim:w - trim]
    if interior.shape[2] < s or interior.shape[3] < s:
        raise ValueError(f"interior {interior.shape[2:]} smaller than {s}x{s} after trimming {trim}")
    rows = (np.arange(trim, h - trim) % s)[:, None]
    cols = (np.arange(trim, w - trim) % s)[None, :]
    phase = np.broadcast_to(rows * s + cols, interior.shape[2:])
    means = np.array([interior[:, :, phase == c].mean() for c in range(s * s)])
    return float(means.var() / (interior.var() + SCORE_EPS))


def _trial_block(mode: str, k: int, s: int, stream: RngStream) -> tuple[Upsampler, np.ndarray]:
    spec = UpsampleSpec(mode, s, k, 0, 0, "bilinear", 1, 1)
    block = Upsampler("up", spec)
    gen = stream.generator()
    deconv_w = gen.uniform(0.0, 1.0, size=(1, 1, k, k))
    proj_w = gen.uniform(0.0, 1.0, size=(1, 1, 1, 1))
    if block.deconv is not None:
        block.deconv.params["weight"][...] = deconv_w
    if block.proj is not None:
        block.proj.params["weight"][...] = proj_w
    return block, gen


def upsampler_sweep(modes, grid, trials: int, seed: int, size: int = 16) -> list[dict]:
    """Checkerboard scores of randomly weighted blocks on random inputs.

    Weights and inputs are drawn from U[0, 1] per ``(k, s, trial)``, so every
    mode sees the same trial data.  Returns rows ``mode, k, s, trial, score``.
    """
    rows = []
    for k, s in grid:
        for mode in modes:
            mode = canonical_mode(mode)
            for trial in range(trials):
                block, gen = _trial_block(mode, k, s, RngStream(seed, (k, s, trial)))
                x = gen.uniform(0.0, 1.0, size=(1, 1, size, size))
                y = block.forward(x)
                rows.append(
                    {"mode": mode, "k": k, "s": s, "trial": trial, "score": checkerboard_score(y, s, trim=k)}
                )
    return rows


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["mode", "k", "s", "trial", "score"], lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({**row, "score": repr(row["score"])})
    return buf.getvalue()


def mean_scores(rows) -> dict[tuple[str, int, int], float]:
    acc: dict[tuple[str, int, int], list[float]] = {}
    for row in rows:
        acc.setdefault((row["mode"], row["k"], row["s"]), []).append(row["score"])
    return {key: float(np.mean(v)) for key, v in acc.items()}
