"""Encoder-decoder saliency network, its ablation variants and inference rules."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import kvconfig, ops
from .layers import Activate, BatchNorm2d, Conv2d, Dropout, Layer, MaxPool, RDropout, RunContext
from .rdropout import DEFAULT_RATE, MaskGenerator, Placement
from .tensor import DTYPE, RngStream, ShapeError
from .upsampling import Upsampler, canonical_mode, doubling_spec

BACKGROUND, FOREGROUND = 0, 1

# (use_dropout, use_rdropout, use_restricted_deconv, use_interp)
VARIANTS = {
    "va": (True, False, True, False),
    "vb": (False, True, True, False),
    "vc": (False, True, False, True),
    "vd": (False, False, True, False),
    "ve": (False, False, False, True),
    "ucf": (False, True, True, True),
    # baseline beyond the ablation presets: plain k=3 deconvolution, no dropout
    "naive": (False, False, False, False),
}


@dataclass(frozen=True)
class StageSpec:
    channels: int
    convs: int = 2
    rdropout: bool = False


@dataclass(frozen=True)
class NetworkConfig:
    input_side: int = 64
    in_channels: int = 3
    encoder: tuple[StageSpec, ...] = (
        StageSpec(16, 2, True),
        StageSpec(32, 2, True),
        StageSpec(64, 2, True),
    )
    decoder: tuple[StageSpec, ...] = (
        StageSpec(32, 2, False),
        StageSpec(16, 2, False),
        StageSpec(16, 2, False),
    )
    classifier_channels: int = 2
    use_dropout: bool = False
    use_rdropout: bool = True
    use_restricted_deconv: bool = True
    use_interp: bool = True
    dropout_rate: float = DEFAULT_RATE
    dropout_generator: str = "bernoulli"
    interpolation: str = "bilinear"
    input_mean: tuple[float, float, float] = (127.5, 127.5, 127.5)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if len(self.encoder) != len(self.decoder):
            raise ValueError("decoder must mirror the encoder (same number of stages)")
        if not self.encoder:
            raise ValueError("at least one encoder stage is required")
        if self.input_side % self.divisor:
            raise ValueError(f"input side {self.input_side} not divisible by {self.divisor}")
        if self.use_dropout and self.use_rdropout:
            raise ValueError("use_dropout and use_rdropout are mutually exclusive")
        if self.classifier_channels != 2:
            raise ValueError("the saliency classifier has exactly two channels")
        if len(self.input_mean) != self.in_channels:
            raise ValueError("input_mean needs one entry per input channel")
        for st in self.encoder + self.decoder:
            if st.channels < 1 or st.convs < 1:
                raise ValueError(f"invalid stage {st}")

    @property
    def stages(self) -> int:
        return len(self.encoder)

    @property
    def divisor(self) -> int:
        return 2 ** len(self.encoder)

    @property
    def upsample_mode(self) -> str:
        if self.use_restricted_deconv and self.use_interp:
            return "hybrid"
        if self.use_restricted_deconv:
            return "deconv_restricted"
        if self.use_interp:
            return "interp_conv"
        return "deconv_naive"

    def with_variant(self, variant: str) -> "NetworkConfig":
        try:
            d, rd, rest, interp = VARIANTS[variant.lower()]
        except KeyError:
            raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}") from None
        return replace(self, use_dropout=d, use_rdropout=rd, use_restricted_deconv=rest, use_interp=interp)

    def to_dict(self) -> dict[str, str]:
        f = kvconfig.fmt
        return {
            "input_side": f(self.input_side),
            "in_channels": f(self.in_channels),
            "encoder.channels": f([s.channels for s in self.encoder]),
            "encoder.convs": f([s.convs for s in self.encoder]),
            "encoder.rdropout": f([s.rdropout for s in self.encoder]),
            "decoder.channels": f([s.channels for s in self.decoder]),
            "decoder.convs": f([s.convs for s in self.decoder]),
            "decoder.rdropout": f([s.rdropout for s in self.decoder]),
            "classifier_channels": f(self.classifier_channels),
            "use_dropout": f(self.use_dropout),
            "use_rdropout": f(self.use_rdropout),
            "use_restricted_deconv": f(self.use_restricted_deconv),
            "use_interp": f(self.use_interp),
            "rdropout.rate": f(self.dropout_rate),
            "rdropout.generator": self.dropout_generator,
            "rdropout.placement": self.placement.value,
            "interpolation": self.interpolation,
            "input_mean": f(list(self.input_mean)),
        }

    @property
    def placement(self) -> Placement:
        return Placement.POST_ACTIVATION if self.use_dropout else Placement.PRE_ACTIVATION

    KEYS = frozenset(
        "input_side in_channels encoder.channels encoder.convs encoder.rdropout decoder.channels "
        "decoder.convs decoder.rdropout classifier_channels use_dropout use_rdropout "
        "use_restricted_deconv use_interp rdropout.rate rdropout.generator rdropout.placement "
        "interpolation input_mean".split()
    )

    @classmethod
    def from_dict(cls, values: dict[str, str], base: "NetworkConfig | None" = None) -> "NetworkConfig":
        base = base or cls()
        v = dict(base.to_dict())
        v.update({k: str(val) for k, val in values.items() if k in cls.KEYS})

        def stages(prefix):
            ch = kvconfig.as_ints(v[f"{prefix}.channels"])
            cv = kvconfig.as_ints(v[f"{prefix}.convs"])
            rd = [kvconfig.as_bool(x) for x in v[f"{prefix}.rdropout"].split(",")]
            if not len(ch) == len(cv) == len(rd):
                raise kvconfig.ConfigError(f"{prefix}.* lists have different lengths")
            return tuple(StageSpec(c, n, r) for c, n, r in zip(ch, cv, rd))

        use_dropout = kvconfig.as_bool(v["use_dropout"])
        use_rdropout = kvconfig.as_bool(v["use_rdropout"])
        if "rdropout.placement" in values and (use_dropout or use_rdropout):
            # an explicit placement picks which of the two dropout flavours is active
            post = Placement(values["rdropout.placement"]) is Placement.POST_ACTIVATION
            use_dropout, use_rdropout = post, not post
        return cls(
            input_side=int(v["input_side"]),
            in_channels=int(v["in_channels"]),
            encoder=stages("encoder"),
            decoder=stages("decoder"),
            classifier_channels=int(v["classifier_channels"]),
            use_dropout=use_dropout,
            use_rdropout=use_rdropout,
            use_restricted_deconv=kvconfig.as_bool(v["use_restricted_deconv"]),
            use_interp=kvconfig.as_bool(v["use_interp"]),
            dropout_rate=float(v["rdropout.rate"]),
            dropout_generator=v["rdropout.generator"],
            interpolation=v["interpolation"],
            input_mean=tuple(kvconfig.as_floats(v["input_mean"])),
        )

    def to_text(self) -> str:
        return kvconfig.dump(self.to_dict())

    @classmethod
    def from_text(cls, text: str) -> "NetworkConfig":
        return cls.from_dict(kvconfig.parse(text))


def toy_config(side: int = 64, channels=(16, 32, 64)) -> NetworkConfig:
    enc = tuple(StageSpec(c, 2, True) for c in channels)
    dec_ch = list(reversed(channels))[1:] + [channels[0]]
    dec = tuple(StageSpec(c, 2, False) for c in dec_ch)
    return NetworkConfig(input_side=side, encoder=enc, decoder=dec)


class NonFiniteError(FloatingPointError):
    def __init__(self, layer: str, where: str = "forward"):
        super().__init__(f"non-finite values produced by layer {layer} during {where}")
        self.layer = layer


class Network:
    """Sequential encoder-decoder ending in two-channel logits."""

    def __init__(self, config: NetworkConfig, layers: list[Layer]):
        self.config = config
        self.layers = layers

    def forward(self, x, ctx: RunContext = RunContext(), check_finite: bool = False):
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected (N, {self.config.in_channels}, H, W) input, got {x.shape}")
        d = self.config.divisor
        if x.shape[2] % d or x.shape[3] % d:
            raise ShapeError(f"input sides {x.shape[2:]} must be divisible by {d}")
        for layer in self.layers:
            x = layer.forward(x, ctx)
            if check_finite and not np.isfinite(x).all():
                raise NonFiniteError(layer.name)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def named_params(self) -> dict[str, np.ndarray]:
        return {f"{l.name}.{k}": v for l in self.layers for k, v in l.params.items()}

    def named_grads(self) -> dict[str, np.ndarray]:
        return {f"{l.name}.{k}": v for l in self.layers for k, v in l.grads.items()}

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {f"{l.name}.{k}": v for l in self.layers for k, v in l.buffers.items()}

    def describe(self) -> list[str]:
        return [repr(l) for l in self.layers]

    def stage_sides(self, side: int) -> list[int]:
        """Spatial side after every pooling / upsampling layer."""
        sides = []
        for layer in self.layers:
            if isinstance(layer, MaxPool):
                side //= layer.window
                sides.append(side)
            elif isinstance(layer, Upsampler):
                side = layer.spec.out_side(side)
                sides.append(side)
        return sides


def _conv_block(layers, prefix, in_ch, out_ch, convs, masked, cfg: NetworkConfig, stream: RngStream):
    for j in range(convs):
        name = f"{prefix}.conv{j + 1}"
        layers.append(Conv2d(name, ops.ConvSpec(in_ch, out_ch, 3, 1, 1), stream.child(len(layers))))
        layers.append(BatchNorm2d(f"{name}.bn", out_ch))
        last = j == convs - 1
        generator = MaskGenerator(cfg.dropout_generator, cfg.dropout_rate)
        if last and masked and cfg.use_rdropout:
            layers.append(RDropout(f"{prefix}.rdrop", len(layers), generator))
        elif last and masked and cfg.use_dropout:
            layers.append(Dropout(f"{prefix}.drop", len(layers), generator, "relu"))
        else:
            layers.append(Activate(f"{name}.relu"))
        in_ch = out_ch
    return in_ch


def build_network(config: NetworkConfig, seed: int = 0) -> Network:
    """Lay out encoder stages, mirrored decoder stages and the 1x1 classifier.

    Weights are drawn from U(-sqrt(6/fan_in), sqrt(6/fan_in)); biases start at 0.
    """
    config.validate()
    init = RngStream(seed, (0x1A17,))
    layers: list[Layer] = []
    ch = config.in_channels
    for i, st in enumerate(config.encoder, 1):
        ch = _conv_block(layers, f"enc{i}", ch, st.channels, st.convs, st.rdropout, config, init)
        layers.append(MaxPool(f"enc{i}.pool", 2))
    mode = canonical_mode(config.upsample_mode)
    for i, st in enumerate(config.decoder, 1):
        spec = doubling_spec(mode, ch, st.channels, config.interpolation)
        layers.append(Upsampler(f"dec{i}.up", spec, init.child(len(layers))))
        ch = _conv_block(layers, f"dec{i}", st.channels, st.channels, st.convs, st.rdropout, config, init)
    layers.append(Conv2d("cls", ops.ConvSpec(ch, config.classifier_channels, 1), init.child(len(layers))))
    return Network(config, layers)


# --- inference -------------------------------------------------------------

def saliency_from_logits(logits) -> np.ndarray:
    prob = ops.softmax_channels(logits)
    return np.maximum(prob[:, FOREGROUND] - prob[:, BACKGROUND], 0.0)


def infer_saliency(network: Network, x) -> np.ndarray:
    """Eval-mode forward; returns ``(N, H, W)`` maps ``max(fg - bg, 0)``."""
    return saliency_from_logits(network.forward(x, RunContext("eval")))


def snap_side(side: float, divisor: int) -> int:
    return max(divisor, int(round(side / divisor)) * divisor)


def multiscale_ensemble(network: Network, x, scales) -> np.ndarray:
    """Average of per-scale saliency maps resized back to the input size."""
    scales = list(scales)
    if not scales:
        raise ValueError("need at least one scale")
    h, w = x.shape[2], x.shape[3]
    d = network.config.divisor
    acc = np.zeros((x.shape[0], h, w), dtype=DTYPE)
    for scale in scales:
        sh, sw = snap_side(h * scale, d), snap_side(w * scale, d)
        xs = ops.interpolate(x, sh, sw, "bilinear")
        sal = infer_saliency(network, xs)[:, None]
        acc += ops.interpolate(sal, h, w, "bilinear")[:, 0]
    return np.clip(acc / len(scales), 0.0, 1.0)
