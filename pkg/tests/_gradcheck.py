"""Central finite-difference checks shared by the gradient tests."""
from __future__ import annotations

import numpy as np

from ucfnet import ops
from ucfnet.layers import BatchNorm2d, Conv2d, Deconv2d, Dropout, MaxPool, RDropout, RunContext
from ucfnet.model import NetworkConfig, StageSpec, build_network
from ucfnet.rdropout import MaskGenerator
from ucfnet.upsampling import Upsampler, UpsampleSpec

STEP = 1e-5
RTOL = 1e-4
FLOOR = 1e-6


def numeric_grad(f, arr, step=STEP, index=None):
    """d f / d arr by central differences, perturbing ``arr`` in place."""
    out = np.zeros_like(arr)
    flat = arr.reshape(-1)
    positions = range(flat.size) if index is None else index
    for i in positions:
        old = flat[i]
        flat[i] = old + step
        up = f()
        flat[i] = old - step
        down = f()
        flat[i] = old
        out.reshape(-1)[i] = (up - down) / (2 * step)
    return out


def rel_error(analytic, numeric, index=None) -> float:
    a, n = np.asarray(analytic).reshape(-1), np.asarray(numeric).reshape(-1)
    if index is not None:
        a, n = a[index], n[index]
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR)
    return float(np.max(np.abs(a - n) / denom))


def check_layer(layer, x, ctx=RunContext("train"), seed=0) -> float:
    """Worst relative error of ``layer``'s input and parameter gradients."""
    rng = np.random.default_rng(seed)
    y = layer.forward(x, ctx)
    r = rng.normal(size=y.shape)

    def loss():
        return float(np.sum(r * layer.forward(x, ctx)))

    loss()
    dx = layer.backward(r)
    grads = {k: v.copy() for k, v in layer.grads.items()}
    worst = rel_error(dx, numeric_grad(loss, x))
    for name, p in layer.params.items():
        worst = max(worst, rel_error(grads[name], numeric_grad(loss, p)))
    return worst


def _away_from_zero(rng, shape, margin=0.05):
    v = rng.normal(size=shape)
    return np.where(np.abs(v) < margin, np.sign(v + 1e-300) * margin, v) + 0.0


def _random_params(layer, rng):
    for p in layer.params.values():
        p[...] = rng.normal(size=p.shape)


def case_conv():
    rng = np.random.default_rng(1)
    layer = Conv2d("c", ops.ConvSpec(2, 3, 3, 2, 1))
    _random_params(layer, rng)
    return check_layer(layer, rng.normal(size=(2, 2, 5, 5)))


def case_conv_1x4x4():
    rng = np.random.default_rng(2)
    layer = Conv2d("c", ops.ConvSpec(1, 1, 2, 1, 0))
    _random_params(layer, rng)
    return check_layer(layer, rng.normal(size=(1, 1, 4, 4)))


def case_deconv():
    rng = np.random.default_rng(3)
    layer = Deconv2d("d", ops.ConvSpec(2, 3, 3, 2, 1), t=1)
    _random_params(layer, rng)
    return check_layer(layer, rng.normal(size=(2, 2, 3, 3)))


def case_deconv_restricted():
    rng = np.random.default_rng(4)
    layer = Deconv2d("d", ops.ConvSpec(2, 2, 4, 2, 1))
    _random_params(layer, rng)
    return check_layer(layer, rng.normal(size=(1, 2, 3, 4)))


def case_maxpool():
    rng = np.random.default_rng(5)
    # well separated distinct values keep the argmax fixed under perturbation
    x = rng.permutation(2 * 3 * 4 * 4).reshape(2, 3, 4, 4) * 0.01
    return check_layer(MaxPool("m", 2), x.astype(float))


def _bn(rng, channels):
    layer = BatchNorm2d("bn", channels)
    layer.params["gamma"][...] = rng.uniform(0.5, 1.5, channels)
    layer.params["beta"][...] = rng.normal(size=channels)
    return layer


def case_batchnorm_train():
    rng = np.random.default_rng(6)
    return check_layer(_bn(rng, 3), rng.normal(size=(3, 3, 3, 3)) * 2 + 1)


def case_batchnorm_eval():
    rng = np.random.default_rng(7)
    layer = _bn(rng, 2)
    layer.buffers["running_mean"][...] = rng.normal(size=2)
    layer.buffers["running_var"][...] = rng.uniform(0.5, 2, 2)
    return check_layer(layer, rng.normal(size=(2, 2, 3, 3)), RunContext("eval"))


def _interp_case(mode, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 2, 3, 4))
    r = rng.normal(size=(1, 2, 5, 7))

    def loss():
        return float(np.sum(r * ops.interpolate(x, 5, 7, mode)))

    dx = ops.interpolate_backward(r, 3, 4, mode)
    return rel_error(dx, numeric_grad(loss, x))


def case_interp_bilinear():
    return _interp_case("bilinear", 8)


def case_interp_nearest():
    return _interp_case("nearest", 9)


def case_hybrid_block():
    rng = np.random.default_rng(10)
    block = Upsampler("up", UpsampleSpec("hybrid", 2, 4, 1, 0, "bilinear", 2, 3))
    _random_params(block, rng)
    return check_layer(block, rng.normal(size=(1, 2, 3, 3)))


def case_interp_conv_block():
    rng = np.random.default_rng(11)
    block = Upsampler("up", UpsampleSpec("interp_conv", 2, 4, 1, 0, "nearest", 2, 2))
    _random_params(block, rng)
    return check_layer(block, rng.normal(size=(1, 2, 3, 3)))


def _loss_case(reduction, seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(2, 2, 2, 2)) * 2
    labels = rng.integers(0, 2, size=(2, 2, 2)).astype(float)
    _, grad = ops.cross_entropy_loss(logits, labels, reduction)
    num = numeric_grad(lambda: ops.cross_entropy_loss(logits, labels, reduction)[0], logits)
    return rel_error(grad, num)


def case_softmax_ce_sum():
    return _loss_case("sum", 12)


def case_softmax_ce_mean():
    return _loss_case("mean", 13)


def _masked_case(cls, activation, mode, seed):
    rng = np.random.default_rng(seed)
    layer = cls("drop", 0, MaskGenerator("bernoulli", 0.5), activation)
    x = _away_from_zero(rng, (2, 2, 3, 3))
    layer.fixed_mask = (rng.uniform(size=x.shape) < 0.5).astype(float)
    return check_layer(layer, x, RunContext(mode))


def case_rdropout_frozen_relu():
    return _masked_case(RDropout, "relu", "train", 14)


def case_rdropout_frozen_tanh():
    return _masked_case(RDropout, "tanh", "train", 15)


def case_rdropout_frozen_lrelu():
    return _masked_case(RDropout, "lrelu", "train", 16)


def case_rdropout_eval():
    return _masked_case(RDropout, "relu", "eval", 17)


def case_dropout_frozen():
    return _masked_case(Dropout, "relu", "train", 18)


def _tiny_network(rdropout: bool, seed: int):
    cfg = NetworkConfig(
        input_side=8,
        encoder=(StageSpec(3, 1, True), StageSpec(4, 1, True)),
        decoder=(StageSpec(3, 1, False), StageSpec(3, 1, False)),
        use_rdropout=rdropout,
        input_mean=(0.0, 0.0, 0.0),
    )
    return build_network(cfg, seed)


def _network_case(rdropout, seed, samples=6):
    """Whole network, loss included; masks are fixed by the (seed, iteration) keys.

    The mean-reduced loss keeps its magnitude near 1, so rounding noise in the
    differences stays far below the comparison floor.  Conv biases feeding a
    batch norm have an exact zero gradient and rely on that floor.
    """
    rng = np.random.default_rng(seed)
    net = _tiny_network(rdropout, seed)
    x = rng.normal(size=(2, 3, 8, 8))
    labels = rng.integers(0, 2, size=(2, 8, 8)).astype(float)
    ctx = RunContext("train", seed=seed, iteration=3)

    def loss():
        return ops.cross_entropy_loss(net.forward(x, ctx), labels, "mean")[0]

    _, grad = ops.cross_entropy_loss(net.forward(x, ctx), labels, "mean")
    dx = net.backward(grad)
    grads = {k: v.copy() for k, v in net.named_grads().items()}
    idx = rng.choice(x.size, samples, replace=False)
    worst = rel_error(dx, numeric_grad(loss, x, index=idx), idx)
    for name, p in net.named_params().items():
        idx = rng.choice(p.size, min(samples, p.size), replace=False)
        worst = max(worst, rel_error(grads[name], numeric_grad(loss, p, index=idx), idx))
    return worst


def case_network_rdropout():
    return _network_case(True, 19)


def case_network_plain():
    return _network_case(False, 20)


CASES = {name[5:]: fn for name, fn in sorted(globals().items()) if name.startswith("case_")}
