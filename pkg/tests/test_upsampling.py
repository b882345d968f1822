"""Deconvolution arithmetic, restricted kernels, the hybrid block and artifact scores."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from ucfnet import ops
from ucfnet.tensor import RngStream
from ucfnet.upsampling import (
    UpsampleSpec,
    arith_report,
    build_upsampler,
    canonical_mode,
    checkerboard_score,
    contribution_count_map,
    doubling_spec,
    mean_scores,
    sweep_csv,
    upsampler_sweep,
)


class TestArith:
    def test_fig3_geometry(self):
        r = arith_report(3, 3, 2, 1, 0)
        assert (r.stretched, r.out, r.overlap) == (5, 5, True)
        assert r.equiv_pad == 1

    def test_restricted_no_overlap(self):
        r = arith_report(4, 4, 2, 0, 0)
        assert r.out == 10 and not r.overlap

    @pytest.mark.parametrize("n,k,pad", [(3, 3, 0), (5, 2, 1), (1, 4, 1)])
    def test_stride_one(self, n, k, pad):
        r = arith_report(n, k, 1, pad)
        assert r.stretched == n and r.out == n + k - 1 - 2 * pad

    def test_relaxed_offset(self):
        assert arith_report(3, 3, 2, 1, 1).out == 6

    @pytest.mark.parametrize("args", [(3, 3, 2, 0, 2), (1, 1, 1, 1, 0), (0, 3, 2, 0, 0)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            arith_report(*args)

    @given(st.integers(1, 10), st.integers(1, 6), st.integers(1, 4), st.integers(0, 2))
    def test_round_trip(self, n, k, s, pad):
        try:
            r = arith_report(n, k, s, pad)
        except ValueError:
            return
        assert r.overlap == (k % s != 0)
        assert r.stretched == n + (n - 1) * (s - 1)
        if r.out + 2 * pad >= k and (r.out + 2 * pad - k) % s == 0:
            assert ops.conv_output_side(r.out, k, s, pad) == n

    def test_lines(self):
        assert "overlap=true" in arith_report(3, 3, 2, 1).lines()


class TestSpecs:
    @pytest.mark.parametrize("mode", ["deconv_restricted", "hybrid", "restricted"])
    def test_restricted_rule(self, mode):
        with pytest.raises(ValueError):
            UpsampleSpec(mode, s=2, k=3)

    def test_naive_allows_any_kernel(self):
        assert UpsampleSpec("naive", s=2, k=3).mode == "deconv_naive"

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            canonical_mode("subpixel")

    @pytest.mark.parametrize("mode", ["deconv_naive", "deconv_restricted", "interp_conv", "hybrid"])
    def test_doubling(self, mode):
        spec = doubling_spec(mode, 3, 2)
        block = build_upsampler(spec, stream=RngStream(0))
        for n in (2, 5, 8):
            assert block.forward(np.zeros((1, 3, n, n))).shape == (1, 2, 2 * n, 2 * n)

    def test_doubling_pad(self):
        spec = doubling_spec("deconv_restricted", 1, 1)
        assert (spec.k, spec.s, spec.pad) == (4, 2, 1)


class TestBlocks:
    def test_hybrid_zero_input(self):
        block = build_upsampler(UpsampleSpec("hybrid", in_channels=2, out_channels=3), stream=RngStream(1))
        assert_array_equal(block.forward(np.zeros((1, 2, 4, 4))), 0.0)

    def test_interp_identity_projection(self):
        block = build_upsampler(UpsampleSpec("interp_conv"), {"proj.weight": np.ones((1, 1, 1, 1))})
        y = block.forward(np.full((1, 1, 3, 3), 0.7))
        assert y.shape == (1, 1, 6, 6)
        assert_allclose(y, 0.7, rtol=1e-15)

    def test_hybrid_is_sum_of_branches(self):
        gen = np.random.default_rng(0)
        params = {"deconv.weight": gen.normal(size=(2, 2, 4, 4)), "deconv.bias": gen.normal(size=2),
                  "proj.weight": gen.normal(size=(2, 2, 1, 1)), "proj.bias": gen.normal(size=2)}
        spec = UpsampleSpec("hybrid", in_channels=2, out_channels=2)
        x = gen.normal(size=(1, 2, 3, 3))
        y = build_upsampler(spec, params).forward(x)
        conv = ops.deconv2d_forward(x, params["deconv.weight"], params["deconv.bias"], spec.conv_spec)
        up = ops.interpolate(x, 6, 6)
        proj = ops.conv2d_forward(up, params["proj.weight"], params["proj.bias"], ops.ConvSpec(2, 2, 1))
        assert_allclose(y, conv + proj, rtol=1e-13, atol=1e-14)

    def test_restricted_is_plain_deconv(self):
        gen = np.random.default_rng(1)
        w = gen.normal(size=(1, 1, 4, 4))
        spec = UpsampleSpec("deconv_restricted")
        x = gen.normal(size=(1, 1, 5, 5))
        y = build_upsampler(spec, {"deconv.weight": w}).forward(x)
        assert_array_equal(y, ops.deconv2d_forward(x, w, np.zeros(1), spec.conv_spec))

    def test_param_validation(self):
        with pytest.raises(KeyError):
            build_upsampler(UpsampleSpec("deconv_restricted"), {"proj.weight": np.ones((1, 1, 1, 1))})
        with pytest.raises(ValueError):
            build_upsampler(UpsampleSpec("deconv_restricted"), {"deconv.weight": np.ones((1, 1, 3, 3))})


class TestCountMap:
    def test_k3_s2_alternates(self):
        c = contribution_count_map(3, 2, 20)
        assert set(np.unique(c)) == {1, 2, 4}
        row = c[0] if c[0].max() == 4 else c[1]
        assert set(np.abs(np.diff(row))) == {2}

    def test_k4_s2_uniform(self):
        assert_array_equal(contribution_count_map(4, 2, 20), 4)

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_k_equals_s(self, k):
        assert_array_equal(contribution_count_map(k, k, 12), 1)

    def test_uniform_iff_divisible(self):
        for k in range(1, 9):
            for s in range(1, 5):
                c = contribution_count_map(k, s, 4 * k + 4 * s)
                assert (c.min() == c.max()) == (k % s == 0), (k, s)
                if k % s == 0:
                    assert c[0, 0] == (k // s) ** 2

    def test_no_interior(self):
        with pytest.raises(ValueError):
            contribution_count_map(4, 2, 8)


def _constant_deconv(k, s, n=10):
    spec = ops.ConvSpec(1, 1, k, s, 0)
    return ops.deconv2d_forward(np.ones((1, 1, n, n)), np.ones((1, 1, k, k)), np.zeros(1), spec)


class TestCheckerboard:
    def test_constant_map(self):
        assert checkerboard_score(np.full((1, 1, 8, 8), 3.0), 2) == 0.0

    def test_naive_vs_restricted(self):
        assert checkerboard_score(_constant_deconv(3, 2), 2, trim=3) > 0
        assert checkerboard_score(_constant_deconv(4, 2), 2, trim=4) == 0.0

    def test_naive_phase_means(self):
        y = _constant_deconv(3, 2)[0, 0, 3:-3, 3:-3]
        assert sorted({float(v) for v in y.ravel()}) == [1.0, 2.0, 4.0]

    def test_interpolated_constant(self):
        y = ops.interpolate(np.full((1, 1, 4, 4), 2.0), 9, 9)
        assert checkerboard_score(y, 2, trim=1) == 0.0

    @settings(max_examples=20)
    @given(st.floats(-100, 100), st.floats(0.01, 100))
    def test_affine_invariance(self, shift, scale):
        y = _constant_deconv(3, 2) + np.random.default_rng(0).normal(size=(1, 1, 21, 21)) * 0.1
        base = checkerboard_score(y, 2, trim=3)
        assert checkerboard_score(scale * y + shift, 2, trim=3) == pytest.approx(base, rel=1e-6)

    def test_interior_too_small(self):
        with pytest.raises(ValueError):
            checkerboard_score(np.zeros((1, 1, 6, 6)), 2, trim=3)


@pytest.fixture(scope="module")
def rows():
    free = upsampler_sweep(["deconv_naive", "interp_conv"], [(3, 2), (4, 2)], trials=100, seed=0)
    return free + upsampler_sweep(["deconv_restricted", "hybrid"], [(4, 2)], trials=100, seed=0)


class TestSweep:
    def test_naive_above_restricted(self, rows):
        m = mean_scores(rows)
        assert m[("deconv_naive", 3, 2)] > m[("deconv_restricted", 4, 2)]

    def test_hybrid_below_restricted(self, rows):
        m = mean_scores(rows)
        assert m[("hybrid", 4, 2)] <= m[("deconv_restricted", 4, 2)]
        assert m[("interp_conv", 3, 2)] < m[("deconv_naive", 3, 2)]

    def test_reproducible(self):
        a = upsampler_sweep(["hybrid"], [(4, 2)], trials=1, seed=9)
        b = upsampler_sweep(["hybrid"], [(4, 2)], trials=1, seed=9)
        assert sweep_csv(a) == sweep_csv(b)

    def test_csv_columns(self, rows):
        lines = sweep_csv(rows[:3]).splitlines()
        assert lines[0] == "mode,k,s,trial,score" and len(lines) == 4
