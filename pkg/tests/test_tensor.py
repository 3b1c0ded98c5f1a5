"""Dense tensor ops against brute-force oracles and finite differences."""

import numpy as np
import pytest

from bincnn import tensor as T
from bincnn.binarize import sign_ternary
from bincnn.errors import ConfigError, ShapeError

from gradcheck import central_diff, rel_err


def conv_loop_oracle(x, w, stride, pad, groups):
    """Direct 7-loop convolution in float64; independent of the GEMM path."""
    n, cin, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, cout, oh, ow))
    cog = cout // groups
    for nn in range(n):
        for co in range(cout):
            g = co // cog
            for a in range(oh):
                for b in range(ow):
                    acc = 0.0
                    for c in range(cg):
                        for i in range(kh):
                            for j in range(kw):
                                acc += (
                                    xp[nn, g * cg + c, a * stride + i, b * stride + j]
                                    * w[co, c, i, j]
                                )
                    out[nn, co, a, b] = acc
    return out


class TestConv2d:
    def test_worked_binary_example(self):
        # raw real conv of the 1x5 vectors is -0.5; on the ternary-binarized
        # operands the dot product is exactly 0
        x = np.array([0, 0, 1.5, 2, 0], dtype=np.float32).reshape(1, 1, 1, 5)
        w = np.array([1, -1, 1, -1, 1], dtype=np.float32).reshape(1, 1, 1, 5)
        assert T.conv2d(x, w)[0, 0, 0, 0] == pytest.approx(-0.5)
        assert T.conv2d(sign_ternary(x), sign_ternary(w))[0, 0, 0, 0] == 0.0

    def test_zero_input(self):
        rng = np.random.default_rng(0)
        w = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
        out = T.conv2d(np.zeros((2, 2, 5, 5), np.float32), w, pad=1)
        assert np.all(out == 0)

    def test_grouped_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 4, 6, 6)).astype(np.float32)
        w = rng.normal(size=(8, 2, 3, 3)).astype(np.float32)
        got = T.conv2d(x, w, stride=1, pad=0, groups=2)
        ref = conv_loop_oracle(x, w, 1, 0, 2)
        assert np.abs(got - ref).max() < 1e-5

    @pytest.mark.parametrize("stride,pad,groups,cin,cout", [
        (1, 1, 1, 3, 5),
        (2, 1, 2, 4, 6),
        (1, 0, 3, 6, 3),
        (2, 0, 1, 2, 4),
    ])
    def test_geometry_sweep(self, stride, pad, groups, cin, cout):
        rng = np.random.default_rng(stride * 10 + pad + groups)
        x = rng.normal(size=(2, cin, 7, 6)).astype(np.float32)
        w = rng.normal(size=(cout, cin // groups, 3, 3)).astype(np.float32)
        got = T.conv2d(x, w, stride, pad, groups)
        ref = conv_loop_oracle(x, w, stride, pad, groups)
        assert got.shape == ref.shape
        assert np.abs(got - ref).max() < 1e-4

    def test_group_concat_equivalence(self):
        rng = np.random.default_rng(2)
        g = 4
        x = rng.normal(size=(2, 8, 5, 5)).astype(np.float32)
        w = rng.normal(size=(8, 2, 3, 3)).astype(np.float32)
        full = T.conv2d(x, w, pad=1, groups=g)
        parts = [
            T.conv2d(x[:, 2 * i : 2 * i + 2], w[2 * i : 2 * i + 2], pad=1)
            for i in range(g)
        ]
        assert np.abs(full - np.concatenate(parts, axis=1)).max() < 1e-6

    def test_channel_mismatch_names_axis(self):
        x = np.zeros((1, 4, 5, 5), np.float32)
        w = np.zeros((2, 3, 3, 3), np.float32)
        with pytest.raises(ShapeError, match="C_in/groups"):
            T.conv2d(x, w)

    def test_groups_not_dividing(self):
        x = np.zeros((1, 4, 5, 5), np.float32)
        w = np.zeros((2, 1, 3, 3), np.float32)
        with pytest.raises(ConfigError, match="groups"):
            T.conv2d(x, w, groups=3)

    def test_nhwc_agrees_with_nchw(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 5, 6, 6)).astype(np.float32)
        w = rng.normal(size=(4, 5, 3, 3)).astype(np.float32)
        a = T.conv2d(x, w, stride=2, pad=1)
        b = T.nhwc_to_nchw(T.conv2d_nhwc(T.nchw_to_nhwc(x), w, stride=2, pad=1))
        assert np.array_equal(a, b)


class TestConv2dBackward:
    def test_finite_difference(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 1, 3, 3)).astype(np.float32)
        w = rng.normal(size=(1, 1, 3, 3)).astype(np.float32)
        go = rng.normal(size=(1, 1, 3, 3)).astype(np.float32)
        gx, gw = T.conv2d_backward(go, x, w, stride=1, pad=1)
        fx = central_diff(lambda v: float((T.conv2d(v, w, pad=1) * go).sum()), x)
        fw = central_diff(lambda v: float((T.conv2d(x, v, pad=1) * go).sum()), w)
        assert rel_err(gx, fx) < 1e-3
        assert rel_err(gw, fw) < 1e-3

    def test_zero_grad_out(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 2, 4, 4)).astype(np.float32)
        w = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
        gx, gw = T.conv2d_backward(np.zeros((2, 3, 4, 4), np.float32), x, w, pad=1)
        assert np.all(gx == 0) and np.all(gw == 0)

    def test_grouped_matches_independent_groups(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(2, 4, 5, 5)).astype(np.float32)
        w = rng.normal(size=(6, 2, 3, 3)).astype(np.float32)
        go = rng.normal(size=(2, 6, 5, 5)).astype(np.float32)
        gx, gw = T.conv2d_backward(go, x, w, pad=1, groups=2)
        gx0, gw0 = T.conv2d_backward(go[:, :3], x[:, :2], w[:3], pad=1)
        gx1, gw1 = T.conv2d_backward(go[:, 3:], x[:, 2:], w[3:], pad=1)
        assert np.allclose(gx, np.concatenate([gx0, gx1], axis=1), atol=1e-6)
        assert np.allclose(gw, np.concatenate([gw0, gw1], axis=0), atol=1e-5)

    def test_shape_mismatch(self):
        x = np.zeros((1, 2, 4, 4), np.float32)
        w = np.zeros((3, 2, 3, 3), np.float32)
        with pytest.raises(ShapeError, match="grad_out"):
            T.conv2d_backward(np.zeros((1, 3, 9, 9), np.float32), x, w, pad=1)


class TestAvgPool:
    def test_constant_field_border_weights(self):
        v = 3.5
        x = np.full((1, 1, 4, 4), v, np.float32)
        out = T.avgpool_3x3_s2(x)
        # window valid areas at pad=1, stride=2 on a 4x4 input: 4, 6, 6, 9
        expect = np.array([[4, 6], [6, 9]], np.float32) * v / 9.0
        assert np.allclose(out[0, 0], expect, atol=1e-6)

    def test_ramp_frozen_oracle(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
        out = T.avgpool_3x3_s2(x)
        # brute-force window sums: 10, 24, 51, 90 over the fixed divisor 9
        expect = np.array([[10 / 9, 24 / 9], [51 / 9, 90 / 9]], np.float32)
        assert np.allclose(out[0, 0], expect, atol=1e-6)

    def test_zero_input(self):
        assert np.all(T.avgpool_3x3_s2(np.zeros((2, 3, 5, 5), np.float32)) == 0)

    def test_too_small_input(self):
        with pytest.raises(ShapeError, match="window"):
            T.avgpool_3x3_s2(np.zeros((1, 1, 2, 2), np.float32))

    def test_backward_finite_difference(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(1, 2, 5, 4)).astype(np.float32)
        go = rng.normal(size=T.avgpool_3x3_s2(x).shape).astype(np.float32)
        gx = T.avgpool_3x3_s2_backward(go, x.shape)
        fx = central_diff(lambda v: float((T.avgpool_3x3_s2(v) * go).sum()), x, h=1e-2)
        assert rel_err(gx, fx) < 1e-3

    def test_2x2_variant(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
        out = T.avgpool_2x2_s2(x)
        expect = np.array([[(0 + 1 + 4 + 5) / 4, (2 + 3 + 6 + 7) / 4],
                           [(8 + 9 + 12 + 13) / 4, (10 + 11 + 14 + 15) / 4]])
        assert np.allclose(out[0, 0], expect)


class TestMaxPool:
    def test_window_oracle(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(2, 3, 9, 8)).astype(np.float32)
        out, _ = T.maxpool_3x3_s2(x)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
        for a in range(out.shape[2]):
            for b in range(out.shape[3]):
                win = xp[:, :, 2 * a : 2 * a + 3, 2 * b : 2 * b + 3]
                assert np.array_equal(out[:, :, a, b], win.max(axis=(2, 3)))

    def test_backward_finite_difference(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(1, 2, 5, 5)).astype(np.float32)
        out, arg = T.maxpool_3x3_s2(x)
        go = rng.normal(size=out.shape).astype(np.float32)
        gx = T.maxpool_3x3_s2_backward(go, arg, x.shape)
        fx = central_diff(lambda v: float((T.maxpool_3x3_s2(v)[0] * go).sum()), x, h=1e-2)
        assert rel_err(gx, fx) < 1e-3

    def test_eval_mode_matches(self):
        rng = np.random.default_rng(10)
        x = T.nchw_to_nhwc(rng.normal(size=(2, 3, 7, 7)).astype(np.float32))
        full, _ = T.maxpool_3x3_s2_nhwc(x)
        lite, arg = T.maxpool_3x3_s2_nhwc(x, need_arg=False)
        assert arg is None and np.array_equal(full, lite)


class TestHeadOps:
    def test_global_avg_pool(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(3, 4, 5, 6)).astype(np.float32)
        out = T.global_avg_pool(x)
        assert out.shape == (3, 4)
        assert np.allclose(out, x.mean(axis=(2, 3)), atol=1e-6)
        gx = T.global_avg_pool_backward(np.ones((3, 4), np.float32), x.shape)
        assert np.allclose(gx, 1.0 / 30)

    def test_linear_matches_matmul(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(4, 7)).astype(np.float32)
        w = rng.normal(size=(3, 7)).astype(np.float32)
        b = rng.normal(size=3).astype(np.float32)
        assert np.allclose(T.linear(x, w, b), x @ w.T + b, atol=1e-6)

    def test_linear_backward_finite_difference(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(3, 4)).astype(np.float32)
        w = rng.normal(size=(2, 4)).astype(np.float32)
        b = rng.normal(size=2).astype(np.float32)
        go = rng.normal(size=(3, 2)).astype(np.float32)
        gx, gw, gb = T.linear_backward(go, x, w)
        assert rel_err(gx, central_diff(lambda v: float((T.linear(v, w, b) * go).sum()), x)) < 1e-3
        assert rel_err(gw, central_diff(lambda v: float((T.linear(x, v, b) * go).sum()), w)) < 1e-3
        assert rel_err(gb, central_diff(lambda v: float((T.linear(x, w, v) * go).sum()), b)) < 1e-3

    def test_batch_preserved(self):
        x = np.zeros((5, 2, 6, 6), np.float32)
        assert T.avgpool_3x3_s2(x).shape[0] == 5
        assert T.global_avg_pool(x).shape[0] == 5


class TestSoftmaxCrossEntropy:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(14)
        p = T.softmax(rng.normal(size=(6, 10)).astype(np.float32) * 5)
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)

    def test_loss_matches_direct_formula(self):
        rng = np.random.default_rng(15)
        z = rng.normal(size=(4, 5)).astype(np.float32)
        y = np.array([0, 2, 4, 1])
        loss, _ = T.softmax_cross_entropy(z, labels=y)
        p = T.softmax(z.astype(np.float64))
        assert loss == pytest.approx(float(-np.log(p[np.arange(4), y]).mean()), rel=1e-5)

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(16)
        z = rng.normal(size=(3, 4)).astype(np.float32)
        y = np.array([1, 3, 0])
        _, grad = T.softmax_cross_entropy(z, labels=y)

        def oracle(v):
            v = v - v.max(axis=1, keepdims=True)
            logp = v - np.log(np.exp(v).sum(axis=1, keepdims=True))
            return float(-logp[np.arange(3), y].mean())

        fd = central_diff(oracle, z, h=1e-4)
        assert rel_err(grad, fd) < 1e-3

    def test_soft_targets(self):
        rng = np.random.default_rng(17)
        z = rng.normal(size=(3, 4)).astype(np.float32)
        t = T.softmax(rng.normal(size=(3, 4)).astype(np.float32))
        loss, grad = T.softmax_cross_entropy(z, soft_targets=t)

        def oracle(v):
            v = v - v.max(axis=1, keepdims=True)
            logp = v - np.log(np.exp(v).sum(axis=1, keepdims=True))
            return float(-(t.astype(np.float64) * logp).sum() / 3)

        fd = central_diff(oracle, z, h=1e-4)
        assert rel_err(grad, fd) < 1e-3
        assert loss > 0

    def test_requires_exactly_one_target(self):
        z = np.zeros((2, 3), np.float32)
        with pytest.raises(ConfigError):
            T.softmax_cross_entropy(z)
        with pytest.raises(ConfigError):
            T.softmax_cross_entropy(z, labels=np.zeros(2, int), soft_targets=np.ones((2, 3)))
