import numpy as np
import pytest

from blvnet import ops
from blvnet.gradcheck import gradcheck
from blvnet.tensor import (AutodiffError, Tensor, add, gather_rows, linear,
                           mean, mul, reshape)
from blvnet.trainer import cross_entropy


def rnd(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


def test_weighted_sum_gradient():
    x = np.array([1.0, -2.0, 3.0])
    w = Tensor(np.array([0.5, 0.5, 0.5]), requires_grad=True)
    loss = mul(w, Tensor(x)).sum()
    loss.backward()
    np.testing.assert_allclose(w.grad, x)


def test_diamond_graph_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = add(x, x)
    z = mul(y, y)  # z = (2x)^2, dz/dx = 8x = 16
    z.sum().backward()
    np.testing.assert_allclose(x.grad, [16.0])


def test_shared_gradient_buffers_do_not_alias():
    # both parents of an add receive the same incoming array; later
    # accumulation into one must not corrupt the other
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    b = Tensor(np.array([3.0, 4.0]), requires_grad=True)
    s = add(a, b)
    t = add(s, a)  # a used twice
    t.sum().backward()
    np.testing.assert_allclose(a.grad, [2.0, 2.0])
    np.testing.assert_allclose(b.grad, [1.0, 1.0])


def test_unused_parameter_gradient_is_zero():
    used = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones(3), requires_grad=True)
    loss = used.sum()
    loss.backward()
    assert unused.grad is None  # reported as zero
    np.testing.assert_allclose(used.grad, np.ones(3))


def test_backward_twice_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = x.relu().sum()
    loss.backward()
    with pytest.raises(AutodiffError, match="already ran"):
        loss.backward()


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(AutodiffError, match="scalar"):
        x.relu().backward()


def test_gradient_accumulates_across_graphs():
    x = Tensor(np.ones(2), requires_grad=True)
    (x * 2.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_allclose(x.grad, [5.0, 5.0])


class TestOpGradients:
    """Central-difference checks for every differentiable op, 20 seeds."""

    @pytest.mark.parametrize("seed", range(20))
    def test_conv2d(self, seed):
        x = Tensor(rnd((2, 3, 5, 5), seed), requires_grad=True)
        w = Tensor(rnd((4, 3, 3, 3), seed + 50), requires_grad=True)
        b = Tensor(rnd((4,), seed + 100), requires_grad=True)
        probe = rnd((2, 4, 3, 3), seed + 150)

        def fn():
            return (ops.conv2d(x, w, b, stride=2, padding=1) * Tensor(probe)).sum()

        rep = gradcheck(fn, [("x", x), ("w", w), ("b", b)], max_coords=4, seed=seed)
        assert rep.passed, rep.max_rel_err

    @pytest.mark.parametrize("seed", range(20))
    def test_batchnorm_training(self, seed):
        c = 3
        x = Tensor(rnd((4, c, 4, 4), seed), requires_grad=True)
        gamma = Tensor(rnd((c,), seed + 1) + 2.0, requires_grad=True)
        beta = Tensor(rnd((c,), seed + 2), requires_grad=True)
        probe = rnd((4, c, 4, 4), seed + 3)

        def fn():
            out = ops.batchnorm2d(x, gamma, beta, np.zeros(c), np.ones(c),
                                  training=True)
            return (out * Tensor(probe)).sum()

        rep = gradcheck(fn, [("x", x), ("gamma", gamma), ("beta", beta)],
                        max_coords=4, seed=seed)
        assert rep.passed, rep.max_rel_err

    @pytest.mark.parametrize("seed", range(20))
    def test_linear(self, seed):
        x = Tensor(rnd((3, 6), seed), requires_grad=True)
        w = Tensor(rnd((4, 6), seed + 1), requires_grad=True)
        b = Tensor(rnd((4,), seed + 2), requires_grad=True)
        probe = rnd((3, 4), seed + 3)

        def fn():
            return (linear(x, w, b) * Tensor(probe)).sum()

        rep = gradcheck(fn, [("x", x), ("w", w), ("b", b)], max_coords=5, seed=seed)
        assert rep.passed, rep.max_rel_err

    @pytest.mark.parametrize("seed", range(20))
    def test_bilinear_both_ways(self, seed):
        x = Tensor(rnd((1, 2, 4, 6), seed), requires_grad=True)
        probe_up = rnd((1, 2, 8, 12), seed + 1)
        probe_dn = rnd((1, 2, 2, 3), seed + 2)

        def fn_up():
            return (ops.bilinear_resize(x, 2) * Tensor(probe_up)).sum()

        def fn_dn():
            return (ops.bilinear_resize(x, 0.5) * Tensor(probe_dn)).sum()

        assert gradcheck(fn_up, [("x", x)], max_coords=5, seed=seed).passed
        assert gradcheck(fn_dn, [("x", x)], max_coords=5, seed=seed).passed

    @pytest.mark.parametrize("seed", range(20))
    def test_depthwise(self, seed):
        x = Tensor(rnd((2, 4, 3, 3), seed), requires_grad=True)
        w = Tensor(rnd((4,), seed + 1), requires_grad=True)
        probe = rnd((2, 4, 3, 3), seed + 2)

        def fn():
            return (ops.depthwise_conv1x1(x, w) * Tensor(probe)).sum()

        rep = gradcheck(fn, [("x", x), ("w", w)], max_coords=5, seed=seed)
        assert rep.passed, rep.max_rel_err

    @pytest.mark.parametrize("seed", range(20))
    def test_cross_entropy(self, seed):
        logits = Tensor(rnd((4, 5), seed), requires_grad=True)
        labels = np.random.default_rng(seed).integers(0, 5, 4)

        def fn():
            return cross_entropy(logits, labels)

        rep = gradcheck(fn, [("logits", logits)], max_coords=6, seed=seed)
        assert rep.passed, rep.max_rel_err

    @pytest.mark.parametrize("seed", range(20))
    def test_structural_ops(self, seed):
        x = Tensor(rnd((6, 2, 3, 3), seed), requires_grad=True)
        idx = np.random.default_rng(seed).integers(0, 6, 8)
        probe = rnd((2, 4, 2 * 3 * 3), seed + 1)

        def fn():
            g = gather_rows(x, idx)
            r = reshape(g, (2, 4, 2 * 3 * 3))
            m = mean(r * Tensor(probe), axis=1)
            return m.sum()

        rep = gradcheck(fn, [("x", x)], max_coords=6, seed=seed)
        assert rep.passed, rep.max_rel_err

    @pytest.mark.parametrize("seed", range(3))
    def test_maxpool_and_avgpool(self, seed):
        # ties in max windows are measure-zero for random input
        x = Tensor(rnd((2, 3, 9, 9), seed), requires_grad=True)
        probe = rnd((2, 3, 5, 5), seed + 1)
        probe2 = rnd((2, 3), seed + 2)

        def fn_max():
            return (ops.maxpool2d(x, 3, 2, 1) * Tensor(probe)).sum()

        def fn_avg():
            return (ops.global_avgpool(x) * Tensor(probe2)).sum()

        assert gradcheck(fn_max, [("x", x)], max_coords=6, seed=seed).passed
        assert gradcheck(fn_avg, [("x", x)], max_coords=6, seed=seed).passed


def test_bl_module_block_gradcheck():
    """Full dual-branch stage matches finite differences at 1e-5 in f64."""
    from blvnet.gradcheck import suite_bl_module

    rep = suite_bl_module(dtype=np.float64, seed=0)
    assert rep.max_rel_err < 1e-5, rep.max_rel_err
