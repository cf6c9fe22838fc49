import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mrnet import autodiff as ad
from mrnet.autodiff import ShapeError, Tape, Tensor, backward
from mrnet.gradcheck import finite_diff_check, op_cases


def grads_of(f, *xs):
    for x in xs:
        x.requires_grad = True
    with Tape() as tape:
        loss = f(*xs)
    backward(loss, tape)
    return [x.grad for x in xs]


def naive_conv(x, k, b, stride, pad, dil):
    B, C, H, W = x.shape
    O, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (H + 2 * pad - dil * (kh - 1) - 1) // stride + 1
    wo = (W + 2 * pad - dil * (kw - 1) - 1) // stride + 1
    out = np.zeros((B, O, ho, wo))
    for n, o, i, j in itertools.product(range(B), range(O), range(ho), range(wo)):
        acc = b[o]
        for c, u, v in itertools.product(range(C), range(kh), range(kw)):
            acc += xp[n, c, i * stride + u * dil, j * stride + v * dil] * k[o, c, u, v]
        out[n, o, i, j] = acc
    return out


class TestConv2d:
    def test_sum_of_ones(self):
        out = ad.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
        assert out.shape == (1, 1, 1, 1)
        assert out.data.item() == 9.0

    @pytest.mark.parametrize("pad,dil", [(1, 1), (2, 2)])
    def test_same_shape(self, pad, dil):
        out = ad.conv2d(Tensor(np.zeros((1, 3, 8, 8))), Tensor(np.zeros((4, 3, 3, 3))), Tensor(np.zeros(4)),
                        padding=pad, dilation=dil)
        assert out.shape == (1, 4, 8, 8)

    @pytest.mark.parametrize("stride,pad,dil", list(itertools.product((1, 2), (0, 1, 2), (1, 2, 5))))
    def test_output_shape_grid(self, stride, pad, dil):
        H = 13
        if H + 2 * pad < dil * 2 + 1:
            with pytest.raises(ShapeError):
                ad.conv2d(Tensor(np.zeros((1, 2, H, H))), Tensor(np.zeros((3, 2, 3, 3))),
                          padding=pad, dilation=dil, stride=stride)
            return
        out = ad.conv2d(Tensor(np.zeros((1, 2, H, H))), Tensor(np.zeros((3, 2, 3, 3))),
                        padding=pad, dilation=dil, stride=stride)
        expect = (H + 2 * pad - dil * 2 - 1) // stride + 1
        assert out.shape == (1, 3, expect, expect)

    @pytest.mark.parametrize("stride,pad,dil", [(1, 0, 1), (2, 1, 1), (1, 2, 2), (2, 3, 3)])
    def test_matches_naive_cross_correlation(self, stride, pad, dil):
        rng = np.random.default_rng(3)
        x, k, b = rng.standard_normal((2, 3, 9, 9)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
        got = ad.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, padding=pad, dilation=dil).data
        np.testing.assert_allclose(got, naive_conv(x, k, b, stride, pad, dil), rtol=1e-12, atol=1e-12)

    def test_no_kernel_flip(self):
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 0, 0] = 1.0
        k = np.arange(9.0).reshape(1, 1, 3, 3)
        out = ad.conv2d(Tensor(x), Tensor(k))
        assert out.data.item() == k[0, 0, 0, 0]

    def test_depthwise_matches_per_channel(self):
        rng = np.random.default_rng(0)
        x, k = rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((3, 1, 3, 3))
        got = ad.conv2d(Tensor(x), Tensor(k), groups=3, padding=1, stride=2).data
        for c in range(3):
            ref = naive_conv(x[:, c:c + 1], k[c:c + 1], np.zeros(1), 2, 1, 1)
            np.testing.assert_allclose(got[:, c:c + 1], ref, atol=1e-12)

    def test_channel_mismatch_names_dimension(self):
        with pytest.raises(ShapeError, match="channels"):
            ad.conv2d(Tensor(np.zeros((1, 3, 5, 5))), Tensor(np.zeros((2, 4, 3, 3))))

    @pytest.mark.parametrize("dil", [1, 2, 5])
    def test_receptive_extent(self, dil):
        # perturbing a pixel just outside the dilated kernel's footprint leaves the centre output unchanged
        rng = np.random.default_rng(dil)
        size, k = 2 * dil + 9, rng.standard_normal((1, 1, 3, 3))
        x = rng.standard_normal((1, 1, size, size))
        c = size // 2
        base = ad.conv2d(Tensor(x), Tensor(k), padding=dil, dilation=dil).data[0, 0, c, c]
        extent = dil * 2 + 1
        for offset in (dil + 1, -(dil + 1)):
            y = x.copy()
            y[0, 0, c + offset, c] += 10.0
            assert ad.conv2d(Tensor(y), Tensor(k), padding=dil, dilation=dil).data[0, 0, c, c] == base
        y = x.copy()
        y[0, 0, c + dil, c + dil] += 10.0
        assert ad.conv2d(Tensor(y), Tensor(k), padding=dil, dilation=dil).data[0, 0, c, c] != base
        assert extent == dil * (3 - 1) + 1


class TestMaxpool:
    def test_single_window(self):
        assert ad.maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))).data.item() == 4.0

    def test_constant(self):
        out = ad.maxpool2d(Tensor(np.full((2, 3, 4, 6), 2.5)))
        assert out.shape == (2, 3, 2, 3)
        assert np.all(out.data == 2.5)

    def test_tie_break_first_index(self):
        x = Tensor(np.array([[[[4.0, 4.0], [1.0, 0.0]]]]))
        (g,) = grads_of(lambda x: ad.mul(ad.maxpool2d(x), Tensor(np.full((1, 1, 1, 1), 3.0))).sum(), x)
        np.testing.assert_array_equal(g, [[[[3.0, 0.0], [0.0, 0.0]]]])

    def test_odd_extent_rejected(self):
        with pytest.raises(ShapeError):
            ad.maxpool2d(Tensor(np.zeros((1, 1, 3, 4))))


class TestUpconv:
    def test_single_pixel(self):
        out = ad.upconv2x(Tensor(np.full((1, 1, 1, 1), 1.7)), Tensor(np.ones((1, 1, 2, 2))))
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 1.7))

    def test_shape(self):
        out = ad.upconv2x(Tensor(np.zeros((1, 8, 4, 4))), Tensor(np.zeros((8, 5, 2, 2))))
        assert out.shape == (1, 5, 8, 8)

    def test_grad_of_sum_is_kernel_sum(self):
        rng = np.random.default_rng(1)
        k = rng.standard_normal((2, 3, 2, 2))
        x = Tensor(rng.standard_normal((1, 2, 3, 3)))
        (g,) = grads_of(lambda x: ad.upconv2x(x, Tensor(k)).sum(), x)
        for c in range(2):
            np.testing.assert_allclose(g[0, c], k[c].sum(), rtol=1e-12)
        err = finite_diff_check(lambda x: ad.upconv2x(x, Tensor(k)).sum(), x)
        assert err < 1e-8


class TestSmallOps:
    def test_relu(self):
        x = Tensor(np.array([-1.0, 0.0, 2.0]))
        assert ad.relu(x).data.tolist() == [0.0, 0.0, 2.0]
        (g,) = grads_of(lambda x: ad.relu(x).sum(), x)
        assert g.tolist() == [0.0, 0.0, 1.0]

    def test_dense_identity(self):
        x = np.random.default_rng(0).standard_normal((3, 4))
        out = ad.dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, x)

    def test_dense_small(self):
        out = ad.dense(Tensor([[1.0, 2.0]]), Tensor([[1.0], [1.0]]), Tensor([1.0]))
        assert out.data.tolist() == [[4.0]]

    def test_dense_weight_grad(self):
        rng = np.random.default_rng(2)
        x, w, r = rng.standard_normal((3, 4)), Tensor(rng.standard_normal((4, 2))), rng.standard_normal((3, 2))
        (g,) = grads_of(lambda w: ad.mul(ad.dense(Tensor(x), w), Tensor(r)).sum(), w)
        np.testing.assert_allclose(g, x.T @ r, rtol=1e-12)
        assert finite_diff_check(lambda w: ad.mul(ad.dense(Tensor(x), w), Tensor(r)).sum(), w) < 1e-8

    def test_dense_mismatch(self):
        with pytest.raises(ShapeError):
            ad.dense(Tensor(np.zeros((1, 3))), Tensor(np.zeros((2, 2))))

    def test_softmax_uniform(self):
        np.testing.assert_allclose(ad.softmax(Tensor(np.zeros((1, 3)))).data, [[1 / 3] * 3])

    def test_softmax_large_logit(self):
        p = ad.softmax(Tensor(np.array([[1000.0, 0.0, 0.0]]))).data
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p, [[1.0, 0.0, 0.0]], atol=1e-300)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                  elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_softmax_rows_and_shift(self, x, c):
        p = ad.softmax(Tensor(x)).data
        assert np.all((p >= 0) & (p <= 1))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(ad.softmax(Tensor(x + c)).data, p, atol=1e-9)

    def test_concat(self):
        a = Tensor(np.ones((1, 1, 2, 2)))
        out = ad.concat_channels(a, a)
        np.testing.assert_array_equal(out.data[:, 0], out.data[:, 1])
        big = ad.concat_channels(Tensor(np.zeros((1, 64, 8, 8))), Tensor(np.zeros((1, 64, 8, 8))))
        assert big.shape == (1, 128, 8, 8)

    def test_concat_backward_split(self):
        a, b = Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros((1, 3, 2, 2)))
        r = np.arange(20.0).reshape(1, 5, 2, 2)
        ga, gb = grads_of(lambda a, b: ad.mul(ad.concat_channels(a, b), Tensor(r)).sum(), a, b)
        np.testing.assert_array_equal(ga, r[:, :2])
        np.testing.assert_array_equal(gb, r[:, 2:])

    def test_concat_spatial_mismatch(self):
        with pytest.raises(ShapeError, match="height"):
            ad.concat_channels(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 2))))

    def test_gap(self):
        assert np.all(ad.global_avg_pool(Tensor(np.full((2, 3, 4, 4), 1.5))).data == 1.5)
        assert ad.global_avg_pool(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))).data.item() == 2.5
        x = Tensor(np.zeros((1, 1, 2, 3)))
        (g,) = grads_of(lambda x: ad.global_avg_pool(x).sum(), x)
        np.testing.assert_allclose(g, np.full((1, 1, 2, 3), 1 / 6))


class TestBackward:
    def test_sum(self):
        x = Tensor(np.arange(5.0))
        (g,) = grads_of(lambda x: x.sum(), x)
        np.testing.assert_array_equal(g, np.ones(5))

    def test_square(self):
        x = Tensor(np.array([1.0, -2.0, 3.5]))
        (g,) = grads_of(lambda x: (x * x).sum(), x)
        np.testing.assert_array_equal(g, 2 * x.data)

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(ShapeError):
            backward(y, tape)

    def test_each_record_visited_once_in_reverse(self):
        x = Tensor(np.ones((1, 2)), requires_grad=True)
        with Tape() as tape:
            y = ad.relu(x)
            z = ad.softmax(y)
            loss = ad.cross_entropy(z, [0])
        visited = backward(loss, tape)
        assert visited == [r.op for r in reversed(tape.records)] == ["cross_entropy", "softmax", "relu"]
        assert all(t.grad is not None for t in (x, y, z, loss))

    def test_no_recording_outside_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = x * 2.0
        assert not y.requires_grad

    def test_repeat_backward_bitwise_identical(self):
        rng = np.random.default_rng(0)
        x, k = Tensor(rng.standard_normal((2, 3, 6, 6))), Tensor(rng.standard_normal((4, 3, 3, 3)))
        first = grads_of(lambda x, k: ad.global_avg_pool(ad.relu(ad.conv2d(x, k, padding=1))).sum(), x, k)
        first = [g.copy() for g in first]
        second = grads_of(lambda x, k: ad.global_avg_pool(ad.relu(ad.conv2d(x, k, padding=1))).sum(), x, k)
        for a, b in zip(first, second):
            assert a.tobytes() == b.tobytes()


class TestFiniteDiff:
    def test_linear_is_exact(self):
        w = np.random.default_rng(0).standard_normal(6)
        assert finite_diff_check(lambda x: ad.mul(x, Tensor(w)).sum(), Tensor(np.ones(6))) < 1e-9

    def test_quadratic(self):
        x = Tensor(np.random.default_rng(1).standard_normal(10))
        assert finite_diff_check(lambda x: (x * x).sum(), x) < 1e-7

    @pytest.mark.parametrize("seed", range(1, 6))
    def test_every_op(self, seed):
        for name, f, xs in op_cases(seed):
            assert finite_diff_check(f, xs) < 1e-4, name

    def test_composite_graph(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)))
        k1, k2 = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.3), Tensor(rng.standard_normal((4, 2, 2, 2)) * 0.3)
        w = Tensor(rng.standard_normal((6, 3)))

        def f(x, k1, k2, w):
            h = ad.maxpool2d(ad.relu(ad.conv2d(x, k1, padding=2, dilation=2)))
            u = ad.upconv2x(h, k2)
            h2 = ad.concat_channels(u, ad.relu(ad.conv2d(x, k1, padding=1)))
            return ad.cross_entropy(ad.softmax(ad.dense(ad.global_avg_pool(h2), w)), [0, 2])

        assert finite_diff_check(f, [x, k1, k2, w]) < 1e-4
