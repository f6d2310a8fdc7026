import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_difference, rel_error, tiny_config
from seflow import tensor as T
from seflow.errors import GradientError, ShapeError
from seflow.flow import WaveNet
from seflow.tensor import Tensor


def conv_oracle(x, w, b, dilation):
    """Direct-summation cross-correlation with zero same-padding."""
    bsz, c_in, t_len = x.shape
    c_out, _, k = w.shape
    left = dilation * (k - 1) // 2
    out = np.zeros((bsz, c_out, t_len))
    for n in range(bsz):
        for o in range(c_out):
            for t in range(t_len):
                acc = b[o]
                for c in range(c_in):
                    for j in range(k):
                        src = t + j * dilation - left
                        if 0 <= src < t_len:
                            acc += w[o, c, j] * x[n, c, src]
                out[n, o, t] = acc
    return out


def t3(values):
    return Tensor(np.asarray(values, dtype=np.float64).reshape(1, 1, -1))


class TestConv1d:
    def test_identity_kernel(self):
        y = T.conv1d(t3([1, 2, 3]), Tensor(np.ones((1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(y.data.ravel(), [1, 2, 3])

    def test_zero_kernel(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 7)))
        y = T.conv1d(x, Tensor(np.zeros((4, 3, 3))), Tensor(np.zeros(4)), dilation=2)
        assert y.shape == (2, 4, 7)
        assert not np.any(y.data)

    def test_even_kernel_against_oracle(self):
        x = np.array([1.0, 2.0, 3.0]).reshape(1, 1, 3)
        w = np.ones((1, 1, 2))
        expected = conv_oracle(x, w, np.zeros(1), 1)
        # oracle output frozen: right-padded same conv of [1,2,3] with [1,1]
        np.testing.assert_array_equal(expected.ravel(), [3.0, 5.0, 3.0])
        y = T.conv1d(Tensor(x), Tensor(w), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(y.data, expected)

    @pytest.mark.parametrize("k,d", [(1, 1), (2, 3), (3, 1), (3, 2), (4, 1), (5, 3)])
    def test_random_against_oracle(self, rng, k, d):
        x = rng.standard_normal((2, 3, 11))
        w = rng.standard_normal((4, 3, k))
        b = rng.standard_normal(4)
        y = T.conv1d(Tensor(x), Tensor(w), Tensor(b), dilation=d)
        np.testing.assert_allclose(y.data, conv_oracle(x, w, b, d), atol=1e-12)

    def test_linearity(self, rng):
        x, z = rng.standard_normal((2, 2, 3, 16))
        w = Tensor(rng.standard_normal((4, 3, 3)))
        a, b = 1.7, -0.4
        lhs = T.conv1d(Tensor(a * x + b * z), w, None, dilation=2).data
        rhs = a * T.conv1d(Tensor(x), w, None, 2).data + b * T.conv1d(Tensor(z), w, None, 2).data
        assert np.max(np.abs(lhs - rhs)) < 1e-10

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(1, 2, 5\).*\(3, 4, 3\)"):
            T.conv1d(Tensor(np.zeros((1, 2, 5))), Tensor(np.zeros((3, 4, 3))))

    def test_bad_dilation(self):
        with pytest.raises(ShapeError):
            T.conv1d(Tensor(np.zeros((1, 1, 5))), Tensor(np.zeros((1, 1, 3))), dilation=0)


class TestSeparableConv:
    def test_identity(self, rng):
        x = rng.standard_normal((1, 3, 9))
        dw = np.zeros((3, 3))
        dw[:, 1] = 1.0
        y = T.separable_conv(Tensor(x), Tensor(dw), Tensor(np.eye(3)))
        np.testing.assert_array_equal(y.data, x)

    def test_zero_pointwise(self, rng):
        y = T.separable_conv(Tensor(rng.standard_normal((1, 2, 6))), Tensor(rng.standard_normal((2, 3))), Tensor(np.zeros((4, 2))))
        assert not np.any(y.data)

    @settings(max_examples=40, deadline=None)
    @given(
        c_in=st.integers(1, 4),
        c_out=st.integers(1, 4),
        k=st.integers(1, 3),
        d=st.integers(1, 3),
        t=st.integers(1, 16),
        seed=st.integers(0, 2**31),
    )
    def test_equals_composed_dense(self, c_in, c_out, k, d, t, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, c_in, t))
        dw = rng.standard_normal((c_in, k))
        pw = rng.standard_normal((c_out, c_in))
        composed = pw[:, :, None] * dw[None, :, :]  # (out, in, k)
        dense = T.conv1d(Tensor(x), Tensor(composed), None, d).data
        sep = T.separable_conv(Tensor(x), Tensor(dw), Tensor(pw), dilation=d).data
        assert np.max(np.abs(sep - dense)) < 1e-10

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.separable_conv(Tensor(np.zeros((1, 3, 5))), Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))
        with pytest.raises(ShapeError):
            T.separable_conv(Tensor(np.zeros((1, 2, 5))), Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestGatedUnit:
    def test_zero(self):
        y = T.gated_unit(t3([0.0]), t3([0.0]))
        assert y.data.ravel()[0] == 0.0

    def test_saturation(self):
        y = T.gated_unit(t3([50.0]), t3([50.0]))
        assert y.data.ravel()[0] == pytest.approx(1.0, abs=1e-15)

    def test_scalar_oracle(self):
        y = T.gated_unit(t3([1.0]), t3([1.0]))
        assert y.data.ravel()[0] == pytest.approx(math.tanh(1.0) / (1.0 + math.exp(-1.0)), rel=1e-15)

    def test_range(self, rng):
        y = T.gated_unit(Tensor(rng.standard_normal((2, 3, 50)) * 5), Tensor(rng.standard_normal((2, 3, 50)) * 5))
        assert np.all(np.abs(y.data) < 1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.gated_unit(t3([1.0, 2.0]), t3([1.0]))


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        T.sum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_sum_of_squares(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        T.sum(T.square(x)).backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones((1, 1, 3)), requires_grad=True)
        with pytest.raises(GradientError):
            T.tanh(x).backward()

    def test_unrecorded_rejected(self):
        x = Tensor(np.ones((1, 1, 3)), requires_grad=True)
        with T.no_grad():
            loss = T.sum(T.tanh(x))
        with pytest.raises(GradientError):
            loss.backward()

    def test_shared_subexpression(self):
        x = Tensor(np.array([0.3, -0.7]), requires_grad=True)
        y = T.tanh(x)
        T.sum(T.mul(y, y) + y).backward()
        th = np.tanh(x.data)
        np.testing.assert_allclose(x.grad, (2 * th + 1) * (1 - th**2), rtol=1e-14)

    def test_determinism(self, rng):
        wn = WaveNet(2, 4, tiny_config(), np.random.default_rng(5))
        xa, c = Tensor(rng.standard_normal((1, 2, 12))), Tensor(rng.standard_normal((1, 4, 12)))
        a = wn(xa, c)[0].data
        b = wn(xa, c)[0].data
        assert a.tobytes() == b.tobytes()


def _gradcheck(make_loss, params, rng, n_samples=None, h=1e-5):
    """Compare analytic gradients against central differences; returns max rel error."""
    for p in params:
        p.zero_grad()
    make_loss().backward()
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = range(p.size) if n_samples is None else rng.choice(p.size, size=min(n_samples, p.size), replace=False)
        for i in flat:
            idx = np.unravel_index(i, p.shape)
            numeric = central_difference(lambda: make_loss().item(), p.data, idx, h)
            worst = max(worst, rel_error(analytic[idx], numeric))
    return worst


class TestGradcheckPrimitives:
    def test_conv1d(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 9)), requires_grad=True)
        w = Tensor(rng.standard_normal((2, 3, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal(2), requires_grad=True)
        r = rng.standard_normal((2, 2, 9))
        loss = lambda: T.sum(T.mul(T.conv1d(x, w, b, dilation=2), Tensor(r)))
        assert _gradcheck(loss, [x, w, b], rng) < 1e-4

    def test_separable(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 9)), requires_grad=True)
        dw = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        pw = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        loss = lambda: T.sum_squares(T.separable_conv(x, dw, pw, dilation=3))
        assert _gradcheck(loss, [x, dw, pw], rng) < 1e-4

    def test_elementwise_chain(self, rng):
        a = Tensor(rng.standard_normal((1, 4, 5)), requires_grad=True)
        b = Tensor(rng.standard_normal((1, 4, 5)), requires_grad=True)
        loss = lambda: T.sum(T.exp(T.mul(T.gated_unit(a, b), 0.5)) - T.sigmoid(a) + T.tanh(b) * 3.0)
        assert _gradcheck(loss, [a, b], rng) < 1e-4

    def test_slice_concat(self, rng):
        a = Tensor(rng.standard_normal((2, 5, 3)), requires_grad=True)
        r = Tensor(rng.standard_normal((2, 5, 3)))

        def loss():
            lo, hi = T.slice_channels(a, 0, 2), T.slice_channels(a, 2, 5)
            return T.sum(T.mul(T.concat_channels([T.square(hi), T.exp(lo)]), r))

        assert _gradcheck(loss, [a], rng) < 1e-4

    def test_logabsdet(self, rng):
        w = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        assert _gradcheck(lambda: T.logabsdet(w), [w], rng) < 1e-4

    def test_weight_norm(self, rng):
        v = Tensor(rng.standard_normal((3, 2, 4)), requires_grad=True)
        g = Tensor(rng.uniform(0.5, 2.0, 3), requires_grad=True)
        r = Tensor(rng.standard_normal((3, 2, 4)))
        assert _gradcheck(lambda: T.sum(T.mul(T.weight_norm(v, g), r)), [v, g], rng) < 1e-4


class TestGradcheckConditioner:
    def test_full_wavenet(self, rng):
        cfg = tiny_config(wn_layers=3)
        wn = WaveNet(2, 4, cfg, np.random.default_rng(7))
        for _, p in wn.named_parameters():
            p.data = p.data + 0.3 * rng.standard_normal(p.shape)
        xa = Tensor(rng.standard_normal((2, 2, 10)))
        cond = Tensor(rng.standard_normal((2, 4, 10)))
        r1, r2 = Tensor(rng.standard_normal((2, 2, 10))), Tensor(rng.standard_normal((2, 2, 10)))

        def loss():
            s, t = wn(xa, cond)
            return T.sum(T.mul(T.exp(s), r1)) + T.sum(T.mul(t, r2))

        assert _gradcheck(loss, wn.parameters(), rng) < 1e-4
