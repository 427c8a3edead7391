import numpy as np
import pytest

from hyperyield.nn import layers as L

from conftest import numeric_grad, rel_error


def conv3d_loops(x, k, b, pad):
    """Direct 3-D cross-correlation with explicit loops."""
    B, H, W, D, C = x.shape
    K = k.shape[0]
    xp = np.pad(x, [(0, 0), (pad, pad), (pad, pad), (pad, pad), (0, 0)])
    oh, ow, od = H + 2 * pad - K + 1, W + 2 * pad - K + 1, D + 2 * pad - K + 1
    out = np.zeros((B, oh, ow, od, k.shape[-1]))
    for n in range(B):
        for i in range(oh):
            for j in range(ow):
                for d in range(od):
                    for o in range(k.shape[-1]):
                        acc = b[o]
                        for a in range(K):
                            for bb in range(K):
                                for c in range(K):
                                    for ci in range(C):
                                        acc += xp[n, i + a, j + bb, d + c, ci] * k[a, bb, c, ci, o]
                        out[n, i, j, d, o] = acc
    return out


def conv2d_loops(x, k, b, pad):
    B, H, W, C = x.shape
    K = k.shape[0]
    xp = np.pad(x, [(0, 0), (pad, pad), (pad, pad), (0, 0)])
    oh, ow = H + 2 * pad - K + 1, W + 2 * pad - K + 1
    out = np.zeros((B, oh, ow, k.shape[-1]))
    for n in range(B):
        for i in range(oh):
            for j in range(ow):
                patch = xp[n, i : i + K, j : j + K, :]
                for o in range(k.shape[-1]):
                    out[n, i, j, o] = b[o] + sum(
                        patch[a, c, ci] * k[a, c, ci, o]
                        for a in range(K) for c in range(K) for ci in range(C)
                    )
    return out


def depthwise_loops(x, k, pad):
    B, H, W, C = x.shape
    xp = np.pad(x, [(0, 0), (pad, pad), (pad, pad), (0, 0)])
    out = np.zeros((B, H + 2 * pad - 2, W + 2 * pad - 2, C))
    for n in range(B):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                for c in range(C):
                    out[n, i, j, c] = sum(
                        xp[n, i + a, j + bb, c] * k[a, bb, c] for a in range(3) for bb in range(3)
                    )
    return out


class TestConv3D:
    def test_table_shape(self, rng):
        x = rng.normal(size=(1, 5, 5, 8, 1))
        k = rng.normal(size=(3, 3, 3, 1, 32))
        out, _ = L.conv_forward(x, k, np.zeros(32), 1)
        assert out.shape == (1, 5, 5, 8, 32)

    def test_zero_params(self, rng):
        x = rng.normal(size=(2, 5, 5, 4, 3))
        out, _ = L.conv_forward(x, np.zeros((3, 3, 3, 3, 6)), np.zeros(6), 1)
        assert not out.any()

    def test_center_tap_identity(self, rng):
        x = rng.normal(size=(1, 3, 3, 3, 1))
        k = np.zeros((3, 3, 3, 1, 1))
        k[1, 1, 1, 0, 0] = 1.0
        out, _ = L.conv_forward(x, k, np.zeros(1), 1)
        np.testing.assert_array_equal(out, x)
        np.testing.assert_array_equal(conv3d_loops(x, k, np.zeros(1), 1), x)

    def test_matches_loop_oracle(self, rng):
        x = rng.normal(size=(2, 4, 5, 3, 2))
        k = rng.normal(size=(3, 3, 3, 2, 3))
        b = rng.normal(size=3)
        out, _ = L.conv_forward(x, k, b, 1)
        np.testing.assert_allclose(out, conv3d_loops(x, k, b, 1), atol=1e-12)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            L.conv_forward(rng.normal(size=(1, 5, 5, 8, 2)), np.zeros((3, 3, 3, 1, 4)), None, 1)


class TestSepConv:
    def test_table_shape(self, rng):
        x = rng.normal(size=(1, 5, 5, 1024))
        out, _ = L.sepconv_forward(x, rng.normal(size=(3, 3, 1024)), rng.normal(size=(1024, 512)),
                                   np.zeros(512))
        assert out.shape == (1, 5, 5, 512)

    def test_delta_identity(self, rng):
        x = rng.normal(size=(2, 5, 5, 4))
        dw = np.zeros((3, 3, 4))
        dw[1, 1] = 1.0
        out, _ = L.sepconv_forward(x, dw, np.eye(4), np.zeros(4))
        np.testing.assert_array_equal(out, x)

    def test_matches_depthwise_then_matmul_oracle(self, rng):
        x = rng.normal(size=(2, 5, 5, 3))
        dw, pw, b = rng.normal(size=(3, 3, 3)), rng.normal(size=(3, 4)), rng.normal(size=4)
        out, _ = L.sepconv_forward(x, dw, pw, b)
        mid = depthwise_loops(x, dw, 1)
        expected = mid.reshape(-1, 3) @ pw + b
        np.testing.assert_allclose(out, expected.reshape(2, 5, 5, 4), atol=1e-12)


class TestConv2D:
    def test_same_and_valid_heads(self, rng):
        x = rng.normal(size=(1, 5, 5, 32))
        k, b = rng.normal(size=(3, 3, 32, 1)), np.zeros(1)
        assert L.conv_forward(x, k, b, 1)[0].shape == (1, 5, 5, 1)
        assert L.conv_forward(x, k, b, 0)[0].shape == (1, 3, 3, 1)

    @pytest.mark.parametrize("pad", [0, 1])
    def test_matches_loop_oracle(self, rng, pad):
        x = rng.normal(size=(2, 5, 5, 4))
        k, b = rng.normal(size=(3, 3, 4, 2)), rng.normal(size=2)
        np.testing.assert_allclose(L.conv_forward(x, k, b, pad)[0], conv2d_loops(x, k, b, pad), atol=1e-12)

    def test_zero_input_gives_relu_bias(self):
        out, _ = L.conv_forward(np.zeros((1, 5, 5, 32)), np.ones((3, 3, 32, 1)), np.array([-0.3]), 1)
        assert (L.relu_forward(out)[0] == 0).all()
        out, _ = L.conv_forward(np.zeros((1, 5, 5, 32)), np.ones((3, 3, 32, 1)), np.array([0.7]), 1)
        assert (L.relu_forward(out)[0] == 0.7).all()


@pytest.mark.parametrize(
    "make",
    [
        lambda r: (lambda x, p: L.conv_forward(x, p, None, 1)[0], (2, 5, 5, 3, 2), (3, 3, 3, 2, 3)),
        lambda r: (lambda x, p: L.conv_forward(x, p, None, 0)[0], (2, 5, 5, 3), (3, 3, 3, 2)),
        lambda r: (lambda x, p: L.depthwise_forward(x, p, 1)[0], (2, 5, 5, 3), (3, 3, 3)),
        lambda r: (lambda x, p: L.dense_forward(x, p)[0], (2, 5, 5, 3), (3, 4)),
    ],
)
def test_zero_bias_layers_are_linear(rng, make):
    f, xshape, pshape = make(rng)
    p = rng.normal(size=pshape)
    x, z = rng.normal(size=xshape), rng.normal(size=xshape)
    a, b = 1.7, -0.4
    np.testing.assert_allclose(f(a * x + b * z, p), a * f(x, p) + b * f(z, p), atol=1e-10)


def test_concat(rng):
    a, b = rng.normal(size=(2, 5, 5, 4, 32)), rng.normal(size=(2, 5, 5, 4, 32))
    c = L.concat(a, b)
    assert c.shape[-1] == 64
    assert L.concat(c, b).shape[-1] == 96
    np.testing.assert_array_equal(c[..., :32], a)
    np.testing.assert_array_equal(c[..., 32:], b)
    with pytest.raises(ValueError):
        L.concat(a, b[:, :4])


class TestBatchNorm:
    def test_train_normalizes(self, rng):
        x = rng.normal(3.0, 5.0, size=(8, 5, 5, 4, 6))
        out, _, _, _ = L.batchnorm_forward(x, np.ones(6), np.zeros(6), np.zeros(6), np.ones(6), True)
        flat = out.reshape(-1, 6)
        np.testing.assert_allclose(flat.mean(axis=0), 0, atol=1e-6)
        np.testing.assert_allclose(flat.var(axis=0), 1, atol=1e-6)

    def test_eval_with_initial_stats(self, rng):
        x = rng.normal(size=(3, 5, 5, 2))
        out, _, _, _ = L.batchnorm_forward(x, np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), False)
        np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5), rtol=1e-15)

    def test_two_pass_oracle(self, rng):
        x = rng.normal(2.0, 3.0, size=(4, 5, 5, 3))
        g, b = rng.normal(size=3), rng.normal(size=3)
        out, _, rm, rv = L.batchnorm_forward(x, g, b, np.zeros(3), np.ones(3), True, 0.9, 1e-5)
        for c in range(3):
            vals = x[..., c].ravel()
            mean = sum(vals) / len(vals)
            var = sum((v - mean) ** 2 for v in vals) / len(vals)
            expected = g[c] * (x[..., c] - mean) / np.sqrt(var + 1e-5) + b[c]
            np.testing.assert_allclose(out[..., c], expected, atol=1e-10)
            assert abs(rm[c] - 0.1 * mean) < 1e-12
            assert abs(rv[c] - (0.9 + 0.1 * var)) < 1e-12


class TestDropout:
    def test_eval_identity(self, rng):
        x = rng.normal(size=(4, 5))
        assert L.dropout_forward(x, 0.5, False)[0] is x

    def test_rate_zero_identity(self, rng):
        x = rng.normal(size=(4, 5))
        np.testing.assert_array_equal(L.dropout_forward(x, 0.0, True, rng)[0], x)

    def test_survivor_fraction(self):
        x = np.ones(100_000)
        out, mask = L.dropout_forward(x, 0.5, True, np.random.default_rng(0))
        frac = np.count_nonzero(out) / x.size
        assert abs(frac - 0.5) < 0.01
        assert set(np.unique(out)) == {0.0, 2.0}


def _check_layer(forward, backward, inputs, rng, step=1e-4):
    """Compare analytic gradients of ``sum(R * forward(*inputs))`` with central differences."""
    out = forward(*inputs)[0]
    R = rng.normal(size=out.shape)
    cache = forward(*inputs)[1]
    analytic = [g for g in backward(R, cache) if g is not None]
    numeric = [numeric_grad(lambda: float((forward(*inputs)[0] * R).sum()), a, step)
               for a in inputs if isinstance(a, np.ndarray)]
    return [rel_error(a, n) for a, n in zip(analytic, numeric)]


class TestLayerGradients:
    def test_conv3d(self, rng):
        x, k, b = rng.normal(size=(2, 5, 5, 3, 2)), rng.normal(size=(3, 3, 3, 2, 3)), rng.normal(size=3)
        errs = _check_layer(lambda x, k, b: L.conv_forward(x, k, b, 1), L.conv_backward, [x, k, b], rng)
        assert max(errs) < 1e-4, errs

    @pytest.mark.parametrize("pad", [0, 1])
    def test_conv2d(self, rng, pad):
        x, k, b = rng.normal(size=(2, 5, 5, 3)), rng.normal(size=(3, 3, 3, 2)), rng.normal(size=2)
        errs = _check_layer(lambda x, k, b: L.conv_forward(x, k, b, pad), L.conv_backward, [x, k, b], rng)
        assert max(errs) < 1e-4, errs

    def test_sepconv(self, rng):
        x = rng.normal(size=(2, 5, 5, 3))
        dw, pw, b = rng.normal(size=(3, 3, 3)), rng.normal(size=(3, 4)), rng.normal(size=4)
        errs = _check_layer(lambda *a: L.sepconv_forward(*a, pad=1), L.sepconv_backward, [x, dw, pw, b], rng)
        assert max(errs) < 1e-4, errs

    def test_dense_no_bias(self, rng):
        x, w = rng.normal(size=(4, 9)), rng.normal(size=(9, 1))
        errs = _check_layer(lambda x, w: L.dense_forward(x, w), L.dense_backward, [x, w], rng)
        assert max(errs) < 1e-4, errs

    @pytest.mark.parametrize("train", [True, False])
    def test_batchnorm(self, rng, train):
        x = rng.normal(size=(3, 5, 5, 2, 4))
        g, b = rng.normal(size=4), rng.normal(size=4)
        rm, rv = rng.normal(size=4), rng.uniform(0.5, 2, 4)

        def fwd(x, g, b):
            out, cache, _, _ = L.batchnorm_forward(x, g, b, rm, rv, train)
            return out, cache

        errs = _check_layer(fwd, L.batchnorm_backward, [x, g, b], rng)
        assert max(errs) < 1e-4, errs

    def test_relu(self, rng):
        x = rng.normal(size=(3, 7))
        errs = _check_layer(L.relu_forward, lambda d, c: [L.relu_backward(d, c)], [x], rng)
        assert max(errs) < 1e-4, errs

    def test_dropout_replayed(self, rng):
        x = rng.normal(size=(3, 5, 5, 6))
        _, mask = L.dropout_forward(x, 0.5, True, np.random.default_rng(3))
        errs = _check_layer(lambda x: (x * mask, mask), lambda d, c: [L.dropout_backward(d, c)], [x], rng)
        assert max(errs) < 1e-4, errs
