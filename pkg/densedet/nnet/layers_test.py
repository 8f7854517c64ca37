import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from densedet.common.errors import ConfigurationError, NumericError
from densedet.nnet import layers
from densedet.nnet.layers import LayerSpec, LrnParams


def naive_conv(x, w, b, stride, pad):
    channels, height, width = x.shape
    xp = np.zeros((channels, height + 2 * pad, width + 2 * pad))
    xp[:, pad : pad + height, pad : pad + width] = x
    k = w.shape[-1]
    out_h = (height + 2 * pad - k) // stride + 1
    out_w = (width + 2 * pad - k) // stride + 1
    out = np.zeros((w.shape[0], out_h, out_w))
    for o in range(w.shape[0]):
        for i in range(out_h):
            for j in range(out_w):
                total = b[o]
                for c in range(channels):
                    for u in range(k):
                        for v in range(k):
                            total += xp[c, i * stride + u, j * stride + v] * w[o, c, u, v]
                out[o, i, j] = total
    return out


def naive_pool(x, k, stride, pad):
    channels, height, width = x.shape
    xp = np.full((channels, height + 2 * pad, width + 2 * pad), -np.inf)
    xp[:, pad : pad + height, pad : pad + width] = x
    out_h = (height + 2 * pad - k) // stride + 1
    out_w = (width + 2 * pad - k) // stride + 1
    out = np.zeros((channels, out_h, out_w))
    for c in range(channels):
        for i in range(out_h):
            for j in range(out_w):
                out[c, i, j] = max(xp[c, i * stride + u, j * stride + v] for u in range(k) for v in range(k))
    return out


def naive_lrn(x, params):
    channels = x.shape[0]
    before = (params.local_size - 1) // 2
    after = params.local_size - 1 - before
    out = np.zeros_like(x)
    for c in range(channels):
        total = np.zeros(x.shape[1:])
        for d in range(max(0, c - before), min(channels - 1, c + after) + 1):
            total += x[d] ** 2
        out[c] = x[c] / (params.k + params.alpha / params.local_size * total) ** params.beta
    return out


def naive_fc(x, w, b):
    flat = x.ravel()
    return np.array([b[o] + sum(w[o, i] * flat[i] for i in range(flat.size)) for o in range(w.shape[0])])


class ConvForwardTest(unittest.TestCase):
    def test_conv_forward_success_zero_input(self):
        """Verify a zero input with zero bias gives zero."""
        out = layers.conv_forward(np.zeros((1, 3, 3)), LayerSpec.conv(3, 1), np.ones((1, 1, 3, 3)), np.zeros(1))
        assert_array_equal(np.zeros((1, 1, 1)), out)

    def test_conv_forward_success_ones(self):
        """Verify all-ones input and filter with bias 1 sums to 10."""
        out = layers.conv_forward(np.ones((1, 3, 3)), LayerSpec.conv(3, 1), np.ones((1, 1, 3, 3)), np.ones(1))
        self.assertEqual((1, 1, 1), out.shape)
        self.assertEqual(10.0, out[0, 0, 0])

    def test_conv_forward_success_matches_nested_loops(self):
        """Verify convolution against the nested-loop oracle on seeded random shapes."""
        rng = np.random.default_rng(1)
        cases = [(np.zeros((4, 16, 16)), 3, 2, 1, 1)]
        for _ in range(100):
            k = int(rng.integers(1, 4))
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, 2))
            size = int(rng.integers(k, 8))
            cases.append((np.zeros((int(rng.integers(1, 4)), size, size + int(rng.integers(0, 2)))), k, stride, pad, int(rng.integers(1, 4))))
        for template, k, stride, pad, out in cases:
            x = rng.normal(size=template.shape)
            w = rng.normal(size=(out, x.shape[0], k, k))
            b = rng.normal(size=out)
            got = layers.conv_forward(x, LayerSpec.conv(k, out, stride, pad), w, b)
            assert_allclose(naive_conv(x, w, b, stride, pad), got, atol=1e-6)

    def test_conv_forward_fails_channel_mismatch(self):
        """Verify mismatched channels raise a configuration error naming the layer."""
        with self.assertRaises(ConfigurationError) as ctx:
            layers.conv_forward(np.zeros((2, 5, 5)), LayerSpec.conv(3, 1), np.zeros((1, 1, 3, 3)), np.zeros(1), index=3)
        self.assertEqual(3, ctx.exception.layer_index)
        self.assertIn("layer 3", str(ctx.exception))

    def test_conv_forward_fails_input_smaller_than_kernel(self):
        """Verify an input smaller than the kernel is rejected."""
        with self.assertRaises(ConfigurationError):
            layers.conv_forward(np.zeros((1, 2, 2)), LayerSpec.conv(3, 1), np.zeros((1, 1, 3, 3)), np.zeros(1))


class MaxPoolForwardTest(unittest.TestCase):
    def test_maxpool_forward_success(self):
        """Verify the maximum of a 2x2 window."""
        out = layers.maxpool_forward(np.array([[[1.0, 2.0], [3.0, 4.0]]]), LayerSpec.pool(2, 2))
        assert_array_equal(np.array([[[4.0]]]), out)

    def test_maxpool_forward_success_constant(self):
        """Verify a constant input pools to the same constant."""
        out = layers.maxpool_forward(np.full((2, 6, 6), 7.0), LayerSpec.pool(3, 2))
        assert_array_equal(np.full((2, 2, 2), 7.0), out)

    def test_maxpool_forward_success_matches_nested_loops(self):
        """Verify pooling equals the oracle exactly on seeded random shapes."""
        rng = np.random.default_rng(2)
        for _ in range(100):
            k = int(rng.integers(1, 4))
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, 2)) if k > 1 else 0
            x = rng.normal(size=(int(rng.integers(1, 4)), int(rng.integers(k, 9)), int(rng.integers(k, 9))))
            got = layers.maxpool_forward(x, LayerSpec.pool(k, stride, pad))
            assert_array_equal(naive_pool(x, k, stride, pad), got)


class ReluForwardTest(unittest.TestCase):
    def test_relu_forward_success(self):
        """Verify negatives clip to zero."""
        assert_array_equal(np.array([0.0, 0.0, 2.0]), layers.relu_forward(np.array([-1.0, 0.0, 2.0])))

    def test_relu_forward_success_idempotent(self):
        """Verify relu(relu(x)) == relu(x)."""
        x = np.random.default_rng(3).normal(size=(3, 4, 4))
        once = layers.relu_forward(x)
        assert_array_equal(once, layers.relu_forward(once))
        assert_array_equal(np.zeros(5), layers.relu_forward(-np.ones(5)))


class LrnForwardTest(unittest.TestCase):
    def test_lrn_forward_success_zero_input(self):
        """Verify zeros stay zeros."""
        out = layers.lrn_forward(np.zeros((5, 3, 3)), LayerSpec.local_response_norm())
        assert_array_equal(np.zeros((5, 3, 3)), out)

    def test_lrn_forward_success_hand_value(self):
        """Verify n=1, k=1, alpha=1, beta=1 maps 1 to 0.5."""
        spec = LayerSpec.local_response_norm(LrnParams(local_size=1, alpha=1.0, beta=1.0, k=1.0))
        assert_allclose(np.array([[[0.5]]]), layers.lrn_forward(np.ones((1, 1, 1)), spec))

    def test_lrn_forward_success_matches_formula(self):
        """Verify the normalisation against the direct formula on seeded random tensors."""
        rng = np.random.default_rng(4)
        for _ in range(100):
            params = LrnParams(
                local_size=int(rng.integers(1, 6)),
                alpha=float(rng.uniform(1e-4, 1.0)),
                beta=float(rng.uniform(0.5, 1.0)),
                k=float(rng.uniform(1.0, 2.0)),
            )
            x = rng.normal(size=(int(rng.integers(1, 8)), int(rng.integers(1, 5)), int(rng.integers(1, 5))))
            got = layers.lrn_forward(x, LayerSpec.local_response_norm(params))
            assert_allclose(naive_lrn(x, params), got, atol=1e-6)

    def test_lrn_forward_fails_missing_params(self):
        """Verify a layer without parameters is a configuration error."""
        spec = LayerSpec(layers.LayerKind.LRN)
        with self.assertRaises(ConfigurationError):
            layers.lrn_forward(np.ones((1, 1, 1)), spec)


class FcForwardTest(unittest.TestCase):
    def test_fc_forward_success_identity(self):
        """Verify an identity matrix returns the flattened input."""
        x = np.arange(12.0).reshape(3, 2, 2)
        out = layers.fc_forward(x, np.eye(12), np.zeros(12), input_shape=(3, 2, 2))
        assert_array_equal(x.ravel(), out.ravel())
        self.assertEqual((12, 1, 1), out.shape)

    def test_fc_forward_success_zero_weights(self):
        """Verify zero weights return the bias."""
        out = layers.fc_forward(np.ones((1, 2, 2)), np.zeros((3, 4)), np.array([1.0, 2.0, 3.0]))
        assert_array_equal(np.array([1.0, 2.0, 3.0]), out.ravel())

    def test_fc_forward_success_matches_dot_products(self):
        """Verify against explicit dot products on seeded random cases."""
        rng = np.random.default_rng(5)
        for _ in range(100):
            x = rng.normal(size=(int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4))))
            w = rng.normal(size=(int(rng.integers(1, 5)), x.size))
            b = rng.normal(size=w.shape[0])
            assert_allclose(naive_fc(x, w, b), layers.fc_forward(x, w, b, x.shape).ravel(), atol=1e-6)

    def test_fc_forward_fails_shape_mismatch(self):
        """Verify an input of the wrong shape is rejected."""
        with self.assertRaises(ConfigurationError):
            layers.fc_forward(np.ones((1, 3, 3)), np.zeros((2, 8)), np.zeros(2), input_shape=(8, 1, 1))


class SoftmaxTest(unittest.TestCase):
    def test_softmax_success_symmetric(self):
        """Verify equal logits give equal probabilities."""
        assert_allclose([0.5, 0.5], layers.softmax([0.0, 0.0]))

    def test_softmax_success_closed_form(self):
        """Verify (ln 3, 0) gives (0.75, 0.25)."""
        assert_allclose([0.75, 0.25], layers.softmax([np.log(3.0), 0.0]), atol=1e-12)

    def test_softmax_success_large_logits(self):
        """Verify large logits do not overflow."""
        out = layers.softmax([1000.0, 0.0])
        assert_allclose([1.0, 0.0], out)
        self.assertTrue(np.all(np.isfinite(out)))

    def test_softmax_success_matches_formula(self):
        """Verify against exp(x) / sum(exp(x)) on seeded random vectors."""
        rng = np.random.default_rng(6)
        for _ in range(100):
            logits = rng.normal(size=int(rng.integers(2, 10)))
            expected = np.exp(logits) / np.exp(logits).sum()
            got = layers.softmax(logits)
            assert_allclose(expected, got, atol=1e-6)
            self.assertAlmostEqual(1.0, got.sum(), delta=1e-9)

    def test_softmax_fails_single_class(self):
        """Verify fewer than two logits is a configuration error."""
        with self.assertRaises(ConfigurationError):
            layers.softmax([1.0])

    def test_softmax_fails_non_finite(self):
        """Verify non-finite logits raise a numeric error."""
        with self.assertRaises(NumericError):
            layers.softmax([np.nan, 0.0])


class LayerSpecTest(unittest.TestCase):
    def test_layer_spec_fails_bad_stride(self):
        """Verify a zero stride is rejected."""
        with self.assertRaises(ConfigurationError):
            LayerSpec.conv(3, 1, stride=0)

    def test_output_shape_success(self):
        """Verify the output size formula floor((in + 2p - k) / s) + 1."""
        self.assertEqual((96, 55, 55), LayerSpec.conv(11, 96, stride=4).output_shape((3, 227, 227)))
        self.assertEqual((4, 3, 3), LayerSpec.pool(3, 2, 1).output_shape((4, 6, 6)))


class BackwardKernelTest(unittest.TestCase):
    def _numeric(self, f, x, grad_out, eps=1e-6):
        num = np.zeros_like(x)
        flat = num.reshape(-1)
        for i in range(x.size):
            plus = x.copy()
            minus = x.copy()
            plus.reshape(-1)[i] += eps
            minus.reshape(-1)[i] -= eps
            flat[i] = (np.sum(f(plus) * grad_out) - np.sum(f(minus) * grad_out)) / (2 * eps)
        return num

    def test_conv_backward_success_matches_differences(self):
        """Verify conv input and weight gradients against central differences."""
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 2, 6, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        grad_out = rng.normal(size=layers.conv_batch(x, w, b, 2, 1).shape)
        gx, gw, gb = layers.conv_backward(x, w, 2, 1, grad_out)
        assert_allclose(self._numeric(lambda v: layers.conv_batch(v, w, b, 2, 1), x, grad_out), gx, atol=1e-6)
        assert_allclose(self._numeric(lambda v: layers.conv_batch(x, v, b, 2, 1), w, grad_out), gw, atol=1e-6)
        assert_allclose(grad_out.sum(axis=(0, 2, 3)), gb)

    def test_lrn_backward_success_matches_differences(self):
        """Verify the LRN input gradient against central differences."""
        rng = np.random.default_rng(8)
        params = LrnParams(local_size=3, alpha=0.5, beta=0.75, k=1.0)
        x = rng.normal(size=(2, 5, 2, 2))
        grad_out = rng.normal(size=x.shape)
        expected = self._numeric(lambda v: layers.lrn_batch(v, params), x, grad_out)
        assert_allclose(expected, layers.lrn_backward(x, params, grad_out), atol=1e-6)

    def test_maxpool_backward_success_routes_to_first_maximum(self):
        """Verify the gradient goes to the first maximal element only."""
        x = np.array([[[[1.0, 5.0], [5.0, 0.0]]]])
        got = layers.maxpool_backward(x, 2, 2, 0, np.array([[[[2.0]]]]))
        assert_array_equal(np.array([[[[0.0, 2.0], [0.0, 0.0]]]]), got)


if __name__ == "__main__":
    unittest.main()
