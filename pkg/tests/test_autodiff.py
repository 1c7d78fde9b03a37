import numpy as np
import pytest

from rcnnvo import autodiff as ad
from rcnnvo.autodiff import Rng, Tensor

from conftest import check_gradients


class TestTensorBasics:
    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            Tensor([1.0, np.nan])

    def test_rejects_inf(self):
        with pytest.raises(ValueError):
            Tensor(np.array([np.inf]))

    def test_shape_and_data(self):
        t = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert t.shape == (2, 2)
        assert t.data.dtype == np.float64


class TestBackwardContract:
    def test_sum_grad_all_ones(self):
        x = Tensor(np.arange(12, dtype=float).reshape(3, 4), requires_grad=True)
        x.sum().backward()
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_square_grad(self):
        x = Tensor([1.0, -2.0], requires_grad=True)
        (x * x).sum().backward()
        assert np.allclose(x.grad, [2.0, -4.0])

    def test_non_scalar_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError):
            (x * x).backward()

    def test_repeated_backward_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = (x * x).sum()
        loss.backward()
        with pytest.raises(RuntimeError):
            loss.backward()

    def test_leaf_reused_twice_in_graph(self):
        # x contributes through two paths; grads must accumulate once per use
        x = Tensor([3.0], requires_grad=True)
        loss = (x * x + x).sum()
        loss.backward()
        assert np.allclose(x.grad, [7.0])

    def test_backward_linearity(self):
        def run(scale):
            x = Tensor([0.3, -0.4, 1.2], requires_grad=True)
            (scale * ad.tanh(x)).sum().backward()
            return x.grad

        assert np.allclose(run(5.0), 5.0 * run(1.0), atol=1e-15)


class TestElementwiseExamples:
    def test_relu_values(self):
        out = ad.relu(Tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_relu_identity_on_positives(self):
        x = np.array([0.5, 1.0, 7.25])
        assert np.array_equal(ad.relu(Tensor(x)).data, x)

    def test_relu_subgradient(self):
        x = Tensor([-1.0, 2.0], requires_grad=True)
        ad.relu(x).sum().backward()
        assert np.array_equal(x.grad, [0.0, 1.0])

    def test_relu_gradient_zero_at_zero(self):
        x = Tensor([0.0], requires_grad=True)
        ad.relu(x).sum().backward()
        assert x.grad[0] == 0.0

    def test_sigmoid_tanh_at_zero(self):
        assert ad.sigmoid(Tensor(0.0)).item() == 0.5
        assert ad.tanh(Tensor(0.0)).item() == 0.0

    def test_sigmoid_derivative_at_zero(self):
        x = Tensor([0.0], requires_grad=True)
        ad.sigmoid(x).sum().backward()
        assert abs(x.grad[0] - 0.25) < 1e-15

    def test_sigmoid_extreme_inputs_stay_finite(self):
        out = ad.sigmoid(Tensor([-800.0, 800.0]))
        assert np.all(np.isfinite(out.data))
        assert out.data[0] == 0.0 and out.data[1] == 1.0


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(Tensor(np.eye(2)), Tensor([[3.0], [4.0]]))
        assert np.array_equal(out.data, [[3.0], [4.0]])

    def test_matvec(self):
        out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([1.0, 1.0]))
        assert np.array_equal(out.data, [3.0, 7.0])

    def test_shape_mismatch_names_both(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 2\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


class TestDropout:
    def test_rate_zero_identity(self):
        x = Tensor([1.0, 2.0, 3.0])
        out = ad.dropout(x, 0.0, training=True, rng=Rng(1))
        assert np.array_equal(out.data, x.data)

    def test_inference_identity(self):
        x = Tensor([1.0, 2.0, 3.0])
        out = ad.dropout(x, 0.5, training=False)
        assert np.array_equal(out.data, x.data)

    def test_rate_one_rejected(self):
        with pytest.raises(ValueError):
            ad.dropout(Tensor([1.0]), 1.0, training=True, rng=Rng(1))

    def test_inverted_scaling_preserves_mean(self):
        x = Tensor(np.ones(100_000))
        out = ad.dropout(x, 0.5, training=True, rng=Rng(99))
        assert abs(out.data.mean() - 1.0) < 0.02

    def test_masks_bit_identical_across_runs(self):
        x = Tensor(np.ones(1000))
        a = ad.dropout(x, 0.3, training=True, rng=Rng(7, 3))
        b = ad.dropout(x, 0.3, training=True, rng=Rng(7, 3))
        assert np.array_equal(a.data, b.data)

    def test_gradient_matches_mask(self):
        x = Tensor(np.ones(1000), requires_grad=True)
        out = ad.dropout(x, 0.5, training=True, rng=Rng(5))
        out.sum().backward()
        kept = out.data != 0
        assert np.all(x.grad[kept] == 2.0)
        assert np.all(x.grad[~kept] == 0.0)


class TestConv2d:
    def test_identity_kernel(self):
        out = ad.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 1, 1))),
                        Tensor(np.zeros(1)), stride=1, padding=0)
        assert out.shape == (1, 3, 3)
        assert np.array_equal(out.data, np.ones((1, 3, 3)))

    def test_sum_kernel_brute_force(self):
        img = np.arange(1.0, 10.0).reshape(1, 3, 3)
        out = ad.conv2d(Tensor(img), Tensor(np.ones((1, 1, 3, 3))),
                        Tensor(np.zeros(1)), stride=1, padding=0)
        assert out.shape == (1, 1, 1)
        assert out.data[0, 0, 0] == 45.0

    def test_kitti_scale_output_shape(self):
        # first encoder layer applied to a full-size stacked pair
        x = Tensor(np.zeros((6, 384, 1280)))
        w = Tensor(np.zeros((64, 6, 7, 7)))
        out = ad.conv2d(x, w, Tensor(np.zeros(64)), stride=2, padding=3)
        assert out.shape == (64, 192, 640)

    def test_channel_mismatch_names_shapes(self):
        with pytest.raises(ValueError, match=r"3 channels.*expects 6"):
            ad.conv2d(Tensor(np.zeros((3, 8, 8))), Tensor(np.zeros((4, 6, 3, 3))),
                      Tensor(np.zeros(4)))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            ad.conv2d(Tensor(np.zeros((1, 8, 8))), Tensor(np.zeros((1, 1, 2, 2))),
                      Tensor(np.zeros(1)))

    def test_output_shape_formula_all_table_configs(self):
        # (k, stride, padding) combinations used by the encoder
        for k, stride, pad in [(7, 2, 3), (5, 2, 2), (3, 1, 1), (3, 2, 1)]:
            h = w = 64
            x = Tensor(np.zeros((1, 2, h, w)))
            wt = Tensor(np.zeros((3, 2, k, k)))
            out = ad.conv2d(x, wt, Tensor(np.zeros(3)), stride=stride, padding=pad)
            expect = (h + 2 * pad - k) // stride + 1
            assert out.shape == (1, 3, expect, expect)

    def test_batched_equals_per_sample(self, nprng):
        x = nprng.uniform(-1, 1, (3, 2, 9, 9))
        w = nprng.uniform(-1, 1, (4, 2, 3, 3))
        b = nprng.uniform(-1, 1, 4)
        batched = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), 2, 1)
        for i in range(3):
            single = ad.conv2d(Tensor(x[i]), Tensor(w), Tensor(b), 2, 1)
            assert np.allclose(batched.data[i], single.data, atol=1e-12)


class TestGradientChecks:
    """Every primitive against central finite differences, >= 100 trials each."""

    N_TRIALS = 100

    def _random(self, rng, shape):
        return rng.uniform(-1.0, 1.0, shape)

    def test_add_mul_sub(self, nprng):
        for _ in range(self.N_TRIALS):
            a = self._random(nprng, (3, 2))
            b = self._random(nprng, (3, 2))
            check_gradients(lambda x, y: (x * y + x - y).sum(), [a, b])

    def test_broadcast_add(self, nprng):
        for _ in range(self.N_TRIALS // 4):
            a = self._random(nprng, (4, 3))
            b = self._random(nprng, (3,))
            check_gradients(lambda x, y: ((x + y) * (x + y)).sum(), [a, b])

    def test_matmul(self, nprng):
        for _ in range(self.N_TRIALS):
            a = self._random(nprng, (2, 3))
            b = self._random(nprng, (3, 2))
            check_gradients(lambda x, y: (ad.matmul(x, y) * ad.matmul(x, y)).sum(),
                            [a, b])

    def test_matvec(self, nprng):
        for _ in range(self.N_TRIALS // 4):
            a = self._random(nprng, (3, 4))
            v = self._random(nprng, (4,))
            check_gradients(lambda x, y: (ad.matmul(x, y) * ad.matmul(x, y)).sum(),
                            [a, v])

    def test_sigmoid_tanh_relu(self, nprng):
        for _ in range(self.N_TRIALS):
            x = self._random(nprng, (5,)) * 2
            check_gradients(lambda t: (ad.sigmoid(t) * ad.tanh(t)).sum(), [x])
            # keep entries away from the relu kink where the fd oracle is invalid
            y = x.copy()
            y[np.abs(y) < 1e-3] = 0.5
            check_gradients(lambda t: (ad.relu(t) * ad.relu(t)).sum(), [y])

    def test_conv2d(self, nprng):
        for _ in range(self.N_TRIALS // 10):
            x = self._random(nprng, (2, 2, 6, 6))
            w = self._random(nprng, (3, 2, 3, 3))
            b = self._random(nprng, (3,))
            for stride, pad in [(1, 1), (2, 1), (2, 0)]:
                check_gradients(
                    lambda xx, ww, bb: (lambda y: (y * y).sum())(
                        ad.conv2d(xx, ww, bb, stride, pad)),
                    [x, w, b])

    def test_reshape_index_transpose_stack(self, nprng):
        for _ in range(self.N_TRIALS // 4):
            x = self._random(nprng, (3, 4))
            check_gradients(lambda t: (t.reshape(12) * t.reshape(12)).sum(), [x])
            check_gradients(lambda t: (t[1] * t[1]).sum(), [x])
            check_gradients(lambda t: (ad.transpose(t) * ad.transpose(t)).sum(), [x])
            a = self._random(nprng, (4,))
            b = self._random(nprng, (4,))
            check_gradients(
                lambda u, v: (lambda m: (m * m).sum())(ad.stack_rows([u, v])),
                [a, b])

    def test_dropout_gradient(self, nprng):
        for _ in range(self.N_TRIALS // 10):
            x = self._random(nprng, (40,))
            seed = int(nprng.integers(0, 2**31))

            def loss(t):
                return (lambda d: (d * d).sum())(
                    ad.dropout(t, 0.4, training=True, rng=Rng(seed)))

            check_gradients(loss, [x])


class TestRng:
    def test_same_seed_same_stream(self):
        a = Rng(123, 5).random(16)
        b = Rng(123, 5).random(16)
        assert np.array_equal(a, b)

    def test_streams_differ(self):
        a = Rng(123, 1).random(16)
        b = Rng(123, 2).random(16)
        assert not np.array_equal(a, b)

    def test_split_matches_direct_construction(self):
        assert np.array_equal(Rng(9).split(4).random(8), Rng(9, 4).random(8))

    def test_integers_inclusive(self):
        draws = Rng(3).integers(5, 6, size=200)
        assert set(np.unique(draws)) == {5, 6}

    def test_permutation_deterministic(self):
        assert np.array_equal(Rng(11, 2).permutation(10), Rng(11, 2).permutation(10))


class TestNoRecord:
    def test_no_graph_inside_context(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with ad.no_record():
            out = (x * x).sum()
        assert not out.requires_grad
        out.backward()  # nothing recorded, so nothing propagates
        assert x.grad is None
