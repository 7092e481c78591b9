"""Engine mechanics and per-op contracts: identity cases, hand-computed
values, and error paths. Finite-difference coverage lives in
test_gradients.py."""

import numpy as np
import pytest

from mrtvqa import autodiff as ad
from mrtvqa.autodiff import Tensor


def t(data, rg=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=rg)


class TestTensor:
    def test_data_length_matches_shape(self):
        x = t(np.zeros((2, 3, 4)))
        assert x.size == 24 and x.shape == (2, 3, 4)

    def test_default_dtype_is_float32(self):
        x = Tensor([[1, 2], [3, 4]])
        assert x.dtype == np.float32

    def test_grad_matches_shape_after_backward(self):
        x = t(np.ones((3, 2)), rg=True)
        ad.backward(ad.sum_all(ad.mul(x, 2.0)))
        assert x.grad.shape == x.data.shape


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = t(np.random.randn(4, 3), rg=True)
        ad.backward(ad.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((4, 3)))

    def test_fanout_accumulates(self):
        x = t([3.0], rg=True)
        ad.backward(ad.sum_all(ad.add(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0])

    def test_separate_backwards_equal_joint_backward_exactly(self):
        data = np.random.default_rng(0).standard_normal((3, 3))

        def l1(x):
            return ad.sum_all(ad.tanh(x))

        def l2(x):
            return ad.sum_all(ad.sigmoid(x))

        x_joint = t(data, rg=True)
        ad.backward(ad.add(l1(x_joint), l2(x_joint)))

        x_sep = t(data, rg=True)
        ad.backward(l1(x_sep))
        ad.backward(l2(x_sep))
        np.testing.assert_array_equal(x_joint.grad, x_sep.grad)

    def test_non_scalar_loss_rejected(self):
        x = t(np.ones(3), rg=True)
        y = ad.mul(x, 2.0)
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(y)
        ad.backward(ad.sum_all(y))  # clean up the live record

    def test_double_backward_is_state_error(self):
        x = t(np.ones(3), rg=True)
        loss = ad.sum_all(x)
        ad.backward(loss)
        with pytest.raises(ad.RecordStateError):
            ad.backward(loss)

    def test_backward_without_record_is_state_error(self):
        x = t([1.0], rg=True)
        with pytest.raises(ad.RecordStateError):
            ad.backward(x)

    def test_no_grad_suppresses_taping(self):
        x = t(np.ones(3), rg=True)
        with ad.no_grad():
            y = ad.sum_all(ad.mul(x, 3.0))
        assert not y.requires_grad
        assert ad.active_record() is None


class TestMatmul:
    def test_identity(self):
        b = np.random.default_rng(2).standard_normal((3, 3))
        out = ad.matmul(t(np.eye(3)), t(b))
        np.testing.assert_array_equal(out.data, b)

    def test_hand_computed(self):
        out = ad.matmul(t([[1, 2], [3, 4]]), t([[1], [1]]))
        np.testing.assert_array_equal(out.data, [[3], [7]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(t(np.zeros((2, 3))), t(np.zeros((2, 3))))


class TestConv:
    def test_conv2d_identity_kernel(self):
        x = np.random.default_rng(3).standard_normal((1, 1, 5, 5))
        w = np.ones((1, 1, 1, 1))
        out = ad.conv2d(t(x), t(w), t(np.zeros(1)))
        np.testing.assert_allclose(out.data, x)

    def test_conv2d_impulse_response(self):
        x = np.zeros((1, 1, 5, 5))
        x[0, 0, 2, 2] = 1.0
        w = np.ones((1, 1, 3, 3))
        out = ad.conv2d(t(x), t(w), t(np.zeros(1)), pad=1).data[0, 0]
        expect = np.zeros((5, 5))
        expect[1:4, 1:4] = 1.0
        np.testing.assert_array_equal(out, expect)

    def test_conv2d_non_integral_output_rejected(self):
        with pytest.raises(ValueError, match="non-integral"):
            ad.conv2d(t(np.zeros((1, 1, 5, 5))), t(np.zeros((1, 1, 2, 2))), None, stride=2)

    def test_conv3d_identity_kernel(self):
        x = np.random.default_rng(4).standard_normal((1, 1, 3, 3, 3))
        out = ad.conv3d(t(x), t(np.ones((1, 1, 1, 1, 1))), t(np.zeros(1)))
        np.testing.assert_allclose(out.data, x)

    def test_conv3d_impulse_response(self):
        x = np.zeros((1, 1, 5, 5, 5))
        x[0, 0, 2, 2, 2] = 1.0
        out = ad.conv3d(t(x), t(np.ones((1, 1, 3, 3, 3))), None, pad=1).data[0, 0]
        assert out[1:4, 1:4, 1:4].sum() == 27 and out.sum() == 27


class TestBatchNorm:
    def _bn(self, x, training=True, gamma=None, beta=None):
        C = x.shape[1]
        return ad.batch_norm(
            x, gamma, beta, np.zeros(C), np.ones(C), training=training
        )

    def test_normalized_input_is_fixed_point(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((64, 3, 4, 4))
        x -= x.mean(axis=(0, 2, 3), keepdims=True)
        x /= x.std(axis=(0, 2, 3), keepdims=True)
        out = self._bn(t(x)).data
        np.testing.assert_allclose(out, x, atol=1e-4)

    def test_constant_input_gives_shift(self):
        x = np.full((4, 2, 3), 7.0)
        beta = t([1.5, -2.0])
        gamma = t([3.0, 3.0])
        out = ad.batch_norm(
            t(x), gamma, beta, np.zeros(2), np.ones(2), training=True
        ).data
        np.testing.assert_allclose(out[:, 0], 1.5, atol=1e-4)
        np.testing.assert_allclose(out[:, 1], -2.0, atol=1e-4)

    def test_train_statistics(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((32, 4, 5, 5)) * 3.0 + 1.0
        out = self._bn(t(x)).data
        assert abs(out.mean(axis=(0, 2, 3))).max() < 1e-5
        assert np.abs(out.var(axis=(0, 2, 3)) - 1.0).max() < 1e-3

    def test_batch_of_one_rejected(self):
        with pytest.raises(ValueError, match="batch size"):
            self._bn(t(np.zeros((1, 2, 3))))

    def test_running_stats_updated_and_used_in_eval(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((16, 2, 4)) + 5.0
        rm, rv = np.zeros(2), np.ones(2)
        for _ in range(200):
            ad.batch_norm(t(x), None, None, rm, rv, training=True)
        assert np.abs(rm - x.mean(axis=(0, 2))).max() < 1e-2
        out = ad.batch_norm(t(x), None, None, rm, rv, training=False).data
        assert abs(out.mean()) < 0.05


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss = ad.softmax_cross_entropy(t(np.zeros((5, 4))), np.arange(5) % 4)
        assert abs(float(loss.data) - np.log(4)) < 1e-9

    def test_saturated_case(self):
        logits = np.zeros((1, 3))
        logits[0, 1] = 1000.0
        loss = ad.softmax_cross_entropy(t(logits), np.array([1]))
        assert float(loss.data) < 1e-6

    def test_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(8)
        logits = t(rng.standard_normal((3, 4)), rg=True)
        targets = np.array([0, 3, 2])
        ad.backward(ad.softmax_cross_entropy(logits, targets))
        z = np.exp(logits.data - logits.data.max(axis=1, keepdims=True))
        p = z / z.sum(axis=1, keepdims=True)
        p[np.arange(3), targets] -= 1.0
        np.testing.assert_allclose(logits.grad, p / 3.0, atol=1e-12)

    def test_out_of_range_target(self):
        with pytest.raises(IndexError):
            ad.softmax_cross_entropy(t(np.zeros((2, 3))), np.array([0, 3]))


class TestDeterminism:
    def test_forward_bit_identical(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((4, 8)).astype(np.float32)
        w = rng.standard_normal((8, 8)).astype(np.float32)

        def run():
            return ad.tanh(ad.matmul(Tensor(x), Tensor(w))).data.tobytes()

        assert run() == run()


class TestMisc:
    def test_embedding_out_of_range(self):
        w = t(np.zeros((5, 2)), rg=True)
        with pytest.raises(IndexError):
            ad.embedding(w, np.array([5]))

    def test_global_avg_pool_matches_mean(self):
        x = np.random.default_rng(10).standard_normal((2, 3, 4, 5))
        out = ad.global_avg_pool(t(x), 2)
        np.testing.assert_allclose(out.data, x.mean(axis=(2, 3)))

    def test_channel_affine_identity_and_mismatch(self):
        x = np.random.default_rng(11).standard_normal((2, 3, 4))
        out = ad.channel_affine(t(x), t(np.ones(3)), t(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)
        with pytest.raises(ad.ShapeError):
            ad.channel_affine(t(x), t(np.ones(4)), t(np.zeros(4)))

    def test_where_rows_routes_by_mask(self):
        a, b = t(np.ones((3, 2))), t(np.zeros((3, 2)))
        out = ad.where_rows(np.array([True, False, True]), a, b)
        np.testing.assert_array_equal(out.data[:, 0], [1, 0, 1])
