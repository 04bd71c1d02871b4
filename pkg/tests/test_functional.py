import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crynet import functional as F
from crynet.errors import EmptyTimeError, InputTooShortError, ShapeMismatchError, TimeMismatchError
from crynet.gradcheck import finite_difference_check
from crynet.tensor import Tensor, backward, flop_counter


def _conv(x, k, **kw):
    return F.conv1d(np.array([x], float), np.array([[k]], float), **kw).data[0]


class TestConv1d:
    def test_valid(self):
        np.testing.assert_array_equal(_conv([1, 2, 3, 4], [1, 0, -1], padding="valid"), [-2, -2])

    def test_same_zero_padded(self):
        np.testing.assert_array_equal(_conv([1, 2, 3, 4], [1, 0, -1]), [-2, -2, -2, 3])

    def test_dilated_valid(self):
        np.testing.assert_array_equal(
            _conv([1, 2, 3, 4, 5], [1, 0, -1], dilation=2, padding="valid"), [-4])

    def test_bias_added_per_output_channel(self):
        x = np.ones((2, 5))
        w = np.zeros((3, 2, 3))
        out = F.conv1d(x, w, np.array([1.0, 2.0, 3.0])).data
        np.testing.assert_array_equal(out, np.repeat([[1.0], [2.0], [3.0]], 5, axis=1))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            F.conv1d(np.ones((2, 5)), np.ones((1, 3, 3)))

    def test_too_short_for_valid(self):
        with pytest.raises(InputTooShortError):
            F.conv1d(np.ones((1, 4)), np.ones((1, 1, 3)), dilation=2, padding="valid")

    def test_same_padding_split(self):
        assert F.same_padding(3, 1) == (1, 1)
        assert F.same_padding(4, 1) == (1, 2)
        assert F.same_padding(3, 3) == (3, 3)

    @settings(max_examples=40, deadline=None)
    @given(k=st.integers(1, 5), d=st.integers(1, 4), t=st.integers(1, 20),
           cin=st.integers(1, 3), cout=st.integers(1, 3), seed=st.integers(0, 2**16))
    def test_dilation_equals_zero_stuffed_kernel(self, k, d, t, cin, cout, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(cin, t))
        w = rng.normal(size=(cout, cin, k))
        stuffed = np.zeros((cout, cin, (k - 1) * d + 1))
        stuffed[:, :, ::d] = w
        a = F.conv1d(x, w, dilation=d).data
        b = F.conv1d(x, stuffed, dilation=1).data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 2, 9))
        w = rng.normal(size=(4, 2, 3))
        batched = F.conv1d(x, w, dilation=2).data
        for i in range(3):
            np.testing.assert_allclose(batched[i], F.conv1d(x[i], w, dilation=2).data, atol=1e-14)

    @pytest.mark.parametrize("seed", range(4))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        w = Tensor(rng.normal(size=(3, 2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        g = rng.normal(size=(2, 3, 7))
        x = rng.normal(size=(2, 2, 7))
        assert finite_difference_check(lambda t: (F.conv1d(t, w, b, dilation=2) * g).sum(), x) < 1e-7
        assert finite_difference_check(lambda t: (F.conv1d(x, t, b, dilation=2) * g).sum(), w.data) < 1e-7
        assert finite_difference_check(lambda t: (F.conv1d(x, w, t, dilation=2) * g).sum(), b.data) < 1e-7

    def test_flops_rule(self):
        with flop_counter() as fc:
            F.conv1d(np.ones((2, 10)), np.ones((3, 2, 5)))
        assert fc.total == 600
        with flop_counter() as fc:
            F.conv1d(np.ones((2, 10)), np.ones((3, 2, 5)), np.zeros(3))
        assert fc.total == 630


class TestDense:
    def test_identity(self):
        np.testing.assert_array_equal(F.dense(np.array([3.0, 7.0]), np.eye(2), np.zeros(2)).data, [3, 7])

    def test_hand_evaluated(self):
        np.testing.assert_array_equal(
            F.dense(np.array([2.0, 3.0]), np.array([[1.0, 1.0]]), np.array([1.0])).data, [6])

    def test_zero_weights_give_bias(self):
        b = np.array([0.5, -1.5])
        np.testing.assert_array_equal(F.dense(np.array([9.0, 9.0, 9.0]), np.zeros((2, 3)), b).data, b)

    def test_batch_rows(self):
        out = F.dense(np.ones((4, 3)), np.ones((2, 3)))
        assert out.shape == (4, 2)

    def test_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            F.dense(np.ones(3), np.ones((2, 4)))

    def test_flops(self):
        with flop_counter() as fc:
            F.dense(np.ones(4), np.ones((2, 4)))
        assert fc.total == 16


class TestPointwise:
    def test_relu(self):
        np.testing.assert_array_equal(F.pointwise(np.array([-1.0, 0.0, 2.0]), "relu").data, [0, 0, 2])

    def test_sigmoid_open_interval(self):
        y = F.pointwise(np.array([-30.0, 0.0, 30.0]), "sigmoid").data
        assert y[1] == 0.5
        assert np.all((y > 0) & (y < 1))

    def test_unknown(self):
        with pytest.raises(ValueError):
            F.pointwise(np.ones(2), "gelu")


class TestSoftmax:
    def test_examples(self):
        np.testing.assert_array_equal(F.softmax(np.zeros(2)).data, [0.5, 0.5])
        np.testing.assert_array_equal(F.softmax(np.array([1000.0, 1000.0])).data, [0.5, 0.5])
        np.testing.assert_allclose(F.softmax(np.array([np.log(2.0), 0.0])).data, [2 / 3, 1 / 3],
                                   atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**16), shift=st.floats(-500, 500), axis=st.sampled_from([0, 1, -1]))
    def test_sums_to_one_and_shift_invariant(self, seed, shift, axis):
        x = np.random.default_rng(seed).normal(scale=5, size=(4, 6))
        p = F.softmax(x, axis).data
        np.testing.assert_allclose(p.sum(axis=axis), 1.0, atol=1e-12)
        np.testing.assert_allclose(F.softmax(x + shift, axis).data, p, atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(0)
        g = rng.normal(size=(3, 5))
        assert finite_difference_check(lambda t: (F.softmax(t, -1) * g).sum(), rng.normal(size=(3, 5))) < 1e-6


class TestPooling:
    def test_gap_examples(self):
        np.testing.assert_array_equal(F.global_avg_pool_time(np.array([[1.0, 3.0], [2.0, 4.0]])).data, [2, 3])
        np.testing.assert_array_equal(F.global_avg_pool_time(np.full((3, 5), 2.5)).data, [2.5] * 3)
        np.testing.assert_array_equal(F.global_avg_pool_time(np.array([[4.0], [5.0]])).data, [4, 5])

    def test_gap_empty_time(self):
        with pytest.raises(EmptyTimeError):
            F.global_avg_pool_time(np.ones((2, 3, 1))[:, :, :0])

    def test_gap_gradient_is_one_over_t(self):
        x = Tensor(np.ones((2, 4)), requires_grad=True)
        backward(F.global_avg_pool_time(x).sum())
        np.testing.assert_array_equal(x.grad, np.full((2, 4), 0.25))

    def test_max_pool_examples(self):
        np.testing.assert_array_equal(F.max_pool_time(np.array([[1.0, 5.0, 2.0]]), 3).data, [[5, 5, 5]])
        x = np.random.default_rng(0).normal(size=(2, 7))
        np.testing.assert_array_equal(F.max_pool_time(x, 1).data, x)
        np.testing.assert_array_equal(F.max_pool_time(np.full((2, 5), -3.0), 3).data, np.full((2, 5), -3.0))

    def test_max_pool_ties_go_to_earliest(self):
        x = Tensor(np.array([[2.0, 2.0, 2.0]]), requires_grad=True)
        backward(F.max_pool_time(x, 3).sum())
        # windows: [pad,2,2] -> idx0, [2,2,2] -> idx0, [2,2,pad] -> idx1
        np.testing.assert_array_equal(x.grad, [[2.0, 1.0, 0.0]])

    def test_max_pool_gradient(self):
        rng = np.random.default_rng(3)
        g = rng.normal(size=(2, 3, 8))
        assert finite_difference_check(lambda t: (F.max_pool_time(t, 3) * g).sum(),
                                       rng.normal(size=(2, 3, 8))) < 1e-7


class TestConcatSplit:
    def test_four_parts(self):
        parts = [np.random.default_rng(i).normal(size=(5, 7)) for i in range(4)]
        assert F.concat_channels(parts).shape == (20, 7)

    def test_single_part_identity(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        np.testing.assert_array_equal(F.concat_channels([x]).data, x)

    def test_roundtrip_bit_exact(self):
        rng = np.random.default_rng(1)
        parts = [rng.normal(size=(2, c, 6)) for c in (1, 3, 2)]
        back = F.split_channels(F.concat_channels(parts), [1, 3, 2])
        for a, b in zip(parts, back):
            assert np.array_equal(a, b.data)

    def test_time_mismatch(self):
        with pytest.raises(TimeMismatchError):
            F.concat_channels([np.ones((2, 3)), np.ones((2, 4))])

    def test_gradient_splits_back(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones((1, 3)), requires_grad=True)
        w = np.arange(9.0).reshape(3, 3)
        backward((F.concat_channels([a, b]) * w).sum())
        np.testing.assert_array_equal(a.grad, w[:2])
        np.testing.assert_array_equal(b.grad, w[2:])


class TestBatchNorm:
    def _bn(self, x, gamma=None, beta=None, training=True):
        c = x.shape[1]
        rm, rv = np.zeros(c), np.ones(c)
        gamma = np.ones(c) if gamma is None else gamma
        beta = np.zeros(c) if beta is None else beta
        return F.batch_norm_1d(x, gamma, beta, rm, rv, training), rm, rv

    def test_constant_input_is_centered(self):
        out, _, _ = self._bn(np.full((2, 3, 5), 7.0))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_zero_gamma_gives_beta(self):
        beta = np.array([1.0, -2.0])
        out, _, _ = self._bn(np.random.default_rng(0).normal(size=(3, 2, 4)), np.zeros(2), beta)
        np.testing.assert_array_equal(out.data, np.broadcast_to(beta[None, :, None], (3, 2, 4)))

    def test_standardized_input_is_fixpoint(self):
        x = np.random.default_rng(0).normal(size=(4, 3, 50))
        x = (x - x.mean(axis=(0, 2), keepdims=True)) / x.std(axis=(0, 2), keepdims=True)
        out, _, _ = self._bn(x)
        np.testing.assert_allclose(out.data, x, atol=1e-4)

    def test_running_stats_update_only_in_train(self):
        x = np.random.default_rng(0).normal(loc=3.0, size=(2, 2, 5))
        _, rm, rv = self._bn(x, training=True)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2)))
        _, rm2, rv2 = self._bn(x, training=False)
        np.testing.assert_array_equal(rm2, 0.0)
        np.testing.assert_array_equal(rv2, 1.0)

    def test_eval_uses_running_stats(self):
        x = np.full((1, 2, 3), 2.0)
        out = F.batch_norm_1d(x, np.ones(2), np.zeros(2), np.array([1.0, 2.0]), np.array([4.0, 1.0]), False, eps=0.0)
        np.testing.assert_allclose(out.data[0, :, 0], [0.5, 0.0])

    @pytest.mark.parametrize("training", [True, False])
    def test_gradient(self, training):
        rng = np.random.default_rng(0)
        g = rng.normal(size=(3, 2, 5))
        gamma, beta = rng.normal(size=2), rng.normal(size=2)

        def f(t):
            return (F.batch_norm_1d(t, gamma, beta, np.zeros(2), np.ones(2), training) * g).sum()

        assert finite_difference_check(f, rng.normal(size=(3, 2, 5))) < 1e-6
