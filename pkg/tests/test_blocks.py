import numpy as np
import pytest

import oracles
from crynet import blocks as B
from crynet.errors import HeadIndivisibleError, ScaleIndivisibleError, ShapeMismatchError
from gradcases import BLOCKS, TOL, check_block
from crynet.nn import Conv1d
from crynet.tensor import Tensor, backward, no_grad


def randomize(module, rng, scale=0.5):
    for _, p in module.named_parameters():
        p.data[...] = rng.normal(scale=scale, size=p.shape)


def zero_params(module):
    for _, p in module.named_parameters():
        p.data[...] = 0.0


# ---------------------------------------------------------------- SE / RSE


class TestSE:
    def test_zero_weights_halve_input(self):
        se = B.SEBlock(8, 4)
        zero_params(se)
        x = np.random.default_rng(0).normal(size=(8, 5))
        np.testing.assert_array_equal(B.se_block(x, se).data, 0.5 * x)

    def test_zero_input(self):
        se = B.SEBlock(8, 4, rng=np.random.default_rng(1))
        np.testing.assert_array_equal(B.se_block(np.zeros((8, 5)), se).data, 0.0)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        se = B.SEBlock(8, 4, rng=rng)
        x = rng.normal(size=(8, 6))
        want = oracles.se(x, se.w1.data, se.w2.data)
        np.testing.assert_allclose(B.se_block(x, se).data, want, rtol=0, atol=1e-12)

    def test_gate_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(0)
        se = B.SEBlock(16, 4, rng=rng)
        randomize(se, rng, 3.0)
        s = se.gate(rng.normal(size=(3, 16, 9))).data
        assert s.shape == (3, 16)
        assert np.all((s > 0) & (s < 1))

    def test_indivisible_reduction(self):
        with pytest.raises(ShapeMismatchError):
            B.SEBlock(6, 4)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            B.se_block(np.ones((4, 3)), B.SEBlock(8, 4))


class TestRSE:
    def test_zero_weights(self):
        se = B.SEBlock(8, 4)
        zero_params(se)
        x = np.random.default_rng(0).normal(size=(8, 5))
        np.testing.assert_array_equal(B.rse_block(x, se).data, 1.5 * x)

    def test_zero_input(self):
        se = B.SEBlock(8, 4, rng=np.random.default_rng(2))
        np.testing.assert_array_equal(B.rse_block(np.zeros((8, 4)), se).data, 0.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_residual_identity(self, seed):
        rng = np.random.default_rng(seed)
        se = B.SEBlock(8, 4, rng=rng)
        x = rng.normal(size=(8, 7))
        out = B.rse_block(x, se).data
        s = B.se_block(x, se).data
        # the sum is bit-exact; subtracting x back can lose the last bit
        assert np.array_equal(out, x + s)
        np.testing.assert_allclose(out - x, s, rtol=0, atol=4 * np.finfo(float).eps * np.abs(out).max())


# ---------------------------------------------------------------- MCA


class TestMCA:
    def test_output_is_four_times_width(self):
        mca = B.MultiScaleChannelAttention(8, 8, rng=np.random.default_rng(0))
        assert B.mca_block(np.ones((8, 16)), mca).shape == (32, 16)

    def test_bypass_returns_concatenation(self):
        rng = np.random.default_rng(0)
        mca = B.MultiScaleChannelAttention(4, 4, rng=rng)
        x = rng.normal(size=(1, 4, 10))
        cat = mca.features(Tensor(x)).data
        mca.gate_bypass = True
        np.testing.assert_array_equal(mca(x).data, cat)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        mca = B.MultiScaleChannelAttention(4, 4, rng=rng)
        randomize(mca, rng)
        x = rng.normal(size=(4, 9))
        np.testing.assert_allclose(B.mca_block(x, mca).data, oracles.mca(x, mca), rtol=0, atol=1e-12)

    def test_gate_width_four_c(self):
        mca = B.MultiScaleChannelAttention(8, 8)
        assert mca.w2.shape[0] == 32


# ---------------------------------------------------------------- temporal-channel attention


class TestTemporalAttention:
    def test_zero_conv_gives_half(self):
        ta = B.TemporalAttention(7)
        zero_params(ta)
        a = B.temporal_attention(np.random.default_rng(0).normal(size=(5, 11)), ta).data
        np.testing.assert_array_equal(a, np.full((1, 1, 11), 0.5))

    def test_constant_input_constant_interior(self):
        ta = B.TemporalAttention(7, rng=np.random.default_rng(0))
        a = B.temporal_attention(np.full((3, 20), 1.7), ta).data[0, 0]
        assert np.ptp(a[3:-3]) == 0.0  # frames whose window avoids the zero pads

    @pytest.mark.parametrize("c", [1, 4, 9])
    def test_shape_independent_of_channels(self, c):
        ta = B.TemporalAttention(7)
        assert B.temporal_attention(np.ones((2, c, 13)), ta).shape == (2, 1, 13)


class TestTciaFuse:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.x = rng.normal(size=(1, 4, 6))
        self.x_rse = rng.normal(size=(1, 4, 6))

    def test_neutral_mask_identity_conv(self):
        conv = Conv1d(4, 4, 1)
        conv.weight.data[...] = np.eye(4)[:, :, None]
        out = B.tcia_fuse(self.x, self.x_rse, np.ones((1, 1, 6)), np.ones((1, 4)), conv).data
        np.testing.assert_allclose(out, self.x + self.x_rse, atol=1e-15)

    def test_zero_temporal_mask(self):
        conv = Conv1d(4, 4, 1, rng=np.random.default_rng(3))
        out = B.tcia_fuse(self.x, self.x_rse, np.zeros((1, 1, 6)), np.ones((1, 4)), conv).data
        np.testing.assert_array_equal(out, self.x)

    def test_mask_is_rank_one(self):
        rng = np.random.default_rng(5)
        a_t, a_c = rng.uniform(size=6), rng.uniform(size=4)
        assert np.linalg.matrix_rank(np.outer(a_c, a_t)) == 1

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            B.tcia_fuse(self.x, self.x_rse, np.ones((1, 1, 5)), np.ones((1, 4)), Conv1d(4, 4, 1))


# ---------------------------------------------------------------- Res2Block


class TestRes2Block:
    def test_shape_at_default_width(self):
        blk = B.Res2Block(128, 2, rng=np.random.default_rng(0))
        assert B.mca_rse_res2block(np.ones((128, 10)), blk).shape == (128, 10)

    @pytest.mark.parametrize("training", [True, False])
    @pytest.mark.parametrize("use_rse", [True, False])
    def test_zero_weights_reduce_to_identity(self, training, use_rse):
        # every conv emits 0, so ReLU and BN give 0, SE(0) = 0, and only the residual survives
        blk = B.Res2Block(8, 3, use_rse=use_rse)
        for name, p in blk.named_parameters():
            if "conv" in name or name.endswith(("w1", "w2")) or "fuse" in name:
                p.data[...] = 0.0
        blk.train(training)
        x = np.random.default_rng(0).normal(size=(2, 8, 9))
        np.testing.assert_array_equal(blk(x).data, x)

    def test_gradient_reaches_input_through_residual(self):
        blk = B.Res2Block(8, 2, rng=np.random.default_rng(0))
        for name, p in blk.named_parameters():
            if name.startswith("se."):
                p.data[...] = -50.0  # saturate the output gate near 0
        x = Tensor(np.random.default_rng(1).normal(size=(1, 8, 6)), requires_grad=True)
        backward(blk(x).sum())
        assert np.linalg.norm(x.grad) > 0.5

    def test_scale_indivisible(self):
        with pytest.raises(ScaleIndivisibleError):
            B.Res2Block(10, 2, scale=4, reduction=2)


# ---------------------------------------------------------------- differential attention


class TestDifferentialAttention:
    @pytest.mark.parametrize("seed", range(10))
    def test_lambda_zero_is_single_softmax(self, seed):
        rng = np.random.default_rng(seed)
        da = B.DifferentialAttention(8, 4, rng=rng)
        da.lam.data[...] = 0.0
        z = rng.normal(size=(5, 8))
        want = oracles.single_softmax_attention(z, da.w_q1.data, da.w_k1.data, da.w_v.data, 4)
        np.testing.assert_allclose(B.differential_attention(z, da).data, want, rtol=0, atol=1e-12)

    def test_identical_maps_with_unit_lambda_cancel(self):
        rng = np.random.default_rng(0)
        da = B.DifferentialAttention(8, 2, rng=rng)
        da.w_q2.data[...] = da.w_q1.data
        da.w_k2.data[...] = da.w_k1.data
        da.lam.data[...] = 1.0
        w = da.combined_weights(rng.normal(size=(6, 8))).data
        np.testing.assert_array_equal(w, 0.0)

    @pytest.mark.parametrize("lam", [0.0, 0.5, 0.9])
    def test_single_token_closed_form(self, lam):
        rng = np.random.default_rng(1)
        da = B.DifferentialAttention(8, 4, lambda_init=lam, rng=rng)
        z = rng.normal(size=(1, 8))
        want = (1.0 - lam) * (z @ da.w_v.data) * z
        np.testing.assert_allclose(B.differential_attention(z, da).data, want, rtol=0, atol=1e-14)

    def test_lambda_is_a_trainable_scalar(self):
        da = B.DifferentialAttention(8, 4)
        names = dict(da.named_parameters())
        assert names["lam"].shape == () and names["lam"].requires_grad
        assert float(names["lam"].data) == 0.5

    def test_batched_tokens(self):
        da = B.DifferentialAttention(8, 4, rng=np.random.default_rng(0))
        z = np.random.default_rng(1).normal(size=(3, 4, 8))
        out = da(z).data
        for i in range(3):
            np.testing.assert_allclose(out[i], da(z[i]).data, atol=1e-14)

    def test_head_indivisible(self):
        with pytest.raises(HeadIndivisibleError):
            B.DifferentialAttention(10, 4)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            B.DifferentialAttention(8, 4)(np.ones((3, 6)))


# ---------------------------------------------------------------- attentive statistics pooling


class TestAttentiveStatsPooling:
    def _uniform(self, c):
        asp = B.AttentiveStatsPooling(c, 4)
        zero_params(asp)
        return asp

    def test_constant_input(self):
        out = B.attentive_stats_pooling(np.full((3, 8), 2.5), self._uniform(3)).data[0]
        np.testing.assert_allclose(out[:3], 2.5, atol=1e-15)
        np.testing.assert_allclose(out[3:], 1e-4, rtol=1e-12)  # sqrt of the 1e-8 floor

    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(0)
        asp = B.AttentiveStatsPooling(4, 6, rng=rng)
        randomize(asp, rng)
        a = asp.weights(Tensor(rng.normal(size=(2, 4, 9)))).data
        np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-12)

    def test_uniform_attention_gives_plain_stats(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 11))
        out = self._uniform(3)(x).data
        np.testing.assert_allclose(out[:, :3], x.mean(axis=-1), atol=1e-12)
        np.testing.assert_allclose(out[:, 3:], x.std(axis=-1), atol=1e-12)


# ---------------------------------------------------------------- shape contracts and gradients


@pytest.mark.parametrize("c", [8, 16, 128])
@pytest.mark.parametrize("t", [1, 7, 100])
def test_blocks_preserve_shapes(c, t):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(c, t))
    with no_grad():
        assert B.se_block(x, B.SEBlock(c, 4, rng=rng)).shape == (c, t)
        assert B.rse_block(x, B.SEBlock(c, 4, rng=rng)).shape == (c, t)
        assert B.mca_block(x, B.MultiScaleChannelAttention(c, c, rng=rng)).shape == (4 * c, t)
        assert B.TemporalChannelAttention(c, rng=rng)(x).shape == (c, t)
        blk = B.Res2Block(c, 2, rng=rng).eval()
        assert B.mca_rse_res2block(x, blk).shape == (c, t)


@pytest.mark.parametrize("name", BLOCKS)
@pytest.mark.parametrize("seed", range(3))
def test_block_gradients(name, seed):
    assert check_block(name, seed) < TOL


def test_zero_tol_only_masks_joint_zeros():
    from crynet.gradcheck import _rel_err
    assert _rel_err(np.array([0.0]), np.array([2e-11])) > 1e-4
    assert _rel_err(np.array([0.0]), np.array([2e-11]), zero_tol=1e-9) == 0.0
    assert _rel_err(np.array([1e-9]), np.array([5e-9]), zero_tol=1e-9) > 1e-4


def test_tensor_scale_uses_largest_entry():
    from crynet.gradcheck import _rel_err
    a, c = np.array([1.0, 1e-7 + 1e-10]), np.array([1.0, 1e-7])
    assert _rel_err(a, c) > 1e-4
    assert _rel_err(a, c, scale="tensor") < 1e-9


def test_kink_margin_sees_relu_and_max_pool():
    from crynet import functional as F
    from crynet.gradcheck import kink_margin
    assert kink_margin(lambda: Tensor(np.array([0.5, -2e-6])).relu()) == pytest.approx(2e-6)
    assert kink_margin(lambda: F.max_pool_time(np.array([[0.0, 1.0, 1.25]]), 3)) == pytest.approx(0.25)
