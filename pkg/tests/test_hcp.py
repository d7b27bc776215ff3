"""Hot-channel compensation: residual bounds, scoring, selection, patched
operands against a three-product oracle, the compensated product's exact
recovery identities, mode equivalence, and error ordering."""

import numpy as np
import pytest

from nvfp4lab import fp_codec as fc
from nvfp4lab import hcp
from nvfp4lab import microscale as ms
from nvfp4lab.dense import PriorSpec, gemm, sample_prior
from nvfp4lab.errors import ConfigError, DimensionError

SIX_CONFIGS = ("S-O1-W", "S-O1-A", "D-O1-W", "D-O1-A", "S-O2-B", "D-O2-B")


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


def channelwise(t, mode=fc.RTN):
    return ms.quantize_tensor(t, ms.VEC_1X16, mode, axis=0)


def draw(seed, shape, dist="gaussian"):
    return sample_prior(PriorSpec(dist, 1.0, seed), shape)


class TestConfig:
    @pytest.mark.parametrize("label", SIX_CONFIGS)
    def test_parse_label_roundtrip(self, label):
        cfg = hcp.parse_hcp_config(label, k=4)
        assert cfg.label() == label
        assert cfg.k == 4

    def test_first_order_both_rejected(self):
        with pytest.raises(ConfigError):
            hcp.parse_hcp_config("S-O1-B")

    @pytest.mark.parametrize("target", ["w", "a"])
    def test_second_order_single_sided_rejected(self, target):
        with pytest.raises(ConfigError):
            hcp.HcpConfig("single", "o2", target, k=4)

    def test_bad_strings(self):
        for text in ("SO2B", "X-O2-B", "S-O3-B", "S-O2-Q", ""):
            with pytest.raises(ConfigError):
                hcp.parse_hcp_config(text)

    def test_negative_k_rejected(self):
        with pytest.raises(ConfigError):
            hcp.HcpConfig("single", "o2", "b", k=-1)

    def test_default_hot_channel_count(self):
        assert hcp.default_hot_channel_count(2048) == 187  # ceil(0.0909 * 2048)
        assert hcp.default_hot_channel_count(64) == 6


class TestResiduals:
    def test_grid_aligned_zero_residual(self):
        t = np.array([[6, 3, 1.5, 0.5, 2, 4, 1, 0, -6, -3, -1.5, -0.5, -2, -4, -1, 0]],
                     dtype=float).T @ np.ones((1, 4))
        t = np.ascontiguousarray(t)
        q = channelwise(t)
        np.testing.assert_array_equal(hcp.residuals(t, q), np.zeros_like(t))

    def test_requantized_dequantization_zero_residual(self):
        t = draw(0, (16, 16))
        back = ms.dequantize_tensor(channelwise(t))
        np.testing.assert_array_equal(hcp.residuals(back, channelwise(back)),
                                      np.zeros_like(t))

    def test_residual_bounded_by_half_block_step(self):
        t = draw(1, (16, 16))
        q = channelwise(t)
        res = hcp.residuals(t, q)
        # coarsest code gap is 2; half of it per block, in decoded units
        half_step = ms._per_element(q.scales.decoded, q.shape, q.layout, q.axis)
        bound = half_step * q.scales.s_dec * (1 + 1e-12)
        assert np.all(np.abs(res) <= bound)

    def test_shape_mismatch(self):
        t = draw(2, (16, 4))
        with pytest.raises(DimensionError):
            hcp.residuals(t[:, :2], channelwise(t))


class TestChannelScores:
    def test_zero_residuals_zero_score(self):
        s = hcp.channel_scores(np.zeros((8, 4)), np.zeros((8, 3)))
        np.testing.assert_array_equal(s, np.zeros(8))

    def test_unit_row_example(self):
        dx = np.zeros((8, 4))
        dx[2] = 1.0
        s = hcp.channel_scores(dx, np.zeros((8, 5)))
        assert s[2] == 1.0 and np.all(s[np.arange(8) != 2] == 0.0)

    def test_matches_scalar_loop_oracle(self):
        dx = draw(3, (8, 5))
        dw = draw(4, (8, 7))
        want = np.empty(8)
        for j in range(8):
            acc_x = sum(abs(dx[j, c]) for c in range(5)) / 5
            acc_w = sum(abs(dw[j, c]) for c in range(7)) / 7
            want[j] = acc_x + acc_w
        np.testing.assert_allclose(hcp.channel_scores(dx, dw), want, rtol=1e-14)

    def test_unnormalized_variant(self):
        dx = draw(5, (8, 5))
        dw = draw(6, (8, 7))
        got = hcp.channel_scores(dx, dw, normalized=False)
        np.testing.assert_allclose(
            got, np.abs(dx).sum(axis=1) + np.abs(dw).sum(axis=1), rtol=1e-14)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            hcp.channel_scores(np.zeros((8, 4)), np.zeros((9, 4)))


class TestSelection:
    def test_basic(self):
        chosen = hcp.select_hot_channels([3.0, 1.0, 2.0], 2)
        np.testing.assert_array_equal(chosen.indices, [0, 2])

    def test_all_equal_ties_to_lower_indices(self):
        chosen = hcp.select_hot_channels(np.ones(5), 2)
        np.testing.assert_array_equal(chosen.indices, [0, 1])

    def test_k_zero(self):
        assert hcp.select_hot_channels([1.0, 2.0], 0).indices.size == 0

    def test_k_too_large(self):
        with pytest.raises(DimensionError):
            hcp.select_hot_channels([1.0], 2)

    def test_scores_aligned_with_indices(self):
        chosen = hcp.select_hot_channels([5.0, 9.0, 1.0, 7.0], 2, step=3)
        np.testing.assert_array_equal(chosen.indices, [1, 3])
        np.testing.assert_array_equal(chosen.scores, [9.0, 7.0])
        assert chosen.step_created == 3


class TestPatchedOperands:
    def test_k_zero_returns_dequantized(self):
        w = draw(7, (32, 8))
        x = draw(8, (32, 4))
        qw, qx = channelwise(w), channelwise(x)
        cfg = hcp.HcpConfig("single", "o2", "b", k=0, patch_precision="exact")
        empty = hcp.select_hot_channels(np.zeros(32), 0)
        w_out, x_out = hcp.build_patched_operands(w, x, qw, qx, empty, cfg)
        np.testing.assert_array_equal(w_out, ms.dequantize_tensor(qw))
        np.testing.assert_array_equal(x_out, ms.dequantize_tensor(qx))

    def test_zero_residual_patch_is_inert(self):
        grid = np.array([6, 3, 1.5, 0.5, 2, 4, 1, 0.5, -6, -3, -1.5, -0.5, -2, -4, -1, -0.5])
        w = np.ascontiguousarray(np.outer(grid, np.ones(4)))
        x = np.ascontiguousarray(np.outer(grid[::-1], np.ones(4)))
        qw, qx = channelwise(w), channelwise(x)
        cfg = hcp.HcpConfig("single", "o2", "b", k=4, patch_precision="exact")
        channels = hcp.select_hot_channels(np.arange(16.0), 4)
        w_out, x_out = hcp.build_patched_operands(w, x, qw, qx, channels, cfg)
        np.testing.assert_allclose(gemm(w_out.T, x_out),
                                   gemm(ms.dequantize_tensor(qw).T,
                                        ms.dequantize_tensor(qx)), rtol=1e-12)

    def test_three_product_oracle(self):
        w = draw(9, (32, 32))
        x = draw(10, (32, 32))
        qw, qx = channelwise(w), channelwise(x)
        w_hat, x_hat = ms.dequantize_tensor(qw), ms.dequantize_tensor(qx)
        dw, dx = w - w_hat, x - x_hat
        channels = hcp.select_hot_channels(hcp.channel_scores(dx, dw), 4)
        cfg = hcp.HcpConfig("single", "o2", "b", k=4, patch_precision="exact")
        w_out, x_out = hcp.build_patched_operands(w, x, qw, qx, channels, cfg)
        idx = channels.indices
        want = (gemm(w_hat.T, x_hat)
                + gemm(dw[idx].T, x_hat[idx])
                + gemm(w_hat[idx].T, dx[idx]))
        assert rel_err(gemm(w_out.T, x_out), want) < 1e-10

    def test_out_of_range_channel(self):
        w = draw(11, (16, 4))
        x = draw(12, (16, 4))
        qw, qx = channelwise(w), channelwise(x)
        cfg = hcp.HcpConfig("single", "o2", "b", k=1, patch_precision="exact")
        bad = hcp.ChannelSet(indices=np.array([99]), scores=np.array([1.0]))
        with pytest.raises(IndexError):
            hcp.build_patched_operands(w, x, qw, qx, bad, cfg)


class TestCompensatedProduct:
    def test_k_zero_equals_plain_quantized_product(self):
        w = draw(13, (48, 16))
        x = draw(14, (48, 8))
        for order, target in (("o1", "a"), ("o2", "b")):
            cfg = hcp.HcpConfig("single", order, target, k=0)
            got = hcp.hcp_matmul(w, x, cfg)
            want = ms.qgemm(channelwise(w).transpose2d(), channelwise(x))
            np.testing.assert_array_equal(got, want)

    def test_expansion_identity_no_compensation(self):
        for i in range(5):
            w = draw(100 + i, (32, 32))
            x = draw(200 + i, (32, 32))
            w_hat, x_hat = (ms.dequantize_tensor(channelwise(w)),
                            ms.dequantize_tensor(channelwise(x)))
            dw, dx = w - w_hat, x - x_hat
            lhs = gemm(w_hat.T, x_hat)
            rhs = (gemm(w.T, x) - gemm(w.T, dx) - gemm(dw.T, x) + gemm(dw.T, dx))
            assert rel_err(lhs, rhs) < 1e-10

    def test_second_order_full_patch_identity(self):
        w = draw(15, (32, 32))
        x = draw(16, (32, 32))
        cfg = hcp.HcpConfig("single", "o2", "b", k=32, patch_precision="exact")
        got = hcp.hcp_matmul(w, x, cfg)
        w_hat, x_hat = (ms.dequantize_tensor(channelwise(w)),
                        ms.dequantize_tensor(channelwise(x)))
        want = gemm(w.T, x) - gemm((w - w_hat).T, (x - x_hat))
        assert rel_err(got, want) < 1e-10

    def test_first_order_activation_full_patch_identity(self):
        w = draw(17, (32, 32))
        x = draw(18, (32, 32))
        cfg = hcp.HcpConfig("single", "o1", "a", k=32, patch_precision="exact")
        got = hcp.hcp_matmul(w, x, cfg)
        w_hat = ms.dequantize_tensor(channelwise(w))
        # remaining error is exactly the single weight-residual term
        assert rel_err(got, gemm(w_hat.T, x)) < 1e-10
        assert rel_err(got, gemm(w.T, x) - gemm((w - w_hat).T, x)) < 1e-10

    def test_first_order_weight_full_patch_identity(self):
        w = draw(19, (32, 32))
        x = draw(20, (32, 32))
        cfg = hcp.HcpConfig("single", "o1", "w", k=32, patch_precision="exact")
        got = hcp.hcp_matmul(w, x, cfg)
        x_hat = ms.dequantize_tensor(channelwise(x))
        assert rel_err(got, gemm(w.T, x_hat)) < 1e-10

    @pytest.mark.parametrize("order,target", [("o1", "a"), ("o1", "w"), ("o2", "b")])
    def test_single_dual_equivalence_exact_patches(self, order, target):
        for i in range(5):
            w = draw(300 + i, (32, 16))
            x = draw(400 + i, (32, 16))
            single = hcp.hcp_matmul(
                w, x, hcp.HcpConfig("single", order, target, 8, "exact"))
            dual = hcp.hcp_matmul(
                w, x, hcp.HcpConfig("dual", order, target, 8, "exact"))
            assert rel_err(single, dual) < 1e-10

    def test_quantized_patches_reduce_error(self):
        w = draw(21, (64, 32))
        x = draw(22, (64, 32))
        ref = gemm(w.T, x)
        base = hcp.mse(hcp.hcp_matmul(w, x, hcp.HcpConfig("single", "o2", "b", 0)), ref)
        patched = hcp.mse(hcp.hcp_matmul(w, x, hcp.HcpConfig("single", "o2", "b", 16)), ref)
        assert patched < base

    def test_error_ordering_on_patched_contraction(self):
        wins = 0
        trials = 20
        for i in range(trials):
            w = draw(500 + i, (64, 64))
            x = draw(600 + i, (64, 64))
            w_hat, x_hat = (ms.dequantize_tensor(channelwise(w)),
                            ms.dequantize_tensor(channelwise(x)))
            channels = hcp.select_hot_channels(
                hcp.channel_scores(x - x_hat, w - w_hat), 8)
            mses = hcp.restricted_product_mses(w, x, channels)
            if mses["second_order"] < mses["first_order"] < mses["baseline"]:
                wins += 1
        assert wins / trials >= 0.95

    def test_mse_nonincreasing_in_patch_count(self):
        for i in range(3):
            w = draw(700 + i, (64, 64))
            x = draw(800 + i, (64, 64))
            ref = gemm(w.T, x)
            prev = None
            for k in (0, 8, 16, 32, 64):
                cfg = hcp.HcpConfig("single", "o2", "b", k, "exact")
                value = hcp.mse(hcp.hcp_matmul(w, x, cfg), ref)
                if prev is not None:
                    assert value <= prev * (1 + 1e-12)
                prev = value

    def test_persisted_channels_reused_bitwise(self):
        w = draw(23, (32, 16))
        x = draw(24, (32, 16))
        cfg = hcp.HcpConfig("single", "o2", "b", 4)
        w_hat, x_hat = (ms.dequantize_tensor(channelwise(w)),
                        ms.dequantize_tensor(channelwise(x)))
        channels = hcp.select_hot_channels(
            hcp.channel_scores(x - x_hat, w - w_hat), 4, step=0)
        fresh = hcp.hcp_matmul(w, x, cfg)
        reused = hcp.hcp_matmul(w, x, cfg, channels=channels)
        np.testing.assert_array_equal(fresh, reused)

    def test_k_exceeding_channels_rejected(self):
        w = draw(25, (16, 4))
        x = draw(26, (16, 4))
        with pytest.raises(ConfigError):
            hcp.hcp_matmul(w, x, hcp.HcpConfig("single", "o2", "b", 17))

    def test_channel_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            hcp.hcp_matmul(np.ones((16, 4)), np.ones((32, 4)),
                           hcp.HcpConfig("single", "o2", "b", 0))

    def test_tile_layout_path(self):
        w = draw(27, (32, 16))
        x = draw(28, (32, 16))
        cfg = hcp.HcpConfig("single", "o2", "b", 8)
        got = hcp.hcp_matmul(w, x, cfg, layout=ms.TILE_16X16)
        ref = gemm(w.T, x)
        base = gemm(ms.dequantize_tensor(ms.quantize_tensor(w, ms.TILE_16X16)).T,
                    ms.dequantize_tensor(ms.quantize_tensor(x, ms.TILE_16X16)))
        assert hcp.mse(got, ref) < hcp.mse(base, ref)


class TestMse:
    def test_identical(self):
        t = draw(29, (8, 8))
        assert hcp.mse(t, t) == 0.0

    def test_unit_offset(self):
        t = draw(30, (8, 8))
        assert hcp.mse(t + 1.0, t) == 1.0

    def test_matches_summation_oracle(self):
        a = draw(31, (8, 8))
        b = draw(32, (8, 8))
        acc = 0.0
        for i in range(8):
            for j in range(8):
                acc += (a[i, j] - b[i, j]) ** 2
        np.testing.assert_allclose(hcp.mse(a, b), acc / 64.0, rtol=1e-13)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            hcp.mse(np.ones((2, 2)), np.ones((2, 3)))
