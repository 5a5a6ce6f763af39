import unittest
import sys
import os

import numpy as np

# Add src directory to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from blocks import (BlockConfig, ChannelAttention, DepthPerceptionModule, DualAttentionModule, LocalBranch,
                    NonLocalBranch, ResidualBlock, ResidualSkipBlock, SpatialAttention, SwinBlockPair,
                    WindowAttentionBlock, cyclic_shift, cyclic_unshift, merge_windows, partition_windows,
                    zero_parameters)
from errors import ConfigurationError, ShapeError
from tensorcore import ParamStore, Tensor, backward, precision, reset_tape
from tensorcore import functional as F


def _features(shape, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=shape))


def _ones(n, h, w):
    return Tensor(np.ones((n, 1, h, w)))


class TestResidualBlocks(unittest.TestCase):
    def test_shape_preserved(self):
        block = ResidualBlock(ParamStore(), "rb", 16)
        self.assertEqual(block(_features((1, 16, 8, 8))).shape, (1, 16, 8, 8))

    def test_zero_projection_is_identity(self):
        block = ResidualBlock(ParamStore(), "rb", 8)
        zero_parameters([block.projection.weight, block.projection.bias])
        f = _features((2, 8, 6, 6))
        np.testing.assert_array_equal(block(f).data, f.data)

    def test_channel_mismatch(self):
        block = ResidualBlock(ParamStore(), "rb", 8)
        with self.assertRaises(ShapeError):
            block(_features((1, 4, 6, 6)))

    def test_skip_block_shapes(self):
        block = ResidualSkipBlock(ParamStore(), "rsb", 32)
        out = block(_features((1, 32, 16, 16)), _features((1, 32, 16, 16), seed=1))
        self.assertEqual(out.shape, (1, 32, 16, 16))

    def test_skip_block_with_zero_skip_passes_decoder_features(self):
        c = 4
        store = ParamStore()
        block = ResidualSkipBlock(store, "rsb", c)
        identity = np.zeros((c, 2 * c, 1, 1))
        identity[np.arange(c), np.arange(c)] = 1.0
        block.fuse.weight.data[...] = identity
        f_dec = _features((1, c, 5, 5))
        skip = Tensor(np.zeros((1, c, 5, 5)))
        np.testing.assert_allclose(block(f_dec, skip).data, block.residual(f_dec).data, rtol=1e-6)

    def test_skip_block_spatial_mismatch(self):
        block = ResidualSkipBlock(ParamStore(), "rsb", 4)
        with self.assertRaises(ShapeError):
            block(_features((1, 4, 8, 8)), _features((1, 4, 4, 4)))


class TestWindowAttention(unittest.TestCase):
    def setUp(self):
        self.config = BlockConfig(channels=8, window_size=4, heads=2)

    def test_partition_merge_roundtrip(self):
        f = _features((2, 8, 8, 8))
        windows = partition_windows(f, 4)
        np.testing.assert_array_equal(merge_windows(windows, 2, 8, 8, 4).data, f.data)

    def test_shift_unshift_roundtrip(self):
        f = _features((1, 8, 8, 8))
        np.testing.assert_array_equal(cyclic_unshift(cyclic_shift(f, 2), 2).data, f.data)

    def test_zero_value_and_mlp_output_is_identity(self):
        block = WindowAttentionBlock(ParamStore(), "wa", self.config, shift=2)
        zero_parameters([block.value.weight, block.value.bias, block.mlp_out.weight, block.mlp_out.bias])
        f = _features((1, 8, 8, 8))
        np.testing.assert_array_equal(block(f).data, f.data)

    def test_attention_rows_sum_to_one(self):
        block = WindowAttentionBlock(ParamStore(), "wa", self.config, shift=0)
        block(_features((2, 8, 8, 8)))
        # 2 images x 4 windows, 2 heads, 16 tokens per window
        self.assertEqual(block.last_attention.shape, (8, 2, 16, 16))
        np.testing.assert_allclose(block.last_attention.sum(axis=-1), 1.0, atol=1e-6)

    def test_indivisible_window(self):
        block = WindowAttentionBlock(ParamStore(), "wa", self.config, shift=0)
        with self.assertRaises(ConfigurationError):
            block(_features((1, 8, 6, 6)))

    def test_heads_must_divide_channels(self):
        with self.assertRaises(ConfigurationError):
            BlockConfig(channels=6, heads=4)

    def test_swin_pair_residual_identity(self):
        pair = SwinBlockPair(ParamStore(), "swin", self.config)
        for block in pair.blocks:
            zero_parameters([block.value.weight, block.value.bias, block.mlp_out.weight, block.mlp_out.bias])
        f = _features((1, 8, 8, 8))
        np.testing.assert_array_equal(pair(f).data, f.data)

    def test_swin_pair_shapes_and_shift(self):
        pair = SwinBlockPair(ParamStore(), "swin", self.config)
        self.assertEqual([b.shift for b in pair.blocks], [0, 2])
        self.assertEqual(pair(_features((1, 8, 8, 8))).shape, (1, 8, 8, 8))


class TestDepthPerception(unittest.TestCase):
    def setUp(self):
        self.config = BlockConfig(channels=8, window_size=4, heads=2)

    def test_nonlocal_unit_depth_keeps_swin_output(self):
        branch = NonLocalBranch(ParamStore(), "nl", self.config)
        f = _features((1, 8, 8, 8))
        np.testing.assert_array_equal(branch(f, _ones(1, 8, 8)).data, branch.swin(f).data)

    def test_nonlocal_zero_depth_annihilates(self):
        branch = NonLocalBranch(ParamStore(), "nl", self.config)
        out = branch(_features((1, 8, 8, 8)), Tensor(np.zeros((1, 1, 8, 8))))
        self.assertFalse(np.any(out.data))

    def test_nonlocal_resolution_mismatch(self):
        branch = NonLocalBranch(ParamStore(), "nl", self.config)
        with self.assertRaises(ShapeError):
            branch(_features((1, 8, 8, 8)), _ones(1, 4, 4))

    def test_local_zero_betas_give_zero(self):
        branch = LocalBranch(ParamStore(), "local", 8)
        zero_parameters(branch.betas)
        d = _ones(1, 8, 8)
        self.assertFalse(np.any(branch(_features((1, 8, 8, 8)), d, d, d).data))

    def test_local_unit_depth_is_plain_multi_kernel_fusion(self):
        branch = LocalBranch(ParamStore(), "local", 8)
        f = _features((1, 8, 8, 8))
        d = _ones(1, 8, 8)
        t = f
        for conv, block in zip(branch.trunk_convs, branch.trunk_blocks):
            t = block(F.leaky_relu(conv(t)))
        expected = branch.fuse(F.concat([conv(t) for conv in branch.kernel_convs]))
        np.testing.assert_allclose(branch(f, d, d, d).data, expected.data, rtol=1e-5, atol=1e-6)

    def test_local_depth_map_size_checked(self):
        branch = LocalBranch(ParamStore(), "local", 8)
        d = _ones(1, 8, 8)
        with self.assertRaises(ShapeError):
            branch(_features((1, 8, 8, 8)), d, _ones(1, 4, 4), d)

    def test_dpm_zeroed_local_branch_returns_nonlocal(self):
        dpm = DepthPerceptionModule(ParamStore(), "dpm", self.config)
        zero_parameters(dpm.local_branch.betas)
        f = _features((1, 8, 8, 8))
        maps = (Tensor(np.full((1, 1, 8, 8), 0.4)), _ones(1, 8, 8), _ones(1, 8, 8), _ones(1, 8, 8))
        expected = dpm.nonlocal_branch(f, maps[0])
        np.testing.assert_array_equal(dpm(f, maps).data, expected.data)

    def test_dpm_shape(self):
        dpm = DepthPerceptionModule(ParamStore(), "dpm", BlockConfig(channels=16))
        maps = tuple(_ones(1, 8, 8) for _ in range(4))
        self.assertEqual(dpm(_features((1, 16, 8, 8)), maps).shape, (1, 16, 8, 8))


class TestDualAttention(unittest.TestCase):
    def setUp(self):
        self.config = BlockConfig(channels=8, dam_pool_factor=4, se_reduction=4)

    def test_channel_attention_zero_weights_halves(self):
        attention = ChannelAttention(ParamStore(), "ca", 8, 4)
        zero_parameters([attention.excite.first.weight, attention.excite.first.bias,
                         attention.excite.second.weight, attention.excite.second.bias])
        f = _features((1, 8, 4, 4))
        np.testing.assert_allclose(attention(f).data, 0.5 * f.data, rtol=1e-6)

    def test_channel_attention_needs_enough_channels(self):
        with self.assertRaises(ConfigurationError):
            ChannelAttention(ParamStore(), "ca", 2, 4)

    def test_spatial_attention_initial_gamma_returns_pooled(self):
        attention = SpatialAttention(ParamStore(), "sa", 8, 4)
        f = _features((1, 8, 8, 8))
        np.testing.assert_array_equal(attention(f).data, F.pool2d(f, "avg", 4).data)

    def test_spatial_attention_rows(self):
        attention = SpatialAttention(ParamStore(), "sa", 8, 2)
        attention(_features((1, 8, 8, 8)))
        self.assertEqual(attention.last_attention.shape, (1, 1, 16, 16))
        np.testing.assert_allclose(attention.last_attention.sum(axis=-1), 1.0, atol=1e-6)

    def test_spatial_attention_indivisible(self):
        attention = SpatialAttention(ParamStore(), "sa", 8, 4)
        with self.assertRaises(ConfigurationError):
            attention(_features((1, 8, 6, 6)))

    def test_zero_deconv_is_identity(self):
        dam = DualAttentionModule(ParamStore(), "dam", self.config)
        zero_parameters([dam.upsample.weight])
        f = _features((1, 8, 8, 8))
        np.testing.assert_array_equal(dam(f).data, f.data)

    def test_shape_preserved(self):
        dam = DualAttentionModule(ParamStore(), "dam", self.config)
        self.assertEqual(dam(_features((2, 8, 16, 16))).shape, (2, 8, 16, 16))


class TestLearnableScalars(unittest.TestCase):
    def tearDown(self):
        reset_tape()

    def test_betas_and_gamma_receive_gradients(self):
        config = BlockConfig(channels=8, window_size=4, heads=2, dam_pool_factor=2)
        with precision(np.float64):
            store = ParamStore(seed=3)
            dpm = DepthPerceptionModule(store, "dpm", config)
            dam = DualAttentionModule(store, "dam", config)
            # a nonzero gamma lets the attention path contribute to later gradients
            dam.spatial.gamma.data[...] = 0.5
            rng = np.random.default_rng(5)
            f = Tensor(rng.normal(size=(1, 8, 8, 8)))
            maps = tuple(Tensor(rng.uniform(0.1, 0.9, size=(1, 1, 8, 8))) for _ in range(4))
            backward(F.sum_all(F.square(dam(dpm(f, maps)))))
        for name in ("dpm.local.beta1", "dpm.local.beta3", "dpm.local.beta5", "dam.spatial.gamma"):
            grad = store.get(name).grad
            self.assertIsNotNone(grad, name)
            self.assertNotEqual(float(grad.reshape(-1)[0]), 0.0, name)


if __name__ == '__main__':
    unittest.main()
