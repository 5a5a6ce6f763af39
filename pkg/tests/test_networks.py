import unittest
import sys
import os

import numpy as np

# Add src directory to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from blocks import BlockConfig
from depthops import DepthMap
from errors import ConfigurationError, ShapeError
from networks import ABLATION_FLAGS, NetConfig, UVZModel, init_params
from tensorcore import Tensor, active_tape, reset_tape


def tiny_config(**changes) -> NetConfig:
    return NetConfig(base_channels=4, **changes)


def _image(n=1, size=16, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(size=(n, 3, size, size)))


def _depth(n=1, size=16, seed=1):
    return DepthMap(np.random.default_rng(seed).uniform(size=(n, 1, size, size)))


class TestNetConfig(unittest.TestCase):
    def test_defaults_are_valid(self):
        config = NetConfig()
        self.assertEqual(config.bottleneck_channels, 64)
        self.assertEqual(config.downsampling, 4)
        config.validate_input_size(64, 64)

    def test_invalid_values(self):
        with self.assertRaises(ConfigurationError):
            NetConfig(base_channels=0)
        with self.assertRaises(ConfigurationError):
            NetConfig(depth_levels=1)
        with self.assertRaises(ConfigurationError):
            NetConfig(base_channels=2)

    def test_indivisible_input(self):
        with self.assertRaises(ConfigurationError):
            tiny_config().validate_input_size(18, 16)

    def test_window_must_divide_bottleneck(self):
        with self.assertRaises(ConfigurationError):
            tiny_config().validate_input_size(24, 24)
        tiny_config(use_dpm=False, use_dam=False).validate_input_size(24, 24)

    def test_text_roundtrip(self):
        config = NetConfig(base_channels=8, block=BlockConfig(window_size=2, heads=4), seed=9, use_rs=False)
        self.assertEqual(NetConfig.from_text(config.to_text()), config)

    def test_unknown_key_rejected(self):
        with self.assertRaises(ConfigurationError):
            NetConfig.from_text("base_channels=8\nwidth=3\n")


class TestSubNetworks(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.model = UVZModel(tiny_config())

    def tearDown(self):
        reset_tape()

    def test_den_shape_and_range(self):
        depth, features = self.model.den_forward(_image())
        self.assertEqual(depth.shape, (1, 1, 16, 16))
        self.assertGreaterEqual(depth.data.min(), 0.0)
        self.assertLessEqual(depth.data.max(), 1.0)
        self.assertEqual(len(features), 3)

    def test_den_is_deterministic(self):
        again = UVZModel(tiny_config())
        first, _ = self.model.den_forward(_image())
        second, _ = again.den_forward(_image())
        np.testing.assert_array_equal(first.data, second.data)

    def test_asn_shape(self):
        x = _image()
        _, features = self.model.den_forward(x)
        x_hat = self.model.asn_forward(x, features)
        self.assertEqual(x_hat.shape, (1, 3, 16, 16))
        self.assertTrue(((x_hat.data >= 0) & (x_hat.data <= 1)).all())

    def test_asn_feature_count(self):
        x = _image()
        _, features = self.model.den_forward(x)
        with self.assertRaises(ConfigurationError):
            self.model.asn_forward(x, features[:2])

    def test_dgen_shape(self):
        y = self.model.dgen_forward(_image(n=2), _depth(n=2))
        self.assertEqual(y.shape, (2, 3, 16, 16))
        self.assertTrue(((y.data >= 0) & (y.data <= 1)).all())

    def test_dgen_depth_size_mismatch(self):
        with self.assertRaises(ShapeError):
            self.model.dgen_forward(_image(), _depth(size=8))

    def test_wrong_channel_count(self):
        with self.assertRaises(ShapeError):
            self.model.den_forward(Tensor(np.zeros((1, 1, 16, 16))))

    def test_enhance_records_nothing(self):
        y, depth = self.model.enhance(_image())
        self.assertEqual(len(active_tape()), 0)
        self.assertEqual(y.shape, (1, 3, 16, 16))
        self.assertEqual(depth.shape, (1, 1, 16, 16))

    def test_enhance_with_supplied_depth(self):
        d = _depth()
        y, depth = self.model.enhance(_image(), d)
        self.assertIs(depth, d)
        np.testing.assert_array_equal(y.data, self.model.dgen_forward(_image(), d).data)

    def test_parameter_counts(self):
        counts = self.model.parameter_counts()
        self.assertEqual(counts["den"] + counts["asn"] + counts["dgen"], counts["total"])
        self.assertGreater(counts["dgen"], 0)


class TestAblationFlags(unittest.TestCase):
    def setUp(self):
        self.full = UVZModel(tiny_config())

    def tearDown(self):
        reset_tape()

    def test_every_flag_changes_parameters_or_output(self):
        x, d = _image(), _depth()
        reference = self.full.dgen_forward(x, d).data
        for flag in ABLATION_FLAGS:
            variant = UVZModel(tiny_config(**{flag: False}))
            fewer = variant.store.count() < self.full.store.count()
            changed = not np.array_equal(variant.dgen_forward(x, d).data, reference)
            self.assertTrue(fewer or changed, flag)

    def test_flags_never_rename_unrelated_parameters(self):
        full_names = set(self.full.store.names())
        for flag in ABLATION_FLAGS:
            variant = UVZModel(tiny_config(**{flag: False}))
            self.assertTrue(set(variant.store.names()) <= full_names, flag)

    def test_shared_names_keep_their_values(self):
        variant = UVZModel(tiny_config(use_dpm=False))
        for name in variant.store.names():
            np.testing.assert_array_equal(variant.store.get(name).data, self.full.store.get(name).data)

    def test_without_asn(self):
        model = UVZModel(tiny_config(use_asn=False))
        self.assertIsNone(model.asn)
        self.assertEqual(model.store.count("asn."), 0)
        with self.assertRaises(ConfigurationError):
            model.asn_forward(_image(), [])

    def test_without_dpm_drops_module(self):
        model = UVZModel(tiny_config(use_dpm=False))
        self.assertEqual(model.store.names("dgen.dpm."), [])

    def test_without_depth_ignores_depth(self):
        model = UVZModel(tiny_config(use_depth=False))
        x = _image()
        first = model.dgen_forward(x, _depth(seed=1)).data
        second = model.dgen_forward(x, _depth(seed=2)).data
        np.testing.assert_array_equal(first, second)

    def test_without_reverse_uses_d1(self):
        model = UVZModel(tiny_config(use_reverse=False))
        d_rev, d1, d3, _ = model.dgen.depth_maps(_depth(), 4, 4)
        np.testing.assert_array_equal(d_rev.data, d1.data)
        self.assertFalse(np.array_equal(d3.data, d1.data))

    def test_without_region_smoothing(self):
        model = UVZModel(tiny_config(use_rs=False))
        d_rev, d1, d3, d5 = model.dgen.depth_maps(_depth(), 4, 4)
        np.testing.assert_array_equal(d3.data, d1.data)
        np.testing.assert_array_equal(d5.data, d1.data)
        np.testing.assert_allclose(d_rev.data, 1.0 - d1.data)

    def test_far_is_zero_depth_is_normalized(self):
        d = _depth()
        near = self.full.dgen.depth_maps(d, 4, 4)
        far = self.full.dgen.depth_maps(d.in_convention(near_is_zero=False), 4, 4)
        for a, b in zip(near, far):
            np.testing.assert_allclose(a.data, b.data, atol=1e-6)


class TestInitParams(unittest.TestCase):
    def test_same_seed_identical(self):
        a = init_params(tiny_config(seed=4))
        b = init_params(tiny_config(seed=4))
        self.assertEqual(a.names(), b.names())
        for name in a.names():
            np.testing.assert_array_equal(a.get(name).data, b.get(name).data)

    def test_different_seed_differs(self):
        a = init_params(tiny_config(seed=1))
        b = init_params(tiny_config(seed=2))
        self.assertFalse(np.array_equal(a.get("den.head.weight").data, b.get("den.head.weight").data))


if __name__ == '__main__':
    unittest.main()
