import unittest
import sys
import os
import math
import tempfile

import numpy as np

# Add src directory to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from datagen import (FAR_PLANE, MANIFEST_NAME, NEAREST_DEPTH, DegradationParams, PrimitiveKind, _compose_scene,
                     degrade, fractal_noise, load_manifest, load_triple, load_triples, make_dataset, split_indices,
                     synth_scene)
from depthops import DepthMap
from errors import ConfigurationError, FormatError, ShapeError


class TestDegradationParams(unittest.TestCase):
    def test_defaults(self):
        params = DegradationParams()
        self.assertEqual(params.beta, (0.8, 0.35, 0.30))
        self.assertEqual(params.backscatter, (0.05, 0.35, 0.45))
        self.assertEqual(params.noise_sigma, 0.01)

    def test_red_must_attenuate_fastest(self):
        with self.assertRaises(ConfigurationError):
            DegradationParams(beta=(0.3, 0.35, 0.2))

    def test_backscatter_range(self):
        with self.assertRaises(ConfigurationError):
            DegradationParams(backscatter=(0.1, 1.2, 0.3))

    def test_negative_noise(self):
        with self.assertRaises(ConfigurationError):
            DegradationParams(noise_sigma=-0.1)


class TestSynthScene(unittest.TestCase):
    def test_same_seed_identical(self):
        a_clean, a_depth = synth_scene(7, 32, 32)
        b_clean, b_depth = synth_scene(7, 32, 32)
        np.testing.assert_array_equal(a_clean, b_clean)
        np.testing.assert_array_equal(a_depth, b_depth)

    def test_different_seed_differs(self):
        self.assertFalse(np.array_equal(synth_scene(1, 32, 32)[1], synth_scene(2, 32, 32)[1]))

    def test_shapes_and_ranges(self):
        clean, depth = synth_scene(3, 24, 40)
        self.assertEqual(clean.shape, (3, 24, 40))
        self.assertEqual(depth.shape, (24, 40))
        for array in (clean, depth):
            self.assertGreaterEqual(array.min(), 0.0)
            self.assertLessEqual(array.max(), 1.0)

    def test_depth_spans_near_and_far(self):
        _, depth = synth_scene(5, 64, 64)
        self.assertGreaterEqual(depth[0].min(), FAR_PLANE[0])
        self.assertLess(depth.min(), FAR_PLANE[0])

    def test_primitives_ordered_far_to_near(self):
        scene = _compose_scene(11, 64, 64)
        depths = [p.depth for p in scene.primitives]
        self.assertEqual(depths, sorted(depths, reverse=True))
        self.assertAlmostEqual(depths[-1], NEAREST_DEPTH)
        self.assertTrue(3 <= len(scene.primitives) <= 6)
        for primitive in scene.primitives:
            self.assertIsInstance(primitive.kind, PrimitiveKind)
            np.testing.assert_array_equal(scene.depth[primitive.mask], primitive.depth)

    def test_too_small(self):
        with self.assertRaises(ConfigurationError):
            synth_scene(0, 4, 4)

    def test_fractal_noise_normalized(self):
        noise = fractal_noise(np.random.default_rng(0), 20, 30)
        self.assertEqual(noise.shape, (20, 30))
        self.assertAlmostEqual(noise.min(), 0.0)
        self.assertAlmostEqual(noise.max(), 1.0)


class TestDegrade(unittest.TestCase):
    def setUp(self):
        self.clean, self.depth = synth_scene(4, 16, 16)
        self.quiet = DegradationParams(noise_sigma=0.0)

    def test_zero_depth_is_transparent(self):
        raw = degrade(self.clean, np.zeros((16, 16)), self.quiet)
        np.testing.assert_array_equal(raw, self.clean)

    def test_closed_form_single_pixel(self):
        raw = degrade(np.ones((3, 1, 1)), np.ones((1, 1)), self.quiet)
        expected = math.exp(-0.8) + 0.05 * (1.0 - math.exp(-0.8))
        self.assertAlmostEqual(raw[0, 0, 0], expected, places=12)

    def test_strong_attenuation_reaches_backscatter(self):
        params = DegradationParams(beta=(60.0, 50.0, 40.0), noise_sigma=0.0)
        raw = degrade(self.clean, np.ones((16, 16)), params)
        np.testing.assert_allclose(raw, np.broadcast_to(np.array(params.backscatter)[:, None, None], raw.shape),
                                   atol=1e-12)

    def test_red_channel_monotone_in_depth(self):
        clean = np.full((3, 1, 5), 0.9)
        depth = np.linspace(0.0, 1.0, 5)[None]
        red = degrade(clean, depth, self.quiet)[0, 0]
        self.assertTrue(np.all(np.diff(red) <= 0))

    def test_accepts_depth_map(self):
        a = degrade(self.clean, self.depth, self.quiet)
        b = degrade(self.clean, DepthMap(self.depth), self.quiet)
        np.testing.assert_array_equal(a, b)

    def test_noise_is_seeded(self):
        params = DegradationParams(noise_sigma=0.05, seed=3)
        a = degrade(self.clean, self.depth, params, noise_seed=1)
        b = degrade(self.clean, self.depth, params, noise_seed=1)
        c = degrade(self.clean, self.depth, params, noise_seed=2)
        np.testing.assert_array_equal(a, b)
        self.assertFalse(np.array_equal(a, c))
        self.assertTrue(((a >= 0) & (a <= 1)).all())

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            degrade(self.clean, np.zeros((8, 8)), self.quiet)


class TestDataset(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def test_split_counts(self):
        train, test = split_indices(10, 0.8, 0)
        self.assertEqual((len(train), len(test)), (8, 2))
        self.assertEqual(set(train) & set(test), set())
        self.assertEqual(sorted(train + test), list(range(10)))

    def test_split_ratio_range(self):
        with self.assertRaises(ConfigurationError):
            split_indices(10, 1.5, 0)

    def test_make_dataset_writes_manifest(self):
        out = os.path.join(self.tmp.name, "data")
        entries = make_dataset(10, 0.8, DegradationParams(seed=2), out, size=16)
        self.assertEqual(sum(e.split == "train" for e in entries), 8)
        loaded = load_manifest(os.path.join(out, MANIFEST_NAME))
        self.assertEqual(len(loaded), 10)
        for entry in loaded:
            for path in (entry.raw, entry.clean, entry.depth):
                self.assertTrue(os.path.exists(path), path)
            triple = load_triple(entry)
            self.assertEqual(triple.raw.shape, (3, 16, 16))
            self.assertEqual(triple.depth.shape, (16, 16))
        self.assertEqual(len(load_triples(loaded, "test")), 2)

    def test_same_seed_same_manifest_and_files(self):
        first = os.path.join(self.tmp.name, "a")
        second = os.path.join(self.tmp.name, "b")
        make_dataset(4, 0.5, DegradationParams(seed=6), first, size=16)
        make_dataset(4, 0.5, DegradationParams(seed=6), second, size=16, threads=2)
        for name in (MANIFEST_NAME, "raw/00002.ppm", "depth/00003.pgm"):
            with open(os.path.join(first, name), "rb") as a, open(os.path.join(second, name), "rb") as b:
                self.assertEqual(a.read(), b.read(), name)

    def test_stored_triple_matches_generator(self):
        out = os.path.join(self.tmp.name, "data")
        params = DegradationParams(seed=5)
        make_dataset(2, 0.5, params, out, size=16)
        entries = load_manifest(os.path.join(out, MANIFEST_NAME))
        clean, depth = synth_scene([5, 1], 16, 16)
        triple = load_triple(entries[1])
        np.testing.assert_allclose(triple.clean, clean, atol=0.5 / 255 + 1e-12)
        np.testing.assert_allclose(triple.depth, depth, atol=0.5 / 65535 + 1e-12)

    def test_malformed_manifest_reports_offset(self):
        path = os.path.join(self.tmp.name, MANIFEST_NAME)
        with open(path, "w", encoding="utf-8") as f:
            f.write("train\ta.ppm\tb.ppm\tc.pgm\n")
            f.write("validation\ta.ppm\tb.ppm\tc.pgm\n")
        with self.assertRaises(FormatError) as ctx:
            load_manifest(path)
        self.assertEqual(ctx.exception.offset, len("train\ta.ppm\tb.ppm\tc.pgm\n"))

    def test_manifest_paths_resolve_relative_to_manifest(self):
        path = os.path.join(self.tmp.name, MANIFEST_NAME)
        with open(path, "w", encoding="utf-8") as f:
            f.write("# comment\n\ntest\traw/x.ppm\tclean/x.ppm\tdepth/x.pgm\n")
        (entry,) = load_manifest(path)
        self.assertEqual(entry.raw, os.path.join(os.path.abspath(self.tmp.name), "raw", "x.ppm"))
        self.assertEqual(entry.name, "x")

    def test_empty_dataset_rejected(self):
        with self.assertRaises(ConfigurationError):
            make_dataset(0, 0.8, DegradationParams(), self.tmp.name)


if __name__ == '__main__':
    unittest.main()
