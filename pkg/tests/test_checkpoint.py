import unittest
import sys
import os
import tempfile

import numpy as np

# Add src directory to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from checkpoint import (MAGIC, Checkpoint, config_differences, decode_checkpoint, encode_checkpoint,
                        load_checkpoint, require_compatible, save_checkpoint)
from errors import ConfigurationError, FormatError, ShapeError
from networks import NetConfig, UVZModel


def tiny_config(**changes) -> NetConfig:
    return NetConfig(base_channels=4, **changes)


class TestCheckpointFormat(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.config = tiny_config(seed=3)
        cls.model = UVZModel(cls.config)
        cls.model.store.step = 12
        cls.ckpt = Checkpoint.from_store(cls.config, cls.model.store, epoch=5, stage=1, best_loss=0.125)
        cls.data = encode_checkpoint(cls.ckpt)

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "model.uvz")

    def tearDown(self):
        self.tmp.cleanup()

    def test_save_load_save_is_byte_identical(self):
        save_checkpoint(self.path, self.ckpt)
        loaded = load_checkpoint(self.path)
        again = os.path.join(self.tmp.name, "again.uvz")
        save_checkpoint(again, loaded)
        with open(self.path, "rb") as a, open(again, "rb") as b:
            self.assertEqual(a.read(), b.read())
        self.assertFalse(os.path.exists(self.path + ".tmp"))

    def test_roundtrip_is_lossless(self):
        loaded = decode_checkpoint(self.data)
        self.assertEqual(loaded.config, self.config)
        self.assertEqual(list(loaded.params), list(self.ckpt.params))
        for name, array in self.ckpt.params.items():
            np.testing.assert_array_equal(loaded.params[name], array)
        self.assertEqual((loaded.epoch, loaded.step, loaded.stage, loaded.best_loss), (5, 12, 1, 0.125))

    def test_restore_into_fresh_store(self):
        model = UVZModel(tiny_config(seed=99))
        decode_checkpoint(self.data).restore(model.store)
        self.assertEqual(model.store.step, 12)
        for name in model.store.names():
            np.testing.assert_array_equal(model.store.get(name).data, self.model.store.get(name).data)

    def test_restore_prefix_only(self):
        model = UVZModel(tiny_config(seed=99))
        before = model.store.get("dgen.head.weight").data.copy()
        decode_checkpoint(self.data).restore(model.store, prefix="den.", optimizer=False)
        np.testing.assert_array_equal(model.store.get("den.head.weight").data,
                                      self.model.store.get("den.head.weight").data)
        np.testing.assert_array_equal(model.store.get("dgen.head.weight").data, before)

    def test_flipped_payload_byte_rejected(self):
        corrupted = bytearray(self.data)
        corrupted[len(corrupted) // 2] ^= 0xFF
        with self.assertRaises(FormatError):
            decode_checkpoint(bytes(corrupted))

    def test_bad_magic(self):
        with self.assertRaises(FormatError) as ctx:
            decode_checkpoint(b"NOPE" + self.data[4:])
        self.assertEqual(ctx.exception.offset, 0)

    def test_truncated_file_reports_offset(self):
        with self.assertRaises(FormatError) as ctx:
            decode_checkpoint(self.data[:200])
        self.assertIsNotNone(ctx.exception.offset)
        self.assertLessEqual(ctx.exception.offset, 200)
        self.assertIn("Truncated", str(ctx.exception))

    def test_trailing_bytes_rejected(self):
        with self.assertRaises(FormatError):
            decode_checkpoint(self.data + b"\x00")

    def test_unsupported_version(self):
        with self.assertRaises(FormatError) as ctx:
            decode_checkpoint(MAGIC + (99).to_bytes(4, "little") + self.data[8:])
        self.assertEqual(ctx.exception.offset, 4)

    def test_missing_file(self):
        with self.assertRaises(FormatError):
            load_checkpoint(os.path.join(self.tmp.name, "absent.uvz"))

    def test_wrong_width_names_parameter(self):
        model = UVZModel(NetConfig(base_channels=8))
        with self.assertRaises(ShapeError) as ctx:
            decode_checkpoint(self.data).restore(model.store)
        self.assertIn("parameter", str(ctx.exception))
        self.assertIn("den.", str(ctx.exception))


class TestCompatibility(unittest.TestCase):
    def test_identical_configs_have_no_differences(self):
        self.assertEqual(config_differences(tiny_config(), tiny_config()), [])

    def test_mismatch_is_explicit(self):
        ckpt = Checkpoint(tiny_config())
        with self.assertRaises(ConfigurationError) as ctx:
            require_compatible(NetConfig(base_channels=8), ckpt)
        self.assertIn("base_channels", str(ctx.exception))

    def test_ignored_keys(self):
        ckpt = Checkpoint(tiny_config(seed=1, use_dpm=False))
        require_compatible(tiny_config(seed=2), ckpt, ignore=("seed", "use_dpm"))


if __name__ == '__main__':
    unittest.main()
