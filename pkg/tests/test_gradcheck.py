import unittest
import sys
import os

import numpy as np

# Add src directory to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from errors import ShapeError
from gradcheck import (ERROR_FLOOR, OP_TOLERANCE, GradCheckResult, analytic_gradients, cases, check_gradients,
                       format_table, relative_error, run_suite)
from tensorcore import Tensor, active_tape, functional as F, precision, reset_tape


class TestRelativeError(unittest.TestCase):
    def test_scaled_by_larger_magnitude(self):
        self.assertAlmostEqual(relative_error(1.0, 1.1), 0.1 / 1.1)

    def test_floor_for_tiny_values(self):
        self.assertAlmostEqual(relative_error(0.0, 1e-9), 1e-9 / ERROR_FLOOR)


class TestCheckGradients(unittest.TestCase):
    def tearDown(self):
        reset_tape()

    def test_correct_gradient_passes(self):
        with precision(np.float64):
            x = Tensor(np.random.default_rng(0).uniform(-1, 1, size=(1, 2, 3, 3)), requires_grad=True)
            result = check_gradients("cube", lambda: F.sum_all(F.mul(F.square(x), x)), [("x", x)],
                                     OP_TOLERANCE, np.random.default_rng(1), samples=None)
        self.assertTrue(result.passed)
        self.assertEqual(result.checked, 18)

    def test_detects_a_wrong_gradient(self):
        # the stop-gradient path hides half of d(x^2)/dx from backward
        with precision(np.float64):
            x = Tensor(np.full((1, 1, 2, 2), 0.7), requires_grad=True)

            def loss():
                frozen = Tensor(x.data.copy())
                return F.sum_all(F.mul(x, frozen))

            result = check_gradients("frozen", loss, [("x", x)], OP_TOLERANCE, np.random.default_rng(2),
                                     samples=None)
        self.assertFalse(result.passed)
        self.assertAlmostEqual(result.max_rel_error, 0.5, places=6)
        self.assertTrue(result.worst.startswith("x["))

    def test_failed_loss_leaves_tape_empty(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)

        def loss():
            F.sum_all(F.square(x))
            raise ShapeError("loss rejected its inputs")

        with self.assertRaises(ShapeError):
            analytic_gradients(loss, [("x", x)])
        self.assertEqual(active_tape().records, [])
        self.assertIsNone(x.node_id)


class TestSuite(unittest.TestCase):
    def test_primitive_operations_pass(self):
        names = ["conv2d", "conv2d_stride2", "transposed_conv2d", "max_pool2d", "softmax", "layer_norm",
                 "window_attention_layout", "matmul", "mul_broadcast"]
        results = run_suite(seed=0, samples=4, names=names)
        self.assertEqual([r.name for r in results], names)
        for r in results:
            self.assertTrue(r.passed, f"{r.name}: {r.max_rel_error:.3e} at {r.worst}")

    def test_losses_pass(self):
        for r in run_suite(seed=1, samples=4, names=["stage1_loss", "ssim", "stage2_loss"]):
            self.assertTrue(r.passed, f"{r.name}: {r.max_rel_error:.3e} at {r.worst}")

    def test_blocks_pass(self):
        for r in run_suite(seed=2, samples=3, names=["residual_skip_block", "spatial_attention", "swin_block_pair",
                                                     "dpm"]):
            self.assertTrue(r.passed, f"{r.name}: {r.max_rel_error:.3e} at {r.worst}")

    def test_networks_pass(self):
        for r in run_suite(seed=0, samples=3, names=["dam", "local_branch", "den", "asn", "dgen"]):
            self.assertTrue(r.passed, f"{r.name}: {r.max_rel_error:.3e} at {r.worst}")

    def test_case_names_are_unique(self):
        names = [name for name, _, _ in cases()]
        self.assertEqual(len(names), len(set(names)))
        for required in ("den", "asn", "dgen", "dam", "dpm", "transposed_conv2d"):
            self.assertIn(required, names)

    def test_unknown_names_select_nothing(self):
        self.assertEqual(run_suite(names=["teleport"]), [])

    @unittest.skipUnless(os.environ.get("UVZ_REFERENCE_RUN"), "set UVZ_REFERENCE_RUN=1 for the 20-seed sweep")
    def test_every_case_over_twenty_seeds(self):
        for seed in range(20):
            for r in run_suite(seed=seed):
                self.assertTrue(r.passed, f"seed {seed} {r.name}: {r.max_rel_error:.3e} at {r.worst}")


class TestFormatTable(unittest.TestCase):
    def test_one_row_per_result(self):
        table = format_table([GradCheckResult("conv2d", 2e-7, 1e-3, 12),
                              GradCheckResult("dgen", 0.5, 1e-2, 30, "w[3]")]).splitlines()
        self.assertEqual(len(table), 3)
        self.assertTrue(table[0].startswith("operation"))
        self.assertIn("PASS", table[1])
        self.assertIn("FAIL", table[2])


if __name__ == '__main__':
    unittest.main()
