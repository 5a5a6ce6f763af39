"""Central finite-difference checks of the tape's analytic gradients.

Used by the test-suite and by the `gradcheck` command. Every case is built
and evaluated in float64 so the numeric side is not limited by float32
round-off.
"""
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

import blocks
import losses
from depthops import DepthMap
from networks import NetConfig, UVZModel
from tensorcore import ParamStore, Tensor, backward, no_grad, precision, reset_tape
from tensorcore import functional as F

logger = logging.getLogger(__name__)

STEP = 1e-5
ERROR_FLOOR = 1e-6
OP_TOLERANCE = 1e-3
COMPOSITE_TOLERANCE = 1e-2

LossFn = Callable[[], Tensor]
Named = Sequence[Tuple[str, Tensor]]


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    checked: int
    worst: str = ""

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), ERROR_FLOOR)


def analytic_gradients(loss_fn: LossFn, tensors: Named) -> List[np.ndarray]:
    for _, t in tensors:
        t.requires_grad = True
        t.grad = None
    reset_tape()
    try:
        backward(loss_fn())
    finally:
        reset_tape()
    return [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for _, t in tensors]


def numeric_gradient(loss_fn: LossFn, tensor: Tensor, index: int, step: float = STEP) -> float:
    flat = tensor.data.reshape(-1)
    original = flat[index]
    with no_grad():
        flat[index] = original + step
        plus = loss_fn().item()
        flat[index] = original - step
        minus = loss_fn().item()
    flat[index] = original
    return (plus - minus) / (2 * step)


def check_gradients(name: str, loss_fn: LossFn, tensors: Named, tolerance: float,
                    rng: np.random.Generator, samples: Optional[int] = 6, step: float = STEP) -> GradCheckResult:
    """Compare analytic and numeric derivatives on sampled entries of each tensor.

    Args:
        loss_fn: builds a (1, 1, 1, 1) loss from the current tensor values
        tensors: (label, tensor) pairs; every tensor must be a leaf
        samples: entries checked per tensor, None for all of them
    """
    grads = analytic_gradients(loss_fn, tensors)
    worst, worst_at, checked = 0.0, "", 0
    for (label, tensor), grad in zip(tensors, grads):
        size = tensor.data.size
        picks = range(size) if samples is None or samples >= size else rng.choice(size, size=samples, replace=False)
        for index in picks:
            numeric = numeric_gradient(loss_fn, tensor, int(index), step)
            error = relative_error(float(grad.reshape(-1)[index]), numeric)
            checked += 1
            if error > worst:
                worst, worst_at = error, f"{label}[{int(index)}]"
    result = GradCheckResult(name, worst, tolerance, checked, worst_at)
    logger.debug("gradcheck %s: max rel err %.3e over %d entries (%s)", name, worst, checked, worst_at)
    return result


def projection(out_shape, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    """Random fixed weighting that turns any output into a scalar without symmetric cancellation"""
    weights = Tensor(rng.standard_normal(out_shape))
    return lambda out: F.sum_all(F.mul(out, weights))


def jitter(store: ParamStore, rng: np.random.Generator, scale: float = 0.1) -> None:
    """Move every parameter off its structured init (zero biases, γ = 0, β = 1)"""
    for _, param in store.items():
        param.tensor.data += scale * rng.standard_normal(param.tensor.shape)


def _leaf(rng: np.random.Generator, shape, low: float = -1.0, high: float = 1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _depth(rng: np.random.Generator, n: int, h: int, w: int) -> Tensor:
    return Tensor(rng.uniform(0.05, 0.95, size=(n, 1, h, w)))


# ---------------------------------------------------------------------------
# Cases

Case = Tuple[str, float, Callable[[np.random.Generator], Tuple[LossFn, Named]]]


def _unary(op: Callable[[Tensor], Tensor], shape, low: float = -1.0, high: float = 1.0):
    def setup(rng):
        x = _leaf(rng, shape, low, high)
        out = projection(op(x).shape, rng)
        return (lambda: out(op(x))), [("x", x)]
    return setup


def _conv(stride: int, padding: int):
    def setup(rng):
        x = _leaf(rng, (2, 3, 8, 8))
        w = _leaf(rng, (4, 3, 3, 3))
        b = _leaf(rng, (1, 4, 1, 1))
        out = projection(F.conv2d(x, w, b, stride, padding).shape, rng)
        return (lambda: out(F.conv2d(x, w, b, stride, padding))), [("x", x), ("weight", w), ("bias", b)]
    return setup


def _transposed(k: int, stride: int):
    def setup(rng):
        x = _leaf(rng, (2, 3, 4, 4))
        w = _leaf(rng, (3, 2, k, k))
        out = projection(F.transposed_conv2d(x, w, stride).shape, rng)
        return (lambda: out(F.transposed_conv2d(x, w, stride))), [("x", x), ("weight", w)]
    return setup


def _binary(op: Callable[[Tensor, Tensor], Tensor], a_shape, b_shape, b_low: float = -1.0):
    def setup(rng):
        a = _leaf(rng, a_shape)
        b = _leaf(rng, b_shape, b_low, 1.0)
        out = projection(op(a, b).shape, rng)
        return (lambda: out(op(a, b))), [("a", a), ("b", b)]
    return setup


def _block(build: Callable[[ParamStore], Callable[..., Tensor]], input_shapes, maps: int = 0):
    """Gradient w.r.t. block inputs and every block parameter"""
    def setup(rng):
        store = ParamStore(int(rng.integers(0, 2 ** 31)))
        block = build(store)
        jitter(store, rng)
        inputs = [_leaf(rng, shape) for shape in input_shapes]
        n, _, h, w = input_shapes[0]
        depth = [_depth(rng, n, h, w) for _ in range(maps)]
        args = inputs + ([depth] if maps == 4 else depth)
        out = projection(block(*args).shape, rng)
        named = [(f"input{i}", t) for i, t in enumerate(inputs)] + [(name, p.tensor) for name, p in store.items()]
        return (lambda: out(block(*args))), named
    return setup


def _network(kind: str):
    def setup(rng):
        config = NetConfig(base_channels=4, depth_levels=3, seed=int(rng.integers(0, 2 ** 31)))
        model = UVZModel(config)
        jitter(model.store, rng, 0.05)
        x = Tensor(rng.uniform(0.0, 1.0, size=(1, 3, 16, 16)))
        if kind == "den":
            out = projection((1, 1, 16, 16), rng)
            loss_fn = lambda: out(model.den(x)[0])
        elif kind == "asn":
            out = projection((1, 3, 16, 16), rng)
            loss_fn = lambda: out(model.asn_forward(x, model.den(x)[1]))
        else:
            depth = DepthMap(rng.uniform(0.0, 1.0, size=(16, 16)))
            out = projection((1, 3, 16, 16), rng)
            loss_fn = lambda: out(model.dgen_forward(x, depth))
        named = [(name, p.tensor) for name, p in model.store.items() if name.startswith(kind + ".")]
        return loss_fn, named
    return setup


def _loss_case(kind: str):
    def setup(rng):
        a = _leaf(rng, (2, 3, 12, 12), 0.0, 1.0)
        b = Tensor(rng.uniform(0.0, 1.0, size=(2, 3, 12, 12)))
        if kind == "stage1":
            d = _leaf(rng, (2, 1, 12, 12), 0.0, 1.0)
            d_gt = Tensor(rng.uniform(0.0, 1.0, size=(2, 1, 12, 12)))
            return (lambda: losses.stage1_loss(d, d_gt, a, b)), [("d", d), ("x_hat", a)]
        if kind == "ssim":
            return (lambda: losses.ssim(a, b)), [("x", a)]
        return (lambda: losses.stage2_loss(a, b)), [("y", a)]
    return setup


def _swin_config(channels: int = 8) -> blocks.BlockConfig:
    return blocks.BlockConfig(channels=channels, window_size=4, heads=2, mlp_ratio=2.0,
                              dam_pool_factor=4, se_reduction=4)


def cases() -> List[Case]:
    cfg = _swin_config()
    return [
        ("conv2d", OP_TOLERANCE, _conv(1, 1)),
        ("conv2d_stride2", OP_TOLERANCE, _conv(2, 1)),
        ("transposed_conv2d", OP_TOLERANCE, _transposed(2, 2)),
        ("transposed_conv2d_k3", OP_TOLERANCE, _transposed(3, 2)),
        ("avg_pool2d", OP_TOLERANCE, _unary(lambda x: F.pool2d(x, "avg", 2), (1, 2, 6, 6))),
        ("max_pool2d", OP_TOLERANCE, _unary(lambda x: F.pool2d(x, "max", 2), (1, 2, 6, 6))),
        ("sigmoid", OP_TOLERANCE, _unary(F.sigmoid, (1, 2, 4, 4))),
        ("leaky_relu", OP_TOLERANCE, _unary(F.leaky_relu, (1, 2, 4, 4))),
        ("softmax", OP_TOLERANCE, _unary(F.softmax, (2, 2, 5, 5))),
        ("layer_norm", OP_TOLERANCE, _unary(F.layer_norm, (1, 6, 3, 3))),
        ("sqrt", OP_TOLERANCE, _unary(F.sqrt, (1, 2, 4, 4), 0.5, 2.0)),
        ("nearest_resize", OP_TOLERANCE, _unary(lambda x: F.nearest_resize(x, 3, 5), (1, 2, 6, 4))),
        ("window_attention_layout", OP_TOLERANCE,
         _unary(lambda x: F.window_merge(F.window_partition(F.roll(x, -2, -2), 4), 1, 8, 8, 4), (1, 3, 8, 8))),
        ("mul_broadcast", OP_TOLERANCE, _binary(F.mul, (2, 3, 4, 4), (1, 1, 4, 4))),
        ("div", OP_TOLERANCE, _binary(F.div, (1, 2, 4, 4), (1, 2, 4, 4), b_low=0.5)),
        ("matmul", OP_TOLERANCE, _binary(F.matmul, (2, 2, 4, 3), (2, 2, 3, 5))),
        ("stage1_loss", OP_TOLERANCE, _loss_case("stage1")),
        ("ssim", OP_TOLERANCE, _loss_case("ssim")),
        ("stage2_loss", OP_TOLERANCE, _loss_case("stage2")),
        ("residual_block", OP_TOLERANCE,
         _block(lambda s: blocks.ResidualBlock(s, "rb", 4), [(1, 4, 6, 6)])),
        ("residual_skip_block", OP_TOLERANCE,
         _block(lambda s: blocks.ResidualSkipBlock(s, "rsb", 4), [(1, 4, 6, 6), (1, 4, 6, 6)])),
        ("channel_attention", OP_TOLERANCE,
         _block(lambda s: blocks.ChannelAttention(s, "ca", 8, 4), [(1, 8, 4, 4)])),
        ("spatial_attention", OP_TOLERANCE,
         _block(lambda s: blocks.SpatialAttention(s, "sa", 4, 2), [(1, 4, 4, 4)])),
        ("swin_block_pair", COMPOSITE_TOLERANCE,
         _block(lambda s: blocks.SwinBlockPair(s, "swin", cfg), [(1, 8, 8, 8)])),
        ("local_branch", OP_TOLERANCE,
         _block(lambda s: blocks.LocalBranch(s, "local", 4), [(1, 4, 6, 6)], maps=3)),
        ("dam", COMPOSITE_TOLERANCE,
         _block(lambda s: blocks.DualAttentionModule(s, "dam", cfg), [(1, 8, 8, 8)])),
        ("dpm", COMPOSITE_TOLERANCE,
         _block(lambda s: blocks.DepthPerceptionModule(s, "dpm", cfg), [(1, 8, 8, 8)], maps=4)),
        ("den", COMPOSITE_TOLERANCE, _network("den")),
        ("asn", COMPOSITE_TOLERANCE, _network("asn")),
        ("dgen", COMPOSITE_TOLERANCE, _network("dgen")),
    ]


def run_case(case: Case, seed: int, samples: Optional[int] = 6) -> GradCheckResult:
    name, tolerance, setup = case
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    with precision(np.float64):
        loss_fn, named = setup(rng)
        return check_gradients(name, loss_fn, named, tolerance, rng, samples)


def run_suite(seed: int = 0, samples: Optional[int] = 6, names: Optional[Sequence[str]] = None) -> List[GradCheckResult]:
    selected = [case for case in cases() if names is None or case[0] in names]
    return [run_case(case, seed, samples) for case in selected]


def format_table(results: Sequence[GradCheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'operation':<{width}}  status  max_rel_error  tolerance  checked"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.max_rel_error:13.3e}  "
                     f"{r.tolerance:9.0e}  {r.checked:7d}")
    return "\n".join(lines)
