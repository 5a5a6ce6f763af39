"""Differentiable operators on (n, c, h, w) tensors.

Every function computes its forward result with numpy, and when any input
requires a gradient it records a backward rule on the active tape. Backward
rules return one gradient per input, in input order (None where an input
needs none).
"""
import logging
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from errors import ConfigurationError, ShapeError
from .tape import BackwardRule, active_tape
from .tensor import Shape, Tensor, check_finite, debug_enabled

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2
LAYER_NORM_EPS = 1e-12


def _emit(op: str, inputs: Sequence[Tensor], data: np.ndarray, backward: BackwardRule) -> Tensor:
    if debug_enabled():
        check_finite(data, op)
    out = Tensor._from_op(data)
    tape = active_tape()
    if tape.enabled and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, out, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: Shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


def _broadcast_shape(op: str, a: Shape, b: Shape) -> Shape:
    """Allowed: equal shapes, (n,1,h,w) depth weighting, (n,c,1,1) channel weighting, scalars"""
    out = []
    for da, db in zip(a, b):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: cannot broadcast {a} with {b}")
        out.append(max(da, db))
    result = tuple(out)
    for shape in (a, b):
        if shape == result:
            continue
        n, c, h, w = shape
        if n not in (1, result[0]):
            raise ShapeError(f"{op}: batch mismatch between {a} and {b}")
        spatial_map = c == 1 and (h, w) == result[2:]
        channel_vector = (h, w) == (1, 1) and c in (1, result[1])
        if not (spatial_map or channel_vector):
            raise ShapeError(f"{op}: unsupported broadcast of {shape} against {result}")
    return result


# ---------------------------------------------------------------------------
# Element-wise arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), a.data + b.data, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", (a, b), a.data - b.data, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product; b may be a depth map, a channel vector or a scalar parameter"""
    _broadcast_shape("mul", a.shape, b.shape)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", (a, b), a.data * b.data, backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("div", a.shape, b.shape)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("div", (a, b), out, backward)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = x.dtype.type(factor)
    return _emit("scale", (x,), x.data * factor, lambda g: (g * factor,))


def add_scalar(x: Tensor, value: float) -> Tensor:
    value = x.dtype.type(value)
    return _emit("add_scalar", (x,), x.data + value, lambda g: (g,))


def square(x: Tensor) -> Tensor:
    return _emit("square", (x,), x.data * x.data, lambda g: (2.0 * g * x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _emit("sqrt", (x,), out, lambda g: (g * 0.5 / out,))


def absolute(x: Tensor) -> Tensor:
    # np.sign is 0 at ties, which is the subgradient used for L1 terms
    return _emit("abs", (x,), np.abs(x.data), lambda g: (g * np.sign(x.data),))


def sigmoid(x: Tensor) -> Tensor:
    out = special.expit(x.data)
    return _emit("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    positive = x.data > 0
    out = np.where(positive, x.data, x.data * x.dtype.type(slope))
    return _emit("leaky_relu", (x,), out, lambda g: (np.where(positive, g, g * slope),))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last (token) axis; scipy subtracts the row max first"""
    out = special.softmax(x.data, axis=-1)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), out, backward)


def layer_norm(x: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the channel axis at every (n, h, w) position; affine is applied by the caller"""
    mean = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    out = centered * inv_std

    def backward(g):
        g_mean = g.mean(axis=1, keepdims=True)
        gx_mean = (g * out).mean(axis=1, keepdims=True)
        return (inv_std * (g - g_mean - out * gx_mean),)

    return _emit("layer_norm", (x,), out, backward)


def sum_all(x: Tensor) -> Tensor:
    total = np.sum(x.data, dtype=np.float64).astype(x.dtype).reshape(1, 1, 1, 1)
    return _emit("sum", (x,), total, lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    count = x.data.size
    total = (np.sum(x.data, dtype=np.float64) / count).astype(x.dtype).reshape(1, 1, 1, 1)
    return _emit("mean", (x,), total, lambda g: (np.full(x.shape, g.item() / count, dtype=x.dtype),))


# ---------------------------------------------------------------------------
# Channel bookkeeping and rearrangements

def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate over the channel axis"""
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[0] != first[0] or t.shape[2:] != first[2:]:
            raise ShapeError(f"concat: shape {t.shape} incompatible with {first}")
    offsets = np.cumsum([0] + [t.shape[1] for t in tensors])

    def backward(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(tensors)))

    return _emit("concat", tensors, np.concatenate([t.data for t in tensors], axis=1), backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_channels: [{start}, {stop}) outside {x.shape[1]} channels")

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _emit("slice_channels", (x,), x.data[:, start:stop], backward)


def _rearrange(op: str, x: Tensor, forward: Callable[[np.ndarray], np.ndarray],
               inverse: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    """Pure permutation/reshape of elements; the gradient is the inverse rearrangement"""
    return _emit(op, (x,), forward(x.data), lambda g: (inverse(g),))


def reshape(x: Tensor, shape: Shape) -> Tensor:
    if len(shape) != 4 or int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    original = x.shape
    return _rearrange("reshape", x, lambda a: a.reshape(shape), lambda g: g.reshape(original))


def roll(x: Tensor, shift_h: int, shift_w: int) -> Tensor:
    """Cyclic shift over the spatial axes"""
    return _rearrange("roll", x,
                      lambda a: np.roll(a, (shift_h, shift_w), axis=(2, 3)),
                      lambda g: np.roll(g, (-shift_h, -shift_w), axis=(2, 3)))


def partition_windows_array(a: np.ndarray, window: int) -> np.ndarray:
    n, c, h, w = a.shape
    nh, nw = h // window, w // window
    blocks = a.reshape(n, c, nh, window, nw, window).transpose(0, 2, 4, 3, 5, 1)
    return blocks.reshape(n * nh * nw, 1, window * window, c)


def merge_windows_array(t: np.ndarray, n: int, h: int, w: int, window: int) -> np.ndarray:
    c = t.shape[3]
    nh, nw = h // window, w // window
    blocks = t.reshape(n, nh, nw, window, window, c).transpose(0, 5, 1, 3, 2, 4)
    return blocks.reshape(n, c, h, w)


def window_partition(x: Tensor, window: int) -> Tensor:
    """(n, c, h, w) -> (n * windows, 1, window², c) token matrices, windows in row-major order"""
    n, c, h, w = x.shape
    if window <= 0 or h % window or w % window:
        raise ConfigurationError(f"window size {window} does not divide spatial dims {h}x{w}")
    return _rearrange("window_partition", x,
                      lambda a: partition_windows_array(a, window),
                      lambda g: merge_windows_array(g, n, h, w, window))


def window_merge(t: Tensor, n: int, h: int, w: int, window: int) -> Tensor:
    if t.shape[0] != n * (h // window) * (w // window) or t.shape[2] != window * window:
        raise ShapeError(f"window_merge: {t.shape} does not tile ({n}, ·, {h}, {w}) with window {window}")
    return _rearrange("window_merge", t,
                      lambda a: merge_windows_array(a, n, h, w, window),
                      lambda g: partition_windows_array(g, window))


def split_heads(t: Tensor, heads: int) -> Tensor:
    """(b, 1, tokens, c) -> (b, heads, tokens, c / heads)"""
    b, one, tokens, c = t.shape
    if one != 1 or c % heads:
        raise ShapeError(f"split_heads: cannot split {t.shape} into {heads} heads")
    dim = c // heads
    return _rearrange("split_heads", t,
                      lambda a: a.reshape(b, tokens, heads, dim).transpose(0, 2, 1, 3),
                      lambda g: g.transpose(0, 2, 1, 3).reshape(b, 1, tokens, c))


def merge_heads(t: Tensor) -> Tensor:
    b, heads, tokens, dim = t.shape
    return _rearrange("merge_heads", t,
                      lambda a: a.transpose(0, 2, 1, 3).reshape(b, 1, tokens, heads * dim),
                      lambda g: g.reshape(b, tokens, heads, dim).transpose(0, 2, 1, 3))


def to_tokens(x: Tensor) -> Tensor:
    """(n, c, h, w) -> (n, 1, h * w, c)"""
    n, c, h, w = x.shape
    return _rearrange("to_tokens", x,
                      lambda a: a.reshape(n, c, h * w).transpose(0, 2, 1)[:, None],
                      lambda g: g[:, 0].transpose(0, 2, 1).reshape(n, c, h, w))


def from_tokens(t: Tensor, h: int, w: int) -> Tensor:
    n, one, tokens, c = t.shape
    if one != 1 or tokens != h * w:
        raise ShapeError(f"from_tokens: {t.shape} is not a {h}x{w} token grid")
    return _rearrange("from_tokens", t,
                      lambda a: a[:, 0].transpose(0, 2, 1).reshape(n, c, h, w),
                      lambda g: g.reshape(n, c, h * w).transpose(0, 2, 1)[:, None])


def transpose_tokens(t: Tensor) -> Tensor:
    """Swap the last two axes of a batch of token matrices"""
    return _rearrange("transpose_tokens", t, lambda a: a.swapaxes(2, 3), lambda g: g.swapaxes(2, 3))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; leading axes must match"""
    if a.shape[:2] != b.shape[:2] or a.shape[3] != b.shape[2]:
        raise ShapeError(f"matmul: incompatible token matrices {a.shape} and {b.shape}")

    def backward(g):
        ga = np.matmul(g, b.data.swapaxes(2, 3)) if a.requires_grad else None
        gb = np.matmul(a.data.swapaxes(2, 3), g) if b.requires_grad else None
        return ga, gb

    return _emit("matmul", (a, b), np.matmul(a.data, b.data), backward)


def nearest_indices(size_in: int, size_out: int) -> np.ndarray:
    """Source index for every output index, sampling at output pixel centres"""
    if size_out <= 0:
        raise ConfigurationError(f"nearest resize target must be positive, got {size_out}")
    positions = (np.arange(size_out) + 0.5) * (size_in / size_out)
    return np.minimum(np.floor(positions).astype(np.int64), size_in - 1)


def nearest_resize(x: Tensor, height: int, width: int) -> Tensor:
    n, c, h, w = x.shape
    rows = nearest_indices(h, height)
    cols = nearest_indices(w, width)

    def backward(g):
        by_rows = np.zeros((n, c, h, width), dtype=g.dtype)
        np.add.at(by_rows, (slice(None), slice(None), rows), g)
        full = np.zeros((n, c, h, w), dtype=g.dtype)
        np.add.at(full, (slice(None), slice(None), slice(None), cols), by_rows)
        return (full,)

    return _emit("nearest_resize", (x,), x.data[:, :, rows][:, :, :, cols], backward)


# ---------------------------------------------------------------------------
# Convolutions and pooling

def _output_size(size: int, k: int, stride: int, padding: int, op: str) -> int:
    span = size + 2 * padding - k
    if span < 0 or stride <= 0:
        raise ConfigurationError(f"{op}: kernel {k} with stride {stride}, padding {padding} "
                                 f"does not fit spatial size {size}")
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with square kernels; weight (c_out, c_in, k, k), bias (1, c_out, 1, 1)"""
    n, c_in, h, w = x.shape
    c_out, w_in, k, k2 = weight.shape
    if w_in != c_in or k != k2:
        raise ShapeError(f"conv2d: weight {weight.shape} does not match input {x.shape}")
    if bias is not None and bias.shape != (1, c_out, 1, 1):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {c_out} output channels")
    oh = _output_size(h, k, stride, padding, "conv2d")
    ow = _output_size(w, k, stride, padding, "conv2d")

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3])) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)).reshape(1, c_out, 1, 1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            cols = np.tensordot(g, weight.data, axes=([1], [0]))  # (n, oh, ow, c_in, k, k)
            gpad = np.zeros(padded.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gpad[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride] += \
                        cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gpad[:, :, padding:padding + h, padding:padding + w] if padding else gpad
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv2d", inputs, np.ascontiguousarray(out), backward)


def transposed_conv2d(x: Tensor, weight: Tensor, stride: int, padding: int = 0) -> Tensor:
    """Transpose of conv2d; weight (c_in, c_out, k, k), output (h - 1)·stride + k - 2·padding"""
    n, c_in, h, w = x.shape
    w_in, c_out, k, k2 = weight.shape
    if w_in != c_in or k != k2:
        raise ShapeError(f"transposed_conv2d: weight {weight.shape} does not match input {x.shape}")
    if stride < 1:
        raise ConfigurationError(f"transposed_conv2d: stride must be >= 1, got {stride}")
    full_h, full_w = (h - 1) * stride + k, (w - 1) * stride + k
    if full_h - 2 * padding <= 0 or full_w - 2 * padding <= 0:
        raise ConfigurationError("transposed_conv2d: padding leaves no output")

    cols = np.tensordot(x.data, weight.data, axes=([1], [0]))  # (n, h, w, c_out, k, k)
    full = np.zeros((n, c_out, full_h, full_w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            full[:, :, i:i + stride * (h - 1) + 1:stride, j:j + stride * (w - 1) + 1:stride] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    out = full[:, :, padding:full_h - padding, padding:full_w - padding] if padding else full

    def backward(g):
        gfull = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        windows = sliding_window_view(gfull, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :h, :w]
        gx = (np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
              if x.requires_grad else None)
        gw = np.tensordot(x.data, windows, axes=([0, 2, 3], [0, 2, 3])) if weight.requires_grad else None
        return gx, gw

    return _emit("transposed_conv2d", (x, weight), np.ascontiguousarray(out), backward)


def pool2d(x: Tensor, mode: str, k: Union[int, Tuple[int, int]], stride: Optional[int] = None) -> Tensor:
    """Average or max pooling; k may be (kh, kw) for global pooling of non-square maps"""
    if mode not in ("avg", "max"):
        raise ConfigurationError(f"pool2d: unknown mode {mode!r}")
    kh, kw = (k, k) if isinstance(k, int) else k
    n, c, h, w = x.shape
    if kh <= 0 or kw <= 0 or kh > h or kw > w:
        raise ConfigurationError(f"pool2d: window {kh}x{kw} exceeds spatial dims {h}x{w}")
    sh, sw = (kh, kw) if stride is None else (stride, stride)
    oh, ow = (h - kh) // sh + 1, (w - kw) // sw + 1
    windows = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :oh, :ow]

    if mode == "avg":
        out = windows.mean(axis=(4, 5))

        def backward(g):
            gx = np.zeros_like(x.data)
            share = g / (kh * kw)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw] += share
            return (gx,)
    else:
        flat = windows.reshape(n, c, oh, ow, kh * kw)
        argmax = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]

        def backward(g):
            gx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    hit = argmax == i * kw + j
                    gx[:, :, i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw] += g * hit
            return (gx,)

    return _emit(f"{mode}_pool2d", (x,), np.ascontiguousarray(out), backward)


def global_pool(x: Tensor, mode: str) -> Tensor:
    return pool2d(x, mode, (x.shape[2], x.shape[3]))


def stack_batch(tensors: List[Tensor]) -> Tensor:
    """Concatenate over the batch axis (used to batch images, not recorded per-sample)"""
    first = tensors[0].shape[1:]
    for t in tensors[1:]:
        if t.shape[1:] != first:
            raise ShapeError(f"stack_batch: {t.shape} incompatible with {tensors[0].shape}")
    offsets = np.cumsum([0] + [t.shape[0] for t in tensors])

    def backward(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(tensors)))

    return _emit("stack_batch", tensors, np.concatenate([t.data for t in tensors], axis=0), backward)
