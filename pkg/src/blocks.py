"""Network building blocks.

Each block registers its parameters in a shared ParamStore under a dotted
prefix and is applied by calling it. Blocks never change (n, c, h, w).
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from errors import ConfigurationError, ShapeError
from tensorcore import ParamStore, Tensor
from tensorcore import functional as F

logger = logging.getLogger(__name__)


@dataclass
class BlockConfig:
    channels: int = 64
    window_size: int = 4
    heads: int = 2
    mlp_ratio: float = 2.0
    dam_pool_factor: int = 4
    se_reduction: int = 4

    def __post_init__(self):
        if self.channels <= 0 or self.window_size <= 0 or self.heads <= 0:
            raise ConfigurationError("channels, window_size and heads must be positive")
        if self.channels % self.heads:
            raise ConfigurationError(f"channels ({self.channels}) must be divisible by heads ({self.heads})")
        if self.mlp_ratio <= 0:
            raise ConfigurationError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        if self.dam_pool_factor <= 0:
            raise ConfigurationError(f"dam_pool_factor must be positive, got {self.dam_pool_factor}")

    def with_channels(self, channels: int) -> "BlockConfig":
        return BlockConfig(channels, self.window_size, self.heads, self.mlp_ratio,
                           self.dam_pool_factor, self.se_reduction)


class Conv:
    """Square convolution with fan-in scaled uniform init and zero bias"""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, k: int,
                 stride: int = 1, padding: Optional[int] = None, bias: bool = True):
        self.name = name
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        bound = 1.0 / math.sqrt(c_in * k * k)
        self.weight = store.uniform(f"{name}.weight", (c_out, c_in, k, k), bound)
        self.bias = store.zeros(f"{name}.bias", (1, c_out, 1, 1)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class TransposedConv:
    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, k: int, stride: int):
        self.stride = stride
        bound = 1.0 / math.sqrt(c_in * k * k)
        self.weight = store.uniform(f"{name}.weight", (c_in, c_out, k, k), bound)

    def __call__(self, x: Tensor) -> Tensor:
        return F.transposed_conv2d(x, self.weight, self.stride)


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, channels: int):
        self.weight = store.constant(f"{name}.weight", (1, channels, 1, 1), 1.0)
        self.bias = store.zeros(f"{name}.bias", (1, channels, 1, 1))

    def __call__(self, x: Tensor) -> Tensor:
        return F.add(F.mul(F.layer_norm(x), self.weight), self.bias)


class ConvActConv:
    """The convolution-activation-convolution composite"""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_mid: int, c_out: int, k: int = 3):
        self.first = Conv(store, f"{name}.conv1", c_in, c_mid, k)
        self.second = Conv(store, f"{name}.conv2", c_mid, c_out, k)

    def __call__(self, x: Tensor) -> Tensor:
        return self.second(F.leaky_relu(self.first(x)))


class ResidualBlock:
    """RB: f + conv(act(conv(f))) with channel-preserving 3×3 convolutions"""

    def __init__(self, store: ParamStore, name: str, channels: int):
        self.channels = channels
        self.body = ConvActConv(store, name, channels, channels, channels, 3)

    @property
    def projection(self) -> Conv:
        return self.body.second

    def __call__(self, f: Tensor) -> Tensor:
        if f.shape[1] != self.channels:
            raise ShapeError(f"residual block expects {self.channels} channels, got {f.shape}")
        return F.add(f, self.body(f))


class ResidualSkipBlock:
    """RSB: 1×1 fusion of decoder and skip features followed by a residual block"""

    def __init__(self, store: ParamStore, name: str, channels: int, skip_channels: Optional[int] = None):
        self.channels = channels
        self.fuse = Conv(store, f"{name}.fuse", channels + (skip_channels or channels), channels, 1)
        self.residual = ResidualBlock(store, f"{name}.rb", channels)

    def __call__(self, f_dec: Tensor, f_skip: Tensor) -> Tensor:
        if f_dec.shape[0] != f_skip.shape[0] or f_dec.shape[2:] != f_skip.shape[2:]:
            raise ShapeError(f"RSB inputs disagree spatially: {f_dec.shape} vs {f_skip.shape}")
        return self.residual(self.fuse(F.concat([f_dec, f_skip])))


# ---------------------------------------------------------------------------
# Non-local branch: shifted-window self-attention

def partition_windows(x: Tensor, window: int) -> Tensor:
    return F.window_partition(x, window)


def merge_windows(t: Tensor, n: int, h: int, w: int, window: int) -> Tensor:
    return F.window_merge(t, n, h, w, window)


def cyclic_shift(x: Tensor, shift: int) -> Tensor:
    return F.roll(x, -shift, -shift)


def cyclic_unshift(x: Tensor, shift: int) -> Tensor:
    return F.roll(x, shift, shift)


class WindowAttentionBlock:
    """f̂ = MSA(LN(f)) + f; f = MLP(LN(f̂)) + f̂ with attention restricted to windows.

    Token-wise linear maps are 1×1 convolutions applied before partitioning,
    which is equivalent to per-token projections and commutes with the shift.
    """

    def __init__(self, store: ParamStore, name: str, config: BlockConfig, shift: int):
        c = config.channels
        self.config = config
        self.shift = shift
        self.norm1 = LayerNorm(store, f"{name}.norm1", c)
        self.query = Conv(store, f"{name}.q", c, c, 1)
        self.key = Conv(store, f"{name}.k", c, c, 1)
        self.value = Conv(store, f"{name}.v", c, c, 1)
        self.proj = Conv(store, f"{name}.proj", c, c, 1)
        self.norm2 = LayerNorm(store, f"{name}.norm2", c)
        hidden = max(1, int(round(c * config.mlp_ratio)))
        self.mlp_in = Conv(store, f"{name}.mlp1", c, hidden, 1)
        self.mlp_out = Conv(store, f"{name}.mlp2", hidden, c, 1)
        self.last_attention: Optional[np.ndarray] = None

    def _heads(self, x: Tensor, window: int) -> Tensor:
        return F.split_heads(partition_windows(x, window), self.config.heads)

    def __call__(self, f: Tensor) -> Tensor:
        n, c, h, w = f.shape
        window = self.config.window_size
        if h % window or w % window:
            raise ConfigurationError(f"window size {window} does not divide feature map {h}x{w}")
        x = self.norm1(f)
        if self.shift:
            x = cyclic_shift(x, self.shift)
        head_dim = c // self.config.heads
        q = F.scale(self._heads(self.query(x), window), head_dim ** -0.5)
        k = self._heads(self.key(x), window)
        v = self._heads(self.value(x), window)
        attention = F.softmax(F.matmul(q, F.transpose_tokens(k)))
        self.last_attention = attention.data
        mixed = merge_windows(F.merge_heads(F.matmul(attention, v)), n, h, w, window)
        out = self.proj(mixed)
        if self.shift:
            out = cyclic_unshift(out, self.shift)
        f_hat = F.add(out, f)
        return F.add(self.mlp_out(F.leaky_relu(self.mlp_in(self.norm2(f_hat)))), f_hat)


class SwinBlockPair:
    """Regular-window block followed by a block with windows shifted by half a window"""

    def __init__(self, store: ParamStore, name: str, config: BlockConfig):
        self.blocks = [
            WindowAttentionBlock(store, f"{name}.wmsa", config, shift=0),
            WindowAttentionBlock(store, f"{name}.swmsa", config, shift=config.window_size // 2),
        ]

    def __call__(self, f: Tensor) -> Tensor:
        for block in self.blocks:
            f = block(f)
        return f


def _check_map(name: str, f: Tensor, d: Tensor) -> None:
    if d.shape[1] != 1 or d.shape[2:] != f.shape[2:] or d.shape[0] not in (1, f.shape[0]):
        raise ShapeError(f"{name} depth map {d.shape} does not match features {f.shape}")


class NonLocalBranch:
    def __init__(self, store: ParamStore, name: str, config: BlockConfig):
        self.swin = SwinBlockPair(store, f"{name}.swin", config)

    def __call__(self, f_enc: Tensor, d_rev: Tensor) -> Tensor:
        _check_map("d_rev", f_enc, d_rev)
        return F.mul(self.swin(f_enc), d_rev)


class LocalBranch:
    """Conv/RB trunk, then 1×1, 3×3, 5×5 convolutions weighted by d_k·β_k and fused back to c channels"""

    KERNELS = (1, 3, 5)

    def __init__(self, store: ParamStore, name: str, channels: int):
        self.trunk_convs = [Conv(store, f"{name}.trunk{i}.conv", channels, channels, 3) for i in range(4)]
        self.trunk_blocks = [ResidualBlock(store, f"{name}.trunk{i}.rb", channels) for i in range(4)]
        self.kernel_convs = [Conv(store, f"{name}.conv{k}", channels, channels, k) for k in self.KERNELS]
        self.betas = [store.constant(f"{name}.beta{k}", (1, 1, 1, 1), 1.0) for k in self.KERNELS]
        self.fuse = ConvActConv(store, f"{name}.clc", 3 * channels, channels, channels, 3)

    def __call__(self, f_enc: Tensor, d1: Tensor, d3: Tensor, d5: Tensor) -> Tensor:
        maps = (d1, d3, d5)
        for k, d in zip(self.KERNELS, maps):
            _check_map(f"d{k}", f_enc, d)
        t = f_enc
        for conv, block in zip(self.trunk_convs, self.trunk_blocks):
            t = block(F.leaky_relu(conv(t)))
        weighted = [F.mul(F.mul(conv(t), d), beta) for conv, d, beta in zip(self.kernel_convs, maps, self.betas)]
        return self.fuse(F.concat(weighted))


class DepthPerceptionModule:
    """f_o = f_r + clc(cat(f_c1, f_c3, f_c5))"""

    def __init__(self, store: ParamStore, name: str, config: BlockConfig):
        self.nonlocal_branch = NonLocalBranch(store, f"{name}.nonlocal", config)
        self.local_branch = LocalBranch(store, f"{name}.local", config.channels)

    def __call__(self, f_enc: Tensor, maps: Sequence[Tensor]) -> Tensor:
        d_rev, d1, d3, d5 = maps
        return F.add(self.nonlocal_branch(f_enc, d_rev), self.local_branch(f_enc, d1, d3, d5))


# ---------------------------------------------------------------------------
# Dual-attention module

class ChannelAttention:
    """f ⊙ sigmoid(clc(AvgP(f)) + clc(MaxP(f))) with a shared squeeze-excitation clc"""

    def __init__(self, store: ParamStore, name: str, channels: int, reduction: int):
        if channels < reduction:
            raise ConfigurationError(f"channel attention needs at least {reduction} channels, got {channels}")
        self.excite = ConvActConv(store, f"{name}.se", channels, channels // reduction, channels, 1)

    def __call__(self, f: Tensor) -> Tensor:
        avg = self.excite(F.global_pool(f, "avg"))
        mx = self.excite(F.global_pool(f, "max"))
        return F.mul(f, F.sigmoid(F.add(avg, mx)))


class SpatialAttention:
    """Self-attention over pooled pixels: f_s = p + γ·(softmax(q·kᵀ)·v), q = k = v = proj(AvgP(f_c))"""

    def __init__(self, store: ParamStore, name: str, channels: int, pool_factor: int):
        self.pool_factor = pool_factor
        self.proj = Conv(store, f"{name}.proj", channels, channels, 1)
        self.gamma = store.zeros(f"{name}.gamma", (1, 1, 1, 1))
        self.last_attention: Optional[np.ndarray] = None

    def __call__(self, f_c: Tensor) -> Tensor:
        n, c, h, w = f_c.shape
        p = self.pool_factor
        if h % p or w % p:
            raise ConfigurationError(f"pool factor {p} does not divide feature map {h}x{w}")
        pooled = F.pool2d(f_c, "avg", p, p)
        ph, pw = pooled.shape[2:]
        tokens = F.to_tokens(self.proj(pooled))
        attention = F.softmax(F.matmul(tokens, F.transpose_tokens(tokens)))
        self.last_attention = attention.data
        attended = F.from_tokens(F.matmul(attention, tokens), ph, pw)
        return F.add(pooled, F.mul(attended, self.gamma))


class DualAttentionModule:
    """f_h = f + f_c ⊙ deconv(f_s)"""

    def __init__(self, store: ParamStore, name: str, config: BlockConfig):
        c, p = config.channels, config.dam_pool_factor
        self.channel = ChannelAttention(store, f"{name}.channel", c, config.se_reduction)
        self.spatial = SpatialAttention(store, f"{name}.spatial", c, p)
        self.upsample = TransposedConv(store, f"{name}.deconv", c, c, p, p)

    def __call__(self, f: Tensor) -> Tensor:
        f_c = self.channel(f)
        f_s = self.spatial(f_c)
        return F.add(f, F.mul(f_c, self.upsample(f_s)))


def zero_parameters(tensors: List[Tensor]) -> None:
    """Set parameters to zero in place (degenerate-case and ablation checks)"""
    for tensor in tensors:
        if tensor is not None:
            tensor.data[...] = 0
