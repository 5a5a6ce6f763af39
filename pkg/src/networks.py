"""DEN, ASN and DGEN sub-networks and the two-stage model that owns them.

All three share one encoder/decoder topology: depth_levels stages of two
3×3 conv+activation layers, stride-2 convolutions between stages, and a
mirrored decoder of 2×2 transposed convolutions fused with the skip features.
"""
import logging
from dataclasses import dataclass, field, fields
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from blocks import (BlockConfig, Conv, DepthPerceptionModule, DualAttentionModule, ResidualBlock,
                    ResidualSkipBlock, TransposedConv)
from config import coerce, format_key_values, parse_key_values, reject_unknown
from depthops import DepthMap, r3s
from errors import ConfigurationError, ShapeError
from tensorcore import ParamStore, Tensor, no_grad
from tensorcore import functional as F

logger = logging.getLogger(__name__)

ABLATION_FLAGS = ("use_dam", "use_rsb", "use_asn", "use_rb", "use_depth", "use_reverse", "use_rs", "use_dpm")


@dataclass
class NetConfig:
    base_channels: int = 16
    depth_levels: int = 3
    block: BlockConfig = field(default_factory=BlockConfig)
    near_is_zero: bool = True
    seed: int = 0
    use_dam: bool = True
    use_rsb: bool = True
    use_asn: bool = True
    use_rb: bool = True
    use_depth: bool = True
    use_reverse: bool = True
    use_rs: bool = True
    use_dpm: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.base_channels <= 0:
            raise ConfigurationError(f"base_channels must be positive, got {self.base_channels}")
        if self.depth_levels < 2:
            raise ConfigurationError(f"depth_levels must be at least 2, got {self.depth_levels}")
        if self.bottleneck_channels % self.block.heads:
            raise ConfigurationError(f"bottleneck channels ({self.bottleneck_channels}) "
                                     f"not divisible by heads ({self.block.heads})")
        if self.use_dam and self.base_channels < self.block.se_reduction:
            raise ConfigurationError(f"base_channels ({self.base_channels}) below the channel-attention "
                                     f"reduction ratio ({self.block.se_reduction})")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    @property
    def bottleneck_channels(self) -> int:
        return self.channels(self.depth_levels - 1)

    @property
    def downsampling(self) -> int:
        return 2 ** (self.depth_levels - 1)

    def bottleneck_size(self, h: int, w: int) -> Tuple[int, int]:
        return h // self.downsampling, w // self.downsampling

    def validate_input_size(self, h: int, w: int) -> None:
        """Reject image sizes the topology cannot process before any compute"""
        factor = self.downsampling
        if h % factor or w % factor:
            raise ConfigurationError(f"image size {h}x{w} is not divisible by {factor} "
                                     f"({self.depth_levels} levels)")
        bh, bw = self.bottleneck_size(h, w)
        ws = self.block.window_size
        if self.use_dpm and (bh % ws or bw % ws):
            raise ConfigurationError(f"bottleneck {bh}x{bw} is not divisible by window size {ws}")
        if self.use_dam:
            p = self.block.dam_pool_factor
            for level in range(self.depth_levels - 1):
                lh, lw = h >> level, w >> level
                if lh % p or lw % p:
                    raise ConfigurationError(f"skip level {level} ({lh}x{lw}) is not divisible by "
                                             f"DAM pool factor {p}")

    def replace(self, **changes) -> "NetConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return NetConfig(**values)

    def to_dict(self) -> Dict[str, object]:
        values: Dict[str, object] = {}
        for f in fields(self):
            if f.name == "block":
                for bf in fields(BlockConfig):
                    if bf.name != "channels":
                        values[f"block.{bf.name}"] = getattr(self.block, bf.name)
            else:
                values[f.name] = getattr(self, f.name)
        return values

    def to_text(self) -> str:
        return format_key_values(self.to_dict())

    @classmethod
    def from_dict(cls, values: Dict[str, str], source: str = "<config>") -> "NetConfig":
        defaults = cls().to_dict()
        reject_unknown(values, defaults, source)
        merged = {key: coerce(values[key], default, key) if key in values else default
                  for key, default in defaults.items()}
        block = BlockConfig(**{key[len("block."):]: value for key, value in merged.items()
                               if key.startswith("block.")})
        top = {key: value for key, value in merged.items() if not key.startswith("block.")}
        return cls(block=block, **top)

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "NetConfig":
        return cls.from_dict(parse_key_values(text, source), source)


# ---------------------------------------------------------------------------
# Shared encoder/decoder

class Encoder:
    def __init__(self, store: ParamStore, name: str, config: NetConfig, in_channels: int):
        self.levels: List[Tuple[Conv, Conv]] = []
        self.downs: List[Conv] = []
        c_prev = in_channels
        for level in range(config.depth_levels):
            c = config.channels(level)
            if level > 0:
                self.downs.append(Conv(store, f"{name}.down{level - 1}", c_prev, c, 3, stride=2, padding=1))
                c_prev = c
            self.levels.append((Conv(store, f"{name}.enc{level}.conv1", c_prev, c, 3),
                                Conv(store, f"{name}.enc{level}.conv2", c, c, 3)))
            c_prev = c

    def __call__(self, x: Tensor) -> Tuple[List[Tensor], Tensor]:
        """Returns (skip features from fine to coarse, bottleneck)"""
        skips: List[Tensor] = []
        f = x
        for level, (conv1, conv2) in enumerate(self.levels):
            if level > 0:
                skips.append(f)
                f = F.leaky_relu(self.downs[level - 1](f))
            f = F.leaky_relu(conv2(F.leaky_relu(conv1(f))))
        return skips, f


Inject = Callable[[int, Tensor], Tensor]


class Decoder:
    """Mirrors the encoder; `inject(step, f)` may transform features after each stage"""

    def __init__(self, store: ParamStore, name: str, config: NetConfig):
        self.ups: List[TransposedConv] = []
        self.merges: List[Conv] = []
        self.refines: List[Conv] = []
        for level in reversed(range(config.depth_levels - 1)):
            c = config.channels(level)
            self.ups.append(TransposedConv(store, f"{name}.up{level}", config.channels(level + 1), c, 2, 2))
            self.merges.append(Conv(store, f"{name}.dec{level}.merge", 2 * c, c, 3))
            self.refines.append(Conv(store, f"{name}.dec{level}.refine", c, c, 3))

    def __call__(self, bottleneck: Tensor, skips: List[Tensor], inject: Optional[Inject] = None) -> List[Tensor]:
        """Returns the decoded features, coarse to fine, starting with the (possibly injected) bottleneck"""
        f = inject(0, bottleneck) if inject else bottleneck
        features = [f]
        for step, (up, merge, refine) in enumerate(zip(self.ups, self.merges, self.refines), start=1):
            skip = skips[-step]
            f = F.leaky_relu(merge(F.concat([F.leaky_relu(up(f)), skip])))
            f = F.leaky_relu(refine(f))
            if inject:
                f = inject(step, f)
            features.append(f)
        return features


def _check_image(x: Tensor, config: NetConfig) -> None:
    if x.shape[1] != 3:
        raise ShapeError(f"expected a 3-channel image batch, got {x.shape}")
    config.validate_input_size(x.shape[2], x.shape[3])


# ---------------------------------------------------------------------------
# Sub-networks

class DepthEstimationNetwork:
    """DEN: image -> depth in [0, 1]; DAM refines every skip connection when enabled"""

    def __init__(self, store: ParamStore, config: NetConfig, name: str = "den"):
        self.config = config
        self.encoder = Encoder(store, f"{name}.encoder", config, 3)
        self.decoder = Decoder(store, f"{name}.decoder", config)
        self.dams: List[DualAttentionModule] = []
        if config.use_dam:
            self.dams = [DualAttentionModule(store, f"{name}.dam{level}", config.block.with_channels(config.channels(level)))
                         for level in range(config.depth_levels - 1)]
        self.head = Conv(store, f"{name}.head", config.base_channels, 1, 3)

    def __call__(self, x: Tensor) -> Tuple[Tensor, List[Tensor]]:
        _check_image(x, self.config)
        skips, bottleneck = self.encoder(x)
        if self.dams:
            skips = [dam(skip) for dam, skip in zip(self.dams, skips)]
        features = self.decoder(bottleneck, skips)
        return F.sigmoid(self.head(features[-1])), features


class AuxiliarySupervisionNetwork:
    """ASN: regresses the input scene from X, fusing DEN decoder features through RSBs"""

    def __init__(self, store: ParamStore, config: NetConfig, name: str = "asn"):
        self.config = config
        self.encoder = Encoder(store, f"{name}.encoder", config, 3)
        self.decoder = Decoder(store, f"{name}.decoder", config)
        self.fusions: List[ResidualSkipBlock] = []
        if config.use_rsb:
            levels = [config.depth_levels - 1] + list(reversed(range(config.depth_levels - 1)))
            self.fusions = [ResidualSkipBlock(store, f"{name}.rsb{level}", config.channels(level))
                            for level in levels]
        self.head = Conv(store, f"{name}.head", config.base_channels, 3, 3)

    def __call__(self, x: Tensor, den_features: List[Tensor]) -> Tensor:
        _check_image(x, self.config)
        if len(den_features) != self.config.depth_levels:
            raise ConfigurationError(f"ASN expects {self.config.depth_levels} DEN feature maps, "
                                     f"got {len(den_features)}")
        skips, bottleneck = self.encoder(x)
        inject = None
        if self.fusions:
            def inject(step: int, f: Tensor) -> Tensor:
                return self.fusions[step](f, den_features[step])
        features = self.decoder(bottleneck, skips, inject)
        return F.sigmoid(self.head(features[-1]))


class DepthGuidedEnhancementNetwork:
    """DGEN: enhancement guided by the R³S-transformed depth at the bottleneck"""

    def __init__(self, store: ParamStore, config: NetConfig, name: str = "dgen"):
        self.config = config
        self.encoder = Encoder(store, f"{name}.encoder", config, 3)
        self.decoder = Decoder(store, f"{name}.decoder", config)
        self.skip_blocks: List[ResidualBlock] = []
        if config.use_rb:
            self.skip_blocks = [ResidualBlock(store, f"{name}.rb{level}", config.channels(level))
                                for level in range(config.depth_levels - 1)]
        self.dpm: Optional[DepthPerceptionModule] = None
        if config.use_dpm:
            self.dpm = DepthPerceptionModule(store, f"{name}.dpm",
                                             config.block.with_channels(config.bottleneck_channels))
        self.head = Conv(store, f"{name}.head", config.base_channels, 3, 3)

    def depth_maps(self, d: DepthMap, h: int, w: int) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
        """R³S maps at bottleneck scale with the ablation substitutions applied"""
        cfg = self.config
        if not cfg.use_depth:
            ones = Tensor.ones((d.shape[0], 1, h, w))
            return ones, ones, ones, ones
        maps = r3s(d.in_convention(near_is_zero=True), h, w)
        d1 = maps.d1.to_tensor()
        d_rev = maps.d_rev.to_tensor() if cfg.use_reverse else d1
        if cfg.use_rs:
            return d_rev, d1, maps.d3.to_tensor(), maps.d5.to_tensor()
        return d_rev, d1, d1, d1

    def __call__(self, x: Tensor, d: DepthMap) -> Tensor:
        _check_image(x, self.config)
        if d.shape[2:] != x.shape[2:] or d.shape[0] not in (1, x.shape[0]):
            raise ShapeError(f"depth map {d.shape} does not match image batch {x.shape}")
        skips, bottleneck = self.encoder(x)
        if self.skip_blocks:
            skips = [rb(skip) for rb, skip in zip(self.skip_blocks, skips)]
        if self.dpm is not None:
            bh, bw = bottleneck.shape[2:]
            bottleneck = self.dpm(bottleneck, self.depth_maps(d, bh, bw))
        features = self.decoder(bottleneck, skips)
        return F.sigmoid(self.head(features[-1]))


# ---------------------------------------------------------------------------
# Two-stage model

class UVZModel:
    """DEN, ASN (training-only, optional) and DGEN sharing one ParamStore"""

    PREFIXES = ("den.", "asn.", "dgen.")

    def __init__(self, config: NetConfig, store: Optional[ParamStore] = None):
        config.validate()
        self.config = config
        self.store = store if store is not None else ParamStore(config.seed)
        self.den = DepthEstimationNetwork(self.store, config)
        self.asn = AuxiliarySupervisionNetwork(self.store, config) if config.use_asn else None
        self.dgen = DepthGuidedEnhancementNetwork(self.store, config)
        logger.debug("built model with %d parameters (den=%d asn=%d dgen=%d)", self.store.count(),
                     self.store.count("den."), self.store.count("asn."), self.store.count("dgen."))

    def den_forward(self, x: Tensor) -> Tuple[DepthMap, List[Tensor]]:
        d, features = self.den(x)
        return DepthMap(np.clip(d.data, 0.0, 1.0), self.config.near_is_zero), features

    def den_depth_tensor(self, x: Tensor) -> Tuple[Tensor, List[Tensor]]:
        """DEN output kept as a tape tensor for the stage-1 loss"""
        return self.den(x)

    def asn_forward(self, x: Tensor, den_features: List[Tensor]) -> Tensor:
        if self.asn is None:
            raise ConfigurationError("ASN is disabled in this configuration (use_asn=false)")
        return self.asn(x, den_features)

    def dgen_forward(self, x: Tensor, d: DepthMap) -> Tensor:
        return self.dgen(x, d)

    def enhance(self, x: Tensor, depth: Optional[DepthMap] = None) -> Tuple[Tensor, DepthMap]:
        """Inference: DEN depth (or a supplied ground-truth depth) then DGEN"""
        with no_grad():
            if depth is None:
                depth, _ = self.den_forward(x)
            return self.dgen_forward(x, depth), depth

    def parameter_counts(self) -> Dict[str, int]:
        counts = {prefix.rstrip("."): self.store.count(prefix) for prefix in self.PREFIXES}
        counts["total"] = self.store.count()
        return counts


def init_params(config: NetConfig) -> ParamStore:
    """Deterministic seeded parameters for the full model described by config"""
    return UVZModel(config).store
