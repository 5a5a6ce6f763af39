"""Synthetic underwater training data.

Clean scenes are coloured primitives over a Perlin-textured backdrop with a
known depth per primitive; raw images come from the attenuation plus
backscatter formation model
    X_c = J_c·exp(−β_c·d) + B_c·(1 − exp(−β_c·d)) + noise
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from perlin_noise import PerlinNoise
from scipy import ndimage

import image_io
from depthops import DepthMap
from errors import ConfigurationError, FormatError, ShapeError

logger = logging.getLogger(__name__)

Triple3 = Tuple[float, float, float]
Seed = Union[int, Sequence[int]]

NEAREST_DEPTH = 0.1
FARTHEST_PRIMITIVE_DEPTH = 0.8
FAR_PLANE = (0.9, 1.0)
NOISE_LATTICE = 16
MANIFEST_NAME = "manifest.txt"
SPLITS = ("train", "test")


@dataclass
class DegradationParams:
    beta: Triple3 = (0.8, 0.35, 0.30)
    backscatter: Triple3 = (0.05, 0.35, 0.45)
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        self.beta = tuple(float(b) for b in self.beta)
        self.backscatter = tuple(float(b) for b in self.backscatter)
        if len(self.beta) != 3 or len(self.backscatter) != 3:
            raise ConfigurationError("beta and backscatter need one value per colour channel")
        if min(self.beta) < 0:
            raise ConfigurationError(f"attenuation coefficients must be >= 0, got {self.beta}")
        r, g, b = self.beta
        if not r > g >= b:
            raise ConfigurationError(f"attenuation must satisfy beta_R > beta_G >= beta_B, got {self.beta}")
        if any(not 0.0 <= c <= 1.0 for c in self.backscatter):
            raise ConfigurationError(f"backscatter colour must lie in [0, 1], got {self.backscatter}")
        if self.noise_sigma < 0:
            raise ConfigurationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


class PrimitiveKind(Enum):
    RECTANGLE = "rectangle"
    DISC = "disc"
    GRADIENT = "gradient"


@dataclass
class Primitive:
    kind: PrimitiveKind
    depth: float
    mask: np.ndarray            # visible pixels after occlusion by nearer primitives


@dataclass
class Scene:
    clean: np.ndarray           # (3, H, W)
    depth: np.ndarray           # (H, W)
    primitives: List[Primitive] = field(default_factory=list)


@dataclass
class ImageTriple:
    name: str
    raw: np.ndarray
    clean: np.ndarray
    depth: np.ndarray

    @property
    def depth_map(self) -> DepthMap:
        return DepthMap(self.depth)


def fractal_noise(rng: np.random.Generator, h: int, w: int, octaves: int = 3) -> np.ndarray:
    """Perlin noise sampled on a coarse lattice and zoomed to (h, w), normalized to [0, 1]"""
    noise = PerlinNoise(octaves=octaves, seed=int(rng.integers(1, 2 ** 31 - 1)))
    lattice = np.array([[noise([i / NOISE_LATTICE, j / NOISE_LATTICE]) for j in range(NOISE_LATTICE)]
                        for i in range(NOISE_LATTICE)])
    field_ = ndimage.zoom(lattice, (h / NOISE_LATTICE, w / NOISE_LATTICE), order=1)[:h, :w]
    low, high = field_.min(), field_.max()
    if high - low < 1e-12:
        return np.zeros((h, w))
    return (field_ - low) / (high - low)


def _primitive_mask(rng: np.random.Generator, kind: PrimitiveKind, h: int, w: int) -> np.ndarray:
    # the top eighth of the frame is left as open water
    top = max(1, h // 8)
    rows, cols = np.mgrid[0:h, 0:w]
    ph = int(rng.integers(max(2, h // 6), max(3, h // 2)))
    pw = int(rng.integers(max(2, w // 6), max(3, w // 2)))
    y0 = int(rng.integers(top, max(top + 1, h - ph)))
    x0 = int(rng.integers(0, max(1, w - pw)))
    if kind is PrimitiveKind.DISC:
        radius = min(ph, pw) / 2
        cy, cx = y0 + radius, x0 + radius
        return (rows + 0.5 - cy) ** 2 + (cols + 0.5 - cx) ** 2 <= radius ** 2
    return (rows >= y0) & (rows < y0 + ph) & (cols >= x0) & (cols < x0 + pw)


def _primitive_colour(rng: np.random.Generator, kind: PrimitiveKind, mask: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    colour = rng.uniform(0.1, 1.0, size=3)
    if kind is not PrimitiveKind.GRADIENT:
        return np.broadcast_to(colour[:, None, None], (3, h, w))
    other = rng.uniform(0.1, 1.0, size=3)
    cols = np.nonzero(mask.any(axis=0))[0]
    t = np.clip((np.arange(w) - cols.min()) / max(1, cols.max() - cols.min()), 0.0, 1.0)
    ramp = colour[:, None] * (1.0 - t) + other[:, None] * t
    return np.broadcast_to(ramp[:, None, :], (3, h, w))


def _compose_scene(seed: Seed, h: int, w: int) -> Scene:
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.25, 0.75, size=3)
    texture = fractal_noise(rng, h, w, octaves=4)
    clean = np.clip(base[:, None, None] + 0.3 * (texture[None] - 0.5), 0.0, 1.0)
    relief = fractal_noise(rng, h, w, octaves=2)
    depth = FAR_PLANE[0] + (FAR_PLANE[1] - FAR_PLANE[0]) * relief

    count = int(rng.integers(3, 7))
    depths = np.linspace(FARTHEST_PRIMITIVE_DEPTH, NEAREST_DEPTH, count)
    kinds = list(PrimitiveKind)
    drawn: List[Tuple[PrimitiveKind, float, np.ndarray]] = []
    for level in depths:                                   # far to near, nearer ones occlude
        kind = kinds[int(rng.integers(0, len(kinds)))]
        mask = _primitive_mask(rng, kind, h, w)
        clean = np.where(mask[None], _primitive_colour(rng, kind, mask), clean)
        depth = np.where(mask, level, depth)
        drawn.append((kind, float(level), mask))

    primitives = [Primitive(kind, level, depth == level) for kind, level, _ in drawn]
    return Scene(np.ascontiguousarray(clean), depth, primitives)


def synth_scene(seed: Seed, h: int, w: int) -> Tuple[np.ndarray, np.ndarray]:
    """Clean image (3, h, w) and depth (h, w), both in [0, 1], fully determined by seed"""
    if h < 8 or w < 8:
        raise ConfigurationError(f"scenes need at least 8x8 pixels, got {h}x{w}")
    scene = _compose_scene(seed, h, w)
    return scene.clean, scene.depth


def degrade(clean: np.ndarray, depth: Union[np.ndarray, DepthMap], params: DegradationParams,
            noise_seed: Optional[Seed] = None) -> np.ndarray:
    """Attenuate and veil a clean image by depth; the noise stream is seeded by (params.seed, noise_seed)"""
    if isinstance(depth, DepthMap):
        depth = depth.data[0, 0]
    clean = np.asarray(clean, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if clean.ndim != 3 or clean.shape[0] != 3 or clean.shape[1:] != depth.shape:
        raise ShapeError(f"degrade: image {clean.shape} and depth {depth.shape} disagree")
    beta = np.asarray(params.beta)[:, None, None]
    veil = np.asarray(params.backscatter)[:, None, None]
    transmission = np.exp(-beta * depth[None])
    raw = clean * transmission + veil * (1.0 - transmission)
    if params.noise_sigma > 0:
        key = [params.seed] if noise_seed is None else [params.seed, *np.atleast_1d(noise_seed).tolist()]
        raw = raw + np.random.default_rng(key).normal(0.0, params.noise_sigma, size=raw.shape)
    return np.clip(raw, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Datasets on disk

@dataclass
class ManifestEntry:
    split: str
    raw: str
    clean: str
    depth: str

    @property
    def name(self) -> str:
        return os.path.splitext(os.path.basename(self.raw))[0]

    def to_line(self) -> str:
        return f"{self.split}\t{self.raw}\t{self.clean}\t{self.depth}"


def split_indices(count: int, split_ratio: float, seed: int) -> Tuple[List[int], List[int]]:
    if not 0.0 <= split_ratio <= 1.0:
        raise ConfigurationError(f"split ratio must lie in [0, 1], got {split_ratio}")
    order = np.random.default_rng([seed, count]).permutation(count)
    n_train = int(round(count * split_ratio))
    return sorted(order[:n_train].tolist()), sorted(order[n_train:].tolist())


def _write_triple(out_dir: str, index: int, split: str, size: int, params: DegradationParams) -> ManifestEntry:
    clean, depth = synth_scene([params.seed, index], size, size)
    raw = degrade(clean, depth, params, noise_seed=index)
    name = f"{index:05d}"
    entry = ManifestEntry(split, f"raw/{name}.ppm", f"clean/{name}.ppm", f"depth/{name}.pgm")
    image_io.save_image(os.path.join(out_dir, entry.raw), raw)
    image_io.save_image(os.path.join(out_dir, entry.clean), clean)
    image_io.save_depth(os.path.join(out_dir, entry.depth), depth)
    return entry


def make_dataset(count: int, split_ratio: float, params: DegradationParams, out_dir: str,
                 size: int = 64, threads: int = 1) -> List[ManifestEntry]:
    """Write count (raw, clean, depth) triples plus manifest.txt under out_dir"""
    if count <= 0:
        raise ConfigurationError(f"dataset size must be positive, got {count}")
    train, _ = split_indices(count, split_ratio, params.seed)
    train_set = set(train)
    splits = ["train" if i in train_set else "test" for i in range(count)]
    os.makedirs(out_dir, exist_ok=True)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            entries = list(pool.map(lambda i: _write_triple(out_dir, i, splits[i], size, params), range(count)))
    else:
        entries = [_write_triple(out_dir, i, splits[i], size, params) for i in range(count)]
    manifest = os.path.join(out_dir, MANIFEST_NAME)
    with open(manifest, "w", encoding="utf-8") as f:
        f.write("".join(entry.to_line() + "\n" for entry in entries))
    logger.info("wrote %d triples (%d train, %d test) to %s", count, len(train), count - len(train), out_dir)
    return entries


def load_manifest(path: str) -> List[ManifestEntry]:
    """Parse a manifest; entry paths are returned relative to the manifest's directory"""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise FormatError(f"Cannot read manifest: {e.strerror}", path=path) from e
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    offset = 0
    for raw_line in data.splitlines(keepends=True):
        try:
            line = raw_line.decode("utf-8").strip()
        except UnicodeDecodeError:
            raise FormatError("Manifest is not valid UTF-8", offset=offset, path=path) from None
        if line and not line.startswith("#"):
            fields = line.split("\t")
            if len(fields) != 4 or fields[0] not in SPLITS:
                raise FormatError(f"Manifest line must be split<TAB>raw<TAB>clean<TAB>depth, got {line!r}",
                                  offset=offset, path=path)
            split, *files = fields
            raw, clean, depth = (f if os.path.isabs(f) else os.path.join(base, f) for f in files)
            entries.append(ManifestEntry(split, raw, clean, depth))
        offset += len(raw_line)
    return entries


def load_triple(entry: ManifestEntry) -> ImageTriple:
    triple = ImageTriple(entry.name, image_io.load_image(entry.raw), image_io.load_image(entry.clean),
                         image_io.load_depth(entry.depth))
    if triple.raw.shape != triple.clean.shape or triple.raw.shape[1:] != triple.depth.shape:
        raise FormatError(f"Triple {entry.name} has inconsistent sizes", path=entry.raw)
    return triple


def load_triples(entries: Sequence[ManifestEntry], split: Optional[str] = None) -> List[ImageTriple]:
    return [load_triple(entry) for entry in entries if split is None or entry.split == split]
