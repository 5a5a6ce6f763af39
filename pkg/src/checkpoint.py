"""Binary checkpoint files.

Layout (little-endian):
    b"UVZC", u32 version
    u32 length + UTF-8 key=value config text (network config plus meta.* lines)
    u32 count, then per array: u16 name length, UTF-8 name, u8 rank, u32 dims, float32 data
    optimizer moments in the same array format (names suffixed .m / .v)
    u32 CRC32 of every preceding byte
"""
import logging
import os
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from config import format_key_values, parse_key_values
from errors import ConfigurationError, FormatError
from networks import NetConfig
from tensorcore import ParamStore

logger = logging.getLogger(__name__)

MAGIC = b"UVZC"
VERSION = 1


@dataclass
class Checkpoint:
    config: NetConfig
    params: Dict[str, np.ndarray] = field(default_factory=OrderedDict)
    optimizer: Dict[str, np.ndarray] = field(default_factory=OrderedDict)
    epoch: int = 0
    step: int = 0
    stage: int = 1
    best_loss: Optional[float] = None
    version: int = VERSION

    @classmethod
    def from_store(cls, config: NetConfig, store: ParamStore, epoch: int = 0, stage: int = 1,
                   best_loss: Optional[float] = None) -> "Checkpoint":
        return cls(config, store.state_arrays(), store.optimizer_arrays(), epoch, store.step, stage, best_loss)

    def restore(self, store: ParamStore, prefix: str = "", optimizer: bool = True) -> int:
        """Copy arrays into store; shapes are checked per parameter"""
        params = OrderedDict((k, v) for k, v in self.params.items() if k.startswith(prefix))
        loaded = store.load_arrays(params, self.optimizer if optimizer else None, prefix=prefix)
        if optimizer and not prefix:
            store.step = self.step
        return loaded

    def meta(self) -> Dict[str, object]:
        values: Dict[str, object] = {"meta.epoch": self.epoch, "meta.step": self.step, "meta.stage": self.stage}
        if self.best_loss is not None:
            values["meta.best_loss"] = repr(float(self.best_loss))
        return values


# ---------------------------------------------------------------------------
# Encoding

def _encode_arrays(arrays: Dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(arrays))]
    for name, array in arrays.items():
        encoded = name.encode("utf-8")
        data = np.ascontiguousarray(array, dtype="<f4")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    return b"".join(parts)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    text = (ckpt.config.to_text() + format_key_values(ckpt.meta())).encode("utf-8")
    body = b"".join([
        MAGIC,
        struct.pack("<I", ckpt.version),
        struct.pack("<I", len(text)),
        text,
        _encode_arrays(ckpt.params),
        _encode_arrays(ckpt.optimizer),
    ])
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes, path: Optional[str]):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise FormatError(f"Truncated checkpoint while reading {what} "
                              f"(needed {size} bytes, {len(self.data) - self.offset} left)",
                              offset=self.offset, path=self.path)
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def arrays(self, section: str) -> "OrderedDict[str, np.ndarray]":
        (count,) = self.unpack("<I", f"{section} count")
        arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for _ in range(count):
            start = self.offset
            (name_len,) = self.unpack("<H", f"{section} name length")
            try:
                name = self.take(name_len, f"{section} name").decode("utf-8")
            except UnicodeDecodeError:
                raise FormatError(f"Invalid UTF-8 in {section} name", offset=start, path=self.path) from None
            (rank,) = self.unpack("<B", f"rank of {name}")
            if rank == 0 or rank > 4:
                raise FormatError(f"Array {name!r} has invalid rank {rank}", offset=self.offset - 1, path=self.path)
            dims = self.unpack(f"<{rank}I", f"dims of {name}")
            size = int(np.prod(dims)) * 4
            payload = self.take(size, f"data of {name}")
            if name in arrays:
                raise FormatError(f"Duplicate array {name!r}", offset=start, path=self.path)
            arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        return arrays


def decode_checkpoint(data: bytes, path: Optional[str] = None) -> Checkpoint:
    reader = _Reader(data, path)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"Bad magic {magic!r}, expected {MAGIC!r}", offset=0, path=path)
    (version,) = reader.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"Unsupported checkpoint version {version} (this build reads {VERSION})",
                          offset=4, path=path)
    (text_len,) = reader.unpack("<I", "config length")
    text_offset = reader.offset
    try:
        text = reader.take(text_len, "config block").decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("Config block is not valid UTF-8", offset=text_offset, path=path) from None
    params = reader.arrays("parameter")
    optimizer = reader.arrays("optimizer")
    (stored_crc,) = reader.unpack("<I", "checksum")
    if reader.offset != len(data):
        raise FormatError(f"{len(data) - reader.offset} trailing bytes after checksum",
                          offset=reader.offset, path=path)
    actual_crc = zlib.crc32(data[:-4])
    if stored_crc != actual_crc:
        raise FormatError(f"Checksum mismatch (stored {stored_crc:08x}, computed {actual_crc:08x})",
                          offset=len(data) - 4, path=path)

    try:
        values = parse_key_values(text, f"{path or '<checkpoint>'} config")
        meta = {key: values.pop(key) for key in list(values) if key.startswith("meta.")}
        config = NetConfig.from_dict(values, f"{path or '<checkpoint>'} config")
        best = meta.get("meta.best_loss")
        return Checkpoint(
            config=config,
            params=params,
            optimizer=optimizer,
            epoch=int(meta.get("meta.epoch", 0)),
            step=int(meta.get("meta.step", 0)),
            stage=int(meta.get("meta.stage", 1)),
            best_loss=float(best) if best else None,
            version=version,
        )
    except (ConfigurationError, ValueError) as e:
        raise FormatError(f"Invalid config block: {e}", offset=text_offset, path=path) from e


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    data = encode_checkpoint(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
    logger.info("saved checkpoint %s (%d parameters, epoch %d, %d bytes)",
                path, len(ckpt.params), ckpt.epoch, len(data))


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise FormatError(f"Cannot read checkpoint: {e.strerror}", path=path) from e
    ckpt = decode_checkpoint(data, path)
    logger.debug("loaded checkpoint %s (stage %d, epoch %d)", path, ckpt.stage, ckpt.epoch)
    return ckpt


def config_differences(expected: NetConfig, actual: NetConfig, ignore: Iterable[str] = ()) -> List[str]:
    skip = set(ignore)
    left, right = expected.to_dict(), actual.to_dict()
    return [f"{key}: {right[key]!r} != {left[key]!r}" for key in left
            if key not in skip and left[key] != right[key]]


def require_compatible(expected: NetConfig, ckpt: Checkpoint, ignore: Iterable[str] = (),
                       path: str = "<checkpoint>") -> None:
    """Raise ConfigurationError listing every config key the checkpoint disagrees on"""
    differences = config_differences(expected, ckpt.config, ignore)
    if differences:
        raise ConfigurationError(f"{path} was written with a different network config: "
                                 + "; ".join(differences))
