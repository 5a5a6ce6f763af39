"""Binary Netpbm codecs: P6 colour images (8-bit) and P5 depth maps (16-bit).

Arrays are float64 in [0, 1]: images (3, H, W), depth (H, W).
"""
import logging
import os
from typing import Optional, Tuple

import numpy as np

from errors import FormatError

logger = logging.getLogger(__name__)

IMAGE_MAXVAL = 255
DEPTH_MAXVAL = 65535
_WHITESPACE = b" \t\r\n\v\f"


def _read_header(data: bytes, path: Optional[str], expected_maxval: int) -> Tuple[bytes, int, int, int, int]:
    """Returns (magic, width, height, maxval, payload offset)"""
    magic = data[:2]
    if magic in (b"P3", b"P2"):
        kind = "PPM" if magic == b"P3" else "PGM"
        raise FormatError(f"ASCII {kind} ({magic.decode()}) not supported: binary {kind} required",
                          offset=0, path=path)
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"Bad magic {magic!r}: binary PPM required", offset=0, path=path)

    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and (data[pos] in _WHITESPACE or data[pos] == ord("#")):
            if data[pos] == ord("#"):
                end = data.find(b"\n", pos)
                pos = len(data) if end < 0 else end
            pos += 1
        start = pos
        while pos < len(data) and data[pos] not in _WHITESPACE and data[pos] != ord("#"):
            pos += 1
        if start == pos:
            raise FormatError("Truncated header", offset=pos, path=path)
        token = data[start:pos]
        if not token.isdigit():
            raise FormatError(f"Invalid header field {token!r}", offset=start, path=path)
        fields.append(int(token))
        maxval_offset = start
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise FormatError("Missing whitespace after maxval", offset=pos, path=path)
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise FormatError(f"Invalid dimensions {width}x{height}", offset=3, path=path)
    if maxval != expected_maxval:
        raise FormatError(f"Invalid maxval {maxval}: expected {expected_maxval}", offset=maxval_offset, path=path)
    return magic, width, height, maxval, pos + 1


def _decode(data: bytes, path: Optional[str], expected_magic: bytes, expected_maxval: int) -> np.ndarray:
    if data[:2] in (b"P5", b"P6") and data[:2] != expected_magic:
        wanted = "PPM (P6)" if expected_magic == b"P6" else "PGM (P5)"
        raise FormatError(f"Expected binary {wanted}, found {data[:2].decode()}", offset=0, path=path)
    magic, width, height, maxval, offset = _read_header(data, path, expected_maxval)
    channels = 3 if magic == b"P6" else 1
    dtype = ">u2" if maxval > 255 else "u1"
    size = width * height * channels * np.dtype(dtype).itemsize
    if len(data) - offset < size:
        raise FormatError(f"Truncated pixel data: expected {size} bytes, found {len(data) - offset}",
                          offset=len(data), path=path)
    pixels = np.frombuffer(data, dtype=dtype, count=width * height * channels, offset=offset)
    return pixels.reshape(height, width, channels).astype(np.float64) / maxval


def _read(path: str) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise FormatError(f"Cannot read image: {e.strerror}", path=path) from e


def _write(path: str, data: bytes) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(data)


def _quantize(x: np.ndarray, maxval: int) -> np.ndarray:
    return np.rint(np.clip(x, 0.0, 1.0) * maxval)


def decode_image(data: bytes, path: Optional[str] = None) -> np.ndarray:
    pixels = _decode(data, path, b"P6", IMAGE_MAXVAL)
    return np.ascontiguousarray(pixels.transpose(2, 0, 1))


def encode_image(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"encode_image expects (3, H, W), got {image.shape}")
    _, h, w = image.shape
    payload = _quantize(image, IMAGE_MAXVAL).astype(np.uint8).transpose(1, 2, 0).tobytes()
    return f"P6\n{w} {h}\n{IMAGE_MAXVAL}\n".encode("ascii") + payload


def load_image(path: str) -> np.ndarray:
    return decode_image(_read(path), path)


def save_image(path: str, image: np.ndarray) -> None:
    _write(path, encode_image(image))
    logger.debug("wrote %s", path)


def decode_depth(data: bytes, path: Optional[str] = None) -> np.ndarray:
    pixels = _decode(data, path, b"P5", DEPTH_MAXVAL)
    return pixels[:, :, 0]


def encode_depth(depth: np.ndarray) -> bytes:
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise ValueError(f"encode_depth expects (H, W), got {depth.shape}")
    h, w = depth.shape
    payload = _quantize(depth, DEPTH_MAXVAL).astype(">u2").tobytes()
    return f"P5\n{w} {h}\n{DEPTH_MAXVAL}\n".encode("ascii") + payload


def load_depth(path: str) -> np.ndarray:
    return decode_depth(_read(path), path)


def save_depth(path: str, depth: np.ndarray) -> None:
    _write(path, encode_depth(depth))
    logger.debug("wrote %s", path)
