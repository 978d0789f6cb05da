"""Readers and writers for lidar frames, PNM images and masks, teacher feature maps,
and per-point label files.

All binary formats are little-endian except 16-bit PGM samples, which are
big-endian as the Netpbm standard requires.

LFRM layout::

    "LFRM" | version u16 = 1 | flags u16 (bit0 = labels) | reserved u16 = 0
    | timestamp_ns u64 | count u32 | count * (x, y, z, intensity) f32
    | [count * label u16]

FMAP layout::

    "FMAP" | version u16 = 1 | H u32 | W u32 | C u32 | H*W*C f32 in [h][w][c] order

PLBL layout (pseudo-label files)::

    "PLBL" | version u16 = 1 | reserved u16 = 0 | count u32 | count * label u16
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import IGNORE_ID, load_rig_config, load_run_config  # noqa: F401  (re-export)
from .errors import ConsistencyError, FormatError, TruncationError

LFRM_MAGIC = b"LFRM"
FMAP_MAGIC = b"FMAP"
PLBL_MAGIC = b"PLBL"
FORMAT_VERSION = 1

_LFRM_HEADER = struct.Struct("<4sHHHQI")
_FMAP_HEADER = struct.Struct("<4sHIII")
_PLBL_HEADER = struct.Struct("<4sHHI")

_POINT_DTYPE = np.dtype("<f4")
_LABEL_DTYPE = np.dtype("<u2")


@dataclass(eq=False)
class LidarFrame:
    timestamp_ns: int
    points: np.ndarray  # (N, 4) float32: x, y, z, intensity
    labels: np.ndarray | None = None  # (N,) uint16

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float32)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"points must have shape (N, 4), got {pts.shape}")
        self.points = pts
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint16).reshape(-1)

    def __len__(self) -> int:
        return self.points.shape[0]

    def validate(self) -> None:
        if not 0 < int(self.timestamp_ns) < 2**64:
            raise ValueError(f"timestamp must be a positive u64, got {self.timestamp_ns}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("lidar frame contains non-finite values")
        if self.labels is not None and len(self.labels) != len(self):
            raise ValueError(f"{len(self.labels)} labels for {len(self)} points")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LidarFrame):
            return NotImplemented
        if self.timestamp_ns != other.timestamp_ns:
            return False
        if self.points.tobytes() != other.points.tobytes() or self.points.shape != other.points.shape:
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        return self.labels is None or self.labels.tobytes() == other.labels.tobytes()


@dataclass(eq=False)
class ImageFrame:
    timestamp_ns: int
    width: int
    height: int
    channels: int
    pixels: np.ndarray  # uint8, row-major, length width*height*channels

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=np.uint8).reshape(-1)
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if self.pixels.size != self.width * self.height * self.channels:
            raise ValueError("pixel count does not match width*height*channels")

    def array(self) -> np.ndarray:
        return self.pixels.reshape(self.height, self.width, self.channels)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ImageFrame):
            return NotImplemented
        return ((self.timestamp_ns, self.width, self.height, self.channels)
                == (other.timestamp_ns, other.width, other.height, other.channels)
                and np.array_equal(self.pixels, other.pixels))


@dataclass(eq=False)
class SemanticMask:
    width: int
    height: int
    ids: np.ndarray  # uint16, row-major
    ignore_id: int = IGNORE_ID

    def __post_init__(self) -> None:
        self.ids = np.asarray(self.ids, dtype=np.uint16).reshape(-1)
        if self.ids.size != self.width * self.height:
            raise ValueError("mask id count does not match width*height")

    def array(self) -> np.ndarray:
        return self.ids.reshape(self.height, self.width)

    def validate(self, n_classes: int) -> None:
        bad = (self.ids >= n_classes) & (self.ids != self.ignore_id)
        if np.any(bad):
            raise ValueError(f"mask holds ids outside [0, {n_classes}) and not IGNORE")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SemanticMask):
            return NotImplemented
        return (self.width, self.height) == (other.width, other.height) and np.array_equal(
            self.ids, other.ids)


@dataclass(eq=False)
class FeatureMap:
    data: np.ndarray  # (H, W, C) float32

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"feature map must be (H, W, C) with all dims >= 1, got {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureMap):
            return NotImplemented
        return self.data.shape == other.data.shape and self.data.tobytes() == other.data.tobytes()


# -- lidar frames -----------------------------------------------------------

def encode_lidar_frame(frame: LidarFrame) -> bytes:
    try:
        frame.validate()
    except ValueError as exc:
        raise ValueError(f"cannot encode lidar frame: {exc}") from exc
    flags = 1 if frame.labels is not None else 0
    out = [_LFRM_HEADER.pack(LFRM_MAGIC, FORMAT_VERSION, flags, 0,
                             int(frame.timestamp_ns), len(frame)),
           frame.points.astype(_POINT_DTYPE, copy=False).tobytes()]
    if frame.labels is not None:
        out.append(frame.labels.astype(_LABEL_DTYPE, copy=False).tobytes())
    return b"".join(out)


def decode_lidar_frame(buf: bytes, source: str = "<bytes>") -> LidarFrame:
    if len(buf) < 4 or buf[:4] != LFRM_MAGIC:
        raise FormatError(f"{source}: not an LFRM file (bad magic)")
    if len(buf) < _LFRM_HEADER.size:
        raise TruncationError(f"{source}: header truncated ({len(buf)} bytes)")
    _, version, flags, _reserved, ts, count = _LFRM_HEADER.unpack_from(buf)
    if version != FORMAT_VERSION:
        raise FormatError(f"{source}: unsupported LFRM version {version}")
    off = _LFRM_HEADER.size
    n_pts = count * 16
    if len(buf) < off + n_pts:
        raise TruncationError(f"{source}: expected {count} points, payload truncated")
    points = np.frombuffer(buf, dtype=_POINT_DTYPE, count=count * 4, offset=off).reshape(count, 4)
    off += n_pts
    labels = None
    if flags & 1:
        if len(buf) < off + 2 * count:
            raise ConsistencyError(f"{source}: label flag set but labels missing")
        labels = np.frombuffer(buf, dtype=_LABEL_DTYPE, count=count, offset=off)
        off += 2 * count
    if len(buf) != off:
        raise ConsistencyError(f"{source}: {len(buf) - off} trailing bytes after payload")
    frame = LidarFrame(ts, points.astype(np.float32), None if labels is None else labels.astype(np.uint16))
    try:
        frame.validate()
    except ValueError as exc:
        raise FormatError(f"{source}: {exc}") from exc
    return frame


def write_lidar_frame(frame: LidarFrame, path: str | Path) -> None:
    Path(path).write_bytes(encode_lidar_frame(frame))


def read_lidar_frame(path: str | Path) -> LidarFrame:
    return decode_lidar_frame(Path(path).read_bytes(), str(path))


# -- PNM images and masks ---------------------------------------------------

_PNM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*([^\s#]+)")


def _parse_pnm_header(buf: bytes, source: str) -> tuple[bytes, int, int, int, int]:
    """Return (magic, width, height, maxval, data offset)."""
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PNM_TOKEN.match(buf, pos)
        if m is None:
            raise FormatError(f"{source}: truncated PNM header")
        tokens.append(m.group(1))
        pos = m.end()
    if pos >= len(buf) or buf[pos:pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise FormatError(f"{source}: missing whitespace after PNM header")
    magic = tokens[0]
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{source}: non-numeric PNM header field") from exc
    if width < 1 or height < 1:
        raise FormatError(f"{source}: bad PNM dimensions {width}x{height}")
    return magic, width, height, maxval, pos + 1


def timestamp_from_path(path: str | Path) -> int:
    stem = Path(path).stem
    if not stem.isdigit():
        raise FormatError(f"{path}: filename stem is not a nanosecond timestamp")
    return int(stem)


def decode_image(buf: bytes, timestamp_ns: int = 0, source: str = "<bytes>") -> ImageFrame:
    magic, w, h, maxval, off = _parse_pnm_header(buf, source)
    if magic == b"P6":
        channels = 3
    elif magic == b"P5":
        channels = 1
    else:
        raise FormatError(f"{source}: unsupported image magic {magic!r}")
    if maxval != 255:
        raise FormatError(f"{source}: image maxval must be 255, got {maxval}")
    n = w * h * channels
    if len(buf) - off != n:
        raise FormatError(f"{source}: expected {n} samples, found {len(buf) - off}")
    return ImageFrame(timestamp_ns, w, h, channels, np.frombuffer(buf, np.uint8, n, off).copy())


def encode_image(img: ImageFrame) -> bytes:
    magic = b"P6" if img.channels == 3 else b"P5"
    return magic + f"\n{img.width} {img.height}\n255\n".encode() + img.pixels.tobytes()


def read_image(path: str | Path) -> ImageFrame:
    path = Path(path)
    return decode_image(path.read_bytes(), timestamp_from_path(path), str(path))


def write_image(img: ImageFrame, path: str | Path) -> None:
    Path(path).write_bytes(encode_image(img))


def decode_mask(buf: bytes, source: str = "<bytes>") -> SemanticMask:
    magic, w, h, maxval, off = _parse_pnm_header(buf, source)
    if magic != b"P5":
        raise FormatError(f"{source}: mask must be P5, got {magic!r}")
    if maxval != 65535:
        raise FormatError(f"{source}: mask maxval must be 65535, got {maxval}")
    n = w * h
    if len(buf) - off != 2 * n:
        raise FormatError(f"{source}: expected {n} 16-bit samples, found {(len(buf) - off) / 2:g}")
    ids = np.frombuffer(buf, np.dtype(">u2"), n, off).astype(np.uint16)
    return SemanticMask(w, h, ids)


def encode_mask(mask: SemanticMask) -> bytes:
    return (f"P5\n{mask.width} {mask.height}\n65535\n".encode()
            + mask.ids.astype(">u2").tobytes())


def read_mask(path: str | Path) -> SemanticMask:
    return decode_mask(Path(path).read_bytes(), str(path))


def write_mask(mask: SemanticMask, path: str | Path) -> None:
    Path(path).write_bytes(encode_mask(mask))


# -- teacher feature maps ---------------------------------------------------

def encode_feature_map(fm: FeatureMap) -> bytes:
    if not np.all(np.isfinite(fm.data)):
        raise ValueError("feature map contains non-finite values")
    H, W, C = fm.data.shape
    return _FMAP_HEADER.pack(FMAP_MAGIC, FORMAT_VERSION, H, W, C) + fm.data.astype("<f4").tobytes()


def decode_feature_map(buf: bytes, source: str = "<bytes>") -> FeatureMap:
    if len(buf) < 4 or buf[:4] != FMAP_MAGIC:
        raise FormatError(f"{source}: not an FMAP file (bad magic)")
    if len(buf) < _FMAP_HEADER.size:
        raise TruncationError(f"{source}: header truncated")
    _, version, H, W, C = _FMAP_HEADER.unpack_from(buf)
    if version != FORMAT_VERSION:
        raise FormatError(f"{source}: unsupported FMAP version {version}")
    if min(H, W, C) < 1:
        raise FormatError(f"{source}: dimensions must be >= 1, got {H}x{W}x{C}")
    n = H * W * C
    have = len(buf) - _FMAP_HEADER.size
    if have < 4 * n:
        raise TruncationError(f"{source}: header announces {n} floats, found {have // 4}")
    if have > 4 * n:
        raise FormatError(f"{source}: {have - 4 * n} trailing bytes after payload")
    data = np.frombuffer(buf, "<f4", n, _FMAP_HEADER.size).reshape(H, W, C).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{source}: feature map contains non-finite values")
    return FeatureMap(data)


def write_feature_map(fm: FeatureMap, path: str | Path) -> None:
    Path(path).write_bytes(encode_feature_map(fm))


def read_feature_map(path: str | Path) -> FeatureMap:
    return decode_feature_map(Path(path).read_bytes(), str(path))


# -- per-point label files --------------------------------------------------

def encode_labels(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels, dtype=np.uint16).reshape(-1)
    return _PLBL_HEADER.pack(PLBL_MAGIC, FORMAT_VERSION, 0, labels.size) + labels.astype("<u2").tobytes()


def decode_labels(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 4 or buf[:4] != PLBL_MAGIC:
        raise FormatError(f"{source}: not a PLBL file (bad magic)")
    if len(buf) < _PLBL_HEADER.size:
        raise TruncationError(f"{source}: header truncated")
    _, version, _, count = _PLBL_HEADER.unpack_from(buf)
    if version != FORMAT_VERSION:
        raise FormatError(f"{source}: unsupported PLBL version {version}")
    have = len(buf) - _PLBL_HEADER.size
    if have < 2 * count:
        raise TruncationError(f"{source}: expected {count} labels, found {have // 2}")
    if have > 2 * count:
        raise FormatError(f"{source}: trailing bytes after labels")
    return np.frombuffer(buf, "<u2", count, _PLBL_HEADER.size).astype(np.uint16)


def write_labels(labels: np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(encode_labels(labels))


def read_labels(path: str | Path) -> np.ndarray:
    return decode_labels(Path(path).read_bytes(), str(path))
