# media_io.py
# Readers and writers for frames, flow fields, weights, text configs and CSV tables

import os
import struct
import logging
from collections import OrderedDict
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd

from config_manager import ConfigError, FusionConfig, coerce_value, config_keys

logger = logging.getLogger("MediaIO")

FLO_MAGIC = 202021.25
WEIGHTS_MAGIC = b"MAVW"
WEIGHTS_VERSION = 1
LUMA = np.array([0.299, 0.587, 0.114])
FRAME_SUFFIXES = (".pgm", ".ppm")


class FormatError(ValueError):
    """Malformed or truncated file; carries the path and byte offset of the problem"""

    def __init__(self, message: str, path: Optional[str] = None, offset: Optional[int] = None):
        self.path = path
        self.offset = offset
        where = path or "<bytes>"
        if offset is not None:
            where = f"{where} @ byte {offset}"
        super().__init__(f"{where}: {message}")


# ---------------------------------------------------------------------------
# Netpbm frames
# ---------------------------------------------------------------------------

def _read_header_tokens(raw: bytes, count: int, path: str) -> Tuple[List[bytes], int]:
    """Pull `count` whitespace-separated header tokens, skipping # comments"""
    tokens = []
    pos = 0
    while len(tokens) < count:
        if pos >= len(raw):
            raise FormatError("truncated header", path, pos)
        ch = raw[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            end = raw.find(b"\n", pos)
            pos = len(raw) if end < 0 else end + 1
        else:
            start = pos
            while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
                pos += 1
            tokens.append(raw[start:pos])
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise FormatError("expected a single whitespace byte before the raster", path, pos)
    return tokens, pos + 1


def read_pgm(path: str) -> np.ndarray:
    """
    Read a binary PGM (P5) or PPM (P6) frame as a float32 H×W array in [0, 1].
    Color input is converted to luma.
    """
    with open(path, "rb") as f:
        raw = f.read()
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported magic {magic!r}, expected P5 or P6", path, 0)
    tokens, offset = _read_header_tokens(raw[2:], 3, path)
    offset += 2
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise FormatError(f"non-numeric header fields {tokens!r}", path, 2)
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise FormatError(f"invalid header width={width} height={height} maxval={maxval}", path, 2)

    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * channels * dtype.itemsize
    available = len(raw) - offset
    if available < expected:
        raise FormatError(f"truncated raster: expected {expected} bytes, found {available}",
                          path, offset + available)
    values = np.frombuffer(raw, dtype=dtype, count=width * height * channels, offset=offset)
    image = values.astype(np.float64) / maxval
    if channels == 3:
        image = image.reshape(height, width, 3) @ LUMA
    return image.reshape(height, width).astype(np.float32)


def write_pgm(path: str, image: np.ndarray) -> None:
    """Write a gray image in [0, 1] as 8-bit P5 with round-half-up quantization"""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"write_pgm expects an H×W image, got shape {image.shape}")
    quantized = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    height, width = quantized.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        f.write(quantized.tobytes())


def list_frames(directory: str) -> List[str]:
    """Frame files in a directory, sorted by name"""
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"frame directory not found: {directory}")
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(FRAME_SUFFIXES))
    return [os.path.join(directory, n) for n in names]


def read_frames(directory: str) -> np.ndarray:
    """Stack every frame of a directory into a T×H×W float32 array"""
    paths = list_frames(directory)
    if not paths:
        raise FormatError("no .pgm/.ppm frames found", directory)
    frames = []
    for path in paths:
        frame = read_pgm(path)
        if frames and frame.shape != frames[0].shape:
            raise FormatError(f"frame size {frame.shape} differs from {frames[0].shape}", path)
        frames.append(frame)
    logger.info(f"Read {len(frames)} frames of {frames[0].shape} from {directory}")
    return np.stack(frames)


def write_frames(directory: str, frames) -> List[str]:
    """Write frames as 0000.pgm, 0001.pgm, ..."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for index, frame in enumerate(frames):
        path = os.path.join(directory, f"{index:04d}.pgm")
        write_pgm(path, frame)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# Middlebury flow
# ---------------------------------------------------------------------------

def flo_name(a: int, b: int) -> str:
    """File name of the flow from frame a to frame b"""
    return f"{a:04d}_{b:04d}.flo"


def read_flo(path: str) -> np.ndarray:
    """Read a .flo file as an H×W×2 float32 array of (dx, dy)"""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12:
        raise FormatError("not a .flo file (header shorter than 12 bytes)", path, len(raw))
    magic = np.frombuffer(raw, dtype="<f4", count=1)[0]
    if magic != np.float32(FLO_MAGIC):
        raise FormatError("not a .flo file (bad magic)", path, 0)
    width, height = (int(v) for v in np.frombuffer(raw, dtype="<i4", count=2, offset=4))
    if width < 1 or height < 1:
        raise FormatError(f"invalid flow size {width}×{height}", path, 4)
    expected = width * height * 2 * 4
    if len(raw) - 12 < expected:
        raise FormatError(f"truncated payload: expected {expected} bytes", path, len(raw))
    data = np.frombuffer(raw, dtype="<f4", count=width * height * 2, offset=12)
    return data.reshape(height, width, 2).astype(np.float32)


def write_flo(path: str, flow: np.ndarray) -> None:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"write_flo expects an H×W×2 field, got shape {flow.shape}")
    height, width = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(np.array([FLO_MAGIC], dtype="<f4").tobytes())
        f.write(np.array([width, height], dtype="<i4").tobytes())
        f.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


# ---------------------------------------------------------------------------
# Weight store
# ---------------------------------------------------------------------------

def save_weights(path: str, store: Mapping[str, np.ndarray]) -> None:
    """Write named tensors in the MAVW container, in iteration order"""
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<II", WEIGHTS_VERSION, len(store)))
        for name, value in store.items():
            encoded = name.encode("utf-8")
            array = np.asarray(value)
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", array.ndim))
            f.write(struct.pack(f"<{array.ndim}I", *array.shape))
            f.write(np.ascontiguousarray(array, dtype="<f4").tobytes())
    logger.info(f"Saved {len(store)} tensors to {path}")


def load_weights(path: str) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != WEIGHTS_MAGIC:
        raise FormatError("not a weight file (bad magic)", path, 0)
    if len(raw) < 12:
        raise FormatError("truncated header", path, len(raw))
    version, count = struct.unpack_from("<II", raw, 4)
    if version != WEIGHTS_VERSION:
        raise FormatError(f"unsupported weight file version {version}", path, 4)

    store: "OrderedDict[str, np.ndarray]" = OrderedDict()
    offset = 12
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            if offset + name_len > len(raw):
                raise FormatError("truncated tensor name", path, offset)
            name = raw[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            shape = struct.unpack_from(f"<{rank}I", raw, offset)
            offset += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            if offset + 4 * size > len(raw):
                raise FormatError(f"truncated values for '{name}'", path, offset)
            values = np.frombuffer(raw, dtype="<f4", count=size, offset=offset)
            offset += 4 * size
            if name in store:
                raise FormatError(f"duplicate tensor name '{name}'", path, offset)
            store[name] = values.reshape(shape).astype(np.float32)
    except struct.error:
        raise FormatError("truncated tensor record", path, offset)
    return store


# ---------------------------------------------------------------------------
# key = value text files
# ---------------------------------------------------------------------------

def _parse_lines(path: str):
    """Yield (line number, key, value) for each non-blank, non-comment line"""
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"expected 'key = value', got {text!r}", line=number, path=path)
            key, value = (part.strip() for part in text.split("=", 1))
            yield number, key, value


def read_config_values(path: str) -> Dict[str, Any]:
    """Parse a config file into coerced values for the keys it sets"""
    values: Dict[str, Any] = {}
    for number, key, raw in _parse_lines(path):
        if key not in config_keys():
            raise ConfigError(f"unknown key '{key}'", line=number, path=path)
        try:
            values[key] = coerce_value(key, raw)
        except ConfigError as exc:
            raise ConfigError(str(exc), line=number, path=path)
    return values


def read_config(path: str) -> FusionConfig:
    return FusionConfig(**read_config_values(path)).validate()


def write_config(path: str, config: FusionConfig) -> None:
    """Normalized form: every key, declaration order"""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for key, value in config.to_dict().items():
            f.write(f"{key} = {value!r}\n" if isinstance(value, float) else f"{key} = {value}\n")


SCENE_KEYS = ("seed", "height", "width", "frames", "vis_texture", "ir_base", "noise_ir", "noise_vis")


def read_scene_values(path: str) -> Tuple[Dict[str, float], List[Dict[str, Any]]]:
    """
    Parse a scene spec: scalar keys plus repeated
    `object = <rect|disk> size x y vx vy ir vis` lines
    """
    values: Dict[str, float] = {}
    objects: List[Dict[str, Any]] = []
    for number, key, raw in _parse_lines(path):
        if key == "object":
            parts = raw.split()
            if len(parts) != 8 or parts[0] not in ("rect", "disk"):
                raise ConfigError("object needs: <rect|disk> size x y vx vy ir vis", line=number, path=path)
            try:
                size, x, y, vx, vy, ir, vis = (float(p) for p in parts[1:])
            except ValueError:
                raise ConfigError(f"non-numeric object field in {raw!r}", line=number, path=path)
            objects.append({"shape": parts[0], "size": size, "x": x, "y": y,
                            "vx": vx, "vy": vy, "ir": ir, "vis": vis})
        elif key in SCENE_KEYS:
            try:
                values[key] = float(raw)
            except ValueError:
                raise ConfigError(f"key '{key}' expects a number, got {raw!r}", line=number, path=path)
        else:
            raise ConfigError(f"unknown key '{key}'", line=number, path=path)
    return values, objects


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def write_csv(path: str, table: pd.DataFrame) -> None:
    """Deterministic CSV: header row, LF endings, floats with 6 decimals"""
    table.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
    logger.info(f"Wrote {len(table)} rows to {path}")


def read_csv(path: str) -> pd.DataFrame:
    return pd.read_csv(path)
