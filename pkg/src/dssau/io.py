"""File formats: the weight container, 8-bit images and the run configuration.

Weight container layout (all integers little-endian)::

    0   4s   magic "DSSW"
    4   u16  version (1)
    6   u16  reserved (0)
    8   u32  entry count
    12  u32  entry table length in bytes
    16  ...  entry table, per entry:
             u16 name length, UTF-8 name, u8 dtype code (1 = float32),
             u8 rank, u32 x rank extents, u64 payload offset, u64 payload length
    ..  u32  CRC-32 of every preceding byte
    payloads: float32 little-endian, each starting on a 64-byte boundary
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, fields
from fractions import Fraction
from pathlib import Path
from typing import Mapping

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, FormatError

MAGIC = b"DSSW"
VERSION = 1
ALIGN = 64
DTYPE_CODES = {1: np.dtype("<f4")}
_HEAD = struct.Struct("<4sHHII")


# -- weights --------------------------------------------------------------------------
def _align(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


def encode_weights(tensors: Mapping[str, np.ndarray]) -> bytes:
    entries = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise FormatError(f"{name}: only float32 tensors can be stored, got {arr.dtype}")
        if arr.ndim > 255:
            raise FormatError(f"{name}: rank {arr.ndim} too large")
        entries.append((name.encode("utf-8"), arr))

    table_len = sum(2 + len(n) + 2 + 4 * a.ndim + 16 for n, a in entries)
    offset = _align(_HEAD.size + table_len + 4)
    table = bytearray()
    layout = []
    for name, arr in entries:
        nbytes = arr.size * 4
        table += struct.pack("<H", len(name)) + name + struct.pack("<BB", 1, arr.ndim)
        table += struct.pack(f"<{arr.ndim}I", *arr.shape)
        table += struct.pack("<QQ", offset, nbytes)
        layout.append((offset, arr))
        offset = _align(offset + nbytes)

    head = _HEAD.pack(MAGIC, VERSION, 0, len(entries), table_len) + bytes(table)
    out = bytearray(head + struct.pack("<I", zlib.crc32(head)))
    for off, arr in layout:
        out += bytes(off - len(out))
        out += arr.astype("<f4").tobytes()
    return bytes(out)


def decode_weights(buf: bytes) -> "dict[str, np.ndarray]":
    if len(buf) < _HEAD.size + 4:
        raise FormatError("file too short for a weight container")
    magic, version, _, count, table_len = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    end = _HEAD.size + table_len
    if end + 4 > len(buf):
        raise FormatError("entry table exceeds file")
    (crc,) = struct.unpack_from("<I", buf, end)
    if crc != zlib.crc32(buf[:end]):
        raise FormatError("header checksum mismatch")

    out: dict = {}
    spans = []
    pos = _HEAD.size
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2 : pos + 2 + nlen].decode("utf-8")
            pos += 2 + nlen
            code, rank = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            off, nbytes = struct.unpack_from("<QQ", buf, pos)
            pos += 16
            if code not in DTYPE_CODES:
                raise FormatError(f"{name}: unknown dtype code {code}")
            if name in out:
                raise FormatError(f"duplicate tensor name {name!r}")
            dt = DTYPE_CODES[code]
            if nbytes != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
                raise FormatError(f"{name}: payload length {nbytes} does not match shape {shape}")
            if off % ALIGN or off < end + 4 or off + nbytes > len(buf):
                raise FormatError(f"{name}: payload [{off}, {off + nbytes}) misaligned or out of bounds")
            spans.append((off, off + nbytes, name))
            out[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape).astype(np.float32)
    except (struct.error, UnicodeDecodeError) as e:
        raise FormatError(f"malformed entry table: {e}") from e
    if pos != end:
        raise FormatError("entry table length mismatch")
    spans.sort()
    for (_, e1, n1), (s2, _, n2) in zip(spans, spans[1:]):
        if s2 < e1:
            raise FormatError(f"payloads of {n1!r} and {n2!r} overlap")
    return out


def save_weights(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_weights(tensors))


def load_weights(path) -> "dict[str, np.ndarray]":
    return decode_weights(Path(path).read_bytes())


# -- images ------------------------------------------------------------------------------
def read_image(path, size: int | None = None) -> np.ndarray:
    """8-bit grayscale or RGB image as float32 ``(H, W)`` in [0, 1]."""
    with Image.open(path) as im:
        im = im.convert("L")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def write_image(path, img: np.ndarray) -> None:
    Image.fromarray(np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)).save(path)


def read_mask(path, size: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I"):
            raise DataError(f"{path}: mask must be single-channel, got mode {im.mode}")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.NEAREST)
        return np.asarray(im, dtype=np.int64)


def write_mask(path, labels: np.ndarray) -> None:
    Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="L").save(path)


# -- run configuration ------------------------------------------------------------------
def _ints(v: str) -> tuple:
    v = v.strip()
    return tuple(int(x) for x in v.replace(",", " ").split()) if v and v.lower() != "none" else ()


def _float(v: str) -> float:
    return float(Fraction(v.strip()))


def _bool(v: str) -> bool:
    t = v.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


@dataclass
class RunConfig:
    """``key = value`` lines; ``#`` starts a comment; lists are comma separated;
    ``lambda`` accepts fractions such as ``1/8``."""

    # model
    channels: int = 96
    depths: tuple = (2, 2, 8, 2)
    c_d: int = 64
    k1: tuple = (1, 4, 16, 64)
    lam: float = 1 / 8
    skips: tuple = (4, 8, 16)
    mff: bool = True
    head_dim: int = 32
    mlp_ratio: int = 3
    regions: int = 8
    ppm_bins: tuple = (1, 2, 3, 6)
    # optimizer
    lr: float = 1e-4
    steps: int = 1000
    batch: int = 4
    seed: int = 0
    eval_every: int = 50
    augment: bool = True
    # data
    train_dir: str = ""
    val_dir: str = ""
    out_dir: str = "runs"
    image_size: int = 256
    spacing: float = 1.0

    KEY_ALIASES = {"lambda": "lam"}
    PARSERS = {int: int, float: _float, tuple: _ints, bool: _bool, str: str.strip}

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        types = {f.name: type(f.default) for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            key = cls.KEY_ALIASES.get(key, key)
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            try:
                values[key] = cls.PARSERS[types[key]](value)
            except (ValueError, ZeroDivisionError) as e:
                raise ConfigError(f"line {lineno}: bad value for {key}: {e}") from e
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def dump(self) -> str:
        inverse = {v: k for k, v in self.KEY_ALIASES.items()}
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(map(str, v)) or "none"
            elif isinstance(v, float) and f.name == "lam":
                v = str(Fraction(v).limit_denominator(1 << 16))
            lines.append(f"{inverse.get(f.name, f.name)} = {v}")
        return "\n".join(lines) + "\n"

    def model_config(self):
        from .model import ModelConfig

        return ModelConfig(
            channels=self.channels,
            depths=self.depths,
            decoder_width=self.c_d,
            regions=self.regions,
            k1_schedule=self.k1,
            lam=self.lam,
            head_dim=self.head_dim,
            mlp_ratio=self.mlp_ratio,
            ppm_bins=self.ppm_bins,
            skips=self.skips,
            mff=self.mff,
            seed=self.seed,
        )
