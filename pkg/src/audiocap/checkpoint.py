"""Binary checkpoint format (``.sscp``).

Layout, little-endian::

    magic "SSCP" | version u16
    config block: num_layers, encoder_size, decoder_size, subsample_factor,
                  num_features, vocab_size, max_decode_steps (u32 each), dropout_p (f64)
    parameter count u32
    per parameter: name length u32 | UTF-8 name | rank u32 | extents u32 * rank | f64 values
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError
from .model import ModelConfig, param_shapes
from .numcore import ParamStore

MAGIC = b"SSCP"
VERSION = 1
_HEAD = struct.Struct("<4sH")
_CONFIG = struct.Struct("<7Id")
_U32 = struct.Struct("<I")
_INT_FIELDS = ("num_layers", "encoder_size", "decoder_size", "subsample_factor",
               "num_features", "vocab_size", "max_decode_steps")


def config_diff(a: ModelConfig, b: ModelConfig) -> dict[str, tuple]:
    da, db = a.to_dict(), b.to_dict()
    return {k: (da[k], db[k]) for k in da if da[k] != db[k]}


def to_bytes(params: ParamStore, cfg: ModelConfig) -> bytes:
    buf = io.BytesIO()
    buf.write(_HEAD.pack(MAGIC, VERSION))
    buf.write(_CONFIG.pack(*(getattr(cfg, k) for k in _INT_FIELDS), cfg.dropout_p))
    buf.write(_U32.pack(len(params)))
    for name, value in params.items():
        raw = name.encode("utf-8")
        buf.write(_U32.pack(len(raw)))
        buf.write(raw)
        buf.write(_U32.pack(value.ndim))
        buf.write(struct.pack(f"<{value.ndim}I", *value.shape))
        buf.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(path, params: ParamStore, cfg: ModelConfig) -> None:
    Path(path).write_bytes(to_bytes(params, cfg))


def _take(blob: bytes, offset: int, n: int, path) -> tuple[bytes, int]:
    if offset + n > len(blob):
        raise FormatError(f"{path}: truncated checkpoint")
    return blob[offset:offset + n], offset + n


def read_config(path) -> ModelConfig:
    blob = Path(path).read_bytes()
    return _parse_header(blob, path)[0]


def _parse_header(blob: bytes, path):
    head, off = _take(blob, 0, _HEAD.size, path)
    magic, version = _HEAD.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    raw, off = _take(blob, off, _CONFIG.size, path)
    vals = _CONFIG.unpack(raw)
    cfg = ModelConfig(**dict(zip(_INT_FIELDS, vals[:-1])), dropout_p=vals[-1])
    return cfg, off


def load_checkpoint(path, expected: ModelConfig | None = None) -> tuple[ParamStore, ModelConfig]:
    """Load parameters; refuses before reading tensors if ``expected`` differs."""
    blob = Path(path).read_bytes()
    cfg, off = _parse_header(blob, path)
    if expected is not None:
        diff = config_diff(expected, cfg)
        if diff:
            summary = ", ".join(f"{k}: expected {a}, checkpoint has {b}" for k, (a, b) in diff.items())
            raise ConfigurationError(f"{path}: incompatible model config ({summary})")
    raw, off = _take(blob, off, 4, path)
    (count,) = _U32.unpack(raw)
    shapes = param_shapes(cfg)
    store = ParamStore()
    for _ in range(count):
        raw, off = _take(blob, off, 4, path)
        (nlen,) = _U32.unpack(raw)
        raw, off = _take(blob, off, nlen, path)
        name = raw.decode("utf-8")
        raw, off = _take(blob, off, 4, path)
        (rank,) = _U32.unpack(raw)
        raw, off = _take(blob, off, 4 * rank, path)
        shape = struct.unpack(f"<{rank}I", raw)
        if shapes.get(name) != tuple(shape):
            raise FormatError(f"{path}: parameter {name!r} with shape {shape} does not fit the config")
        size = int(np.prod(shape))
        raw, off = _take(blob, off, 8 * size, path)
        store.add(name, np.frombuffer(raw, dtype="<f8").reshape(shape))
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes")
    if store.names() != list(shapes):
        raise FormatError(f"{path}: parameter set does not match the config")
    return store, cfg
