"""Flat binary weight container.

Layout (all little-endian)::

    8 bytes   magic b"FMDWGT01"
    7 x u64   n_layers, n_heads, d_model, d_ff, vocab_size, max_seq_len, positional (0/1)
    1 x f64   norm_eps
    f64 data  every tensor of ``shape_table(config)`` in declaration order, row-major
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .decoder import ConfigError, DecoderWeights, ModelConfig, shape_table

MAGIC = b"FMDWGT01"
_HEADER = struct.Struct("<7Qd")


def dumps_weights(weights: DecoderWeights) -> bytes:
    cfg = weights.config
    parts = [MAGIC, _HEADER.pack(cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_ff, cfg.vocab_size,
                                 cfg.max_seq_len, int(cfg.positional), cfg.norm_eps)]
    for _, arr in weights.named_tensors():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def loads_weights(blob: bytes) -> DecoderWeights:
    if blob[: len(MAGIC)] != MAGIC:
        raise ConfigError("not a weight checkpoint (bad magic)")
    off = len(MAGIC)
    n_layers, n_heads, d_model, d_ff, vocab, max_len, positional, eps = _HEADER.unpack_from(blob, off)
    off += _HEADER.size
    config = ModelConfig(n_layers, n_heads, d_model, d_ff, vocab, max_len, eps, bool(positional))
    tensors = {}
    for name, shape in shape_table(config).items():
        count = int(np.prod(shape))
        end = off + 8 * count
        if end > len(blob):
            raise ConfigError(f"checkpoint truncated while reading {name}")
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape)
        off = end
    if off != len(blob):
        raise ConfigError(f"checkpoint has {len(blob) - off} trailing bytes")
    return DecoderWeights.from_tensors(config, tensors)


def save_weights(weights: DecoderWeights, path) -> None:
    Path(path).write_bytes(dumps_weights(weights))


def load_weights(path) -> DecoderWeights:
    return loads_weights(Path(path).read_bytes())
