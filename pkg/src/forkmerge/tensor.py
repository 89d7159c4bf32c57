"""Dense float64 linear algebra and a platform-stable random stream.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64 in C
(row-major) order. The random stream is SplitMix64 evaluated in counter
mode, so draw ``i`` of seed ``s`` is a pure function of ``(s, i)``; normal
variates use the Box-Muller transform on consecutive uniform pairs.
"""
from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_TWO_POW_M53 = 2.0 ** -53

MASKED_SCORE = -1e9


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(ArithmeticError):
    """A NaN or infinity was produced or supplied."""


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    m = np.ascontiguousarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def check_finite(x: np.ndarray, what: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains non-finite values")
    return x


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    return check_finite(out, "matmul")


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction."""
    m = np.asarray(m, dtype=np.float64)
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    shifted = v - v.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def rms_norm(v, gain, eps: float) -> np.ndarray:
    """``gain * v / sqrt(mean(v**2) + eps)`` along the last axis.

    Accepts a single vector or a matrix of row vectors. A zero vector maps to
    zero even when ``eps == 0``.
    """
    v = np.asarray(v, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    if v.shape[-1] != gain.shape[-1]:
        raise ShapeError(f"rms_norm: vector length {v.shape[-1]} != gain length {gain.shape[-1]}")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    denom = np.sqrt(np.mean(v * v, axis=-1, keepdims=True) + eps)
    safe = np.where(denom > 0, denom, 1.0)
    return np.where(denom > 0, gain * v / safe, 0.0)


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def splitmix64(seed: int, start: int, count: int) -> np.ndarray:
    """Outputs ``start .. start+count-1`` of the SplitMix64 stream for ``seed``.

    Output ``i`` mixes ``seed + (i + 1) * 0x9E3779B97F4A7C15 (mod 2**64)``,
    which is identical to the usual sequential formulation.
    """
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    z = np.uint64(seed & MASK64) + idx * _GAMMA
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """Deterministic stream advanced explicitly by each draw.

    Not safe to share between threads; give each worker its own seed.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self.counter = 0

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, counter={self.counter})"

    def next_u64(self, n: int) -> np.ndarray:
        out = splitmix64(self.seed, self.counter, n)
        self.counter += n
        return out

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1) taken from the top 53 bits of each output."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53

    def integers(self, high: int, n: int) -> np.ndarray:
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]


def seeded_gaussian(rng: Rng, rows: int, cols: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    if std < 0:
        raise ValueError("std must be non-negative")
    return (mean + std * rng.normal(rows * cols)).reshape(rows, cols)


def format_float(x: float) -> str:
    return format(float(x), ".17g")
