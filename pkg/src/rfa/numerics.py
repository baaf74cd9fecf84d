"""Seeded Gaussian sampling, normalization and a stable softmax.

Matrices and vectors are plain float64 numpy arrays (row-major). Random
draws come from a counter-based Philox generator keyed by ``(seed, stream)``
and are turned into normals with the Box-Muller transform, so a given
``RngState`` always yields the same matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, ParameterError

_MASK64 = (1 << 64) - 1
_TWO_POW_M53 = 2.0**-53


@dataclass(frozen=True)
class RngState:
    """Position in the deterministic random stream.

    ``seed`` selects the generator key, ``stream`` the sub-stream. Every call
    to :func:`seeded_normal_matrix` consumes one whole sub-stream and returns
    the state pointing at the next one.
    """

    seed: int
    stream: int = 0

    def key(self) -> int:
        return (self.seed & _MASK64) | ((self.stream & _MASK64) << 64)

    def advance(self) -> "RngState":
        return RngState(self.seed, self.stream + 1)


def derive_seed(seed: int, index: int) -> int:
    """Deterministic 64-bit child seed for ``(seed, index)``."""
    ss = np.random.SeedSequence([seed & _MASK64, index & _MASK64])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _box_muller(raw: np.ndarray, n: int) -> np.ndarray:
    half = raw.size // 2
    # u1 in (0, 1] keeps log finite; u2 in [0, 1)
    u1 = ((raw[:half] >> np.uint64(11)).astype(np.float64) + 1.0) * _TWO_POW_M53
    u2 = (raw[half:] >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    return np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]


def seeded_normal_matrix(rng: RngState, rows: int, cols: int) -> tuple[np.ndarray, RngState]:
    """Draw a ``rows x cols`` matrix of i.i.d. standard normals.

    Returns the matrix and the advanced RNG state.
    """
    if rows < 1 or cols < 1:
        raise ParameterError(f"matrix dimensions must be >= 1, got {rows}x{cols}")
    n = rows * cols
    pairs = (n + 1) // 2
    bitgen = np.random.Philox(key=rng.key())
    raw = bitgen.random_raw(2 * pairs)
    return _box_muller(raw, n).reshape(rows, cols), rng.advance()


def l2_normalize(v, axis: int = -1) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm along ``axis``.

    Raises DegenerateInputError for any zero-norm slice instead of producing NaN.
    """
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(norm == 0.0):
        raise DegenerateInputError("cannot normalize a zero-norm vector")
    return v / norm


def stable_softmax(logits, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    x = np.asarray(logits, dtype=np.float64) / temperature
    if x.shape[axis] == 0:
        raise ParameterError("softmax over an empty set of logits")
    x = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(x)
    return e / np.sum(e, axis=axis, keepdims=True)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def check_finite(name: str, arr) -> None:
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite values")
