"""Dense-array kernel: matmul, row softmax, Frobenius energy, seeded RNG.

All numerics run on 64-bit floats carried by numpy arrays in row-major
order.  Shape mismatches raise, never broadcast.  Randomness comes from a
counter-based Philox stream, so identical seeds reproduce identical value
streams on every platform; normal variates are produced by a fixed
Box-Muller transform over that uniform stream.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError

__all__ = [
    "SeededRng",
    "matmul",
    "softmax_rows",
    "frobenius_sq",
    "as_matrix",
    "rng_normal",
    "rng_uniform",
]


def as_matrix(a, name: str = "array") -> np.ndarray:
    """Coerce to a 2-D float64 array, raising ShapeError otherwise."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product of two 2-D arrays with explicit shape checking."""
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}"
        )
    return a @ b


def softmax_rows(a) -> np.ndarray:
    """Row-wise softmax with max-subtraction for overflow stability."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 1:
        raise ShapeError("softmax_rows needs at least one axis")
    shifted = a - np.max(a, axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=-1, keepdims=True)


def frobenius_sq(a) -> float:
    """Sum of squared entries (squared Frobenius norm for matrices)."""
    arr = np.asarray(a, dtype=np.float64)
    return float(np.sum(arr * arr))


def _check_shape(shape) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if len(dims) == 0:
        raise ShapeError("empty shape is not a valid tensor shape")
    if any(d <= 0 for d in dims):
        raise ShapeError(f"all dimensions must be positive, got {dims}")
    return dims


class SeededRng:
    """Deterministic random stream keyed by (seed, stream).

    Backed by the Philox-4x64 counter generator.  Two instances built with
    the same key produce bitwise-identical draws regardless of platform or
    draw interleaving history of other instances.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        key = np.array(
            [self.seed & 0xFFFFFFFFFFFFFFFF, self.stream & 0xFFFFFFFFFFFFFFFF],
            dtype=np.uint64,
        )
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def spawn(self, stream: int) -> "SeededRng":
        """Independent substream sharing this seed."""
        return SeededRng(self.seed, stream)

    def uniform(self, shape) -> np.ndarray:
        """Uniform draws in [0, 1)."""
        dims = _check_shape(shape)
        return self._gen.random(dims, dtype=np.float64)

    def normal(self, shape) -> np.ndarray:
        """Standard normal draws via Box-Muller over the uniform stream."""
        dims = _check_shape(shape)
        n = int(np.prod(dims))
        pairs = (n + 1) // 2
        u = self._gen.random((2, pairs), dtype=np.float64)
        # u1 in (0, 1] so log() is finite.
        r = np.sqrt(-2.0 * np.log(1.0 - u[0]))
        theta = 2.0 * math.pi * u[1]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
        return z[:n].reshape(dims)

    def integers(self, low: int, high: int, size: int | None = None):
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def rng_normal(rng: SeededRng, shape) -> np.ndarray:
    return rng.normal(shape)


def rng_uniform(rng: SeededRng, shape) -> np.ndarray:
    return rng.uniform(shape)
