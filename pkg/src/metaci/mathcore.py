"""Numerical substrate: seeded random streams, dense matrix helpers,
quantiles and a central finite-difference gradient.

Matrices are plain ``float64`` numpy arrays in C (row-major) order.

Random streams are PCG64 generators keyed by ``SeedSequence(seed,
spawn_key=(stream_id, *path))``. Normal deviates are produced by the
Box-Muller transform on PCG64 uniforms rather than numpy's ziggurat, so
the transform is fixed and documented independently of numpy's internals.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericalError

__all__ = [
    "RngStream",
    "as_matrix",
    "check_finite",
    "empirical_quantile",
    "finite_diff_gradient",
    "matmul",
    "sample_standard_normal",
]

_U64 = 2**64


class RngStream:
    """Reproducible random stream identified by ``(seed, stream_id)``.

    ``child(*keys)`` derives an independent stream from the identity of
    this one (not from its current position), so child streams are stable
    no matter how many draws the parent has made.
    """

    def __init__(self, seed: int, stream_id: int = 0, path: Sequence[int] = ()):
        if not (0 <= seed < _U64) or not (0 <= stream_id < _U64):
            raise ConfigError("seed and stream_id must be unsigned 64-bit integers")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id, *self.path))
        self._gen = np.random.Generator(np.random.PCG64(ss))
        self.draws = 0

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, path={self.path})"

    def child(self, *keys: int) -> RngStream:
        return RngStream(self.seed, self.stream_id, self.path + tuple(keys))

    def record(self) -> dict:
        return {"seed": self.seed, "stream_id": self.stream_id, "path": list(self.path)}

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1)."""
        self.draws += n
        return self._gen.random(n)

    def standard_normal(self, n: int) -> np.ndarray:
        # Box-Muller: z0 = r cos(2 pi u2), z1 = r sin(2 pi u2), r = sqrt(-2 ln(1 - u1)).
        m = (n + 1) // 2
        u = self.uniform(2 * m).reshape(m, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        angle = 2.0 * math.pi * u[:, 1]
        z = np.empty((m, 2))
        z[:, 0] = r * np.cos(angle)
        z[:, 1] = r * np.sin(angle)
        return z.reshape(-1)[:n]

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        """``n`` integers uniform on [low, high)."""
        self.draws += n
        return self._gen.integers(low, high, size=n)

    def permutation(self, n: int) -> np.ndarray:
        self.draws += n
        return self._gen.permutation(n)

    def sample_without_replacement(self, pool: np.ndarray, size: int) -> np.ndarray:
        pool = np.asarray(pool)
        if size > pool.size:
            raise ConfigError(f"cannot draw {size} items from a pool of {pool.size}")
        return pool[self.permutation(pool.size)[:size]]


def sample_standard_normal(rng: RngStream, n: int) -> np.ndarray:
    if n < 1:
        raise ConfigError("sample_standard_normal: empty request (n must be >= 1)")
    return rng.standard_normal(n)


def check_finite(a: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"{what} contains non-finite values")
    return a


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce ``data`` to a finite row-major float64 matrix."""
    m = np.ascontiguousarray(data, dtype=np.float64)
    if rows is not None and cols is not None:
        if m.size != rows * cols:
            raise ConfigError(f"data length {m.size} != {rows} x {cols}")
        m = m.reshape(rows, cols)
    if m.ndim != 2:
        raise ConfigError(f"expected a 2-d matrix, got shape {m.shape}")
    return check_finite(m, "matrix")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[0]:
        raise ConfigError(f"shape mismatch: {a.shape} @ {b.shape}")
    return check_finite(a @ b, "matrix product")


def empirical_quantile(values, q: float) -> float:
    """Lower nearest-rank quantile: ``sorted(values)[floor(q * (n - 1))]``."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ConfigError("empirical_quantile of an empty vector")
    if not 0.0 <= q <= 1.0:
        raise ConfigError(f"quantile level {q} outside [0, 1]")
    return float(np.sort(v)[int(math.floor(q * (v.size - 1)))])


def finite_diff_gradient(
    loss_fn: Callable[[np.ndarray], float], params, h: float = 1e-5
) -> np.ndarray:
    """Central differences ``(f(p + h e_i) - f(p - h e_i)) / 2h`` per coordinate."""
    if h <= 0:
        raise ConfigError("finite-difference step must be positive")
    p = np.array(params, dtype=np.float64).ravel()
    grad = np.empty_like(p)
    for i in range(p.size):
        orig = p[i]
        p[i] = orig + h
        up = float(loss_fn(p.copy()))
        p[i] = orig - h
        down = float(loss_fn(p.copy()))
        p[i] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise NumericalError(f"non-finite loss when probing coordinate {i}")
        grad[i] = (up - down) / (2.0 * h)
    return grad
