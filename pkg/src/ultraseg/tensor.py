"""Dense 4-D tensors and the deterministic random generator.

A tensor is a C-contiguous ``numpy.ndarray`` of rank 4 in (N, C, H, W)
order, float32 by default. Element (n, c, h, w) lives at flat index
``((n*C + c)*H + h)*W + w``. Float64 arrays are accepted everywhere so that
gradient checks can run in a shadow precision.
"""

from __future__ import annotations

import numpy as np

from .errors import DivisibilityError, ShapeError

DTYPE = np.float32

Tensor = np.ndarray


def as_tensor(data, shape=None, dtype=DTYPE) -> Tensor:
    arr = np.array(data, dtype=dtype, copy=True)
    if shape is not None:
        arr = arr.reshape(shape)
    check_tensor(arr)
    return np.ascontiguousarray(arr)


def check_tensor(x: Tensor, name="tensor"):
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name} must be a rank-4 array, got {getattr(x, 'shape', type(x))}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has a non-positive dimension: {x.shape}")


def zeros(shape, dtype=DTYPE) -> Tensor:
    return np.zeros(shape, dtype=dtype)


def ones(shape, dtype=DTYPE) -> Tensor:
    return np.ones(shape, dtype=dtype)


def flat_index(shape, n, c, h, w) -> int:
    _, C, H, W = shape
    return ((n * C + c) * H + h) * W + w


def broadcast_kind(a_shape, b_shape) -> str:
    """Classify how ``b`` broadcasts against ``a``.

    Returns one of ``"same"``, ``"spatial"`` (C == 1), ``"channel"``
    (H == W == 1) or ``"scalar"``; raises ShapeError otherwise.
    """
    a_shape = tuple(a_shape)
    b_shape = tuple(b_shape)
    if a_shape == b_shape:
        return "same"
    if b_shape == (1, 1, 1, 1):
        return "scalar"
    n, c, h, w = a_shape
    if b_shape == (n, 1, h, w):
        return "spatial"
    if b_shape == (n, c, 1, 1):
        return "channel"
    raise ShapeError(f"cannot broadcast {b_shape} against {a_shape}")


_OPS = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind not in _OPS:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    check_tensor(a, "a")
    check_tensor(b, "b")
    broadcast_kind(a.shape, b.shape)
    return _OPS[kind](a, b)


def concat_channels(parts) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_channels needs at least one part")
    n, _, h, w = parts[0].shape
    for p in parts:
        check_tensor(p)
        if (p.shape[0], p.shape[2], p.shape[3]) != (n, h, w):
            raise ShapeError(
                f"concat_channels: N/H/W mismatch {p.shape} vs {parts[0].shape}"
            )
    if len(parts) == 1:
        return parts[0]
    return np.concatenate(parts, axis=1)


def split_channels(x: Tensor, k: int) -> list:
    check_tensor(x)
    c = x.shape[1]
    if k < 1 or c % k:
        raise DivisibilityError(f"cannot split {c} channels into {k} equal groups")
    if k == 1:
        return [x]
    step = c // k
    return [np.ascontiguousarray(x[:, j * step:(j + 1) * step]) for j in range(k)]


def channel_mean(x: Tensor) -> Tensor:
    check_tensor(x)
    return x.mean(axis=1, keepdims=True, dtype=x.dtype)


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _splitmix(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * _MIX1
    z = z ^ (z >> np.uint64(27))
    z = z * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """Counter-based splitmix64 generator.

    Draw ``i`` of a stream seeded with ``s`` is ``mix(s + (i + 1) * golden)``,
    so any draw can be recomputed from (seed, index) alone and results do
    not depend on platform or numpy's own generators.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)

    def __repr__(self):
        return f"Rng(seed={self.seed}, counter={self.counter})"

    def fork(self, salt: int) -> "Rng":
        """Independent stream derived from this seed and ``salt``."""
        base = np.array([(self.seed ^ ((int(salt) * 0xD1B54A32D192ED03) & _MASK64))], dtype=np.uint64)
        return Rng(int(_splitmix(base)[0]))

    def bits(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * _GOLDEN
            return _splitmix(z)

    def uniform(self, n: int, low=0.0, high=1.0) -> np.ndarray:
        """``n`` float64 draws in [low, high)."""
        u = (self.bits(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return low + (high - low) * u

    def normal(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        u1 = self.uniform(m)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log1p(-u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n]

    def integers(self, n: int, high: int) -> np.ndarray:
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        # stable argsort keeps ties (probability ~0) deterministic too
        return np.argsort(self.uniform(n), kind="stable")

    def tensor(self, shape, low=-1.0, high=1.0, dtype=DTYPE) -> Tensor:
        size = int(np.prod(shape))
        return self.uniform(size, low, high).astype(dtype).reshape(shape)
