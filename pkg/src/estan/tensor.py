"""Rank-4 tensors and the seeded random generator.

Tensors are plain ``numpy.ndarray`` objects with exactly four axes laid out
NCHW in C (row-major) order. The helpers here enforce the invariants the rest
of the package relies on: positive dims, contiguous storage and finite values.

Precision is float32 by default. ``float64_mode()`` switches every freshly
created tensor (and hence every parameter built while it is active) to
float64; it exists for finite-difference gradient checks.
"""

from __future__ import annotations

import contextlib
import math
from typing import Iterator, Sequence

import numpy as np

from .errors import DimensionError, NonFiniteError, ShapeError

Shape4 = tuple[int, int, int, int]

_MAX_ELEMENTS = 2**40
_dtype = np.dtype(np.float32)
_check_finite = True


def default_dtype() -> np.dtype:
    return _dtype


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    """Create tensors in double precision inside the ``with`` block."""
    global _dtype
    previous = _dtype
    _dtype = np.dtype(np.float64)
    try:
        yield
    finally:
        _dtype = previous


def set_finite_checks(enabled: bool) -> bool:
    """Toggle the NaN/Inf assertion; returns the previous setting."""
    global _check_finite
    previous = _check_finite
    _check_finite = bool(enabled)
    return previous


def check_finite(x: np.ndarray, where: str = "tensor") -> np.ndarray:
    if _check_finite and not np.isfinite(x).all():
        raise NonFiniteError(f"non-finite value produced by {where}")
    return x


def validate_dims(dims: Sequence[int]) -> Shape4:
    if len(dims) != 4:
        raise DimensionError(f"expected 4 dims (n, c, h, w), got {len(dims)}")
    out = tuple(int(d) for d in dims)
    if any(d < 1 for d in out):
        raise DimensionError(f"all dims must be >= 1, got {out}")
    if math.prod(out) > _MAX_ELEMENTS:
        raise DimensionError(f"dims {out} exceed addressable size")
    return out  # type: ignore[return-value]


def as_tensor4(x, dtype=None) -> np.ndarray:
    """Validate ``x`` as a rank-4 tensor, returning a C-contiguous array."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 tensor, got shape {arr.shape}")
    validate_dims(arr.shape)
    return arr


def tensor_new(dims: Sequence[int], fill: float = 0.0, dtype=None) -> np.ndarray:
    shape = validate_dims(dims)
    return np.full(shape, fill, dtype=dtype or _dtype)


def elementwise_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"cannot add tensors of shape {a.shape} and {b.shape}")
    return check_finite(a + b, "elementwise_add")


class SeededRng:
    """Counter-based SplitMix64 generator.

    Draw ``i`` (0-based, counting every 64-bit word consumed so far) is
    ``mix(seed + (i + 1) * 0x9E3779B97F4A7C15 mod 2**64)`` with Vigna's
    SplitMix64 finaliser. For seed 1234567 the first words are
    6457827717110365317, 3203168211198807973, 9817491932198370423.

    Derived draws:

    * uniform: ``(word >> 11) * 2**-53`` in [0, 1)
    * normal: Box-Muller on two consecutive words,
      ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``
    * integers in [lo, hi): ``lo + (((word >> 32) * (hi - lo)) >> 32)``
    """

    GAMMA = np.uint64(0x9E3779B97F4A7C15)

    def __init__(self, seed: int):
        self.seed = int(seed) & (2**64 - 1)
        self.counter = 0

    def next_u64(self, count: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + count, dtype=np.uint64)
        self.counter += count
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * self.GAMMA
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))

    def uniform(self, size) -> np.ndarray:
        shape = (size,) if isinstance(size, int) else tuple(size)
        words = self.next_u64(math.prod(shape))
        return ((words >> np.uint64(11)).astype(np.float64) * 2.0**-53).reshape(shape)

    def normal(self, size) -> np.ndarray:
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = math.prod(shape)
        u = self.uniform(2 * n)
        u1, u2 = u[0::2], u[1::2]
        z = np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)
        return z.reshape(shape)

    def integers(self, low: int, high: int, size=None):
        span = high - low
        if span < 1 or span >= 2**32:
            raise ValueError(f"integer range [{low}, {high}) unsupported")
        count = 1 if size is None else size
        words = self.next_u64(count if isinstance(count, int) else math.prod(count))
        vals = ((words >> np.uint64(32)) * np.uint64(span)) >> np.uint64(32)
        vals = vals.astype(np.int64) + low
        if size is None:
            return int(vals[0])
        return vals.reshape(count)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``, swapping from the top down."""
        out = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integers(0, i + 1)
            out[i], out[j] = out[j], out[i]
        return out

    def spawn(self, stream: int) -> "SeededRng":
        """Independent child generator keyed by ``stream``."""
        child_seed = int(SeededRng(self.seed ^ (stream * 0xD1B54A32D192ED03 & (2**64 - 1))).next_u64(1)[0])
        return SeededRng(child_seed)


def he_normal_init(dims: Sequence[int], fan_in: int, rng: SeededRng, dtype=None) -> np.ndarray:
    """Zero-mean normal draws with variance ``2 / fan_in``."""
    shape = validate_dims(dims)
    if fan_in < 1:
        raise DimensionError(f"fan_in must be >= 1, got {fan_in}")
    std = math.sqrt(2.0 / fan_in)
    return (rng.normal(shape) * std).astype(dtype or _dtype)
