"""Dense float64 array substrate and a portable seeded generator.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 and rank 1-3.
The helpers here add the checks the rest of the package relies on: no
broadcasting between operands, and no NaN/inf leaking out of a public op.

Random numbers come from :class:`Rng`, a counter-based SplitMix64 stream.
Draw ``i`` of a stream with seed ``s`` is::

    z = s + (i + 1) * 0x9E3779B97F4A7C15          (mod 2**64)
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9      (mod 2**64)
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB      (mod 2**64)
    out = z ^ (z >> 31)

Uniform doubles take the top 53 bits: ``(out >> 11) * 2**-53``. Because
every draw is a pure function of (seed, index), output is identical on
every platform and numpy version.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, NonFiniteError, ParameterError

Tensor = np.ndarray

MAX_RANK = 3

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _mix_int(value: int) -> int:
    return int(_mix(np.array([value & _MASK64], dtype=np.uint64))[0])


class Rng:
    """Counter-based SplitMix64 stream.

    Not thread-safe; give each worker its own stream via :meth:`split`.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, counter={self.counter})"

    def bits(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit outputs."""
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        z = np.uint64(self.seed) + idx * _GAMMA
        return _mix(z)

    def random(self, shape: int | Sequence[int]) -> np.ndarray:
        """Uniform doubles in [0, 1)."""
        shape = (shape,) if isinstance(shape, (int, np.integer)) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.bits(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return u.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.bits(n), kind="stable")

    def split(self, key: int) -> "Rng":
        """Independent child stream; does not advance this stream."""
        return Rng(_mix_int(self.seed ^ _mix_int(int(key) + 0x632BE59BD9B4E019)))


# -- construction and checks ---------------------------------------------

def as_tensor(values, shape: Iterable[int] | None = None) -> Tensor:
    """Copy ``values`` into a fresh float64 tensor, validating rank and finiteness."""
    arr = np.array(values, dtype=np.float64)
    if shape is not None:
        shape = tuple(shape)
        if int(np.prod(shape, dtype=np.int64)) != arr.size:
            raise DimensionError(f"cannot view {arr.size} values as shape {shape}")
        arr = arr.reshape(shape)
    if not 1 <= arr.ndim <= MAX_RANK:
        raise DimensionError(f"tensor rank must be 1..{MAX_RANK}, got {arr.ndim}")
    return check_finite(arr)


def zeros(shape) -> Tensor:
    return np.zeros(shape, dtype=np.float64)


def check_finite(a: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{what} contains non-finite values")
    return a


def flat_index(coords: Sequence[int], shape: Sequence[int]) -> int:
    """Row-major (last axis fastest) linear index."""
    if len(coords) != len(shape):
        raise DimensionError(f"{len(coords)} coordinates for rank-{len(shape)} shape")
    idx = 0
    for c, n in zip(coords, shape):
        if not 0 <= c < n:
            raise DimensionError(f"coordinate {c} out of range for extent {n}")
        idx = idx * n + c
    return idx


def unravel(index: int, shape: Sequence[int]) -> tuple[int, ...]:
    total = int(np.prod(shape, dtype=np.int64))
    if not 0 <= index < total:
        raise DimensionError(f"flat index {index} out of range for shape {tuple(shape)}")
    coords = []
    for n in reversed(shape):
        index, c = divmod(index, n)
        coords.append(c)
    return tuple(reversed(coords))


# -- arithmetic ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a rank-2 ``m x k`` and a rank-2 ``k x n`` tensor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} @ {b.shape}")
    return check_finite(a @ b, "matmul result")


def sigmoid(z: Tensor, out: Tensor | None = None) -> Tensor:
    """Logistic function in the overflow-free two-branch form.

    ``1/(1+e^-z)`` for z >= 0 and ``e^z/(1+e^z)`` for z < 0, evaluated for
    both branches at once as ``exp(min(z, 0)) / (1 + exp(-|z|))``.
    ``out`` may alias ``z``.
    """
    z = np.asarray(z, dtype=np.float64)
    num = np.minimum(z, 0.0)
    np.exp(num, out=num)
    if out is None:
        out = np.empty_like(num)
    np.abs(z, out=out)
    np.negative(out, out=out)
    np.exp(out, out=out)
    out += 1.0
    np.divide(num, out, out=out)
    return out


def relu(z: Tensor) -> Tensor:
    return np.maximum(z, 0.0)


_UNARY = {"relu": relu, "tanh": np.tanh, "sigmoid": sigmoid}
_BINARY = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Apply ``op`` per element. Binary ops require identical shapes."""
    a = np.asarray(a, dtype=np.float64)
    if op in _UNARY:
        if b is not None:
            raise ParameterError(f"{op} takes one operand")
        out = _UNARY[op](a)
    elif op in _BINARY:
        if b is None:
            raise ParameterError(f"{op} takes two operands")
        b = np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise DimensionError(f"{op}: shapes differ {a.shape} vs {b.shape}")
        with np.errstate(over="ignore", invalid="ignore"):
            out = _BINARY[op](a, b)
    else:
        raise ParameterError(f"unknown elementwise op {op!r}")
    return check_finite(out, f"{op} result")


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor | float:
    return np.sum(a, axis=axis)


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor | float:
    return np.mean(a, axis=axis)


def rand_uniform(rng: Rng, shape, lo: float, hi: float) -> Tensor:
    """I.i.d. uniform draws in ``[lo, hi)``."""
    if not lo < hi:
        raise ParameterError(f"rand_uniform needs lo < hi, got lo={lo}, hi={hi}")
    out = lo + (hi - lo) * rng.random(shape)
    # lo + (hi-lo)*u can round up to hi for u just below 1
    return np.minimum(out, np.nextafter(hi, lo))
