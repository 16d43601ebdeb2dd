"""Dense float64 tensor helpers, seeded randomness and the RNT1 file format.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  The helpers here
add the guarantees the rest of the package relies on: finite results, a fixed
summation order for reductions, and a small portable binary format.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

Tensor = np.ndarray

MAGIC = b"RNT1"


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def as_tensor(x) -> Tensor:
    return np.asarray(x, dtype=np.float64)


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NonFiniteError(f"{what}: {bad} non-finite element(s)")
    return x


def _broadcastable(a_shape: tuple, b_shape: tuple) -> bool:
    if len(b_shape) > len(a_shape):
        return False
    for da, db in zip(a_shape[::-1], b_shape[::-1]):
        if db != da and db != 1:
            return False
    return True


def ew_binary(a, b, kind: str) -> Tensor:
    """Elementwise ``add``/``sub``/``mul``; ``b`` may broadcast onto ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if not _broadcastable(a.shape, b.shape):
        raise ValueError(f"cannot broadcast {b.shape} onto {a.shape}")
    ops = {"add": np.add, "sub": np.subtract, "mul": np.multiply}
    if kind not in ops:
        raise ValueError(f"unknown elementwise op {kind!r}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = ops[kind](a, b)
    return check_finite(out, kind)


def stabilized_div(num, den, epsilon: float = 0.0) -> Tensor:
    """``num / (den + sign(den) * epsilon)`` with ``sign(0) = +1``.

    With ``epsilon == 0`` a zero denominator is an error unless the numerator
    is zero as well; ``0 / 0`` is taken as 0 (a neuron that carries no
    relevance passes none on).
    """
    num, den = as_tensor(num), as_tensor(den)
    if num.shape != den.shape:
        raise ValueError(f"shape mismatch {num.shape} vs {den.shape}")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    sign = np.where(den >= 0, 1.0, -1.0)
    d = den + sign * epsilon
    zero = d == 0
    if np.any(zero):
        if np.any(num[zero] != 0):
            raise ZeroDivisionError(
                f"{int(np.count_nonzero(zero & (num != 0)))} zero denominator(s) with epsilon=0"
            )
        d = np.where(zero, 1.0, d)
    return check_finite(num / d, "stabilized_div")


def reduce_sum(a, axes: Sequence[int] | None = None) -> Tensor:
    """Sum over ``axes`` accumulating in ascending index order.

    ``numpy.sum`` uses pairwise summation; ``cumsum`` is strictly sequential,
    which is what makes conservation residuals reproducible bit for bit.
    """
    a = as_tensor(a)
    if axes is None:
        axes = range(a.ndim)
    axes = [ax + a.ndim if ax < 0 else ax for ax in axes]
    if len(set(axes)) != len(axes) or any(not 0 <= ax < a.ndim for ax in axes):
        raise ValueError(f"invalid axes {axes} for rank {a.ndim}")
    keep = [ax for ax in range(a.ndim) if ax not in axes]
    moved = np.transpose(a, keep + sorted(axes))
    flat = moved.reshape(tuple(a.shape[ax] for ax in keep) + (-1,))
    if flat.shape[-1] == 0:
        return np.zeros(flat.shape[:-1])
    return check_finite(np.cumsum(flat, axis=-1)[..., -1], "reduce_sum")


def flip_spatial(kernel) -> Tensor:
    """Reverse both spatial axes of an ``(out_ch, in_ch, kh, kw)`` kernel."""
    kernel = as_tensor(kernel)
    if kernel.ndim != 4:
        raise ValueError(f"expected rank-4 kernel, got rank {kernel.ndim}")
    return kernel[:, :, ::-1, ::-1].copy()


def heaviside(a) -> Tensor:
    """1 where ``a > 0``, else 0 (so H(0) = 0)."""
    return (as_tensor(a) > 0).astype(np.float64)


def seeded_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator keyed by ``seed`` and an optional stream path.

    Streams make per-item randomness independent of iteration order:
    ``seeded_rng(s, i)`` depends only on ``(s, i)``.
    """
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))


# -- RNT1 binary format ----------------------------------------------------

def write_tensor(fh: BinaryIO, x) -> None:
    x = np.ascontiguousarray(as_tensor(x))
    fh.write(MAGIC)
    fh.write(struct.pack("<I", x.ndim))
    fh.write(struct.pack(f"<{x.ndim}Q", *x.shape))
    fh.write(x.astype("<f8", copy=False).tobytes())


def read_tensor(fh: BinaryIO) -> Tensor:
    magic = fh.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
    count = int(np.prod(shape, dtype=np.int64))
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def save_tensor(path: str | Path, x) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, x)


def load_tensor(path: str | Path) -> Tensor:
    with open(path, "rb") as fh:
        return read_tensor(fh)


