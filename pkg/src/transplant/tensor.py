"""Dense tensors, seeded generators and the few reductions the rest of the package needs.

Tensors are plain ``numpy.ndarray`` values in row-major order. Feature maps are
laid out channels x height x width (with a leading batch extent where a function
says so), convolution kernels out-channels x in-channels x kH x kW.
"""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
FLOAT_DTYPES = {"single": np.float32, "double": np.float64}


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf reaches an op boundary."""


def resolve_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(FLOAT_DTYPES[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}; expected 'single' or 'double'")
    dt = np.dtype(precision)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}")
    return dt


def precision_name(dtype) -> str:
    return "double" if np.dtype(dtype) == np.float64 else "single"


def check_shape(shape: Iterable[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if not dims or any(d < 1 for d in dims):
        raise ValueError(f"invalid shape {dims}: every extent must be >= 1")
    return dims


def check_finite(x: np.ndarray, where: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {where}")
    return x


def zeros(shape: Sequence[int], dtype=DEFAULT_DTYPE) -> np.ndarray:
    return np.zeros(check_shape(shape), dtype=resolve_dtype(dtype))


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; the same seed gives the same stream on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def randn(shape: Sequence[int], rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> np.ndarray:
    # always draw in double so single and double runs see the same stream
    return rng.standard_normal(check_shape(shape)).astype(resolve_dtype(dtype), copy=False)


def axpy_norms(a: np.ndarray, b: np.ndarray, alpha: float) -> float:
    """Return ``sum((alpha * a - b) ** 2)``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    r = alpha * a.astype(np.float64, copy=False) - b.astype(np.float64, copy=False)
    return float(np.dot(r.ravel(), r.ravel()))


def reshape(x: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    dims = check_shape(shape)
    if int(np.prod(dims)) != x.size:
        raise ValueError(f"cannot reshape {x.shape} into {dims}")
    return np.reshape(x, dims)


def numel(shape: Sequence[int]) -> int:
    return int(np.prod(check_shape(shape)))
