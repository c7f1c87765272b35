"""Numeric modes and the tolerance constants tied to them.

Training runs in 32-bit floats; oracle and equivalence checks run in 64-bit.
The active mode is held in a context variable so independent threads can use
different modes without interfering.
"""
from __future__ import annotations

import contextlib
import contextvars
from typing import Iterator

import numpy as np

_default_dtype: contextvars.ContextVar[np.dtype] = contextvars.ContextVar(
    "weightnet_default_dtype", default=np.dtype(np.float32)
)

# Equivalence tolerance for exact re-expressions (same math, different route).
EQUIV_ATOL = {np.dtype(np.float64): 1e-12, np.dtype(np.float32): 1e-5}
# Finite-difference gradient check, 64-bit only.
FD_EPS = 1e-4
FD_RTOL = 1e-4
# Denominator floor for relative errors; keeps near-zero entries from
# turning round-off into large relative error.
FD_REL_FLOOR = 1e-6
SYMMETRY_ATOL = 1e-7
PCA_TOL = 1e-8
PCA_MAX_ITER = 1000


def get_default_dtype() -> np.dtype:
    return _default_dtype.get()


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype.set(dtype)


@contextlib.contextmanager
def precision(dtype) -> Iterator[np.dtype]:
    """Temporarily switch the default float type, e.g. ``with precision(np.float64):``."""
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    token = _default_dtype.set(dtype)
    try:
        yield dtype
    finally:
        _default_dtype.reset(token)


def float64():
    return precision(np.float64)


def equiv_atol(dtype=None) -> float:
    return EQUIV_ATOL[np.dtype(dtype or get_default_dtype())]
