"""Small input-checking helpers shared by the estimators and free functions."""

import numbers

import numpy as np


def as_vector(value, size: int, name: str) -> np.ndarray:
    """Coerce ``value`` to a finite 1-D float array of length ``size``."""
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.ndim != 1 or arr.size != size:
        raise ValueError(f"{name} must have {size} entries, got shape {np.shape(value)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def as_square(value, size: int, name: str) -> np.ndarray:
    """Coerce a scalar, diagonal vector or matrix to a ``(size, size)`` array."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return arr * np.eye(size)
    if arr.ndim == 1:
        if arr.size != size:
            raise ValueError(f"{name} diagonal must have {size} entries")
        return np.diag(arr)
    if arr.shape != (size, size):
        raise ValueError(f"{name} must be {size}x{size}, got {arr.shape}")
    return arr


def check_symmetric(M: np.ndarray, name: str, definite: bool = False) -> None:
    if not np.allclose(M, M.T, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    lam = np.linalg.eigvalsh(M).min() if M.size else 0.0
    if definite and lam <= 0:
        raise ValueError(f"{name} must be positive definite")
    if not definite and lam < -1e-12:
        raise ValueError(f"{name} must be positive semi-definite")


def check_positive(value, name: str, strict: bool = True) -> None:
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ValueError(f"{name} must be a finite real number")
    if strict and value <= 0:
        raise ValueError(f"{name} must be > 0, got {value}")
    if not strict and value < 0:
        raise ValueError(f"{name} must be >= 0, got {value}")


def check_rng_seed(seed) -> int:
    if not isinstance(seed, numbers.Integral) or seed < 0:
        raise ValueError(f"seed must be a non-negative integer, got {seed!r}")
    return int(seed)
