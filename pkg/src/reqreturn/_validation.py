"""Input validation helpers shared by the estimators."""

import numpy as np

from .exceptions import DataError, SingularCovarianceError


def as_matrix(a, name, *, ndim=2, allow_empty=True):
    """Return ``a`` as a finite float array with ``ndim`` dimensions."""
    arr = np.asarray(a, dtype=float)
    if arr.ndim == ndim - 1 and ndim == 2:
        arr = arr.reshape(-1, 1)
    if arr.ndim != ndim:
        raise DataError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not allow_empty and arr.size == 0:
        raise DataError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise DataError(f"{name} has a non-finite entry at index {tuple(bad)}")
    return arr


def as_vector(a, name):
    arr = np.atleast_1d(np.asarray(a, dtype=float))
    if arr.ndim != 1:
        raise DataError(f"{name} must be a vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} has non-finite entries")
    return arr


def symmetrize(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def check_spd(a, name, *, sym_tol=1e-10):
    """Symmetrize ``a`` and verify it is positive definite.

    Raises :class:`SingularCovarianceError` if the smallest eigenvalue is not
    strictly positive or the asymmetry exceeds ``sym_tol`` (relative).
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DataError(f"{name} must be square, got shape {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if a.size and np.max(np.abs(a - a.T)) > sym_tol * scale:
        raise SingularCovarianceError(f"{name} is not symmetric")
    a = symmetrize(a)
    if a.size and np.linalg.eigvalsh(a)[0] <= 0:
        raise SingularCovarianceError(f"{name} is not positive definite")
    return a


def check_probability_vector(p, name, *, tol=1e-12):
    p = as_vector(p, name)
    if np.any(p < -tol) or np.any(p > 1 + tol) or abs(p.sum() - 1.0) > tol:
        raise DataError(f"{name} must be a probability vector (entries in [0,1], sum 1)")
    return np.clip(p, 0.0, 1.0)


def check_row_stochastic(P, name="transition", *, tol=1e-12):
    P = as_matrix(P, name)
    if P.shape[0] != P.shape[1]:
        raise DataError(f"{name} must be square, got shape {P.shape}")
    if np.any(P < -tol) or np.any(P > 1 + tol):
        raise DataError(f"{name} entries must lie in [0, 1]")
    if np.any(np.abs(P.sum(axis=1) - 1.0) > tol):
        raise DataError(f"rows of {name} must sum to 1")
    return np.clip(P, 0.0, 1.0)


def check_positive_int(value, name, *, minimum=1):
    if int(value) != value or value < minimum:
        raise DataError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)
