"""Input validation helpers shared by the estimators."""

import numbers

import numpy as np

from .errors import InvalidMatrixError

SYMMETRY_TOL = 1e-10
PSD_TOL = 1e-10


def check_states(x, dim=None, name="x"):
    """Return ``x`` as a float array of shape ``(n, d)``.

    A 1D input is read as ``n`` scalar states when ``dim`` is 1 or None.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        if dim is None or dim == 1:
            x = x[:, None]
        elif x.shape[0] == dim:
            x = x[None, :]
        else:
            raise ValueError(f"{name} has shape {x.shape}, expected (n, {dim})")
    elif x.ndim != 2:
        raise ValueError(f"{name} must be at most 2-dimensional, got ndim={x.ndim}")
    if dim is not None and x.shape[1] != dim:
        raise ValueError(f"{name} has {x.shape[1]} columns, expected {dim}")
    return x


def check_finite(a, name="array"):
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains NaN or infinite values")
    return a


def check_positive_int(value, name):
    if not isinstance(value, numbers.Integral) or isinstance(value, bool) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_positive(value, name):
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be positive and finite, got {value!r}")
    return value


def check_psd(a, name="matrix", tol=PSD_TOL):
    """Validate a (batch of) symmetric PSD matrices and return eigenpairs.

    Eigenvalues within ``tol`` below zero are clamped to zero.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise InvalidMatrixError(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidMatrixError(f"{name} contains non-finite entries")
    asym = np.max(np.abs(a - np.swapaxes(a, -1, -2)), initial=0.0)
    if asym > SYMMETRY_TOL:
        raise InvalidMatrixError(f"{name} is not symmetric (max asymmetry {asym:.3g})")
    w, v = np.linalg.eigh(0.5 * (a + np.swapaxes(a, -1, -2)))
    if np.min(w, initial=0.0) < -tol:
        raise InvalidMatrixError(f"{name} is indefinite (min eigenvalue {np.min(w):.3g})")
    return np.maximum(w, 0.0), v


def check_seed(seed):
    if isinstance(seed, bool) or not isinstance(seed, numbers.Integral):
        raise ValueError(f"seed must be an integer, got {seed!r}")
    if not 0 <= int(seed) < 2**64:
        raise ValueError("seed must fit in an unsigned 64-bit integer")
    return int(seed)
