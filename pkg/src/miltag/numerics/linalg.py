"""Validated dense matrix operations on row-major float64 arrays.

These are the checked public entry points.  The autodiff tape calls the
underlying numpy and kernel routines directly and skips the per-call
finite scans for speed; data enters models through validated paths.
"""
import numpy as np

from ..errors import DomainError, NumericError, ShapeError
from .. import backend

ACTIVATIONS = ("relu", "sigmoid", "softmax", "exp")

EXP_CLAMP_LO = -20.0
EXP_CLAMP_HI = 20.0


def as_matrix(a, name: str = "array") -> np.ndarray:
    """Coerce to a 2-D C-contiguous float64 array, validating shape."""
    out = np.ascontiguousarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {np.shape(a)}")
    return out


def _check_finite(a: np.ndarray, context: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values in {context}")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    return _check_finite(a @ b, "matmul result")


def softmax(z: np.ndarray, axis: int) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def activation(kind: str, z, axis: int | None = None) -> np.ndarray:
    """Apply a named nonlinearity; softmax requires an axis, others ignore it."""
    z = as_matrix(z, "z")
    if kind == "relu":
        out = backend.relu_fwd(z)
    elif kind == "sigmoid":
        out = backend.sigmoid_fwd(z)
    elif kind == "exp":
        out = backend.exp_clamped_fwd(z, EXP_CLAMP_LO, EXP_CLAMP_HI)
    elif kind == "softmax":
        if axis is None:
            raise DomainError("softmax needs an explicit axis")
        out = softmax(z, axis)
    else:
        raise DomainError(f"unknown activation {kind!r}, expected one of {ACTIVATIONS}")
    return _check_finite(out, f"activation({kind})")


def glorot_uniform(rng, fan_in: int, fan_out: int, shape) -> np.ndarray:
    """Uniform init on +-sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return (rng.uniform(shape) * 2.0 - 1.0) * limit
