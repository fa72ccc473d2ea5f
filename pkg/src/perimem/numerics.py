"""Dense float64 primitives: affine maps, activations, softmax, finite differences.

Every piece of model math in this package is built from the functions here.
Vectors are 1-D numpy arrays, matrices 2-D row-major, always float64 so that
finite-difference gradient checks have precision headroom. Batched call sites
use the same functions with a leading batch axis where noted.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import ShapeError

Vector = np.ndarray
Matrix = np.ndarray


def as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def affine(weight: Matrix, x: Vector, bias: Vector) -> Vector:
    """Return weight @ x + bias with explicit shape checking."""
    weight = as_f64(weight)
    x = as_f64(x)
    bias = as_f64(bias)
    if weight.ndim != 2:
        raise ShapeError(f"affine: weight must be 2-D, got shape {weight.shape}")
    if x.ndim != 1:
        raise ShapeError(f"affine: input must be 1-D, got shape {x.shape}")
    if bias.ndim != 1:
        raise ShapeError(f"affine: bias must be 1-D, got shape {bias.shape}")
    if weight.shape[1] != x.shape[0]:
        raise ShapeError(
            f"affine: weight shape {weight.shape} does not match input shape {x.shape}"
        )
    if weight.shape[0] != bias.shape[0]:
        raise ShapeError(
            f"affine: weight shape {weight.shape} does not match bias shape {bias.shape}"
        )
    return weight @ x + bias


def sigmoid(x):
    """Numerically stable logistic function; never returns NaN for finite input."""
    return expit(as_f64(x))


def tanh(x):
    return np.tanh(as_f64(x))


def relu(x):
    return np.maximum(as_f64(x), 0.0)


ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def activate(kind: str, x):
    """Apply a named activation ("sigmoid", "tanh" or "relu") elementwise."""
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}")
    return fn(x)


def sigmoid_grad(y):
    """Derivative of sigmoid expressed through its output y."""
    return y * (1.0 - y)


def tanh_grad(y):
    """Derivative of tanh expressed through its output y."""
    return 1.0 - y * y


def relu_grad(x):
    """Derivative of relu from its input (or output; both have the same sign)."""
    return (as_f64(x) > 0.0).astype(np.float64)


def softmax(scores):
    """Max-subtracted softmax along the last axis.

    Stable for scores of any magnitude; an empty input is an error rather
    than a silent NaN.
    """
    scores = as_f64(scores)
    if scores.size == 0:
        raise ShapeError("softmax: input is empty")
    shifted = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(shifted)
    return w / w.sum(axis=-1, keepdims=True)


def softmax_grad(weights, d_weights):
    """Backprop through softmax: given outputs and their gradient, return score gradient."""
    inner = np.sum(weights * d_weights, axis=-1, keepdims=True)
    return weights * (d_weights - inner)


def finite_diff_grad(f, x: Vector, h: float = 1e-5) -> Vector:
    """Central-difference gradient of scalar f at x.

    Perturbs one coordinate at a time; a non-finite function value raises an
    error naming the offending coordinate.
    """
    if h <= 0.0:
        raise ValueError(f"finite_diff_grad: step must be positive, got {h}")
    x = as_f64(x).copy()
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(f(x))
        flat[i] = orig - h
        f_minus = float(f(x))
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ShapeError(
                f"finite_diff_grad: non-finite function value at coordinate {i}"
            )
        out[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(a, b, floor: float = 1e-5) -> float:
    """Max elementwise |a-b| / max(|a|, |b|, floor).

    The floor keeps coordinates whose true gradient is indistinguishable from
    finite-difference noise from dominating the report.
    """
    a = as_f64(a)
    b = as_f64(b)
    if a.shape != b.shape:
        raise ShapeError(f"relative_error: shapes {a.shape} and {b.shape} differ")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
