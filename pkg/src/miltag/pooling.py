"""Bag-level pooling: classic MIL reductions and gated attention weights.

A bag is a set, so every reduction here is invariant to instance order.
Max and min are exactly invariant on their own.  Sums are made exactly
invariant by accumulating in a canonical order: the summand rows are
sorted lexicographically first, so any permutation of the input produces
bit-identical output, not merely output within a tolerance.

Attention weights are normalised per column (one weight column per
output component) with a small additive smoothing:

    q[t, j] = (w[t, j] + eps/T) / (sum_t w[t, j] + eps)

which keeps every column summing to one and degrades gracefully to
uniform weights when a gate outputs all zeros (a relu gate on all
negative pre-activations, for instance).
"""
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, EmptyBagError, ShapeError
from .numerics.linalg import as_matrix, softmax
from . import backend

GATES = ("relu", "exp", "sigmoid", "softmax", "nin")
ATT_EPS = 1e-8
EXP_CLAMP_LO = -20.0
EXP_CLAMP_HI = 20.0


@dataclass
class NinParams:
    """Weights of the two-layer network-in-network gate."""
    w1: np.ndarray  # (J, H)
    b1: np.ndarray  # (H,)
    w2: np.ndarray  # (H, J)
    b2: np.ndarray  # (J,)


def canonical_order(rows: np.ndarray) -> np.ndarray:
    """Lexicographic row order; identical up to ties for any input permutation."""
    return np.lexsort(rows.T[::-1])


def _canonical_colsum(x: np.ndarray) -> np.ndarray:
    return x[canonical_order(x)].sum(axis=0)


def _require_bag(mat, name: str) -> np.ndarray:
    mat = as_matrix(mat, name)
    if mat.shape[0] == 0:
        raise EmptyBagError(f"{name} has no instances")
    return mat


def pool_smi_max(preds) -> np.ndarray:
    """Bag score per class under the standard MI assumption: column max."""
    return _require_bag(preds, "preds").max(axis=0)


def pool_ca_average(preds) -> np.ndarray:
    """Bag score per class under the collective assumption: column mean."""
    preds = _require_bag(preds, "preds")
    return attend(uniform_weights(*preds.shape), preds)


def embed_average(instances) -> np.ndarray:
    """Bag embedding: per-feature mean over instances."""
    instances = _require_bag(instances, "instances")
    return attend(uniform_weights(*instances.shape), instances)


def embed_maxmin(instances) -> np.ndarray:
    """Bag embedding: per-feature max concatenated with per-feature min."""
    instances = _require_bag(instances, "instances")
    return np.concatenate([instances.max(axis=0), instances.min(axis=0)])


def bag_hausdorff(bag1, bag2) -> float:
    """Minimal Euclidean distance over all cross-bag instance pairs."""
    a = _require_bag(bag1, "bag1")
    b = _require_bag(bag2, "bag2")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return float(np.sqrt(d2.min()))


def uniform_weights(t: int, j: int) -> np.ndarray:
    return np.full((t, j), 1.0 / t)


def smi_onehot_weights(values) -> np.ndarray:
    """Per column, all weight on the (first) row attaining the column max."""
    values = _require_bag(values, "values")
    w = np.zeros_like(values)
    w[values.argmax(axis=0), np.arange(values.shape[1])] = 1.0
    return w


def gate_apply(kind: str, z, nin: NinParams | None = None) -> np.ndarray:
    """Map gate pre-activations to non-negative attention mass, row-local."""
    z = as_matrix(z, "z")
    if kind == "relu":
        return backend.relu_fwd(z)
    if kind == "exp":
        return backend.exp_clamped_fwd(z, EXP_CLAMP_LO, EXP_CLAMP_HI)
    if kind == "sigmoid":
        return backend.sigmoid_fwd(z)
    if kind == "softmax":
        # across components within one instance; instance-axis normalisation
        # still happens in attention_normalize
        return softmax(z, axis=1)
    if kind == "nin":
        if nin is None:
            raise DomainError("nin gate needs NinParams")
        h = backend.relu_fwd(as_matrix(z @ nin.w1 + nin.b1, "nin hidden"))
        return backend.sigmoid_fwd(as_matrix(h @ nin.w2 + nin.b2, "nin out"))
    raise DomainError(f"unknown gate {kind!r}, expected one of {GATES}")


def attention_normalize(values, gate: str, nin: NinParams | None = None) -> np.ndarray:
    """Gate pre-activations -> instance weights, each column summing to one."""
    values = _require_bag(values, "values")
    w = gate_apply(gate, values, nin)
    t = w.shape[0]
    denom = _canonical_colsum(w) + ATT_EPS
    return (w + ATT_EPS / t) / denom


def attend(weights, values) -> np.ndarray:
    """Weighted instance sum, one output per column."""
    w = _require_bag(weights, "weights")
    v = _require_bag(values, "values")
    if w.shape != v.shape:
        raise ShapeError(f"weights shape {w.shape} != values shape {v.shape}")
    prod = w * v
    return prod[canonical_order(prod)].sum(axis=0)
