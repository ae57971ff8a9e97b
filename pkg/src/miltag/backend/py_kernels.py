"""Pure numpy implementations of the hot-path kernels.

The Cython module ``_ckernels`` exports the same functions with the same
semantics; either backend can serve the autodiff tape.  Segment kernels
operate on row-blocks of a stacked matrix: ``offsets`` is an int64 array
of length S+1 and segment ``s`` covers rows ``offsets[s]:offsets[s+1]``.
All float arrays are C-contiguous float64.
"""
import numpy as np

NAME = "python"


def relu_fwd(x):
    return np.maximum(x, 0.0)


def relu_bwd(x, g):
    return np.where(x > 0.0, g, 0.0)


def sigmoid_fwd(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_bwd(out, g):
    return g * out * (1.0 - out)


def exp_clamped_fwd(x, lo, hi):
    return np.exp(np.clip(x, lo, hi))


def exp_clamped_bwd(x, out, g, lo, hi):
    return np.where((x >= lo) & (x <= hi), g * out, 0.0)


def segment_sum(x, offsets):
    # per-segment cumsum keeps strict row order; reduceat sums pairwise,
    # which would round differently from the compiled backend
    nseg = len(offsets) - 1
    out = np.empty((nseg, x.shape[1]), dtype=np.float64)
    for s in range(nseg):
        out[s] = x[offsets[s]:offsets[s + 1]].cumsum(axis=0)[-1]
    return out


def segment_expand(s, offsets, rows):
    return np.repeat(s, np.diff(offsets), axis=0)


def segment_max(x, offsets):
    nseg = len(offsets) - 1
    cols = x.shape[1]
    vals = np.empty((nseg, cols), dtype=np.float64)
    arg = np.empty((nseg, cols), dtype=np.int64)
    colix = np.arange(cols)
    for s in range(nseg):
        block = x[offsets[s]:offsets[s + 1]]
        a = block.argmax(axis=0)  # first occurrence on ties
        arg[s] = offsets[s] + a
        vals[s] = block[a, colix]
    return vals, arg


def segment_min(x, offsets):
    nseg = len(offsets) - 1
    cols = x.shape[1]
    vals = np.empty((nseg, cols), dtype=np.float64)
    arg = np.empty((nseg, cols), dtype=np.int64)
    colix = np.arange(cols)
    for s in range(nseg):
        block = x[offsets[s]:offsets[s + 1]]
        a = block.argmin(axis=0)
        arg[s] = offsets[s] + a
        vals[s] = block[a, colix]
    return vals, arg


def scatter_rows_add(g, arg, rows):
    # routes segment max/min gradients back to the winning rows;
    # (segment, col) -> (row, col) targets never collide
    gx = np.zeros((rows, g.shape[1]), dtype=np.float64)
    gx[arg, np.arange(g.shape[1])] += g
    return gx


def adam_update(p, g, m, v, lr, beta1, beta2, eps, t):
    """One Adam step on flat float64 views, updating p, m, v in place."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    p -= lr * mhat / (np.sqrt(vhat) + eps)
