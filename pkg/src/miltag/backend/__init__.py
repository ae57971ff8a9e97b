"""Kernel backend selection.

The compiled Cython kernels are used when the extension imported cleanly;
otherwise the numpy fallback serves.  ``MILTAG_BACKEND=python`` or
``MILTAG_BACKEND=cython`` forces the choice (forcing cython raises if the
extension is unavailable).
"""
import os

from ..errors import ConfigError
from . import py_kernels

_forced = os.environ.get("MILTAG_BACKEND")
if _forced not in (None, "python", "cython"):
    raise ConfigError(f"MILTAG_BACKEND must be 'python' or 'cython', got {_forced!r}")

if _forced == "python":
    impl = py_kernels
else:
    try:
        from . import _ckernels as impl
    except ImportError:
        if _forced == "cython":
            raise ConfigError("MILTAG_BACKEND=cython but the compiled extension is missing")
        impl = py_kernels

NAME = impl.NAME

relu_fwd = impl.relu_fwd
relu_bwd = impl.relu_bwd
sigmoid_fwd = impl.sigmoid_fwd
sigmoid_bwd = impl.sigmoid_bwd
exp_clamped_fwd = impl.exp_clamped_fwd
exp_clamped_bwd = impl.exp_clamped_bwd
segment_sum = impl.segment_sum
segment_expand = impl.segment_expand
segment_max = impl.segment_max
segment_min = impl.segment_min
scatter_rows_add = impl.scatter_rows_add
adam_update = impl.adam_update
