"""Numeric core: validated matrix ops, autodiff tape, Adam, RNG, specials."""
from .adam import AdamState, adam_step
from .linalg import activation, as_matrix, glorot_uniform, matmul, softmax
from .rng import Rng
from .special import betainc_reg, inv_norm_cdf, norm_cdf, norm_quantile_approx, student_t_two_sided_p
from .tape import Node, Segments, Tape, backward

__all__ = [
    "AdamState", "adam_step", "activation", "as_matrix", "glorot_uniform",
    "matmul", "softmax", "Rng", "betainc_reg", "inv_norm_cdf", "norm_cdf",
    "norm_quantile_approx", "student_t_two_sided_p", "Node", "Segments",
    "Tape", "backward",
]
