"""Finite-difference verification of tape gradients.

For a small random batch of bags the analytic gradients of the training
loss are compared against central differences, parameter by parameter.
Relative error is measured where either gradient exceeds 1e-8; below
that both must agree absolutely.  The segment head is checked through
its natural instance-level loss, everything else through the bag loss.
"""
import time
from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .models import Model, ModelSpec, forward, HEADS, TOPOLOGIES
from .numerics.rng import Rng
from .numerics.tape import backward
from .pooling import GATES
from .training import batch_loss_node

FD_STEP = 1e-5
REL_TOL = 1e-4
# below this magnitude the comparison is absolute: the central-difference
# subtraction carries ~1e-11 of roundoff against an O(1) loss, so relative
# error on near-zero gradients measures noise, not correctness
ABS_FLOOR = 1e-6


def _make_inputs(spec: ModelSpec, seed: int):
    rng = Rng(seed).spawn("gradcheck")
    sizes = (2, 3, 4)
    mats = [rng.normal((t, spec.input_dim)) for t in sizes]
    targets = (rng.uniform((len(sizes), spec.classes)) < 0.5).astype(np.float64)
    # every bag needs at least one positive so both BCE terms are exercised
    for row in targets:
        if not row.any():
            row[0] = 1.0
    return mats, targets


def _loss_value(model, mats, targets, loss_level) -> float:
    res = forward(model, mats, train=False)
    return float(batch_loss_node(res, targets, loss_level).value)


@dataclass
class CheckResult:
    head: str
    gate: str
    topology: str
    max_rel_err: float
    worst_param: str
    num_params: int
    passed: bool


def check_model(spec: ModelSpec, seed: int = 0, h: float = FD_STEP,
                tol: float = REL_TOL, grad_perturb=None) -> CheckResult:
    """Compare analytic and central-difference gradients for one spec.

    ``grad_perturb`` is a test hook applied to the analytic gradients
    before comparison; a corrupted backward pass must fail the check.
    """
    spec.validate()
    model = Model.build(spec, seed=seed)
    # zero-init biases put relu pre-activations exactly on the kink (dead
    # rows feed exact zeros forward), where one-sided derivatives disagree
    # with central differences; check at a generic random point instead
    jiggle = Rng(seed).spawn("gradcheck-params")
    for p in model.params.values():
        p += jiggle.normal(p.shape, sigma=0.2)
    mats, targets = _make_inputs(spec, seed)
    loss_level = "instance" if spec.head == "segment" else "bag"

    res = forward(model, mats, train=False)
    loss = batch_loss_node(res, targets, loss_level)
    grads = backward(res.tape, loss)
    if grad_perturb is not None:
        grads = grad_perturb(grads)

    def fd_error(flat, i, ga, step):
        orig = flat[i]
        flat[i] = orig + step
        lp = _loss_value(model, mats, targets, loss_level)
        flat[i] = orig - step
        lm = _loss_value(model, mats, targets, loss_level)
        flat[i] = orig
        fd = (lp - lm) / (2.0 * step)
        scale = max(abs(fd), abs(ga))
        return abs(fd - ga) if scale <= ABS_FLOOR else abs(fd - ga) / scale

    worst = 0.0
    worst_param = ""
    count = 0
    for name, p in model.params.items():
        flat = p.reshape(-1)
        gflat = grads[name].reshape(-1)
        count += flat.size
        for i in range(flat.size):
            err = fd_error(flat, i, gflat[i], h)
            if err > tol:
                # a +-h stencil straddling a relu kink misreports an exact
                # gradient (smaller steps escape the kink), and roundoff on
                # small-magnitude gradients shrinks with a larger step; a
                # genuinely wrong gradient fails at every step size
                err = min(err, fd_error(flat, i, gflat[i], h * 10.0),
                          fd_error(flat, i, gflat[i], h / 10.0),
                          fd_error(flat, i, gflat[i], h / 100.0))
            if err > worst:
                worst = err
                worst_param = f"{name}[{i}]"
    return CheckResult(spec.head, spec.gate, spec.topology, worst, worst_param,
                       count, worst <= tol)


def sweep(input_dim: int = 5, classes: int = 3, seed: int = 0,
          heads=None, gates=None, topologies=None,
          trunk_depth: int = 2) -> list[CheckResult]:
    """Gradient-check every (head, gate, topology) combination."""
    heads = [h for h in (heads or HEADS) if h != "bs_knn"]
    gates = gates or GATES
    topologies = topologies or TOPOLOGIES
    results = []
    for head in heads:
        for gate in gates:
            for topology in topologies:
                if head == "decision_multi_att" and trunk_depth < 2:
                    continue  # needs two trunk blocks to tap
                spec = ModelSpec(
                    input_dim=input_dim, classes=classes, head=head, gate=gate,
                    topology=topology, trunk_depth=trunk_depth, trunk_width=6,
                    att_dim=4, levels=2, dropout=0.0)
                results.append(check_model(spec, seed=seed))
    return results


def run_sweep_or_raise(seed: int = 0, budget_seconds: float = 60.0) -> list[CheckResult]:
    """Full sweep; raises NumericError on any failure or budget overrun."""
    start = time.perf_counter()
    results = sweep(seed=seed)
    elapsed = time.perf_counter() - start
    bad = [r for r in results if not r.passed]
    if bad:
        lines = ", ".join(f"{r.head}/{r.gate}/{r.topology} err={r.max_rel_err:.3g} "
                          f"at {r.worst_param}" for r in bad)
        raise NumericError(f"gradient check failed: {lines}")
    if elapsed > budget_seconds:
        raise NumericError(f"gradient sweep took {elapsed:.1f}s, "
                           f"budget {budget_seconds:.0f}s")
    return results
