"""Training: binary cross-entropy losses, batch samplers, the Adam loop.

Mini-batch balancing draws classes round-robin in a fixed rotation, one
bag from the drawn class per slot, with per-class cursors that reshuffle
each time a class's list is exhausted.  A bag with several labels counts
toward the class whose rotation slot drew it.
"""
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .models import INSTANCE_PRED_HEADS, ForwardResult, Model, canonical_instances, forward
from .numerics.adam import AdamState, adam_step
from .numerics.rng import Rng
from .numerics import tape as T

PRED_CLAMP = 1e-7

BALANCING_MODES = ("minibatch_balanced", "none")
LOSS_LEVELS = ("bag", "instance")


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 64
    iterations: int = 5000
    checkpoint_interval: int = 500
    ensemble_size: int = 5
    balancing: str = "minibatch_balanced"
    loss_level: str = "bag"
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.lr <= 0.0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.checkpoint_interval < 1:
            raise ConfigError("checkpoint_interval must be >= 1")
        if self.ensemble_size < 1:
            raise ConfigError("ensemble_size must be >= 1")
        if self.iterations > 0 and self.ensemble_size * self.checkpoint_interval > self.iterations:
            raise ConfigError(
                f"ensemble_size * checkpoint_interval "
                f"({self.ensemble_size} * {self.checkpoint_interval}) exceeds "
                f"iterations ({self.iterations})")
        if self.balancing not in BALANCING_MODES:
            raise ConfigError(f"balancing must be one of {BALANCING_MODES}")
        if self.loss_level not in LOSS_LEVELS:
            raise ConfigError(f"loss_level must be one of {LOSS_LEVELS}")
        return self


def bce_loss(pred, target) -> float:
    """Summed binary cross-entropy between a score vector and 0/1 targets.

    Predictions are clamped to [1e-7, 1 - 1e-7] so the result is finite
    even for saturated scores.
    """
    p = np.clip(np.asarray(pred, dtype=np.float64), PRED_CLAMP, 1.0 - PRED_CLAMP)
    y = np.asarray(target, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"pred shape {p.shape} != target shape {y.shape}")
    return float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).sum())


def _bce_terms_on_tape(pred: T.Node, targets: np.ndarray) -> T.Node:
    # elementwise y*log(p) + (1-y)*log(1-p), negated later by the caller
    p = T.clamp(pred, PRED_CLAMP, 1.0 - PRED_CLAMP)
    pos = T.mul_const(T.log(p), targets)
    one_minus = T.add_const(T.mul_const(p, -1.0), 1.0)
    neg = T.mul_const(T.log(one_minus), 1.0 - targets)
    return T.add(pos, neg)


def batch_loss_node(res: ForwardResult, targets: np.ndarray, loss_level: str) -> T.Node:
    """Scalar training loss for one forward batch.

    Bag level: mean over bags of the summed per-class BCE on bag scores.
    Instance level: each instance inherits its bag's labels; the loss is
    the mean over bags of the mean over instances.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if loss_level == "bag":
        terms = _bce_terms_on_tape(res.pred, targets)
        nbags = targets.shape[0]
        return T.mul_const(T.sum_all(terms), -1.0 / nbags)
    if loss_level == "instance":
        if "instance_preds" not in res.aux:
            raise ConfigError("instance-level loss needs a head with per-instance predictions")
        seg = res.seg
        expanded = np.repeat(targets, seg.counts, axis=0)
        terms = _bce_terms_on_tape(res.aux["instance_preds"], expanded)
        weights = np.repeat(1.0 / seg.counts, seg.counts).reshape(-1, 1) / seg.nseg
        return T.mul_const(T.sum_all(T.mul_const(terms, weights)), -1.0)
    raise ConfigError(f"unknown loss_level {loss_level!r}")


def bag_level_loss(model: Model, instances, target) -> float:
    """BCE between one bag's pooled prediction and its label vector."""
    res = forward(model, [np.asarray(instances)])
    return bce_loss(res.pred.value[0], target)


def instance_level_loss(model: Model, instances, target) -> float:
    """Mean over instances of the BCE between each instance score and the
    bag's label vector."""
    if model.spec.head not in INSTANCE_PRED_HEADS:
        raise ConfigError(f"head {model.spec.head!r} has no per-instance predictions")
    res = forward(model, [np.asarray(instances)])
    f = res.aux["instance_preds"].value
    y = np.asarray(target, dtype=np.float64)
    return float(np.mean([bce_loss(row, y) for row in f]))


class BalancedSampler:
    """Round-robin class rotation with per-class shuffled cursors.

    Any window of num_classes consecutive draws touches every class
    exactly once, so per-batch class counts can differ by at most one.
    """

    def __init__(self, label_matrix: np.ndarray, rng: Rng):
        labels = np.asarray(label_matrix)
        if labels.ndim != 2:
            raise ShapeError("label matrix must be 2-D")
        self.rng = rng
        self.num_classes = labels.shape[1]
        self.per_class = []
        for c in range(self.num_classes):
            idx = np.flatnonzero(labels[:, c] != 0)
            if len(idx) == 0:
                raise ConfigError(f"class {c} has no bags; balanced sampling impossible")
            self.per_class.append(idx)
        self.rotation = rng.permutation(self.num_classes)
        self._slot = 0
        self._queues = [self._shuffled(c) for c in range(self.num_classes)]
        self._cursors = [0] * self.num_classes

    def _shuffled(self, c: int) -> np.ndarray:
        idx = self.per_class[c]
        return idx[self.rng.permutation(len(idx))]

    def draw(self) -> int:
        c = int(self.rotation[self._slot])
        self._slot = (self._slot + 1) % self.num_classes
        if self._cursors[c] >= len(self._queues[c]):
            self._queues[c] = self._shuffled(c)
            self._cursors[c] = 0
        bag = int(self._queues[c][self._cursors[c]])
        self._cursors[c] += 1
        return bag

    def batch(self, n: int) -> list[int]:
        return [self.draw() for _ in range(n)]


class UniformSampler:
    """Uniform draws over all bags, with replacement."""

    def __init__(self, num_bags: int, rng: Rng):
        if num_bags < 1:
            raise ConfigError("need at least one bag")
        self.num_bags = num_bags
        self.rng = rng

    def batch(self, n: int) -> list[int]:
        return self.rng.integers(n, self.num_bags).tolist()


@dataclass
class Checkpoint:
    iteration: int
    params: dict[str, np.ndarray]


@dataclass
class TrainResult:
    model: Model
    checkpoints: list[Checkpoint] = field(default_factory=list)
    log: list[tuple[int, float, float]] = field(default_factory=list)

    def ensemble_models(self, size: int) -> list[Model]:
        """Models rebuilt from the last ``size`` checkpoints."""
        if size > len(self.checkpoints):
            raise ConfigError(f"asked for {size} checkpoints, only "
                              f"{len(self.checkpoints)} recorded")
        picked = self.checkpoints[-size:]
        return [Model(self.model.spec, {k: v.copy() for k, v in c.params.items()})
                for c in picked]


def prepare_bags(dataset, input_dim: int) -> list[np.ndarray]:
    """Canonical float64 instance matrices for every bag, validated once."""
    mats = []
    for bag in dataset.bags:
        mat = canonical_instances(bag.instances, input_dim)
        if not np.all(np.isfinite(mat)):
            raise NumericError(f"bag {bag.bag_id!r} has non-finite features")
        mats.append(mat)
    return mats


def train(model: Model, dataset, config: TrainConfig) -> TrainResult:
    """Adam training loop over mini-batches of bags, mutating ``model``.

    Aborts with NumericError naming the iteration and the batch's bag
    indices if the loss goes non-finite.
    """
    config.validate()
    spec = model.spec
    if spec.head == "bs_knn":
        raise ConfigError("bs_knn has no trainable parameters")
    if config.loss_level == "instance" and spec.head not in INSTANCE_PRED_HEADS:
        raise ConfigError(f"instance-level loss is undefined for head {spec.head!r}")
    labels = dataset.label_matrix()
    if labels.shape[1] != spec.classes:
        raise ConfigError(f"dataset has {labels.shape[1]} classes, model expects {spec.classes}")
    mats = prepare_bags(dataset, spec.input_dim)

    root = Rng(config.seed)
    if config.balancing == "minibatch_balanced":
        sampler = BalancedSampler(labels, root.spawn("sampler"))
    else:
        sampler = UniformSampler(len(mats), root.spawn("sampler"))
    dropout_rng = root.spawn("dropout")
    adam = AdamState.for_params(model.params, lr=config.lr)

    result = TrainResult(model)
    start = time.perf_counter()
    for it in range(1, config.iterations + 1):
        idx = sampler.batch(config.batch_size)
        res = forward(model, [mats[i] for i in idx], train=True,
                      dropout_rng=dropout_rng, assume_canonical=True)
        loss = batch_loss_node(res, labels[idx], config.loss_level)
        loss_value = float(loss.value)
        if not math.isfinite(loss_value):
            err = NumericError(f"non-finite loss at iteration {it}, "
                               f"batch bags {sorted(set(idx))}")
            err.iteration = it
            err.bag_indices = sorted(set(idx))
            raise err
        grads = T.backward(res.tape, loss)
        adam_step(adam, model.params, grads)
        result.log.append((it, loss_value, time.perf_counter() - start))
        if it % config.checkpoint_interval == 0:
            result.checkpoints.append(
                Checkpoint(it, {k: v.copy() for k, v in model.params.items()}))
    return result


def ensemble_predict(models: list[Model], mats: list[np.ndarray],
                     batch_size: int = 256) -> np.ndarray:
    """Mean of per-model bag scores; all models must share one spec."""
    if not models:
        raise ConfigError("ensemble needs at least one model")
    spec0 = models[0].spec.to_dict()
    for m in models[1:]:
        if m.spec.to_dict() != spec0:
            raise ConfigError("ensemble models have differing specs")
    from .models import predict
    total = None
    for m in models:
        scores = predict(m, mats, batch_size=batch_size)
        total = scores if total is None else total + scores
    return total / len(models)
