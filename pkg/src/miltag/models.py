"""Model lattice: segment baseline, instance/bag/embedded-space MIL heads,
and gated attention heads at the decision and feature level.

Every head shares the same skeleton: an optional fully connected trunk over
instances, then a head that reduces instances to one bag-level score per
class.  Attention heads weight instances with a gated, column-normalised
weight matrix; the gate can read the shared trunk output or a separate
branch of the same depth and width.

Instances are canonicalised (rows sorted lexicographically) before any
reduction, so a model's output is a bit-exact function of the instance
set, not the instance order.
"""
import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from ._binio import Reader
from .errors import ConfigError, EmptyBagError, FormatError, ShapeError
from .numerics.linalg import glorot_uniform
from .numerics.rng import Rng
from .numerics import tape as T
from .numerics.tape import Segments, Tape
from .pooling import ATT_EPS, GATES, bag_hausdorff, canonical_order

HEADS = ("segment", "is_max", "is_avg", "bs_knn", "es_avg", "es_maxmin",
         "decision_att", "decision_multi_att", "feature_att")
TOPOLOGIES = ("shared_trunk", "separate_branch")

ATTENTION_HEADS = ("decision_att", "decision_multi_att", "feature_att")
# heads whose forward produces per-instance class predictions
INSTANCE_PRED_HEADS = ("segment", "is_max", "is_avg", "decision_att")

MODEL_MAGIC = b"MILM"
MODEL_VERSION = 1


@dataclass
class ModelSpec:
    input_dim: int
    classes: int
    head: str = "decision_att"
    gate: str = "sigmoid"
    topology: str = "shared_trunk"
    trunk_depth: int = 1
    trunk_width: int = 64
    att_dim: int = 32
    levels: int = 2
    dropout: float = 0.5
    knn_k: int = 3

    def validate(self) -> "ModelSpec":
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.classes < 1:
            raise ConfigError(f"classes must be >= 1, got {self.classes}")
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}, expected one of {HEADS}")
        if self.gate not in GATES:
            raise ConfigError(f"unknown gate {self.gate!r}, expected one of {GATES}")
        if self.topology not in TOPOLOGIES:
            raise ConfigError(f"unknown topology {self.topology!r}")
        if self.trunk_depth < 0:
            raise ConfigError("trunk_depth must be >= 0")
        if self.trunk_depth > 0 and self.trunk_width < 1:
            raise ConfigError("trunk_width must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.head == "feature_att" and self.att_dim < 1:
            raise ConfigError("feature_att needs att_dim >= 1")
        if self.head == "decision_multi_att":
            if self.levels < 1:
                raise ConfigError("decision_multi_att needs levels >= 1")
            if self.levels > self.trunk_depth:
                raise ConfigError(
                    f"levels ({self.levels}) cannot exceed trunk_depth ({self.trunk_depth})")
        if self.head == "bs_knn" and self.knn_k < 1:
            raise ConfigError("bs_knn needs knn_k >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model spec fields: {sorted(extra)}")
        return cls(**d).validate()

    # width of the representation the head consumes
    def head_input_dim(self) -> int:
        pooled = 2 * self.input_dim if self.head == "es_maxmin" else self.input_dim
        return self.trunk_width if self.trunk_depth > 0 else pooled

    def gate_dim(self) -> int:
        return self.att_dim if self.head == "feature_att" else self.classes


def _declare_params(spec: ModelSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in declaration (= serialisation) order."""
    decls: list[tuple[str, tuple[int, ...]]] = []
    if spec.head == "bs_knn":
        return decls
    pooled_in = 2 * spec.input_dim if spec.head == "es_maxmin" else spec.input_dim
    d = pooled_in
    for i in range(spec.trunk_depth):
        decls.append((f"trunk{i}.w", (d, spec.trunk_width)))
        decls.append((f"trunk{i}.b", (spec.trunk_width,)))
        d = spec.trunk_width
    if spec.head in ATTENTION_HEADS and spec.topology == "separate_branch":
        d2 = spec.input_dim
        for i in range(spec.trunk_depth):
            decls.append((f"att_trunk{i}.w", (d2, spec.trunk_width)))
            decls.append((f"att_trunk{i}.b", (spec.trunk_width,)))
            d2 = spec.trunk_width

    k = spec.classes

    def nin_decls(prefix: str, j: int):
        decls.append((f"{prefix}.w1", (j, j)))
        decls.append((f"{prefix}.b1", (j,)))
        decls.append((f"{prefix}.w2", (j, j)))
        decls.append((f"{prefix}.b2", (j,)))

    if spec.head in ("segment", "is_max", "is_avg", "es_avg", "es_maxmin"):
        decls.append(("cls.w", (d, k)))
        decls.append(("cls.b", (k,)))
    elif spec.head == "decision_att":
        decls.append(("cls.w", (d, k)))
        decls.append(("cls.b", (k,)))
        decls.append(("att.w", (d, k)))
        decls.append(("att.b", (k,)))
        if spec.gate == "nin":
            nin_decls("att_nin", k)
    elif spec.head == "decision_multi_att":
        for lvl in range(spec.levels):
            decls.append((f"level{lvl}.cls.w", (spec.trunk_width, k)))
            decls.append((f"level{lvl}.cls.b", (k,)))
            decls.append((f"level{lvl}.att.w", (spec.trunk_width, k)))
            decls.append((f"level{lvl}.att.b", (k,)))
            if spec.gate == "nin":
                nin_decls(f"level{lvl}.att_nin", k)
        decls.append(("comb.w", (spec.levels * k, k)))
        decls.append(("comb.b", (k,)))
    elif spec.head == "feature_att":
        j = spec.att_dim
        decls.append(("feat.w", (d, j)))
        decls.append(("feat.b", (j,)))
        decls.append(("att.w", (d, j)))
        decls.append(("att.b", (j,)))
        if spec.gate == "nin":
            nin_decls("att_nin", j)
        decls.append(("out.w", (j, k)))
        decls.append(("out.b", (k,)))
    elif spec.head == "bs_knn":
        pass
    return decls


class Model:
    """A validated spec plus its parameter arrays, keyed by name."""

    def __init__(self, spec: ModelSpec, params: dict[str, np.ndarray]):
        spec.validate()
        expected = _declare_params(spec)
        if [n for n, _ in expected] != list(params):
            raise ConfigError("parameter names do not match the spec declaration")
        for name, shape in expected:
            if params[name].shape != shape:
                raise ShapeError(f"parameter {name!r} has shape {params[name].shape}, "
                                 f"expected {shape}")
        self.spec = spec
        self.params = params

    @classmethod
    def build(cls, spec: ModelSpec, seed: int) -> "Model":
        """Glorot-uniform weights, zero biases, drawn in declaration order."""
        spec.validate()
        rng = Rng(seed).spawn("init")
        params: dict[str, np.ndarray] = {}
        for name, shape in _declare_params(spec):
            if len(shape) == 1:
                params[name] = np.zeros(shape)
            else:
                params[name] = glorot_uniform(rng, shape[0], shape[1], shape)
        return cls(spec, params)

    def copy(self) -> "Model":
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()})

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())


def canonical_instances(mat, input_dim: int | None = None) -> np.ndarray:
    """Float64, C-contiguous, rows in canonical (lexicographic) order."""
    mat = np.ascontiguousarray(mat, dtype=np.float64)
    if mat.ndim != 2:
        raise ShapeError(f"instances must be 2-D, got shape {mat.shape}")
    if mat.shape[0] == 0:
        raise EmptyBagError("bag has no instances")
    if input_dim is not None and mat.shape[1] != input_dim:
        raise ShapeError(f"instance dim {mat.shape[1]} != model input_dim {input_dim}")
    return np.ascontiguousarray(mat[canonical_order(mat)])


def stack_bags(mats: list[np.ndarray]) -> tuple[np.ndarray, Segments]:
    if not mats:
        raise ShapeError("need at least one bag")
    seg = Segments([m.shape[0] for m in mats])
    return np.ascontiguousarray(np.concatenate(mats, axis=0)), seg


def _inv_count_col(seg: Segments) -> np.ndarray:
    # (R, 1) constant: 1/T of the owning bag
    return np.repeat(1.0 / seg.counts, seg.counts).reshape(-1, 1)


def _gate_on_tape(kind: str, z: T.Node, wrapped: dict, prefix: str) -> T.Node:
    if kind == "relu":
        return T.relu(z)
    if kind == "exp":
        return T.exp_clamped(z)
    if kind == "sigmoid":
        return T.sigmoid(z)
    if kind == "softmax":
        return T.row_softmax(z)
    if kind == "nin":
        h = T.relu(T.add_bias(T.matmul(z, wrapped[f"{prefix}.w1"]), wrapped[f"{prefix}.b1"]))
        return T.sigmoid(T.add_bias(T.matmul(h, wrapped[f"{prefix}.w2"]), wrapped[f"{prefix}.b2"]))
    raise ConfigError(f"unknown gate {kind!r}")


def _normalize_on_tape(w: T.Node, seg: Segments) -> T.Node:
    total = T.segment_expand(T.add_const(T.segment_sum(w, seg), ATT_EPS), seg)
    smoothed = T.add_const(w, ATT_EPS * _inv_count_col(seg))
    return T.div(smoothed, total)


def _linear(x: T.Node, wrapped: dict, name: str) -> T.Node:
    return T.add_bias(T.matmul(x, wrapped[f"{name}.w"]), wrapped[f"{name}.b"])


class ForwardResult:
    """Tape, bag-level prediction node, and named intermediate nodes."""

    __slots__ = ("tape", "pred", "aux", "seg")

    def __init__(self, tape, pred, aux, seg):
        self.tape = tape
        self.pred = pred
        self.aux = aux
        self.seg = seg


def forward(model: Model, mats: list[np.ndarray], train: bool = False,
            dropout_rng: Rng | None = None, assume_canonical: bool = False) -> ForwardResult:
    """Run one batch of bags through the model on a fresh tape.

    ``mats`` is a list of (T_i, M) instance matrices.  With ``train`` the
    trunk applies inverted dropout using draws from ``dropout_rng``.
    """
    spec = model.spec
    if spec.head == "bs_knn":
        raise ConfigError("bs_knn has no forward pass; use knn_predict")
    if train and spec.dropout > 0.0 and dropout_rng is None:
        raise ConfigError("training forward with dropout needs a dropout_rng")
    if not assume_canonical:
        mats = [canonical_instances(m, spec.input_dim) for m in mats]
    x_all, seg = stack_bags(mats)

    tape = Tape()
    wrapped = {name: tape.parameter(name, arr) for name, arr in model.params.items()}
    aux: dict = {}

    def trunk(x: T.Node, prefix: str, with_dropout: bool) -> list[T.Node]:
        outs = []
        h = x
        for i in range(spec.trunk_depth):
            h = T.relu(_linear(h, wrapped, f"{prefix}{i}"))
            if with_dropout and train and spec.dropout > 0.0:
                keep = 1.0 - spec.dropout
                mask = (dropout_rng.uniform(h.value.shape) >= spec.dropout) / keep
                h = T.mul_const(h, mask)
            outs.append(h)
        return outs

    if spec.head in ("es_avg", "es_maxmin"):
        xn = tape.leaf(x_all)
        if spec.head == "es_avg":
            pooled = T.segment_sum(T.mul_const(xn, _inv_count_col(seg)), seg)
        else:
            pooled = T.concat_cols([T.segment_max(xn, seg), T.segment_min(xn, seg)])
        outs = trunk(pooled, "trunk", with_dropout=True)
        h = outs[-1] if outs else pooled
        pred = T.sigmoid(_linear(h, wrapped, "cls"))
        return ForwardResult(tape, pred, aux, seg)

    xn = tape.leaf(x_all)
    outs = trunk(xn, "trunk", with_dropout=True)
    h = outs[-1] if outs else xn

    if spec.head in ("segment", "is_avg", "is_max"):
        f = T.sigmoid(_linear(h, wrapped, "cls"))
        aux["instance_preds"] = f
        if spec.head == "is_max":
            pred = T.segment_max(f, seg)
        else:
            pred = T.segment_sum(T.mul_const(f, _inv_count_col(seg)), seg)
        return ForwardResult(tape, pred, aux, seg)

    # attention heads: the gate reads the shared trunk or its own branch
    if spec.topology == "separate_branch" and spec.trunk_depth > 0:
        att_outs = trunk(xn, "att_trunk", with_dropout=False)
    else:
        att_outs = outs
    ha = att_outs[-1] if att_outs else xn

    if spec.head == "decision_att":
        f = T.sigmoid(_linear(h, wrapped, "cls"))
        aux["instance_preds"] = f
        w = _gate_on_tape(spec.gate, _linear(ha, wrapped, "att"), wrapped, "att_nin")
        q = _normalize_on_tape(w, seg)
        aux["att_weights"] = q
        pred = T.segment_sum(T.mul(q, f), seg)
        return ForwardResult(tape, pred, aux, seg)

    if spec.head == "decision_multi_att":
        level_preds = []
        att_level_weights = []
        first = spec.trunk_depth - spec.levels
        for lvl in range(spec.levels):
            h_l = outs[first + lvl]
            ha_l = att_outs[first + lvl]
            f_l = T.sigmoid(_linear(h_l, wrapped, f"level{lvl}.cls"))
            w_l = _gate_on_tape(spec.gate, _linear(ha_l, wrapped, f"level{lvl}.att"),
                                wrapped, f"level{lvl}.att_nin")
            q_l = _normalize_on_tape(w_l, seg)
            att_level_weights.append(q_l)
            level_preds.append(T.segment_sum(T.mul(q_l, f_l), seg))
        aux["level_preds"] = level_preds
        aux["att_weights_levels"] = att_level_weights
        pred = T.sigmoid(_linear(T.concat_cols(level_preds), wrapped, "comb"))
        return ForwardResult(tape, pred, aux, seg)

    if spec.head == "feature_att":
        u = T.relu(_linear(h, wrapped, "feat"))
        w = _gate_on_tape(spec.gate, _linear(ha, wrapped, "att"), wrapped, "att_nin")
        q = _normalize_on_tape(w, seg)
        aux["att_weights"] = q
        hbag = T.segment_sum(T.mul(q, u), seg)
        pred = T.sigmoid(_linear(hbag, wrapped, "out"))
        return ForwardResult(tape, pred, aux, seg)

    raise ConfigError(f"unhandled head {spec.head!r}")


def predict(model: Model, mats: list[np.ndarray], batch_size: int = 256) -> np.ndarray:
    """Bag-level scores (N, K), evaluation mode, batched."""
    chunks = []
    for lo in range(0, len(mats), batch_size):
        res = forward(model, mats[lo:lo + batch_size], train=False)
        chunks.append(res.pred.value)
    return np.concatenate(chunks, axis=0)


def knn_predict(train_mats: list[np.ndarray], train_labels: np.ndarray,
                query_mats: list[np.ndarray], k: int) -> np.ndarray:
    """Bag-space k-NN scores: per class, the positive fraction among the k
    nearest training bags under the minimal-pair Hausdorff distance.
    Distance ties resolve toward the lower training-bag index.
    """
    n = len(train_mats)
    if n == 0:
        raise ConfigError("knn_predict needs a non-empty training set")
    if not 1 <= k <= n:
        raise ConfigError(f"k must be in [1, {n}], got {k}")
    labels = np.asarray(train_labels, dtype=np.float64)
    if labels.ndim != 2 or labels.shape[0] != n:
        raise ShapeError(f"train_labels must be (n, classes), got {labels.shape}")
    out = np.empty((len(query_mats), labels.shape[1]))
    for qi, q in enumerate(query_mats):
        dists = np.array([bag_hausdorff(q, t) for t in train_mats])
        order = np.lexsort((np.arange(n), dists))
        out[qi] = labels[order[:k]].mean(axis=0)
    return out


# ------------------------------------------------------------- files

def save_model(model: Model, path: str) -> None:
    """MILM container: magic, version, spec JSON, named float64 params."""
    spec_json = json.dumps(model.spec.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", MODEL_VERSION))
        fh.write(struct.pack("<I", len(spec_json)))
        fh.write(spec_json)
        fh.write(struct.pack("<I", len(model.params)))
        for name, arr in model.params.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path: str) -> Model:
    with open(path, "rb") as fh:
        r = Reader(fh.read(), path)
    if r.take(4, "magic") != MODEL_MAGIC:
        raise FormatError(f"{path}: not a model file (bad magic)", 0)
    version = r.unpack("<I", "version")
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported model file version {version}, "
                          f"this build reads version {MODEL_VERSION}", 4)
    spec_len = r.unpack("<I", "spec length")
    at = r.pos
    try:
        spec_dict = json.loads(r.take(spec_len, "spec json").decode("utf-8"))
        spec = ModelSpec.from_dict(spec_dict)
    except (ValueError, ConfigError) as exc:
        raise FormatError(f"{path}: bad model spec ({exc})", at) from exc
    n_params = r.unpack("<I", "parameter count")
    expected = _declare_params(spec)
    if n_params != len(expected):
        raise FormatError(f"{path}: {n_params} parameters stored, spec declares "
                          f"{len(expected)}", r.pos - 4)
    params: dict[str, np.ndarray] = {}
    for exp_name, exp_shape in expected:
        name_len = r.unpack("<H", "parameter name length")
        at = r.pos
        name = r.take(name_len, "parameter name").decode("utf-8")
        if name != exp_name:
            raise FormatError(f"{path}: parameter {name!r} where {exp_name!r} expected", at)
        ndim = r.unpack("<B", "parameter rank")
        shape = tuple(r.unpack("<I", "parameter dim") for _ in range(ndim))
        if shape != exp_shape:
            raise FormatError(f"{path}: parameter {name!r} has shape {shape}, "
                              f"expected {exp_shape}", at)
        count = 1
        for dim in shape:
            count *= dim
        raw = r.take(8 * count, f"parameter {name!r} data")
        params[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    r.expect_end()
    return Model(spec, params)
