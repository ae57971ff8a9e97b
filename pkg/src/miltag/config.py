"""Flat key=value experiment configuration.

One ``key = value`` assignment per line; ``#`` starts a comment.
Unknown and duplicate keys are rejected so a typo fails loudly instead
of silently training the default model.  Every key has a default;
``describe_keys`` renders the full table for --help output.

All path-valued keys are resolved relative to the --out directory, so
one directory holds a whole experiment (datasets, model, checkpoints,
log, reports) and generate/train/evaluate chain without editing paths.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from .data import SynthSpec
from .errors import ConfigError
from .models import ModelSpec
from .training import TrainConfig


@dataclass(frozen=True)
class _Key:
    default: object
    kind: str  # int | float | optfloat | bool | str
    help: str


# insertion order is the order shown in --help and in default dumps
KEYS: dict[str, _Key] = {
    "seed": _Key(0, "int", "master seed for generation, init, and training"),
    "data.train": _Key("train.milb", "str", "training dataset file"),
    "data.eval": _Key("eval.milb", "str", "evaluation dataset file"),
    "data.quality": _Key("", "str", "optional per-class quality CSV"),
    "model.path": _Key("model.milm", "str", "trained model file"),
    "gen.classes": _Key(20, "int", "number of classes K"),
    "gen.dim": _Key(32, "int", "instance feature dimension M"),
    "gen.bags_per_class": _Key(200, "int", "train bags per class (head of the tail)"),
    "gen.eval_bags_per_class": _Key(100, "int", "eval bags per class (eval split is flat)"),
    "gen.instances_per_bag": _Key(10, "int", "instances per bag T"),
    "gen.positives_per_bag": _Key(1, "int", "planted instances r per positive bag"),
    "gen.mean_scale": _Key(1.0, "float", "scale of the class mean vectors"),
    "gen.noise_sigma": _Key(2.0, "float", "stddev around planted class means"),
    "gen.background_sigma": _Key(None, "optfloat",
                                 "stddev of background instances (empty = noise_sigma)"),
    "gen.multi_label_prob": _Key(0.0, "float", "chance a bag merges a second class"),
    "gen.tail_ratio": _Key(1.0, "float",
                           "head:tail bag-count ratio across classes (train split)"),
    "model.head": _Key("feature_att", "str", "pooling head (see models.HEADS)"),
    "model.gate": _Key("sigmoid", "str", "attention gate (relu/exp/sigmoid/softmax/nin)"),
    "model.topology": _Key("shared_trunk", "str", "shared_trunk or separate_branch"),
    "model.trunk_depth": _Key(1, "int", "hidden layers before the head"),
    "model.trunk_width": _Key(64, "int", "hidden layer width"),
    "model.att_dim": _Key(32, "int", "attention component count J / NIN width"),
    "model.levels": _Key(2, "int", "trunk levels tapped by decision_multi_att"),
    "model.dropout": _Key(0.5, "float", "trunk dropout rate in [0, 1)"),
    "model.knn_k": _Key(3, "int", "neighbours for the bs_knn head"),
    "train.lr": _Key(0.001, "float", "Adam learning rate"),
    "train.batch_size": _Key(64, "int", "bags per mini-batch"),
    "train.iterations": _Key(5000, "int", "total training iterations"),
    "train.checkpoint_interval": _Key(1000, "int", "iterations between checkpoints"),
    "train.ensemble_size": _Key(5, "int", "checkpoints kept for ensemble evaluation"),
    "train.balancing": _Key("minibatch_balanced", "str",
                            "minibatch_balanced or none"),
    "train.loss_level": _Key("bag", "str", "bag or instance"),
}


def _parse_value(key: str, raw: str):
    kind = KEYS[key].kind
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "optfloat":
            return None if raw == "" else float(raw)
        if kind == "bool":
            if raw in ("true", "false"):
                return raw == "true"
            raise ValueError(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: cannot parse {raw!r} as {kind}") from exc


def _format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def describe_keys() -> str:
    width = max(len(k) for k in KEYS)
    lines = ["config keys (key = default):"]
    for k, spec in KEYS.items():
        lines.append(f"  {k:<{width}} = {_format_value(spec.default):<20} {spec.help}")
    return "\n".join(lines)


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({k: spec.default for k, spec in KEYS.items()})

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls.defaults()
        seen: set[str] = set()
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in KEYS:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            if key in seen:
                raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
            seen.add(key)
            cfg.values[key] = _parse_value(key, raw)
        return cfg

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.parse(fh.read(), source=path)

    def dump(self) -> str:
        return "\n".join(f"{k} = {_format_value(self.values[k])}" for k in KEYS) + "\n"

    # --- projections onto the module configs ---

    def path(self, key: str, out_dir: str) -> str:
        return os.path.join(out_dir, self.values[key])

    def synth_spec(self, split: str) -> SynthSpec:
        v = self.values
        per_class = v["gen.bags_per_class"] if split == "train" else v["gen.eval_bags_per_class"]
        return SynthSpec(
            classes=v["gen.classes"],
            dim=v["gen.dim"],
            bags_per_class=per_class,
            instances_per_bag=v["gen.instances_per_bag"],
            positives_per_bag=v["gen.positives_per_bag"],
            mean_scale=v["gen.mean_scale"],
            noise_sigma=v["gen.noise_sigma"],
            background_sigma=v["gen.background_sigma"],
            multi_label_prob=v["gen.multi_label_prob"],
            # the tail shape is a training artefact; eval stays flat so
            # per-class metrics are comparably sampled
            tail_ratio=v["gen.tail_ratio"] if split == "train" else 1.0,
            seed=v["seed"],
            split=split,
        ).validate()

    def model_spec(self, input_dim: int, classes: int) -> ModelSpec:
        v = self.values
        return ModelSpec(
            input_dim=input_dim,
            classes=classes,
            head=v["model.head"],
            gate=v["model.gate"],
            topology=v["model.topology"],
            trunk_depth=v["model.trunk_depth"],
            trunk_width=v["model.trunk_width"],
            att_dim=v["model.att_dim"],
            levels=v["model.levels"],
            dropout=v["model.dropout"],
            knn_k=v["model.knn_k"],
        ).validate()

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            lr=v["train.lr"],
            batch_size=v["train.batch_size"],
            iterations=v["train.iterations"],
            checkpoint_interval=v["train.checkpoint_interval"],
            ensemble_size=v["train.ensemble_size"],
            balancing=v["train.balancing"],
            loss_level=v["train.loss_level"],
            seed=v["seed"],
        ).validate()
