"""Bags, datasets, the MILB binary container, and synthetic generation.

A bag is a variable-length set of fixed-width feature vectors carrying a
multi-hot label vector.  Features are stored as float32 (model math
upcasts to float64 at entry), labels as one byte per class in memory and
one bit per class on disk.

MILB layout, all integers little-endian:

    magic "MILB" | version u32 | num_classes u32 | feature_dim u32 | num_bags u64
    then per bag:
    id_len u16 | id utf-8 | num_instances u32 |
    label bitmask ceil(K/8) bytes (class c -> byte c//8, bit c%8) |
    num_instances * feature_dim float32, row-major

Class names live in a JSON sidecar ``<path>.vocab.json`` of the form
``{"classes": [...]}``; a missing sidecar falls back to generated names.

Synthetic data plants class evidence inside mostly-background bags: each
class draws a mean vector once, a positive bag for the class contains a
few instances around that mean and background noise instances elsewhere,
so only a subset of instances carries the label's evidence.
"""
import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from ._binio import Reader
from .errors import ConfigError, EmptyBagError, FormatError, ShapeError
from .numerics.rng import Rng

DATASET_MAGIC = b"MILB"
DATASET_VERSION = 1


@dataclass
class Bag:
    bag_id: str
    instances: np.ndarray  # (T, M) float32
    labels: np.ndarray     # (K,) uint8 multi-hot

    def validate(self, num_classes: int, dim: int) -> "Bag":
        if self.instances.ndim != 2 or self.instances.shape[1] != dim:
            raise ShapeError(f"bag {self.bag_id!r}: instances shape "
                             f"{self.instances.shape} does not match dim {dim}")
        if self.instances.shape[0] == 0:
            raise EmptyBagError(f"bag {self.bag_id!r} has no instances")
        if self.labels.shape != (num_classes,):
            raise ShapeError(f"bag {self.bag_id!r}: labels shape {self.labels.shape} "
                             f"does not match {num_classes} classes")
        if not self.labels.any():
            raise ConfigError(f"bag {self.bag_id!r} has no labels")
        return self


@dataclass
class BagDataset:
    class_names: list[str]
    dim: int
    bags: list[Bag] = field(default_factory=list)

    def validate(self) -> "BagDataset":
        if not self.class_names:
            raise ConfigError("dataset needs at least one class")
        if len(set(self.class_names)) != len(self.class_names):
            raise ConfigError("class names must be unique")
        for bag in self.bags:
            bag.validate(len(self.class_names), self.dim)
        return self

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def label_matrix(self) -> np.ndarray:
        if not self.bags:
            return np.zeros((0, self.num_classes), dtype=np.uint8)
        return np.stack([b.labels for b in self.bags])

    def per_class_counts(self) -> np.ndarray:
        return self.label_matrix().astype(np.int64).sum(axis=0)

    def subset(self, indices) -> "BagDataset":
        return BagDataset(self.class_names, self.dim, [self.bags[i] for i in indices])


def make_bag(bag_id: str, instances, labels, num_classes: int) -> Bag:
    inst = np.ascontiguousarray(instances, dtype=np.float32)
    lab = np.zeros(num_classes, dtype=np.uint8)
    lab[np.asarray(labels, dtype=np.int64)] = 1
    return Bag(bag_id, inst, lab)


def _vocab_path(path: str) -> str:
    return path + ".vocab.json"


def write_dataset(dataset: BagDataset, path: str) -> None:
    """Write the MILB file and its vocabulary sidecar."""
    dataset.validate()
    k = dataset.num_classes
    mask_len = (k + 7) // 8
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<I", DATASET_VERSION))
        fh.write(struct.pack("<I", k))
        fh.write(struct.pack("<I", dataset.dim))
        fh.write(struct.pack("<Q", len(dataset.bags)))
        for bag in dataset.bags:
            idb = bag.bag_id.encode("utf-8")
            if len(idb) > 0xFFFF:
                raise FormatError(f"bag id too long ({len(idb)} bytes)")
            fh.write(struct.pack("<H", len(idb)))
            fh.write(idb)
            fh.write(struct.pack("<I", bag.instances.shape[0]))
            fh.write(np.packbits(bag.labels, bitorder="little").tobytes().ljust(mask_len, b"\0"))
            fh.write(np.ascontiguousarray(bag.instances, dtype="<f4").tobytes())
    with open(_vocab_path(path), "w", encoding="utf-8") as fh:
        json.dump({"classes": dataset.class_names}, fh)
        fh.write("\n")


def read_dataset(path: str) -> BagDataset:
    """Read a MILB file, rejecting malformed content with positioned errors."""
    with open(path, "rb") as fh:
        r = Reader(fh.read(), path)
    if r.take(4, "magic") != DATASET_MAGIC:
        raise FormatError(f"{path}: not a MILB dataset file (bad magic)", 0)
    version = r.unpack("<I", "version")
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}, "
                          f"this build reads version {DATASET_VERSION}", 4)
    k = r.unpack("<I", "class count")
    if k < 1:
        raise FormatError(f"{path}: class count must be >= 1", r.pos - 4)
    dim = r.unpack("<I", "feature dim")
    if dim < 1:
        raise FormatError(f"{path}: feature dim must be >= 1", r.pos - 4)
    n = r.unpack("<Q", "bag count")
    mask_len = (k + 7) // 8

    bags = []
    for i in range(n):
        id_len = r.unpack("<H", "bag id length")
        at = r.pos
        try:
            bag_id = r.take(id_len, "bag id").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: bag {i} id is not valid UTF-8", at) from exc
        t = r.unpack("<I", "instance count")
        if t == 0:
            raise FormatError(f"{path}: bag {bag_id!r} is empty", r.pos - 4)
        at = r.pos
        mask = np.frombuffer(r.take(mask_len, "label bitmask"), dtype=np.uint8)
        labels = np.unpackbits(mask, bitorder="little")[:k]
        if 8 * mask_len > k and np.unpackbits(mask, bitorder="little")[k:].any():
            raise FormatError(f"{path}: bag {bag_id!r} has label bits beyond "
                              f"class {k - 1}", at)
        if not labels.any():
            raise FormatError(f"{path}: bag {bag_id!r} has no labels", at)
        at = r.pos
        raw = r.take(4 * t * dim, "instance features")
        feats = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(t, dim)
        if not np.all(np.isfinite(feats)):
            raise FormatError(f"{path}: bag {bag_id!r} has non-finite features", at)
        bags.append(Bag(bag_id, feats, labels.astype(np.uint8)))
    r.expect_end()

    vocab = _vocab_path(path)
    if os.path.exists(vocab):
        with open(vocab, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except ValueError as exc:
                raise FormatError(f"{vocab}: invalid JSON ({exc})") from exc
        names = doc.get("classes") if isinstance(doc, dict) else None
        if (not isinstance(names, list)
                or len(names) != k
                or not all(isinstance(s, str) for s in names)):
            raise FormatError(f"{vocab}: expected a 'classes' list of {k} names")
    else:
        names = [f"class_{i:04d}" for i in range(k)]
    return BagDataset(names, dim, bags).validate()


@dataclass
class SynthSpec:
    classes: int = 10
    dim: int = 16
    bags_per_class: int = 50
    instances_per_bag: int = 10
    positives_per_bag: int = 1
    mean_scale: float = 1.0
    noise_sigma: float = 1.0
    background_sigma: float | None = None  # defaults to noise_sigma
    multi_label_prob: float = 0.0
    tail_ratio: float = 1.0
    seed: int = 0
    split: str = "train"

    def validate(self) -> "SynthSpec":
        if self.classes < 1 or self.dim < 1 or self.bags_per_class < 1:
            raise ConfigError("classes, dim, bags_per_class must all be >= 1")
        if self.instances_per_bag < 1:
            raise ConfigError("instances_per_bag must be >= 1")
        if not 1 <= self.positives_per_bag <= self.instances_per_bag:
            raise ConfigError("positives_per_bag must be in [1, instances_per_bag]")
        if not 0.0 <= self.multi_label_prob <= 1.0:
            raise ConfigError("multi_label_prob must be in [0, 1]")
        if self.multi_label_prob > 0.0:
            if self.classes < 2:
                raise ConfigError("multi-label bags need at least two classes")
            if 2 * self.positives_per_bag > self.instances_per_bag:
                raise ConfigError("multi-label bags need 2 * positives_per_bag "
                                  "<= instances_per_bag")
        if self.noise_sigma < 0.0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.background_sigma is not None and self.background_sigma < 0.0:
            raise ConfigError("background_sigma must be >= 0")
        if self.tail_ratio < 1.0:
            raise ConfigError("tail_ratio must be >= 1")
        return self

    def class_counts(self) -> list[int]:
        """Bags per class; a geometric long tail when tail_ratio > 1."""
        if self.classes == 1 or self.tail_ratio == 1.0:
            return [self.bags_per_class] * self.classes
        counts = []
        for k in range(self.classes):
            frac = k / (self.classes - 1)
            counts.append(max(1, round(self.bags_per_class * self.tail_ratio ** (-frac))))
        return counts


def class_means(spec: SynthSpec) -> np.ndarray:
    """Planted class means; a function of the seed only, so train and eval
    splits of the same seed share them."""
    rng = Rng(spec.seed).spawn("means")
    return rng.normal((spec.classes, spec.dim), sigma=spec.mean_scale)


def generate_synthetic(spec: SynthSpec) -> BagDataset:
    """Planted-instance bags: per positive class, ``positives_per_bag``
    instances near the class mean; everything else is background noise."""
    spec.validate()
    means = class_means(spec)
    rng = Rng(spec.seed).spawn(f"bags-{spec.split}")
    t, r, m = spec.instances_per_bag, spec.positives_per_bag, spec.dim
    bg_sigma = spec.noise_sigma if spec.background_sigma is None else spec.background_sigma

    names = [f"class_{k:03d}" for k in range(spec.classes)]
    bags = []
    for k, count in enumerate(spec.class_counts()):
        for i in range(count):
            labels = [k]
            planted = [means[k] + rng.normal((r, m), sigma=spec.noise_sigma)]
            if spec.multi_label_prob > 0.0 and float(rng.uniform(1)[0]) < spec.multi_label_prob:
                partner = int(rng.integers(1, spec.classes - 1)[0])
                partner = partner if partner < k else partner + 1
                labels.append(partner)
                planted.append(means[partner] + rng.normal((r, m), sigma=spec.noise_sigma))
            background = rng.normal((t - r * len(planted), m), sigma=bg_sigma)
            inst = np.concatenate(planted + [background], axis=0)
            bags.append(make_bag(f"{spec.split}-{k:03d}-{i:05d}", inst, labels, spec.classes))
    return BagDataset(names, m, bags).validate()


@dataclass
class DatasetStats:
    num_bags: int
    num_classes: int
    dim: int
    total_instances: int
    labels_per_bag: dict[int, int]
    class_counts: list[tuple[int, str, int]]  # sorted by count desc, index asc


def dataset_stats(dataset: BagDataset) -> DatasetStats:
    labels = dataset.label_matrix()
    per_bag = labels.astype(np.int64).sum(axis=1)
    hist: dict[int, int] = {}
    for v in per_bag:
        hist[int(v)] = hist.get(int(v), 0) + 1
    counts = dataset.per_class_counts()
    order = sorted(range(dataset.num_classes), key=lambda c: (-counts[c], c))
    return DatasetStats(
        num_bags=len(dataset.bags),
        num_classes=dataset.num_classes,
        dim=dataset.dim,
        total_instances=int(sum(b.instances.shape[0] for b in dataset.bags)),
        labels_per_bag=dict(sorted(hist.items())),
        class_counts=[(c, dataset.class_names[c], int(counts[c])) for c in order],
    )


def load_quality_file(path: str, class_names: list[str]) -> dict[str, float]:
    """CSV of ``class_name,quality`` rows with quality in [0, 1].

    An optional literal header row is skipped.  Unknown class names,
    out-of-range or unparsable values, and duplicates are rejected.
    """
    known = set(class_names)
    out: dict[str, float] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if lineno == 1 and line.replace(" ", "") == "class_name,quality":
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected 'class_name,quality'")
            name = parts[0].strip()
            if name not in known:
                raise FormatError(f"{path}:{lineno}: unknown class {name!r}")
            if name in out:
                raise FormatError(f"{path}:{lineno}: duplicate class {name!r}")
            try:
                q = float(parts[1])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: bad quality value "
                                  f"{parts[1].strip()!r}") from exc
            if not 0.0 <= q <= 1.0 or math.isnan(q):
                raise FormatError(f"{path}:{lineno}: quality {q} outside [0, 1]")
            out[name] = q
    return out


def subsample_balanced(dataset: BagDataset, cap: int) -> BagDataset:
    """Cap per-class bag counts, scanning bags in order.

    A bag is kept while at least one of its classes is still under the
    cap; kept bags count toward all their classes.  Deterministic.
    """
    if cap < 1:
        raise ConfigError("cap must be >= 1")
    kept = []
    counts = np.zeros(dataset.num_classes, dtype=np.int64)
    for i, bag in enumerate(dataset.bags):
        classes = np.flatnonzero(bag.labels)
        if (counts[classes] < cap).any():
            kept.append(i)
            counts[classes] += 1
    return dataset.subset(kept)
