"""Release gate: one test per shipping criterion, one printed verdict each.

Every test ends by printing "[criterion NN] PASS/FAIL ..." with the measured
numbers (visible even under capture), then asserts.  Criteria 5 and 6
retrain small models from scratch and dominate the suite's runtime; the
rest are property checks and finish in seconds.
"""
import csv
import json
import math
import os
import time

import numpy as np
import pytest

from miltag import gradcheck
from miltag.cli import main as cli_main
from miltag.data import (BagDataset, SynthSpec, generate_synthetic, make_bag,
                         read_dataset, write_dataset)
from miltag.errors import FormatError
from miltag.metrics import (average_precision, d_prime, evaluate, pearson,
                            roc_auc)
from miltag.models import HEADS, TOPOLOGIES, Model, ModelSpec
from miltag.numerics.rng import Rng
from miltag.numerics.special import inv_norm_cdf, norm_cdf
from miltag.pooling import (GATES, attend, pool_ca_average, pool_smi_max,
                            smi_onehot_weights, uniform_weights)
from miltag.training import BalancedSampler, TrainConfig, train


def _verdict(capsys, num, ok, detail):
    with capsys.disabled():
        print(f"[criterion {num:02d}] {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"criterion {num:02d}: {detail}"


def test_criterion_01_gradient_fidelity(capsys):
    t0 = time.perf_counter()
    results = gradcheck.sweep(seed=0)
    elapsed = time.perf_counter() - t0
    covered = {(r.head, r.gate, r.topology) for r in results}
    wanted = {(h, g, t) for h in HEADS if h != "bs_knn"
              for g in GATES for t in TOPOLOGIES}
    worst = max(results, key=lambda r: r.max_rel_err)
    ok = all(r.passed for r in results) and covered == wanted and elapsed < 60.0
    _verdict(capsys, 1, ok,
             f"{len(results)} head/gate/topology combos, max rel err "
             f"{worst.max_rel_err:.2e} at {worst.head}/{worst.gate}/"
             f"{worst.topology} (tol 1e-4), {elapsed:.1f}s < 60s")


def test_criterion_02_attention_reductions(capsys):
    rng = np.random.default_rng(202)
    worst_avg = worst_max = 0.0
    for _ in range(1000):
        t = int(rng.integers(1, 12))
        k = int(rng.integers(1, 9))
        preds = rng.random((t, k))
        gap_a = np.abs(attend(uniform_weights(t, k), preds)
                       - pool_ca_average(preds)).max()
        gap_m = np.abs(attend(smi_onehot_weights(preds), preds)
                       - pool_smi_max(preds)).max()
        worst_avg = max(worst_avg, float(gap_a))
        worst_max = max(worst_max, float(gap_m))
    ok = worst_avg <= 1e-9 and worst_max <= 1e-9
    _verdict(capsys, 2, ok,
             f"1000 bags: uniform-weights-vs-average gap {worst_avg:.2e}, "
             f"one-hot-vs-max gap {worst_max:.2e} (tol 1e-9)")


def _ap_walk(scores, labels):
    # precision-at-hit walk down the stable descending ranking
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits = 0.0
    total = 0.0
    for rank, i in enumerate(order, start=1):
        if labels[i]:
            hits += 1.0
            total += hits / rank
    return total / hits if hits else None


def _auc_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    if not pos or not neg:
        return None
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else (0.5 if p == q else 0.0)
    return wins / (len(pos) * len(neg))


def test_criterion_03_ranking_metric_oracles(capsys):
    rng = np.random.default_rng(303)
    worst = 0.0
    compared = 0
    for trial in range(150):
        n = int(rng.integers(2, 201))
        scores = rng.normal(size=n)
        if trial % 2:
            scores = np.round(scores, 1)  # force heavy score ties
        labels = rng.random(n) < rng.uniform(0.1, 0.9)
        for got, ref in ((average_precision(scores, labels), _ap_walk(scores, labels)),
                         (roc_auc(scores, labels), _auc_pairs(scores, labels))):
            assert (got is None) == (ref is None)
            if got is not None:
                worst = max(worst, abs(got - ref))
                compared += 1
    big = rng.normal(size=10_000)
    big_labels = np.zeros(10_000, dtype=bool)
    big_labels[:5_000] = True  # scores independent of labels: chance ranking
    auc_big = roc_auc(big, big_labels)
    ok = worst <= 1e-12 and abs(auc_big - 0.5) <= 0.02
    _verdict(capsys, 3, ok,
             f"{compared} oracle comparisons (N up to 200, ties included), "
             f"worst gap {worst:.2e} (tol 1e-12); chance AUC over 1e4 "
             f"balanced items {auc_big:.4f} (0.50 +- 0.02)")


def test_criterion_04_dprime_anchors(capsys):
    at_half = d_prime(0.5)
    anchor = d_prime(0.959)
    worst = max(abs(inv_norm_cdf(norm_cdf(float(x))) - float(x))
                for x in np.linspace(-6.0, 6.0, 2401))
    ok = at_half == 0.0 and abs(anchor - 2.452) <= 0.02 and worst <= 1e-8
    _verdict(capsys, 4, ok,
             f"d_prime(0.5)={at_half} (exact), d_prime(0.959)={anchor:.4f} "
             f"(2.452 +- 0.02), quantile round-trip max err {worst:.2e} "
             f"on [-6, 6] (tol 1e-8)")


def test_criterion_05_head_ordering(capsys):
    t0 = time.perf_counter()
    common = dict(classes=20, dim=32, bags_per_class=200, instances_per_bag=10,
                  positives_per_bag=1, mean_scale=1.0, noise_sigma=2.0,
                  background_sigma=0.5, seed=0)
    ds = generate_synthetic(SynthSpec(**common))
    eval_ds = generate_synthetic(SynthSpec(**{**common, "bags_per_class": 100,
                                              "split": "eval"}))
    medians = {}
    for head in ("feature_att", "decision_att", "es_avg", "is_max"):
        maps = []
        for seed in range(5):
            spec = ModelSpec(input_dim=32, classes=20, head=head, gate="sigmoid",
                             trunk_depth=1, trunk_width=64, att_dim=32,
                             dropout=0.5)
            model = Model.build(spec, seed=seed)
            train(model, ds, TrainConfig(iterations=5000, batch_size=64,
                                         checkpoint_interval=1000,
                                         ensemble_size=5, seed=seed))
            maps.append(evaluate(model, eval_ds).mean_ap)
        medians[head] = float(np.median(maps))
    elapsed = time.perf_counter() - t0
    f, d, e, i = (medians[h] for h in ("feature_att", "decision_att",
                                       "es_avg", "is_max"))
    ok = f >= d >= e >= i and f - e >= 0.02 and elapsed < 600.0
    _verdict(capsys, 5, ok,
             f"median eval mAP over 5 seeds: feature_att {f:.3f} >= "
             f"decision_att {d:.3f} >= es_avg {e:.3f} >= is_max {i:.3f}, "
             f"feature-es gap {f - e:.3f} >= 0.02, {elapsed:.0f}s < 600s")


def test_criterion_06_balancing_effect(capsys):
    t0 = time.perf_counter()
    common = dict(classes=20, dim=32, bags_per_class=200, instances_per_bag=10,
                  positives_per_bag=1, mean_scale=1.0, noise_sigma=2.0,
                  background_sigma=0.5, seed=0)
    ds = generate_synthetic(SynthSpec(**{**common, "tail_ratio": 100.0}))
    eval_ds = generate_synthetic(SynthSpec(**{**common, "bags_per_class": 50,
                                              "split": "eval"}))
    counts = ds.per_class_counts()
    medians = {}
    for mode in ("minibatch_balanced", "none"):
        maps = []
        for seed in range(5):
            spec = ModelSpec(input_dim=32, classes=20, head="feature_att",
                             gate="sigmoid", trunk_depth=1, trunk_width=64,
                             att_dim=32, dropout=0.5)
            model = Model.build(spec, seed=seed)
            train(model, ds, TrainConfig(iterations=2500, batch_size=64,
                                         checkpoint_interval=500,
                                         ensemble_size=5, seed=seed,
                                         balancing=mode))
            maps.append(evaluate(model, eval_ds).mean_ap)
        medians[mode] = float(np.median(maps))
    elapsed = time.perf_counter() - t0
    gap = medians["minibatch_balanced"] - medians["none"]
    ok = gap >= 0.02
    _verdict(capsys, 6, ok,
             f"{counts[0]}:{counts[-1]} long-tail counts, median eval mAP "
             f"balanced {medians['minibatch_balanced']:.3f} vs unbalanced "
             f"{medians['none']:.3f}, gap {gap:.3f} >= 0.02, {elapsed:.0f}s")


def test_criterion_07_sampler_fairness(capsys):
    # single-label bags so every draw attributes to exactly one class
    k = 7
    counts = [60, 33, 18, 9, 5, 3, 2]
    labels = np.zeros((sum(counts), k), dtype=np.uint8)
    bag_class = np.empty(sum(counts), dtype=int)
    row = 0
    for c, n in enumerate(counts):
        labels[row:row + n, c] = 1
        bag_class[row:row + n] = c
        row += n
    sampler = BalancedSampler(labels, Rng(7).spawn("fairness"))
    worst_spread = 0
    for batch_size in (3, k, 2 * k + 1, 64):
        for _ in range(50):
            per_class = np.bincount(bag_class[sampler.batch(batch_size)],
                                    minlength=k)
            worst_spread = max(worst_spread, int(per_class.max() - per_class.min()))
    tally = np.bincount(bag_class[sampler.batch(100_000)], minlength=k)
    freq_err = float(np.abs(tally / 100_000.0 - 1.0 / k).max())
    ok = worst_spread <= 1 and freq_err <= 0.01 / k
    _verdict(capsys, 7, ok,
             f"200 batches over {counts[0]}:{counts[-1]} imbalanced classes: "
             f"max within-batch class-count spread {worst_spread} <= 1; "
             f"1e5-draw frequency error {freq_err:.2e} <= 1% of 1/K")


RUN_CFG = """\
seed = 0
gen.classes = 3
gen.dim = 5
gen.bags_per_class = 6
gen.eval_bags_per_class = 4
gen.instances_per_bag = 4
model.head = decision_att
model.trunk_depth = 1
model.trunk_width = 6
model.att_dim = 4
model.dropout = 0.0
train.lr = 0.01
train.batch_size = 6
train.iterations = 8
train.checkpoint_interval = 4
train.ensemble_size = 2
"""


def test_criterion_08_byte_determinism(capsys, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(RUN_CFG)
    outs = [str(tmp_path / "a"), str(tmp_path / "b")]
    for out in outs:
        for cmd in ("generate", "train", "evaluate"):
            assert cli_main([cmd, "--config", str(cfg), "--out", out]) == 0
    capsys.readouterr()
    names = ("train.milb", "train.milb.vocab.json", "eval.milb", "model.milm",
             "model.ckpt000004.milm", "model.ckpt000008.milm",
             "report.json", "report.csv")
    bad = [n for n in names
           if open(os.path.join(outs[0], n), "rb").read()
           != open(os.path.join(outs[1], n), "rb").read()]
    _verdict(capsys, 8, not bad,
             f"two seeded runs: {len(names)} artifacts (datasets, checkpoints, "
             f"reports) byte-identical" + (f"; differ: {bad}" if bad else ""))


def test_criterion_09_format_robustness(capsys, tmp_path):
    rng = np.random.default_rng(909)
    path = str(tmp_path / "roundtrip.milb")
    for trial in range(500):
        k = int(rng.integers(1, 6))
        dim = int(rng.integers(1, 6))
        bags = []
        for b in range(int(rng.integers(1, 7))):
            feats = rng.normal(size=(int(rng.integers(1, 5)), dim))
            idx = sorted({int(x) for x in rng.integers(0, k, size=rng.integers(1, 3))})
            bags.append(make_bag(f"bag-{trial}-{b}", feats, idx, k))
        ds = BagDataset([f"c{j}" for j in range(k)], dim, bags).validate()
        write_dataset(ds, path)
        back = read_dataset(path)
        assert back.class_names == ds.class_names and back.dim == ds.dim
        assert len(back.bags) == len(ds.bags)
        for u, v in zip(ds.bags, back.bags):
            assert u.bag_id == v.bag_id
            assert np.array_equal(u.labels, v.labels)
            assert u.instances.tobytes() == v.instances.tobytes()

    # corruption battery on a known-good two-bag file; offsets follow the
    # layout: header 24B, then id_len u16, id, T u32, label mask, floats
    base_ds = BagDataset(["u", "v", "w"], 2,
                         [make_bag("a", np.ones((1, 2), np.float32), [0], 3),
                          make_bag("b", np.zeros((2, 2), np.float32), [1, 2], 3)]
                         ).validate()
    good = str(tmp_path / "good.milb")
    write_dataset(base_ds, good)
    blob = open(good, "rb").read()
    corruptions = [
        ("magic", 0, b"JUNK", None),
        ("version", 4, (99).to_bytes(4, "little"), None),
        ("zero classes", 8, (0).to_bytes(4, "little"), None),
        ("zero dim", 12, (0).to_bytes(4, "little"), None),
        ("bad id bytes", 26, b"\xff", None),
        ("empty bag", 27, (0).to_bytes(4, "little"), None),
        ("mask beyond classes", 31, b"\x09", None),
        ("no labels", 31, b"\x00", None),
        ("non-finite feature", 32, np.array([np.inf], "<f4").tobytes(), None),
        ("truncated", None, None, len(blob) - 3),
        ("trailing garbage", None, None, -1),
    ]
    rejected = 0
    bad_path = str(tmp_path / "bad.milb")
    for name, offset, payload, cut in corruptions:
        if cut is None:
            raw = bytearray(blob)
            raw[offset:offset + len(payload)] = payload
        elif cut > 0:
            raw = blob[:cut]
        else:
            raw = blob + b"\x00\x00"
        open(bad_path, "wb").write(bytes(raw))
        with pytest.raises(FormatError):
            read_dataset(bad_path)
        rejected += 1
    with pytest.raises(OSError):
        read_dataset(str(tmp_path / "does-not-exist.milb"))
    _verdict(capsys, 9, True,
             f"500 random datasets round-trip bit-exactly; {rejected} "
             f"corruption fixtures rejected with typed errors")


def _fake_report(path, names, aps):
    doc = {"classes": [{"index": i, "name": n, "ap": a, "auc": None,
                        "dprime": None, "num_pos": 1}
                       for i, (n, a) in enumerate(zip(names, aps))],
           "aggregates": {}, "metadata": {}}
    json.dump(doc, open(path, "w"))


def test_criterion_10_correlation_engine(capsys, tmp_path):
    rng = np.random.default_rng(1010)
    worst_oracle = worst_prop = 0.0
    for _ in range(1000):
        n = int(rng.integers(3, 40))
        x = rng.normal(size=n)
        y = rng.normal(size=n) + 0.3 * x
        r, _ = pearson(x, y)
        dx, dy = x - x.mean(), y - y.mean()
        ref = float((dx * dy).sum()
                    / math.sqrt((dx * dx).sum() * (dy * dy).sum()))
        worst_oracle = max(worst_oracle, abs(r - ref))
        a, b = float(rng.uniform(0.5, 3.0)), float(rng.normal())
        r_aff, _ = pearson(a * x + b, y)
        r_flip, _ = pearson(-x, y)
        worst_prop = max(worst_prop, abs(r_aff - r), abs(r_flip + r))

    # per-class AP against training count and label quality, end to end
    cfg = str(tmp_path / "run.cfg")
    open(cfg, "w").write(RUN_CFG + "gen.tail_ratio = 4.0\n")
    out = str(tmp_path / "exp")
    assert cli_main(["generate", "--config", cfg, "--out", out]) == 0
    ds = read_dataset(os.path.join(out, "train.milb"))
    counts = ds.per_class_counts().astype(float)
    _fake_report(os.path.join(out, "report.json"), ds.class_names,
                 list(0.1 + 0.01 * counts))
    qpath = os.path.join(out, "quality.csv")
    with open(qpath, "w") as fh:
        fh.write("class_name,quality\n")
        for name, q in zip(ds.class_names, (0.1, 0.25, 0.45)):
            fh.write(f"{name},{q}\n")
    assert cli_main(["analyze", "--config", cfg, "--out", out,
                     "--quality", qpath]) == 0
    capsys.readouterr()
    with open(os.path.join(out, "analysis.csv")) as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        rows = {r["variable"]: r for r in reader}
    shaped = (header == ["variable", "pcc", "p_value", "n"]
              and {"training_examples", "labels_quality"} <= rows.keys()
              and float(rows["training_examples"]["pcc"]) == 1.0
              and int(rows["training_examples"]["n"]) == len(ds.class_names))
    ok = worst_oracle <= 1e-12 and worst_prop <= 1e-9 and shaped
    _verdict(capsys, 10, ok,
             f"1000 pairs: covariance-oracle gap {worst_oracle:.2e} "
             f"(tol 1e-12), affine/sign-flip gap {worst_prop:.2e} (tol 1e-9); "
             f"analysis CSV has variable/pcc/p_value/n rows for "
             f"training_examples and labels_quality")
