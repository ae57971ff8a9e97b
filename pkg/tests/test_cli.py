"""End-to-end command-line behaviour, run in-process via main()."""

import csv
import json
import os

import numpy as np
import pytest

from miltag.cli import main
from miltag.config import KEYS
from miltag import load_model, predict, read_dataset
from miltag.training import prepare_bags


BASE_CFG = """\
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


@pytest.fixture
def workdir(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(BASE_CFG)
    out = tmp_path / "exp"
    return str(cfg), str(out)


def run(args):
    return main(list(args))


def test_full_chain(workdir, capsys):
    cfg, out = workdir
    assert run(["generate", "--config", cfg, "--out", out]) == 0
    assert run(["stats", "--config", cfg, "--out", out]) == 0
    assert run(["train", "--config", cfg, "--out", out]) == 0
    assert run(["evaluate", "--config", cfg, "--out", out]) == 0
    assert run(["predict", "--config", cfg, "--out", out]) == 0
    assert run(["analyze", "--config", cfg, "--out", out]) == 0
    capsys.readouterr()
    expected = ["train.milb", "train.milb.vocab.json", "eval.milb",
                "model.milm", "model.ckpt000004.milm", "model.ckpt000008.milm",
                "train_log.csv", "report.json", "report.csv",
                "predictions.csv", "analysis.csv", "labels_per_bag.csv",
                "class_counts.csv"]
    for name in expected:
        assert os.path.exists(os.path.join(out, name)), name


def test_generate_and_train_are_byte_identical(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(BASE_CFG)
    outs = [str(tmp_path / "a"), str(tmp_path / "b")]
    for out in outs:
        assert run(["generate", "--config", str(cfg), "--out", out]) == 0
        assert run(["train", "--config", str(cfg), "--out", out]) == 0
        assert run(["evaluate", "--config", str(cfg), "--out", out]) == 0
    capsys.readouterr()
    for name in ("train.milb", "eval.milb", "model.milm", "model.ckpt000008.milm",
                 "report.json", "report.csv"):
        a = open(os.path.join(outs[0], name), "rb").read()
        b = open(os.path.join(outs[1], name), "rb").read()
        assert a == b, name


def test_seed_flag_overrides_config(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(BASE_CFG)
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert run(["generate", "--config", str(cfg), "--out", a]) == 0
    assert run(["generate", "--config", str(cfg), "--out", b, "--seed", "7"]) == 0
    capsys.readouterr()
    assert (open(os.path.join(a, "train.milb"), "rb").read()
            != open(os.path.join(b, "train.milb"), "rb").read())


def test_train_log_matches_stdout(workdir, capsys):
    cfg, out = workdir
    run(["generate", "--config", cfg, "--out", out])
    capsys.readouterr()
    assert run(["train", "--config", cfg, "--out", out]) == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("iter")]
    assert len(lines) == 8
    rows = list(csv.DictReader(open(os.path.join(out, "train_log.csv"))))
    assert [int(r["iteration"]) for r in rows] == list(range(1, 9))
    for line, row in zip(lines, rows):
        assert f"loss {float(row['loss']):.6f}" in line
    assert all(float(r["seconds"]) >= 0.0 for r in rows)


def test_predictions_mirror_library(workdir, capsys):
    cfg, out = workdir
    for cmd in ("generate", "train", "predict"):
        assert run([cmd, "--config", cfg, "--out", out]) == 0
    capsys.readouterr()
    ds = read_dataset(os.path.join(out, "eval.milb"))
    model = load_model(os.path.join(out, "model.milm"))
    want = predict(model, prepare_bags(ds, ds.dim))
    rows = list(csv.reader(open(os.path.join(out, "predictions.csv"))))
    assert rows[0] == ["bag_id"] + ds.class_names
    assert len(rows) == 1 + len(ds.bags)
    for row, bag, scores in zip(rows[1:], ds.bags, want):
        assert row[0] == bag.bag_id
        np.testing.assert_array_equal([float(v) for v in row[1:]], scores)


def test_stats_outputs_match_library(workdir, capsys):
    cfg, out = workdir
    run(["generate", "--config", cfg, "--out", out])
    assert run(["stats", "--config", cfg, "--out", out]) == 0
    capsys.readouterr()
    from miltag import dataset_stats
    st = dataset_stats(read_dataset(os.path.join(out, "train.milb")))
    hist = list(csv.reader(open(os.path.join(out, "labels_per_bag.csv"))))
    assert hist[0] == ["num_labels", "num_bags"]
    assert {int(r[0]): int(r[1]) for r in hist[1:]} == st.labels_per_bag
    counts = list(csv.reader(open(os.path.join(out, "class_counts.csv"))))
    assert counts[0] == ["class_index", "class_name", "num_bags"]
    assert [(int(r[0]), r[1], int(r[2])) for r in counts[1:]] == st.class_counts


def test_checkpoint_glob_builds_ensemble(workdir, capsys):
    cfg, out = workdir
    for cmd in ("generate", "train"):
        run([cmd, "--config", cfg, "--out", out])
    pattern = os.path.join(out, "model.ckpt*.milm")
    assert run(["evaluate", "--config", cfg, "--out", out, "--model", pattern]) == 0
    capsys.readouterr()
    rep = json.load(open(os.path.join(out, "report.json")))
    assert rep["metadata"]["ensemble"] == 2
    assert rep["metadata"]["model"] == pattern


def test_knn_head_evaluates_without_model_file(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(BASE_CFG.replace("model.head = decision_att",
                                    "model.head = bs_knn"))
    out = str(tmp_path / "exp")
    assert run(["generate", "--config", str(cfg), "--out", out]) == 0
    assert run(["evaluate", "--config", str(cfg), "--out", out]) == 0
    capsys.readouterr()
    rep = json.load(open(os.path.join(out, "report.json")))
    assert rep["metadata"]["model"] == "bs_knn(k=3)"
    assert not os.path.exists(os.path.join(out, "model.milm"))


# ------------------------------------------------------------- analyze

def fake_report(path, names, aps):
    doc = {"classes": [{"index": i, "name": n, "ap": a, "auc": None,
                        "dprime": None, "num_pos": 1}
                       for i, (n, a) in enumerate(zip(names, aps))],
           "aggregates": {}, "metadata": {}}
    json.dump(doc, open(path, "w"))


def test_analyze_perfect_correlation(tmp_path, capsys):
    # long-tailed counts so the class-count variable actually varies
    cfg = str(tmp_path / "run.cfg")
    open(cfg, "w").write(BASE_CFG + "gen.tail_ratio = 4.0\n")
    out = str(tmp_path / "exp")
    run(["generate", "--config", cfg, "--out", out])
    capsys.readouterr()
    ds = read_dataset(os.path.join(out, "train.milb"))
    counts = ds.per_class_counts().astype(float)
    # AP affine in the training count -> correlation exactly 1
    fake_report(os.path.join(out, "report.json"), ds.class_names,
                list(0.1 + 0.01 * counts))
    assert run(["analyze", "--config", cfg, "--out", out]) == 0
    captured = capsys.readouterr().out
    rows = {r["variable"]: r for r in
            csv.DictReader(open(os.path.join(out, "analysis.csv")))}
    row = rows["training_examples"]
    assert float(row["pcc"]) == 1.0
    assert float(row["p_value"]) == 0.0
    assert int(row["n"]) == ds.num_classes
    assert "training_examples: pcc 1.0000" in captured


def test_analyze_with_quality_file(workdir, capsys):
    cfg, out = workdir
    run(["generate", "--config", cfg, "--out", out])
    capsys.readouterr()
    ds = read_dataset(os.path.join(out, "train.milb"))
    fake_report(os.path.join(out, "report.json"), ds.class_names, [0.2, 0.5, 0.9])
    qpath = os.path.join(out, "quality.csv")
    with open(qpath, "w") as fh:
        fh.write("class_name,quality\n")
        fh.write(f"{ds.class_names[0]},0.1\n")
        fh.write(f"{ds.class_names[2]},0.9\n")
    assert run(["analyze", "--config", cfg, "--out", out, "--quality", qpath]) == 0
    capsys.readouterr()
    rows = {r["variable"]: r for r in
            csv.DictReader(open(os.path.join(out, "analysis.csv")))}
    # only classes with a quality entry pair up; two points leave the
    # correlation undefined
    assert int(rows["labels_quality"]["n"]) == 2
    assert rows["labels_quality"]["pcc"] == ""

    with open(qpath, "w") as fh:
        fh.write("class_name,quality\n")
        for name, q in zip(ds.class_names, (0.1, 0.25, 0.45)):
            fh.write(f"{name},{q}\n")  # affine in the fake APs below
    fake_report(os.path.join(out, "report.json"), ds.class_names, [0.2, 0.5, 0.9])
    assert run(["analyze", "--config", cfg, "--out", out, "--quality", qpath]) == 0
    capsys.readouterr()
    rows = {r["variable"]: r for r in
            csv.DictReader(open(os.path.join(out, "analysis.csv")))}
    assert int(rows["labels_quality"]["n"]) == 3
    assert float(rows["labels_quality"]["pcc"]) == 1.0


def test_analyze_too_few_points_writes_empty_markers(workdir, capsys):
    cfg, out = workdir
    run(["generate", "--config", cfg, "--out", out])
    capsys.readouterr()
    ds = read_dataset(os.path.join(out, "train.milb"))
    fake_report(os.path.join(out, "report.json"), ds.class_names,
                [0.3, None, None])
    assert run(["analyze", "--config", cfg, "--out", out]) == 0
    captured = capsys.readouterr().out
    rows = {r["variable"]: r for r in
            csv.DictReader(open(os.path.join(out, "analysis.csv")))}
    row = rows["training_examples"]
    assert row["pcc"] == "" and row["p_value"] == ""
    assert int(row["n"]) == 1
    assert "pcc n/a" in captured


def test_analyze_rejects_mismatched_report(workdir, capsys):
    cfg, out = workdir
    run(["generate", "--config", cfg, "--out", out])
    fake_report(os.path.join(out, "report.json"), ["alpha", "beta", "gamma"],
                [0.1, 0.2, 0.3])
    assert run(["analyze", "--config", cfg, "--out", out]) == 1
    assert "do not match" in capsys.readouterr().err


# ------------------------------------------------------------ exit codes

def test_missing_model_file_exits_two(workdir, capsys):
    cfg, out = workdir
    run(["generate", "--config", cfg, "--out", out])
    assert run(["evaluate", "--config", cfg, "--out", out]) == 2
    assert "model.milm" in capsys.readouterr().err


def test_missing_config_file_exits_two(tmp_path, capsys):
    assert run(["generate", "--config", str(tmp_path / "nope.cfg"),
                "--out", str(tmp_path)]) == 2
    capsys.readouterr()


def test_unknown_config_key_exits_one(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("gen.classes = 3\nnot.a.key = 1\n")
    assert run(["generate", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "not.a.key" in err and ":2" in err


def test_duplicate_config_key_exits_one(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("seed = 1\nseed = 2\n")
    assert run(["generate", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "duplicate" in capsys.readouterr().err


def test_bad_usage_exits_one(capsys):
    assert run(["no-such-command"]) == 1
    capsys.readouterr()
    assert run([]) == 1
    capsys.readouterr()


def test_numeric_blowup_exits_three(tmp_path, capsys):
    # an absurd learning rate sends parameters to overflow; the gate
    # normalisation turns inf/inf into NaN and training aborts
    cfg = tmp_path / "run.cfg"
    cfg.write_text(BASE_CFG.replace("train.lr = 0.01", "train.lr = 1e200")
                           .replace("model.head = decision_att",
                                    "model.head = decision_att\nmodel.gate = relu"))
    out = str(tmp_path / "exp")
    run(["generate", "--config", str(cfg), "--out", out])
    with np.errstate(all="ignore"):
        code = run(["train", "--config", str(cfg), "--out", out])
    assert code == 3
    assert "non-finite loss" in capsys.readouterr().err


def test_help_lists_config_keys(capsys):
    assert run(["train", "--help"]) == 0
    out = capsys.readouterr().out
    for key in KEYS:
        assert key in out, key


def test_top_level_help(capsys):
    assert run(["--help"]) == 0
    out = capsys.readouterr().out
    for cmd in ("generate", "train", "evaluate", "predict", "analyze",
                "stats", "gradcheck"):
        assert cmd in out
