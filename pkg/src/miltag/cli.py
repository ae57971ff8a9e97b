"""Command-line front door tying generation, training, evaluation, and
analysis into reproducible experiments.

Every command takes --config (key=value file), --seed (overrides the
config seed), and --out (the experiment directory).  Path-valued config
keys resolve inside --out; paths given via explicit flags are used as
written.  Fixed output names inside --out:

  train     model file per model.path, <model>.ckptNNNNNN.<ext>,
            train_log.csv
  evaluate  report.json, report.csv
  predict   predictions.csv
  analyze   analysis.csv
  stats     labels_per_bag.csv, class_counts.csv

Exit codes: 0 success, 1 usage/config, 2 data/format/I-O, 3 numeric.
"""

from __future__ import annotations

import argparse
import csv
import glob as globlib
import os
import sys

import numpy as np

from .config import RunConfig, describe_keys
from .data import dataset_stats, generate_synthetic, load_quality_file, read_dataset, \
    write_dataset
from .errors import ConfigError, DomainError, EmptyBagError, FormatError, NumericError, \
    ShapeError
from .gradcheck import sweep
from .metrics import evaluate, load_report_dict, pearson, score_bags, write_report_csv, \
    write_report_json
from .models import load_model, save_model, Model, knn_predict
from .training import prepare_bags, train


def _fmt(v, none="n/a") -> str:
    return none if v is None else f"{v:.4f}"


def _csv_float(v) -> str:
    return "" if v is None else repr(float(v))


def _cmd_generate(args, cfg) -> int:
    os.makedirs(args.out, exist_ok=True)
    for split, key in (("train", "data.train"), ("eval", "data.eval")):
        ds = generate_synthetic(cfg.synth_spec(split))
        path = cfg.path(key, args.out)
        write_dataset(ds, path)
        st = dataset_stats(ds)
        print(f"{split}: {st.num_bags} bags, {st.num_classes} classes, "
              f"dim {st.dim}, {st.total_instances} instances -> {path}")
    return 0


def _cmd_train(args, cfg) -> int:
    os.makedirs(args.out, exist_ok=True)
    ds = read_dataset(cfg.path("data.train", args.out))
    spec = cfg.model_spec(ds.dim, ds.num_classes)
    model = Model.build(spec, seed=cfg["seed"])
    result = train(model, ds, cfg.train_config())
    for it, loss, _secs in result.log:
        print(f"iter {it:>7d}  loss {loss:.6f}")

    model_path = cfg.path("model.path", args.out)
    save_model(model, model_path)
    stem, ext = os.path.splitext(model_path)
    for ck in result.checkpoints:
        save_model(Model(spec, ck.params), f"{stem}.ckpt{ck.iteration:06d}{ext}")
    log_path = os.path.join(args.out, "train_log.csv")
    with open(log_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss", "seconds"])
        for it, loss, secs in result.log:
            writer.writerow([it, repr(loss), f"{secs:.3f}"])
    print(f"saved {model_path} (+{len(result.checkpoints)} checkpoints), log {log_path}")
    return 0


def _expand_models(pattern: str) -> list[str]:
    if globlib.has_magic(pattern):
        paths = sorted(globlib.glob(pattern))
        if not paths:
            raise FileNotFoundError(f"no model files match {pattern!r}")
        return paths
    return [pattern]


def _resolve_scorer(args, cfg):
    """Scorer + report metadata from flags and config.

    With model.head = bs_knn and no --model flag there is nothing
    fitted to load; bags are scored by k-NN over the training dataset.
    """
    if cfg["model.head"] == "bs_knn" and not args.model:
        train_ds = read_dataset(cfg.path("data.train", args.out))
        k = cfg["model.knn_k"]
        tmats = prepare_bags(train_ds, train_ds.dim)
        tlabels = train_ds.label_matrix()

        def scorer(mats):
            return knn_predict(tmats, tlabels,
                               [np.asarray(m, dtype=np.float64) for m in mats], k)

        return scorer, {"model": f"bs_knn(k={k})", "ensemble": 1}
    pattern = args.model if args.model else cfg.path("model.path", args.out)
    models = [load_model(p) for p in _expand_models(pattern)]
    label = args.model if args.model else cfg["model.path"]
    meta = {"model": label, "ensemble": len(models)}
    return (models[0] if len(models) == 1 else models), meta


def _cmd_evaluate(args, cfg) -> int:
    os.makedirs(args.out, exist_ok=True)
    data_path = args.data if args.data else cfg.path("data.eval", args.out)
    ds = read_dataset(data_path)
    scorer, meta = _resolve_scorer(args, cfg)
    meta["data"] = args.data if args.data else cfg["data.eval"]
    report = evaluate(scorer, ds, metadata=meta)
    json_path = os.path.join(args.out, "report.json")
    csv_path = os.path.join(args.out, "report.csv")
    write_report_json(report, json_path)
    write_report_csv(report, csv_path)
    print(f"mAP {_fmt(report.mean_ap)}  mean-AUC {_fmt(report.mean_auc)}  "
          f"mean-dprime {_fmt(report.mean_dprime)}  "
          f"classes {report.num_evaluated}/{report.num_classes}  "
          f"bags {report.num_bags}")
    print(f"wrote {json_path} and {csv_path}")
    return 0


def _cmd_predict(args, cfg) -> int:
    os.makedirs(args.out, exist_ok=True)
    data_path = args.data if args.data else cfg.path("data.eval", args.out)
    ds = read_dataset(data_path)
    scorer, _meta = _resolve_scorer(args, cfg)
    scores = score_bags(scorer, ds)
    out_path = os.path.join(args.out, "predictions.csv")
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bag_id"] + list(ds.class_names))
        for bag, row in zip(ds.bags, scores):
            writer.writerow([bag.bag_id] + [repr(float(s)) for s in row])
    print(f"wrote scores for {len(ds.bags)} bags to {out_path}")
    return 0


def _cmd_analyze(args, cfg) -> int:
    os.makedirs(args.out, exist_ok=True)
    report_path = args.report if args.report else os.path.join(args.out, "report.json")
    data_path = args.data if args.data else cfg.path("data.train", args.out)
    rep = load_report_dict(report_path)
    ds = read_dataset(data_path)
    names = [c["name"] for c in rep["classes"]]
    if names != list(ds.class_names):
        raise ConfigError("report classes do not match the dataset")
    # AP is correlated against how often each class occurs in training
    counts = ds.per_class_counts()
    aps = [c["ap"] for c in rep["classes"]]
    rows = []

    def corr_row(variable, pairs):
        if pairs:
            xs, ys = zip(*pairs)
            r, p = pearson(np.array(xs, dtype=np.float64), np.array(ys, dtype=np.float64))
        else:
            r, p = None, None
        rows.append((variable, r, p, len(pairs)))

    corr_row("training_examples",
             [(float(counts[i]), float(ap)) for i, ap in enumerate(aps) if ap is not None])
    quality_path = args.quality
    if not quality_path and cfg["data.quality"]:
        quality_path = cfg.path("data.quality", args.out)
    if quality_path:
        qmap = load_quality_file(quality_path, list(ds.class_names))
        corr_row("labels_quality",
                 [(qmap[name], float(ap)) for name, ap in zip(names, aps)
                  if ap is not None and name in qmap])

    out_path = os.path.join(args.out, "analysis.csv")
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variable", "pcc", "p_value", "n"])
        for variable, r, p, n in rows:
            writer.writerow([variable, _csv_float(r), _csv_float(p), n])
    for variable, r, p, n in rows:
        print(f"{variable}: pcc {_fmt(r)}  p {'n/a' if p is None else format(p, '.3g')}  n {n}")
    print(f"wrote {out_path}")
    return 0


def _cmd_stats(args, cfg) -> int:
    os.makedirs(args.out, exist_ok=True)
    data_path = args.data if args.data else cfg.path("data.train", args.out)
    st = dataset_stats(read_dataset(data_path))
    hist_path = os.path.join(args.out, "labels_per_bag.csv")
    with open(hist_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["num_labels", "num_bags"])
        for k, v in st.labels_per_bag.items():
            writer.writerow([k, v])
    counts_path = os.path.join(args.out, "class_counts.csv")
    with open(counts_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_index", "class_name", "num_bags"])
        for index, name, count in st.class_counts:
            writer.writerow([index, name, count])
    print(f"{st.num_bags} bags, {st.num_classes} classes, dim {st.dim}, "
          f"{st.total_instances} instances")
    print(f"wrote {hist_path} and {counts_path}")
    return 0


def _cmd_gradcheck(args, cfg) -> int:
    seed = cfg["seed"]
    failures = 0
    for depth in (2, 0):
        print(f"-- trunk depth {depth} --")
        for r in sweep(seed=seed, trunk_depth=depth):
            status = "ok" if r.passed else f"FAIL at {r.worst_param}"
            print(f"{r.head:<18} {r.gate:<8} {r.topology:<16} "
                  f"max_rel_err {r.max_rel_err:.3e}  {status}")
            failures += 0 if r.passed else 1
    if failures:
        raise NumericError(f"{failures} gradient check(s) failed")
    return 0


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; route them through the shared
    # exit-code scheme instead (usage problems are code 1)
    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE",
                        help="key=value config file (defaults apply when omitted)")
    common.add_argument("--seed", type=int, metavar="N", help="override the config seed")
    common.add_argument("--out", metavar="DIR", default=".",
                        help="experiment directory; config paths resolve inside it")

    parser = _Parser(prog="miltag",
                     description="Multi-instance audio-tagging experiments.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, help_text, func):
        sp = sub.add_parser(name, help=help_text, description=help_text,
                            parents=[common], epilog=describe_keys(),
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.set_defaults(func=func)
        return sp

    add("generate", "write synthetic train/eval datasets with a vocabulary sidecar",
        _cmd_generate)
    add("train", "train a model; writes model, checkpoints, and loss log", _cmd_train)
    for name, help_text, func in (
            ("evaluate", "write report.json/report.csv for a model or checkpoint glob",
             _cmd_evaluate),
            ("predict", "write per-bag class scores as CSV", _cmd_predict)):
        sp = add(name, help_text, func)
        sp.add_argument("--model", metavar="PATH",
                        help="model file or glob over checkpoints (default: model.path)")
        sp.add_argument("--data", metavar="PATH",
                        help="dataset to score (default: data.eval)")
    sp = add("analyze", "correlate per-class AP with training counts and label quality",
             _cmd_analyze)
    sp.add_argument("--report", metavar="PATH",
                    help="evaluation report JSON (default: <out>/report.json)")
    sp.add_argument("--data", metavar="PATH",
                    help="training dataset for per-class counts (default: data.train)")
    sp.add_argument("--quality", metavar="PATH",
                    help="per-class quality CSV (default: data.quality)")
    sp = add("stats", "write labels-per-bag histogram and sorted class counts",
             _cmd_stats)
    sp.add_argument("--data", metavar="PATH",
                    help="dataset to summarise (default: data.train)")
    add("gradcheck", "finite-difference check of every head/gate/topology combination",
        _cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        cfg = RunConfig.load(args.config) if args.config else RunConfig.defaults()
        if args.seed is not None:
            cfg.values["seed"] = args.seed
        return args.func(args, cfg)
    except SystemExit as exc:  # argparse --help
        return exc.code if isinstance(exc.code, int) else 0
    except (ConfigError, ShapeError) as exc:
        print(f"miltag: {exc}", file=sys.stderr)
        return 1
    except (FormatError, EmptyBagError, OSError) as exc:
        print(f"miltag: {exc}", file=sys.stderr)
        return 2
    except (NumericError, DomainError) as exc:
        print(f"miltag: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
