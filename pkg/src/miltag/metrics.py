"""Ranking metrics, correlation, and dataset evaluation reports.

Average precision is non-interpolated: walk the ranking from the top,
accumulate precision at each positive.  AUC is the Mann-Whitney pairwise
statistic with half credit for ties, computed through midranks, which is
algebraically identical to the pairwise count.  Metrics that are 0/0 or
otherwise undefined return None rather than a silent zero.
"""
import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, ShapeError
from .numerics.special import inv_norm_cdf, student_t_two_sided_p


def precision_recall_fpr(tp: int, fp: int, fn: int, tn: int):
    """(precision, recall, false positive rate); None where the ratio is 0/0."""
    for name, v in (("tp", tp), ("fp", fp), ("fn", fn), ("tn", tn)):
        if v < 0:
            raise DomainError(f"{name} must be non-negative, got {v}")
    precision = tp / (tp + fp) if tp + fp > 0 else None
    recall = tp / (tp + fn) if tp + fn > 0 else None
    fpr = fp / (fp + tn) if fp + tn > 0 else None
    return precision, recall, fpr


def _scores_labels(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or y.shape != s.shape:
        raise ShapeError(f"scores and labels must be matching 1-D arrays, "
                         f"got {s.shape} and {y.shape}")
    return s, y != 0


def average_precision(scores, labels):
    """Non-interpolated AP; ties keep their original stable order.

    Returns None when there are no positive items.
    """
    s, y = _scores_labels(scores, labels)
    npos = int(y.sum())
    if npos == 0:
        return None
    order = np.argsort(-s, kind="stable")
    hits = np.cumsum(y[order])
    ranks = np.arange(1, len(s) + 1)
    return float((hits[y[order]] / ranks[y[order]]).sum() / npos)


def roc_auc(scores, labels):
    """Pairwise ranking AUC with half credit for score ties.

    Returns None unless both a positive and a negative item exist.
    """
    s, y = _scores_labels(scores, labels)
    npos = int(y.sum())
    nneg = len(y) - npos
    if npos == 0 or nneg == 0:
        return None
    order = np.argsort(s, kind="stable")
    sorted_s = s[order]
    ranks = np.empty(len(s), dtype=np.float64)
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        # midrank of the tie group, 1-based
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    pos_rank_sum = ranks[y].sum()
    return float((pos_rank_sum - 0.5 * npos * (npos + 1)) / (npos * nneg))


def d_prime(auc: float) -> float:
    """Separation index sqrt(2) * quantile(auc); +-inf at the endpoints."""
    if not 0.0 <= auc <= 1.0:
        raise DomainError(f"auc must be in [0, 1], got {auc}")
    if auc == 0.0:
        return -math.inf
    if auc == 1.0:
        return math.inf
    return math.sqrt(2.0) * inv_norm_cdf(auc)


def pearson(x, y):
    """(correlation, two-sided p) or (None, None) when undefined.

    Undefined cases: fewer than three points, or zero variance in either
    input.  The p-value comes from the exact Student-t transform with
    n - 2 degrees of freedom.
    """
    xv = np.asarray(x, dtype=np.float64)
    yv = np.asarray(y, dtype=np.float64)
    if xv.ndim != 1 or xv.shape != yv.shape:
        raise ShapeError(f"x and y must be matching 1-D arrays, got {xv.shape} and {yv.shape}")
    n = len(xv)
    if n < 3:
        return None, None
    dx = xv - xv.mean()
    dy = yv - yv.mean()
    den = math.sqrt(float((dx * dx).sum()) * float((dy * dy).sum()))
    if den == 0.0:
        return None, None
    r = float((dx * dy).sum() / den)
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return r, student_t_two_sided_p(t, n - 2)


@dataclass
class ClassMetrics:
    index: int
    name: str
    ap: float | None
    auc: float | None
    dprime: float | None
    num_pos: int


@dataclass
class EvalReport:
    classes: list[ClassMetrics]
    mean_ap: float | None
    mean_auc: float | None
    mean_dprime: float | None
    num_classes: int
    num_evaluated: int
    num_excluded: int
    num_bags: int
    metadata: dict = field(default_factory=dict)


def _mean_or_none(values: list[float]):
    return float(np.mean(values)) if values else None


def score_bags(scorer, dataset) -> np.ndarray:
    """(N, K) score matrix for every bag in the dataset.

    ``scorer`` is a Model, a sequence of Models (averaged as an ensemble),
    or a callable mapping a list of instance matrices to scores.
    """
    from .models import Model, predict
    from .training import ensemble_predict, prepare_bags

    if isinstance(scorer, Model):
        return predict(scorer, prepare_bags(dataset, scorer.spec.input_dim))
    if isinstance(scorer, (list, tuple)):
        if not scorer:
            raise ConfigError("ensemble needs at least one model")
        return ensemble_predict(list(scorer),
                                prepare_bags(dataset, scorer[0].spec.input_dim))
    return np.asarray(scorer([np.asarray(b.instances) for b in dataset.bags]),
                      dtype=np.float64)


def evaluate(scorer, dataset, metadata: dict | None = None) -> EvalReport:
    """Score every bag and aggregate per-class ranking metrics.

    Classes without positive bags are excluded from aggregates and
    counted in ``num_excluded``; the d-prime mean runs over classes
    where it is finite.
    """
    labels = dataset.label_matrix()
    scores = score_bags(scorer, dataset)
    if scores.shape != labels.shape:
        raise ShapeError(f"score matrix {scores.shape} does not match labels {labels.shape}")

    per_class = []
    aps, aucs, dprimes = [], [], []
    for c in range(labels.shape[1]):
        y = labels[:, c]
        npos = int((y != 0).sum())
        ap = average_precision(scores[:, c], y)
        auc = roc_auc(scores[:, c], y)
        dp = d_prime(auc) if auc is not None else None
        per_class.append(ClassMetrics(c, dataset.class_names[c], ap, auc, dp, npos))
        if npos > 0:
            if ap is not None:
                aps.append(ap)
            if auc is not None:
                aucs.append(auc)
            if dp is not None and math.isfinite(dp):
                dprimes.append(dp)
    evaluated = sum(1 for cm in per_class if cm.num_pos > 0)
    return EvalReport(
        classes=per_class,
        mean_ap=_mean_or_none(aps),
        mean_auc=_mean_or_none(aucs),
        mean_dprime=_mean_or_none(dprimes),
        num_classes=labels.shape[1],
        num_evaluated=evaluated,
        num_excluded=labels.shape[1] - evaluated,
        num_bags=labels.shape[0],
        metadata=metadata or {},
    )


def _json_value(v):
    if v is None:
        return None
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def report_to_dict(report: EvalReport) -> dict:
    return {
        "aggregates": {
            "mean_ap": _json_value(report.mean_ap),
            "mean_auc": _json_value(report.mean_auc),
            "mean_dprime": _json_value(report.mean_dprime),
        },
        "num_classes": report.num_classes,
        "num_evaluated": report.num_evaluated,
        "num_excluded": report.num_excluded,
        "num_bags": report.num_bags,
        "metadata": report.metadata,
        "classes": [
            {
                "index": cm.index,
                "name": cm.name,
                "ap": _json_value(cm.ap),
                "auc": _json_value(cm.auc),
                "dprime": _json_value(cm.dprime),
                "num_pos": cm.num_pos,
            }
            for cm in report.classes
        ],
    }


def write_report_json(report: EvalReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report_to_dict(report), fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_report_dict(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _csv_value(v):
    if v is None:
        return ""
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v) if isinstance(v, float) else v


def write_report_csv(report: EvalReport, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_index", "class_name", "ap", "auc", "dprime", "num_pos"])
        for cm in report.classes:
            writer.writerow([cm.index, cm.name, _csv_value(cm.ap), _csv_value(cm.auc),
                             _csv_value(cm.dprime), cm.num_pos])
