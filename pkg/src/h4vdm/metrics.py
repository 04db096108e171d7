"""Verification metrics and report files."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import SingleClass

REPORT_VERSION = 1
METRIC_KEYS = ("precision", "recall", "f1")


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    if scores.shape != labels.shape:
        raise ValueError(f"{len(scores)} scores for {len(labels)} labels")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return scores, labels


def auc(scores, labels) -> float:
    """Mann-Whitney estimate of P(positive outscores negative), ties counted half."""
    scores, labels = _check(scores, labels)
    n1 = int(labels.sum())
    n0 = len(labels) - n1
    if n0 == 0 or n1 == 0:
        raise SingleClass("AUC needs both classes")
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    ranks = np.empty(len(s))
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        ranks[i:j + 1] = (i + j) / 2 + 1
        i = j + 1
    r = np.empty_like(ranks)
    r[order] = ranks
    u = r[labels == 1].sum() - n1 * (n1 + 1) / 2
    return float(u / (n0 * n1))


def _rates(scores, labels, thr):
    pred = scores >= thr
    tpr = (pred & (labels == 1)).sum() / (labels == 1).sum()
    tnr = (~pred & (labels == 0)).sum() / (labels == 0).sum()
    return tpr, tnr


def choose_threshold(scores, labels) -> float:
    """Midpoint of sorted unique scores maximising TPR + TNR; ties go to the larger one."""
    scores, labels = _check(scores, labels)
    if labels.min() == labels.max():
        raise SingleClass("threshold selection needs both classes")
    u = np.unique(scores)
    if len(u) == 1:
        return float(u[0])
    mids = (u[:-1] + u[1:]) / 2
    # vectorised TPR + TNR for every midpoint
    pos = np.sort(scores[labels == 1])
    neg = np.sort(scores[labels == 0])
    tpr = 1.0 - np.searchsorted(pos, mids, side="left") / len(pos)
    tnr = np.searchsorted(neg, mids, side="left") / len(neg)
    total = tpr + tnr
    best = np.flatnonzero(total == total.max())[-1]
    return float(mids[best])


def _div(a, b):
    return float(a / b) if b else 0.0


def prf(scores, labels, threshold: float) -> dict:
    """Per-class, macro and support-weighted precision/recall/F1 at ``threshold``."""
    scores, labels = _check(scores, labels)
    pred = (scores >= threshold).astype(np.int64)
    classes = {}
    for c in (0, 1):
        tp = int(((pred == c) & (labels == c)).sum())
        fp = int(((pred == c) & (labels != c)).sum())
        fn = int(((pred != c) & (labels == c)).sum())
        p, r = _div(tp, tp + fp), _div(tp, tp + fn)
        classes[str(c)] = {"precision": p, "recall": r, "f1": _div(2 * p * r, p + r),
                           "support": int((labels == c).sum())}
    macro = {k: (classes["0"][k] + classes["1"][k]) / 2 for k in METRIC_KEYS}
    n = len(labels)
    weighted = {k: _div(sum(classes[c][k] * classes[c]["support"] for c in classes), n)
                for k in METRIC_KEYS}
    acc = _div(int((pred == labels).sum()), n)
    return {"classes": classes, "macro": macro, "weighted": weighted, "accuracy": acc}


def _device_key(d):
    return (0, int(d), "") if str(d).isdigit() else (1, 0, str(d))


def accuracy_matrix(pairs: Sequence, scores, threshold: float) -> dict:
    """Per device-pair accuracy; ``None`` marks device pairs without samples."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(scores) != len(pairs):
        raise ValueError(f"{len(scores)} scores for {len(pairs)} pairs")
    devices = sorted({x for p in pairs for x in (p.a[0], p.b[0])}, key=_device_key)
    pos = {d: i for i, d in enumerate(devices)}
    n = len(devices)
    correct = np.zeros((n, n), np.int64)
    count = np.zeros((n, n), np.int64)
    for p, s in zip(pairs, scores):
        i, j = pos[p.a[0]], pos[p.b[0]]
        ok = int((s >= threshold) == bool(p.label))
        for a, b in {(i, j), (j, i)}:
            correct[a, b] += ok
            count[a, b] += 1
    acc = [[(float(correct[i, j] / count[i, j]) if count[i, j] else None) for j in range(n)]
           for i in range(n)]
    return {"devices": devices, "accuracy": acc, "counts": count.tolist()}


@dataclass
class MetricsReport:
    auc: float
    threshold: float
    threshold_source: str
    classes: dict
    macro: dict
    weighted: dict
    accuracy: float
    accuracy_matrix: dict
    n_pairs: int
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"report_version": REPORT_VERSION, **asdict(self)}

    @classmethod
    def from_json(cls, doc: dict) -> "MetricsReport":
        doc = dict(doc)
        doc.pop("report_version", None)
        return cls(**doc)

    def table_row(self) -> dict:
        """The ten results-table columns, in order.

        "All Classes" is the support-weighted average of the two classes;
        ``macro`` holds the unweighted one.
        """
        row = {}
        for c in ("0", "1"):
            for k, short in zip(METRIC_KEYS, ("Pre.", "Rec.", "F1")):
                row[f"Class {c} {short}"] = self.classes[c][k]
        for k, short in zip(METRIC_KEYS, ("Pre.", "Rec.", "F1")):
            row[f"All Classes {short}"] = self.weighted[k]
        row["AUC"] = self.auc
        return row


def build_report(pairs: Sequence, scores, threshold: float | None = None,
                 threshold_source: str = "test", meta: dict | None = None) -> MetricsReport:
    labels = np.array([p.label for p in pairs])
    scores = np.asarray(scores, dtype=np.float64)
    if threshold is None:
        threshold = choose_threshold(scores, labels)
        threshold_source = "test"
    m = prf(scores, labels, threshold)
    return MetricsReport(
        auc=auc(scores, labels), threshold=float(threshold), threshold_source=threshold_source,
        classes=m["classes"], macro=m["macro"], weighted=m["weighted"], accuracy=m["accuracy"],
        accuracy_matrix=accuracy_matrix(pairs, scores, threshold), n_pairs=len(pairs),
        meta=meta or {})


def emit_report(report: MetricsReport, out_dir: str | Path, stem: str = "report") -> dict:
    """Write ``<stem>.json``, ``<stem>_matrix.csv``, ``<stem>_table.csv`` and ``<stem>_heatmap.dat``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / f"{stem}{suffix}" for k, suffix in
             (("json", ".json"), ("matrix", "_matrix.csv"), ("table", "_table.csv"),
              ("heatmap", "_heatmap.dat"))}
    paths["json"].write_text(json.dumps(report.to_json(), indent=1, sort_keys=True) + "\n")
    mat = report.accuracy_matrix
    devices = mat["devices"]
    with paths["matrix"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["device", *devices])
        for d, row in zip(devices, mat["accuracy"]):
            w.writerow([d, *("" if v is None else f"{v:.4f}" for v in row)])
    with paths["table"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        row = report.table_row()
        w.writerow(list(row))
        w.writerow([f"{v:.4f}" for v in row.values()])
    # gnuplot "matrix nonuniform"-style long table; blank lines separate rows
    lines = ["# row_device col_device accuracy count"]
    for i, d in enumerate(devices):
        for j, e in enumerate(devices):
            v = mat["accuracy"][i][j]
            lines.append(f"{d} {e} {'NaN' if v is None else repr(v)} {mat['counts'][i][j]}")
        lines.append("")
    paths["heatmap"].write_text("\n".join(lines) + "\n")
    return {k: str(v) for k, v in paths.items()}


def load_report(path: str | Path) -> MetricsReport:
    return MetricsReport.from_json(json.loads(Path(path).read_text()))
