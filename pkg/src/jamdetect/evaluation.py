"""Detection metrics with per-scenario slices, and their CSV/JSON reports."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .tokenizer import ATTACKED, NO_ATTACK, TokenSequence, prediction_view, stack_tokens

REPORT_VERSION = "1.0"
SLICE_KEYS = ("condition", "distance_m", "attackers")
METRIC_FIELDS = ("n", "accuracy", "precision", "recall", "f1", "tp", "fp", "tn", "fn",
                 "mean_entropy", "majority_rate")
CSV_HEADER = ("section", "key", "condition", "distance_m", "attackers", "count", "correct", "value")

Predictor = Callable[[np.ndarray], tuple]


def _binary_entropy(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 1e-300, 1.0)
    q = np.clip(1.0 - p, 1e-300, 1.0)
    return -(p * np.log(p) + q * np.log(q))


@dataclass
class MetricsReport:
    metrics: dict
    slices: list = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        return self.metrics["accuracy"]

    @property
    def by_distance(self) -> list[dict]:
        agg: dict = {}
        for s in self.slices:
            a = agg.setdefault(s["distance_m"], [0, 0])
            a[0] += s["count"]
            a[1] += s["correct"]
        return [dict(distance_m=d, count=c, correct=k, accuracy=k / c)
                for d, (c, k) in sorted(agg.items(), key=lambda kv: kv[0])]

    def to_dict(self) -> dict:
        return {"spec_version": REPORT_VERSION, "metrics": dict(self.metrics),
                "slices": [dict(s) for s in self.slices], "by_distance": self.by_distance}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        if d.get("spec_version") != REPORT_VERSION:
            raise ValueError(f"unsupported report version {d.get('spec_version')!r}")
        return cls(metrics=dict(d["metrics"]), slices=[dict(s) for s in d.get("slices", [])])

    def __eq__(self, other) -> bool:
        return isinstance(other, MetricsReport) and self.to_dict() == other.to_dict()


def model_predictor(model, batch_size: int = 32, dtype=np.float64) -> Predictor:
    from . import autodiff as ad
    from .model import decide, label_probabilities

    def run(tokens: np.ndarray):
        probs = []
        with ad.no_grad():
            for i in range(0, len(tokens), batch_size):
                logits = model.forward(tokens[i:i + batch_size], dtype=dtype).data
                probs.append(label_probabilities(logits[:, -1, :]))
        p = np.concatenate(probs)
        return decide(p), p
    return run


def compute_metrics(y_true: np.ndarray, y_pred: np.ndarray, p_attacked: np.ndarray | None = None) -> dict:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    tp = int(np.sum((y_pred == ATTACKED) & (y_true == ATTACKED)))
    fp = int(np.sum((y_pred == ATTACKED) & (y_true == NO_ATTACK)))
    tn = int(np.sum((y_pred == NO_ATTACK) & (y_true == NO_ATTACK)))
    fn = int(np.sum((y_pred == NO_ATTACK) & (y_true == ATTACKED)))
    n = len(y_true)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    pos_rate = float(np.mean(y_true == ATTACKED)) if n else 0.0
    ent = float(np.mean(_binary_entropy(np.asarray(p_attacked)))) if p_attacked is not None and n else 0.0
    return dict(n=n, accuracy=(tp + tn) / n if n else 0.0, precision=precision, recall=recall,
                f1=f1, tp=tp, fp=fp, tn=tn, fn=fn, mean_entropy=ent,
                majority_rate=max(pos_rate, 1.0 - pos_rate))


def evaluate(predictor, sequences: Sequence[TokenSequence], batch_size: int = 32) -> MetricsReport:
    """Score ``predictor`` (a Model or a tokens -> (classes, probs) callable).

    Sequences are label-masked before prediction; true labels are consulted
    only for scoring.
    """
    if not sequences:
        raise ValueError("cannot evaluate an empty test set")
    if not callable(predictor) or hasattr(predictor, "params"):
        predictor = model_predictor(predictor, batch_size)
    masked = [prediction_view(s) for s in sequences]
    y_pred, p = predictor(stack_tokens(masked))
    y_pred = np.asarray(y_pred)
    y_true = np.array([s.true_label for s in sequences])
    slices: dict = {}
    for s, yp, yt in zip(sequences, y_pred, y_true):
        key = (s.condition, float(s.meta.get("distance_m", float("nan"))), int(s.meta.get("attackers", -1)))
        a = slices.setdefault(key, [0, 0])
        a[0] += 1
        a[1] += int(yp == yt)
    rows = [dict(condition=k[0], distance_m=k[1], attackers=k[2], count=c, correct=k2, accuracy=k2 / c)
            for k, (c, k2) in sorted(slices.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2]))]
    return MetricsReport(metrics=compute_metrics(y_true, y_pred, p), slices=rows)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_json(report: MetricsReport, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    return path


def read_json(path: str | Path) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def write_csv(report: MetricsReport, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        w.writerow(["meta", "spec_version", "", "", "", "", "", REPORT_VERSION])
        for k in METRIC_FIELDS:
            w.writerow(["metric", k, "", "", "", "", "", _fmt(report.metrics[k])])
        for s in report.slices:
            w.writerow(["slice", "accuracy", s["condition"], _fmt(s["distance_m"]), s["attackers"],
                        s["count"], s["correct"], _fmt(s["accuracy"])])
        for s in report.by_distance:
            w.writerow(["distance", "accuracy", "", _fmt(s["distance_m"]), "", s["count"],
                        s["correct"], _fmt(s["accuracy"])])
    return path


def read_csv(path: str | Path) -> MetricsReport:
    metrics, slices = {}, []
    version = None
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        if tuple(next(reader, ())) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header")
        for row in reader:
            section, key = row[0], row[1]
            if section == "meta" and key == "spec_version":
                version = row[7]
            elif section == "metric":
                metrics[key] = int(row[7]) if key in ("n", "tp", "fp", "tn", "fn") else float(row[7])
            elif section == "slice":
                slices.append(dict(condition=row[2], distance_m=float(row[3]), attackers=int(row[4]),
                                   count=int(row[5]), correct=int(row[6]), accuracy=float(row[7])))
    if version != REPORT_VERSION:
        raise ValueError(f"unsupported report version {version!r}")
    return MetricsReport(metrics=metrics, slices=slices)


def report(metrics: MetricsReport, path: str | Path, fmt: str = "json") -> Path:
    if fmt == "json":
        return write_json(metrics, path)
    if fmt == "csv":
        return write_csv(metrics, path)
    raise ValueError(f"unknown report format {fmt!r}")
