"""Accuracy and the metrics CSV.

CSV layout (one row per client per repetition, then a ``client_id=ALL`` row
carrying the multi-task average)::

    method,dataset,seed,client_id,accuracy,average,seconds,epochs

Floats are written with six decimals.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CSV_HEADER = "method,dataset,seed,client_id,accuracy,average,seconds,epochs"


def accuracy(scores, labels) -> float:
    """Fraction of rows whose argmax equals the label.

    ``scores`` is either (N, C) logits/probabilities or an (N,) vector of
    predicted classes. Ties go to the lowest class index.
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("accuracy of an empty set is undefined")
    preds = scores if scores.ndim == 1 else np.argmax(scores, axis=-1)
    if preds.shape != labels.shape:
        raise ValueError(f"{preds.shape[0]} predictions for {labels.shape[0]} labels")
    return float(np.mean(preds == labels))


@dataclass
class MetricsRecord:
    method: str
    dataset: str
    seed: int
    client_ids: list[str]
    accuracies: list[float]
    seconds: float
    epochs: float

    def __post_init__(self):
        if len(self.client_ids) != len(self.accuracies):
            raise ValueError("one accuracy per client required")
        if any(not 0.0 <= a <= 1.0 for a in self.accuracies):
            raise ValueError("accuracies must lie in [0, 1]")

    @property
    def average(self) -> float:
        """Unweighted mean over clients."""
        return float(np.mean(self.accuracies))


def _f(x: float) -> str:
    return f"{x:.6f}"


def format_metrics(records: list[MetricsRecord]) -> str:
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    for r in records:
        avg = r.average
        for cid, acc in zip(r.client_ids, r.accuracies):
            writer.writerow([r.method, r.dataset, r.seed, cid, _f(acc), _f(avg), _f(r.seconds), _f(r.epochs)])
        writer.writerow([r.method, r.dataset, r.seed, "ALL", _f(avg), _f(avg), _f(r.seconds), _f(r.epochs)])
    return buf.getvalue()


def emit_metrics(records: list[MetricsRecord], path) -> Path:
    path = Path(path)
    try:
        path.write_text(format_metrics(records), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc}") from exc
    return path


def parse_metrics(path) -> list[MetricsRecord]:
    """Read a metrics CSV back into records (client rows only; ALL rows are derived)."""
    with open(path, newline="", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"{path}: unexpected header")
    records: list[MetricsRecord] = []
    pending: dict | None = None
    for row in csv.reader(lines[1:]):
        method, dataset, seed, cid, acc, avg, secs, epochs = row
        if cid == "ALL":
            if pending is None:
                raise ValueError(f"{path}: summary row without client rows")
            records.append(MetricsRecord(**pending))
            pending = None
            continue
        if pending is None:
            pending = dict(method=method, dataset=dataset, seed=int(seed), client_ids=[], accuracies=[],
                           seconds=float(secs), epochs=float(epochs))
        pending["client_ids"].append(cid)
        pending["accuracies"].append(float(acc))
    if pending is not None:
        raise ValueError(f"{path}: trailing client rows without a summary row")
    return records
