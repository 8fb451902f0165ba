"""Accuracy metrics and the append-only metrics CSV."""
from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass

import numpy as np

from .tensor import ConfigError, ShapeError

CSV_FIELDS = ("epoch", "step", "split", "loss", "top1", "top5", "lr", "wall_time_s")
SPLITS = ("train", "val")


@dataclass(frozen=True)
class MetricsRow:
    epoch: int
    step: int
    split: str
    loss: float
    top1: float
    top5: float
    lr: float
    wall_time_s: float

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {self.split!r}")
        if not 0.0 <= self.top1 <= self.top5 <= 100.0:
            raise ConfigError(f"accuracies must satisfy 0 <= top1 <= top5 <= 100, "
                              f"got top1={self.top1}, top5={self.top5}")


def topk_accuracy(logits, labels, k: int) -> float:
    """Percent of rows whose label is among the k highest logits.

    Ties are broken toward the lower class index, matching a stable
    descending sort.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 2-d, got shape {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match "
                         f"{n} logit rows")
    if not 1 <= k <= c:
        raise ConfigError(f"k must be in [1, {c}], got {k}")
    topk = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float((topk == labels[:, None]).any(axis=1).mean()) * 100.0


class MetricsWriter:
    """Append-only CSV writer; header is written once, every row is flushed
    so partial runs stay readable."""

    def __init__(self, path):
        self.path = os.fspath(path)
        fresh = not (os.path.exists(self.path) and os.path.getsize(self.path) > 0)
        self._f = open(self.path, "a", newline="")
        self._w = csv.writer(self._f)
        if fresh:
            self._w.writerow(CSV_FIELDS)
            self._f.flush()

    def write(self, row: MetricsRow) -> None:
        d = asdict(row)
        self._w.writerow([d[k] for k in CSV_FIELDS])
        self._f.flush()

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path):
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != list(CSV_FIELDS):
            raise ConfigError(f"{path}: unexpected CSV header {reader.fieldnames}")
        for r in reader:
            rows.append(MetricsRow(
                epoch=int(r["epoch"]), step=int(r["step"]), split=r["split"],
                loss=float(r["loss"]), top1=float(r["top1"]),
                top5=float(r["top5"]), lr=float(r["lr"]),
                wall_time_s=float(r["wall_time_s"])))
    return rows
