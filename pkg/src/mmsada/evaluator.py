"""Accuracy protocols, metric records and embedding export."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from ._io import atomic_write_text
from .synthdata import SegmentSet, DataError, eval_windows

METRICS_COLUMNS = (
    "method", "source_domain", "target_domain", "seed", "lambda_d", "lambda_c", "policy",
    "epoch", "source_top1", "target_top1", "rgblike_top1", "flowlike_top1",
    "loss_y", "loss_d1", "loss_d2", "loss_c",
)
REPORT_FIELDS = ("source_top1", "target_top1", "rgblike_top1", "flowlike_top1",
                 "loss_y", "loss_d1", "loss_d2", "loss_c")


class LengthError(ValueError):
    pass


@dataclass
class MetricsRecord:
    epoch: int
    method: str
    source_top1: float
    target_top1: float
    modality_top1: list[float]
    loss_y: float
    loss_d: list[float]
    loss_c: float
    seed: int = 0
    lambda_d: float = 0.0
    lambda_c: float = 0.0
    source_domain: str = ""
    target_domain: str = ""
    policy: str = ""

    def __post_init__(self):
        for acc in [self.source_top1, self.target_top1, *self.modality_top1]:
            if not 0.0 <= acc <= 1.0:
                raise ValueError(f"accuracy {acc} outside [0, 1]")

    def row(self) -> dict:
        mods = list(self.modality_top1) + [float("nan")] * (2 - len(self.modality_top1))
        ld = list(self.loss_d) + [0.0] * (2 - len(self.loss_d))
        return {
            "method": self.method, "source_domain": self.source_domain,
            "target_domain": self.target_domain, "seed": self.seed,
            "lambda_d": self.lambda_d, "lambda_c": self.lambda_c, "policy": self.policy,
            "epoch": self.epoch, "source_top1": self.source_top1, "target_top1": self.target_top1,
            "rgblike_top1": mods[0], "flowlike_top1": mods[1],
            "loss_y": self.loss_y, "loss_d1": ld[0], "loss_d2": ld[1], "loss_c": self.loss_c,
        }

    def get(self, name: str) -> float:
        return float(self.row()[name])


# ---------------------------------------------------------------- accuracy

def segment_predictions(window_probs: np.ndarray, seg_idx: np.ndarray, n_segments: int) -> np.ndarray:
    """Average window probabilities per segment, then argmax (ties -> lowest class)."""
    sums = np.zeros((n_segments, window_probs.shape[1]))
    np.add.at(sums, seg_idx, window_probs)
    counts = np.bincount(seg_idx, minlength=n_segments)[:, None]
    return np.argmax(sums / np.maximum(counts, 1), axis=1)


def accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise DataError("accuracy over an empty dataset")
    return int(np.count_nonzero(pred == labels)) / len(labels)


def window_probabilities(bundle, ss: SegmentSet, n_windows: int = 5):
    """Eval-mode probabilities per test window: fused plus one array per modality."""
    if len(ss) == 0:
        raise DataError("cannot evaluate an empty dataset")
    xs, seg_idx = eval_windows(ss, bundle.cfg.window_len, n_windows)
    logits = []
    for m in range(bundle.cfg.n_modalities):
        feat = bundle.features(m, xs[m], dc.EVAL)
        logits.append(bundle.classify(m, feat).data)
    probs = {"fused": _softmax(sum(logits))}
    for m, lg in enumerate(logits):
        probs[m] = _softmax(lg)
    return probs, seg_idx


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def evaluate_all(bundle, ss: SegmentSet, n_windows: int = 5) -> dict:
    """Top-1 accuracy for the fused prediction and for every modality stream."""
    probs, seg_idx = window_probabilities(bundle, ss, n_windows)
    labels = ss.all_labels()
    return {k: accuracy(segment_predictions(p, seg_idx, len(ss)), labels) for k, p in probs.items()}


def evaluate_top1(bundle, ss: SegmentSet, fusion="fused", n_windows: int = 5) -> float:
    """``fusion`` is ``"fused"`` or a modality index."""
    if fusion != "fused" and not 0 <= int(fusion) < bundle.cfg.n_modalities:
        raise IndexError(f"modality {fusion} out of range")
    return evaluate_all(bundle, ss, n_windows)["fused" if fusion == "fused" else int(fusion)]


def average_last_k(records: Sequence, field_name: str, k: int = 9) -> float:
    if k <= 0:
        raise ValueError("k must be positive")
    if len(records) < k:
        raise LengthError(f"need at least {k} records, have {len(records)}")
    vals = [float(r.get(field_name)) for r in records[-k:]]
    return float(np.mean(vals))


# ---------------------------------------------------------------- files

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def metrics_csv_text(records: Sequence[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for r in records:
        row = r.row()
        w.writerow([_fmt(row[c]) for c in METRICS_COLUMNS])
    return buf.getvalue()


def write_metrics_csv(records: Sequence[MetricsRecord], path) -> None:
    atomic_write_text(path, metrics_csv_text(records))


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in REPORT_FIELDS + ("lambda_d", "lambda_c"):
            r[k] = float(r[k])
        r["epoch"] = int(r["epoch"])
        r["seed"] = int(r["seed"])
    return rows


def export_embeddings(bundle, datasets, path, n_windows: int = 5) -> int:
    """Write eval-mode features of each segment's first test window as TSV.

    Columns: modality, domain, split, class, then one column per feature
    dimension.  One row per (segment, modality).  Returns the row count.
    """
    lines = []
    W = bundle.cfg.window_len
    for ds in datasets:
        for ss in (ds.train, ds.test):
            if len(ss) == 0:
                continue
            xs, _ = eval_windows(ss, W, 1)
            labels = ss.all_labels()
            for m in range(bundle.cfg.n_modalities):
                feats = bundle.features(m, xs[m], dc.EVAL).data
                for i in range(len(ss)):
                    vals = "\t".join(repr(float(v)) for v in feats[i])
                    lines.append(f"{m}\t{ss.domain_id}\t{ss.split}\t{int(labels[i])}\t{vals}")
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))
    return len(lines)
