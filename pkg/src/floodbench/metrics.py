"""Confusion matrices, accuracy/precision/recall/F1/kappa, binary collapse."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError

CLASS_NAMES = ("no-damage", "minor-damage", "major-damage", "destroyed")
BINARY_NAMES = ("no-damage", "damaged")


@dataclass
class ConfusionMatrix:
    """Counts indexed ``[ground truth, prediction]``."""

    counts: np.ndarray

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def confusion(labels: np.ndarray, preds: np.ndarray, k: int = 4) -> ConfusionMatrix:
    labels = np.asarray(labels)
    preds = np.asarray(preds)
    if labels.shape != preds.shape:
        raise ShapeError(f"labels {labels.shape} vs predictions {preds.shape}")
    g = labels.ravel().astype(np.int64)
    p = preds.ravel().astype(np.int64)
    if g.size and (min(g.min(), p.min()) < 0 or max(g.max(), p.max()) >= k):
        raise ContractError(f"values must lie in 0..{k - 1}")
    return ConfusionMatrix(np.bincount(g * k + p, minlength=k * k).reshape(k, k))


def binary_collapse(label_map: np.ndarray) -> np.ndarray:
    """Merge minor/major/destroyed into a single damaged class."""
    arr = np.asarray(label_map)
    if arr.size and (arr.min() < 0 or arr.max() > 3):
        raise ContractError("label map values must lie in 0..3")
    return (arr > 0).astype(np.uint8)


def block_sum(cm: ConfusionMatrix) -> ConfusionMatrix:
    """Aggregate a 4-class matrix over the {0} / {1,2,3} partition."""
    if cm.k != 4:
        raise ContractError("block_sum expects a 4-class matrix")
    c = cm.counts
    return ConfusionMatrix(np.array([[c[0, 0], c[0, 1:].sum()], [c[1:, 0].sum(), c[1:, 1:].sum()]]))


def normalize_rows(cm: ConfusionMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalized matrix and a mask of rows that were empty (left as zeros)."""
    counts = cm.counts.astype(np.float64)
    sums = counts.sum(axis=1)
    empty = sums == 0
    out = np.zeros_like(counts)
    out[~empty] = counts[~empty] / sums[~empty, None]
    return out, empty


@dataclass
class MetricsReport:
    matrix: ConfusionMatrix
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    undefined: dict = field(default_factory=dict)
    oa: float = 0.0
    kappa: float = 0.0
    macro_f1: float = 0.0
    granularity: str = "4-class"

    def to_dict(self) -> dict:
        names = CLASS_NAMES if self.matrix.k == 4 else BINARY_NAMES
        norm, empty = normalize_rows(self.matrix)
        return {
            "granularity": self.granularity,
            "classes": list(names),
            "confusion": self.matrix.counts.tolist(),
            "normalized": norm.tolist(),
            "empty_rows": [int(i) for i in np.flatnonzero(empty)],
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f1": self.f1.tolist(),
            "undefined": {k: [int(i) for i in v] for k, v in self.undefined.items()},
            "oa": self.oa,
            "kappa": self.kappa,
            "macro_f1": self.macro_f1,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def compute_metrics(cm: ConfusionMatrix, granularity: str | None = None) -> MetricsReport:
    """One-vs-rest rates per class plus OA, macro-F1 and Cohen's kappa.

    Rates with a zero denominator are reported as 0 and listed in
    ``undefined``.
    """
    c = cm.counts.astype(np.float64)
    total = c.sum()
    if total <= 0:
        raise ContractError("confusion matrix is empty")
    tp = np.diag(c)
    pred_totals = c.sum(axis=0)
    true_totals = c.sum(axis=1)
    precision = _safe_div(tp, pred_totals)
    recall = _safe_div(tp, true_totals)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    undefined = {
        "precision": np.flatnonzero(pred_totals == 0),
        "recall": np.flatnonzero(true_totals == 0),
        "f1": np.flatnonzero(precision + recall == 0),
    }
    p_o = tp.sum() / total
    p_e = float((true_totals * pred_totals).sum() / total**2)
    if p_e < 1.0:
        kappa = (p_o - p_e) / (1.0 - p_e)
    else:
        kappa = 1.0 if p_o == 1.0 else 0.0
        undefined["kappa"] = np.array([0])
    if granularity is None:
        granularity = "4-class" if cm.k == 4 else "binary" if cm.k == 2 else f"{cm.k}-class"
    return MetricsReport(
        matrix=cm,
        precision=precision,
        recall=recall,
        f1=f1,
        undefined=undefined,
        oa=float(p_o),
        kappa=float(kappa),
        macro_f1=float(f1.mean()),
        granularity=granularity,
    )


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    ok = den != 0
    out[ok] = num[ok] / den[ok]
    return out


def evaluate_maps(labels: np.ndarray, preds: np.ndarray) -> dict[str, MetricsReport]:
    """4-class and binary reports for matching label/prediction batches."""
    cm4 = confusion(labels, preds, 4)
    cm2 = confusion(binary_collapse(labels), binary_collapse(preds), 2)
    return {"four_class": compute_metrics(cm4), "binary": compute_metrics(cm2)}


TABLE_COLUMNS = (
    "precision_nodamage", "precision_damaged", "recall_nodamage", "recall_damaged",
    "f1_nodamage", "f1_damaged", "oa", "kappa", "params",
)


def table_row(binary: MetricsReport, params: int) -> dict:
    """Benchmark-table row: per-class binary rates, OA, kappa, parameter count."""
    return {
        "precision_nodamage": binary.precision[0],
        "precision_damaged": binary.precision[1],
        "recall_nodamage": binary.recall[0],
        "recall_damaged": binary.recall[1],
        "f1_nodamage": binary.f1[0],
        "f1_damaged": binary.f1[1],
        "oa": binary.oa,
        "kappa": binary.kappa,
        "params": params,
    }


def rows_to_csv(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row.get(k, "") for k in columns})
    return buf.getvalue()
