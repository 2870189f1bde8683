"""Rank-based evaluation of predicted crops against annotated crops.

Acc_{K/N}: the fraction of the top-K scored predictions whose best IoU
against any of the top-N annotated crops clears a threshold, averaged
over all examples. Both rankings break ties by original index so runs
are reproducible across platforms.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .decoder import Prediction
from .errors import DimMismatch, EmptySK, KTooLarge, NTooLarge, OutOfRange
from .geometry import ScoredCrop, boxes_array, iou_matrix


@dataclass(frozen=True)
class EvalExample:
    """One evaluated image: model predictions plus annotated crops."""

    predictions: tuple[Prediction, ...]
    ground_truths: tuple[ScoredCrop, ...]

    def __post_init__(self):
        if len(self.predictions) < 1:
            raise DimMismatch("EvalExample needs at least one prediction")


def top_k_predictions(preds, k: int) -> list[Prediction]:
    """Top k by score descending; equal scores keep original order."""
    if k < 1 or k > len(preds):
        raise KTooLarge(f"K={k} outside [1, {len(preds)}]")
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    return [preds[i] for i in order[:k]]


def top_n_ground_truths(gts, n: int) -> list[ScoredCrop]:
    """The N highest-MOS crops (ties by index), as an ordered list."""
    if n < 1 or n > len(gts):
        raise NTooLarge(f"N={n} outside [1, {len(gts)}]")
    order = sorted(range(len(gts)), key=lambda i: (-gts[i].mos, i))
    return [gts[i] for i in order[:n]]


def acc_k_n(examples, k: int, n: int, epsilon: float) -> float:
    """(1 / (T K)) sum_i sum_{j<=K} [ max_{g in S_i(N)} IoU(c_ij, g) >= eps ]."""
    if not (0.0 <= epsilon <= 1.0):
        raise OutOfRange(f"epsilon {epsilon} outside [0, 1]")
    examples = list(examples)
    if not examples:
        raise DimMismatch("acc_k_n needs at least one example")
    hits = 0
    for ex in examples:
        top_preds = top_k_predictions(ex.predictions, k)
        top_gts = top_n_ground_truths(ex.ground_truths, n)
        best = iou_matrix(boxes_array([p.box for p in top_preds]), boxes_array([g.box for g in top_gts])).max(axis=1)
        hits += int(np.count_nonzero(best >= epsilon))
    return hits / (len(examples) * k)


def acc_bar_n(examples, s_k, n: int, epsilon: float) -> float:
    """Mean of acc_k_n over K in s_k (default reporting uses {1,2,3,4})."""
    ks = list(s_k)
    if not ks:
        raise EmptySK("acc_bar_n: S_K is empty")
    return sum(acc_k_n(examples, k, n, epsilon) for k in ks) / len(ks)


@dataclass(frozen=True)
class MetricsReport:
    """Accuracy table for one evaluation run."""

    epsilon: float
    n_examples: int
    acc: dict  # {N: {K: value}}
    acc_bar: dict  # {N: value}

    def to_json(self) -> str:
        payload = {
            "epsilon": self.epsilon,
            "examples": self.n_examples,
            "acc": {str(n): {str(k): v for k, v in row.items()} for n, row in self.acc.items()},
            "acc_bar": {str(n): v for n, v in self.acc_bar.items()},
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def build_report(examples, ks=(1, 2, 3, 4), ns=(5, 10), epsilon: float = 0.90) -> MetricsReport:
    examples = list(examples)
    acc = {n: {k: acc_k_n(examples, k, n, epsilon) for k in ks} for n in ns}
    acc_bar = {n: acc_bar_n(examples, ks, n, epsilon) for n in ns}
    return MetricsReport(epsilon=epsilon, n_examples=len(examples), acc=acc, acc_bar=acc_bar)


def render_table(rows: list[tuple[str, MetricsReport]]) -> str:
    """Aligned text table: one row per labeled run, Acc_{K/N} columns."""
    if not rows:
        return ""
    ns = sorted(rows[0][1].acc.keys())
    ks = sorted(next(iter(rows[0][1].acc.values())).keys())
    headers = ["run"]
    for n in ns:
        headers += [f"Acc_{k}/{n}" for k in ks] + [f"AccBar_{n}"]
    table = [headers]
    for label, rep in rows:
        cells = [label]
        for n in ns:
            cells += [f"{rep.acc[n][k]:.4f}" for k in ks] + [f"{rep.acc_bar[n]:.4f}"]
        table.append(cells)
    widths = [max(len(row[i]) for row in table) for i in range(len(headers))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
