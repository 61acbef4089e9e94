"""Evaluation statistics: overlap, detection rates, ROC AUC, density error."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .volume import BinaryMask, InvalidArgumentError, check_same_grid


@dataclass(frozen=True)
class EvalStats:
    sensitivity: float
    specificity: float
    auc: float
    dice_mean: float
    density_err_std_hu: float
    density_err_p95_hu: float
    density_err_max_hu: float
    n_studies: int = 0
    n_skipped: int = 0

    FIELDS = (
        "sensitivity",
        "specificity",
        "auc",
        "dice_mean",
        "density_err_std_hu",
        "density_err_p95_hu",
        "density_err_max_hu",
        "n_studies",
        "n_skipped",
    )

    def render(self) -> str:
        lines = []
        for name in self.FIELDS:
            v = getattr(self, name)
            if isinstance(v, int):
                lines.append(f"{name} = {v}")
            elif isinstance(v, float) and math.isnan(v):
                lines.append(f"{name} = nan")
            else:
                lines.append(f"{name} = {v:.6f}")
        return "\n".join(lines) + "\n"


def dice_bits(a: np.ndarray, b: np.ndarray) -> float:
    sa, sb = int(a.sum()), int(b.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / (sa + sb)


def dice(a: BinaryMask, b: BinaryMask) -> float:
    check_same_grid(a, b)
    return dice_bits(a.bits, b.bits)


def _labels(labels) -> np.ndarray:
    return np.asarray([bool(x) for x in labels], dtype=bool)


def roc_auc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """Mann-Whitney AUC: P(positive outscores negative), ties count one half."""
    s = np.asarray(scores, dtype=float)
    y = _labels(labels)
    if s.shape != y.shape:
        raise InvalidArgumentError("scores and labels differ in length")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise InvalidArgumentError("roc_auc needs both positive and negative labels")
    ranks = rankdata(s)  # average ranks give the half credit for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def sens_spec(detections: Sequence[bool], labels: Sequence[bool]) -> Tuple[float, float]:
    d = _labels(detections)
    y = _labels(labels)
    if d.shape != y.shape:
        raise InvalidArgumentError("detections and labels differ in length")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise InvalidArgumentError("sens_spec needs both classes present")
    tp = int((d & y).sum())
    tn = int((~d & ~y).sum())
    return tp / n_pos, tn / n_neg


def sensitivity(detections: Sequence[bool], labels: Sequence[bool]) -> float:
    d, y = _labels(detections), _labels(labels)
    if not y.any():
        raise InvalidArgumentError("no positive labels")
    return int((d & y).sum()) / int(y.sum())


def nearest_rank(values: Sequence[float], pct: float) -> float:
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise InvalidArgumentError("empty sample")
    k = max(1, int(math.ceil(pct / 100.0 * v.size)))
    return float(v[k - 1])


def density_error_stats(pred_means: Sequence[float], truth_means: Sequence[float]) -> Tuple[float, float, float]:
    """(deviation from truth, nearest-rank p95 |error|, max |error|).

    The deviation is taken about the reference (zero error), not about the
    mean error, with N in the denominator: sqrt(mean(err^2)).
    """
    p = np.asarray(pred_means, dtype=float)
    t = np.asarray(truth_means, dtype=float)
    if p.shape != t.shape:
        raise InvalidArgumentError("pred and truth differ in length")
    if p.size == 0:
        raise InvalidArgumentError("empty input")
    err = p - t
    a = np.abs(err)
    return float(np.sqrt(np.mean(err * err))), nearest_rank(a, 95.0), float(a.max())
