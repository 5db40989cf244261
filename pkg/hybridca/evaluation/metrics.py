""" Regression and ranking metrics.

Degenerate inputs (constant vectors, single-class labels) raise
``DegenerateDataError`` instead of returning NaN.
"""
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from hybridca.core.entity_model import CLASS_NAMES
from hybridca.core.errors import DegenerateDataError, DimensionError, ParameterError


def _pair(y, yhat, min_length: int = 1) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.shape != yhat.shape:
        raise DimensionError(f"Metric inputs differ in length: {y.size} vs {yhat.size}")
    if y.size < min_length:
        raise ParameterError(f"Metric needs at least {min_length} values, got {y.size}")
    return y, yhat


def mae(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def mse(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean((y - yhat) ** 2))


def r_squared(y, yhat) -> float:
    """1 - SS_res / SS_tot"""
    y, yhat = _pair(y, yhat, min_length=2)
    ss_tot = np.sum((y - y.mean()) ** 2)
    if ss_tot == 0:
        raise DegenerateDataError("R-squared is undefined for a constant target")
    return float(1.0 - np.sum((y - yhat) ** 2) / ss_tot)


def pearson(y, yhat) -> float:
    y, yhat = _pair(y, yhat, min_length=2)
    dy, dyhat = y - y.mean(), yhat - yhat.mean()
    norm = np.sqrt(np.sum(dy**2) * np.sum(dyhat**2))
    if norm == 0:
        raise DegenerateDataError("Pearson correlation is undefined for a constant input")
    return float(np.clip(np.sum(dy * dyhat) / norm, -1.0, 1.0))


def auc(scores, labels) -> float:
    """Mann-Whitney estimate of P(score+ > score-) + 0.5 P(tie), from average ranks."""
    scores, labels = _pair(scores, labels)
    if not np.isin(labels, (0.0, 1.0)).all():
        raise ParameterError("AUC labels must be binary")
    positive = labels == 1.0
    n_pos, n_neg = int(positive.sum()), int((~positive).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateDataError("AUC needs both positive and negative labels")
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def multilabel_auc(
    scores: np.ndarray, labels: np.ndarray, class_names: Sequence[str] = CLASS_NAMES
) -> dict[str, Optional[float]]:
    """Per-class AUC plus their ``mean``; single-class columns map to None and skip the mean."""
    scores, labels = np.asarray(scores), np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2 or scores.shape[1] != len(class_names):
        raise DimensionError(
            f"Expected [N, {len(class_names)}] scores and labels, got {scores.shape} and {labels.shape}"
        )
    table: dict[str, Optional[float]] = dict()
    for j, name in enumerate(class_names):
        try:
            table[name] = auc(scores[:, j], labels[:, j])
        except DegenerateDataError:
            table[name] = None
    present = [v for v in table.values() if v is not None]
    table["mean"] = float(np.mean(present)) if present else None
    return table
