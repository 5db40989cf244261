""" Training losses and proxy label encoding. Both losses return a scalar mean. """
from typing import Iterable

import numpy as np

from hybridca.core.autodiff import Tensor, apply, as_tensor
from hybridca.core.entity_model import CLASS_NAMES
from hybridca.core.errors import DataError, DimensionError, ParameterError

PROB_CLAMP = 1e-7


def smooth_l1(y: Tensor, yhat: Tensor, beta: float = 1.0) -> Tensor:
    """0.5 (y - yhat)^2 / beta where |y - yhat| < beta, else |y - yhat| - 0.5 beta."""
    if not beta > 0:
        raise ParameterError(f"smooth_l1 beta must be positive, got {beta}")
    y, yhat = as_tensor(y), as_tensor(yhat)
    if y.shape != yhat.shape:
        raise DimensionError(f"smooth_l1 shapes differ: {y.shape} vs {yhat.shape}")
    diff = yhat.data - y.data
    size = max(diff.size, 1)
    magnitude = np.abs(diff)
    quadratic = magnitude < beta
    per_element = np.where(quadratic, 0.5 * diff**2 / beta, magnitude - 0.5 * beta)

    def vjp(g):
        slope = g * np.where(quadratic, diff / beta, np.sign(diff)) / size
        return -slope, slope

    return apply("smooth_l1", per_element.mean(), (y, yhat), vjp)


def bce_multilabel(probs: Tensor, target: Tensor) -> Tensor:
    """Binary cross-entropy averaged over every entry; probabilities clamped to [1e-7, 1 - 1e-7]."""
    probs, target = as_tensor(probs), as_tensor(target)
    if probs.shape != target.shape:
        raise DimensionError(f"bce shapes differ: {probs.shape} vs {target.shape}")
    t = target.data
    if not np.isin(t, (0.0, 1.0)).all():
        raise DataError("multi-label targets must be binary")
    raw = probs.data
    p = np.clip(raw, PROB_CLAMP, 1.0 - PROB_CLAMP)
    inside = (raw > PROB_CLAMP) & (raw < 1.0 - PROB_CLAMP)
    per_element = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))

    def vjp(g):
        return (g * inside * (-t / p + (1.0 - t) / (1.0 - p)) / max(p.size, 1), None)

    return apply("bce", per_element.mean(), (probs, target), vjp)


def label_encode(present: Iterable[int]) -> Tensor:
    """Indicator vector over the 15 proxy classes; the empty set is the normal case."""
    labels = np.zeros(len(CLASS_NAMES))
    for index in present:
        if not (isinstance(index, (int, np.integer)) and 0 <= index < len(CLASS_NAMES)):
            raise DataError(f"class index {index!r} outside 0..{len(CLASS_NAMES) - 1}")
        labels[index] = 1.0
    return Tensor(labels)
