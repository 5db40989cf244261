import math

import numpy as np
import pytest

from hybridca.core.entity_model import CLASS_NAMES
from hybridca.core.errors import DegenerateDataError, DimensionError, ParameterError
from hybridca.evaluation.metrics import auc, mae, mse, multilabel_auc, pearson, r_squared


def test_regression_examples():
    y = [1.0, 2.0, 3.0]
    assert mae(y, y) == 0.0
    assert mse(y, y) == 0.0
    assert r_squared(y, y) == 1.0
    assert math.isclose(pearson(y, y), 1.0)
    assert mae([0.0, 0.0], [1.0, -3.0]) == 2.0
    assert mse([0.0, 0.0], [1.0, -3.0]) == 5.0
    assert r_squared(y, [1.0, 2.0, 4.0]) == 0.5
    assert r_squared(y, [2.0, 2.0, 2.0]) == 0.0
    assert math.isclose(pearson(y, [3.0, 2.0, 1.0]), -1.0)


def test_auc_examples():
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert auc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5


def test_pearson_is_affine_invariant(rng):
    for _ in range(50):
        y, yhat = rng.standard_normal(20), rng.standard_normal(20)
        a, b = rng.uniform(0.1, 10), rng.standard_normal()
        assert math.isclose(pearson(y, a * yhat + b), pearson(y, yhat), abs_tol=1e-12)
        assert math.isclose(pearson(y, -a * yhat + b), -pearson(y, yhat), abs_tol=1e-12)


def test_r_squared_of_least_squares_fit_is_squared_correlation(rng):
    for _ in range(50):
        x = rng.standard_normal(30)
        y = 2.0 * x + rng.standard_normal(30)
        slope, intercept = np.polyfit(x, y, 1)
        assert math.isclose(r_squared(y, slope * x + intercept), pearson(y, x) ** 2, abs_tol=1e-10)


def test_auc_matches_pair_counting(rng):
    for _ in range(1000):
        n = int(rng.integers(2, 30))
        labels = (rng.uniform(size=n) > 0.5).astype(float)
        labels[0], labels[1] = 0.0, 1.0
        scores = rng.integers(0, 5, size=n).astype(float)
        pos, neg = scores[labels == 1], scores[labels == 0]
        wins = sum((p > q) + 0.5 * (p == q) for p in pos for q in neg)
        assert math.isclose(auc(scores, labels), wins / (len(pos) * len(neg)), abs_tol=1e-12)


def test_mse_dominates_squared_mae(rng):
    for _ in range(100):
        n = int(rng.integers(1, 20))
        y, yhat = rng.standard_normal(n), rng.standard_normal(n)
        assert mse(y, yhat) >= mae(y, yhat) ** 2 - 1e-12


def test_degenerate_inputs():
    with pytest.raises(DegenerateDataError):
        r_squared([1.0, 1.0, 1.0], [0.0, 1.0, 2.0])
    with pytest.raises(DegenerateDataError):
        pearson([1.0, 2.0], [3.0, 3.0])
    with pytest.raises(DegenerateDataError):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(ParameterError):
        r_squared([1.0], [1.0])
    with pytest.raises(ParameterError):
        auc([0.1, 0.2], [0, 2])
    with pytest.raises(DimensionError):
        mae([1.0, 2.0], [1.0])


def test_multilabel_auc(rng):
    labels = (rng.uniform(size=(40, 15)) > 0.5).astype(float)
    labels[:, 3] = 0.0
    scores = labels + 0.1 * rng.standard_normal((40, 15))
    table = multilabel_auc(scores, labels)
    assert list(table) == [*CLASS_NAMES, "mean"]
    assert table[CLASS_NAMES[3]] is None
    assert table[CLASS_NAMES[0]] == 1.0
    assert table["mean"] == 1.0
    with pytest.raises(DimensionError):
        multilabel_auc(scores[:, :14], labels[:, :14])
