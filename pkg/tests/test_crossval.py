import json
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from hybridca.core.errors import DataError, ParameterError
from hybridca.evaluation.crossval import (
    METRIC_NAMES,
    MetricReport,
    aggregate,
    crossval,
    holdout_split,
    kfold_split,
    write_crossval_outputs,
)
from hybridca.nn.model import init
from hybridca.training.procedures import FinetuneConfig


def _cohort(rng, n_patients):
    samples = list()
    for p in range(n_patients):
        for s in range(int(rng.integers(1, 4))):
            samples.append((f"p{p}-s{s}", f"p{p}"))
    return samples


def test_one_sample_per_patient_fold_sizes():
    samples = [(f"s{i}", f"p{i}") for i in range(94)]
    assignment = kfold_split(samples, k=5, seed=0)
    assert sorted((len(assignment.members(f)) for f in range(5)), reverse=True) == [19, 19, 19, 19, 18]


def test_folds_partition_and_keep_patients_together(rng):
    for seed in range(1000):
        samples = _cohort(rng, int(rng.integers(5, 40)))
        assignment = kfold_split(samples, k=5, seed=seed)
        members = [set(assignment.members(f)) for f in range(5)]
        assert set().union(*members) == {s for s, _ in samples}
        assert sum(len(m) for m in members) == len(samples)
        patient_folds = dict()
        for sample_id, patient in samples:
            assert patient_folds.setdefault(patient, assignment.folds[sample_id]) == assignment.folds[sample_id]


def test_kfold_split_is_seeded(rng):
    samples = _cohort(rng, 30)
    assert kfold_split(samples, 3, seed=4) == kfold_split(samples, 3, seed=4)
    assert kfold_split(samples, 3, seed=4) != kfold_split(samples, 3, seed=5)


def test_kfold_split_errors():
    with pytest.raises(DataError):
        kfold_split([("a", "p"), ("b", "p"), ("c", "p")], k=2, seed=0)
    with pytest.raises(ParameterError):
        kfold_split([("a", "p"), ("b", "q")], k=1, seed=0)


def test_holdout_split(rng):
    samples = _cohort(rng, 20)
    train, held = holdout_split(samples, fraction=0.3, seed=1)
    assert sorted(train + held) == sorted(s for s, _ in samples)
    patients = dict((s, p) for s, p in samples)
    assert not {patients[s] for s in train} & {patients[s] for s in held}
    assert len(held) >= 0.3 * len(samples)
    assert holdout_split(samples, fraction=0.0, seed=1) == ([s for s, _ in samples], [])
    with pytest.raises(ParameterError):
        holdout_split(samples, fraction=1.0, seed=1)


def test_aggregate_uses_sample_deviation():
    reports = [
        MetricReport(fold=f, seed=0, mae=v, mse=v, r2={"geographic_extend": v, "opacity": v}, pearson={"geographic_extend": v, "opacity": v})
        for f, v in enumerate((1.0, 2.0, 3.0))
    ]
    summary = aggregate(reports)
    assert set(summary) == set(METRIC_NAMES)
    assert summary["mae"].mean == 2.0
    assert summary["mae"].std == 1.0
    assert summary["r2_opacity"].per_fold == [1.0, 2.0, 3.0]


@pytest.fixture
def baseline_spec(small_spec):
    return replace(small_spec, attention_kind="none")


def test_crossval_on_small_cohort(baseline_spec, tiny_target, tmp_path):
    cfg = FinetuneConfig(lr=1e-2, epochs=1, batch_size=4)
    result = crossval(baseline_spec, tiny_target, None, cfg, k=2, seed=0)
    assert [r.fold for r in result.reports] == [0, 1]
    assert len(result.predictions) == 2 * len(tiny_target)
    assert set(result.predictions["sample_id"]) == set(tiny_target.sample_ids)
    assert all(len(trace) == 1 for trace in result.traces)

    again = crossval(baseline_spec, tiny_target, None, cfg, k=2, seed=0)
    assert all(result.aggregate[m].mean == again.aggregate[m].mean for m in METRIC_NAMES)

    out = write_crossval_outputs(result, tmp_path / "cv", {"arm": "cnn-random-init"})
    for name in ("predictions.csv", "folds.csv", "aggregate.json", "run_meta.json", "cv_loss.csv", "loss_fold1.csv"):
        assert (out / name).is_file()
    assert set(json.loads((out / "aggregate.json").read_text())) == set(METRIC_NAMES)
    assert len(pd.read_csv(out / "folds.csv")) == 2


def test_crossval_from_checkpoint(small_spec, tiny_target):
    ckpt = replace(init(small_spec, seed=0), phase="pretrained")
    result = crossval(small_spec, tiny_target, ckpt, FinetuneConfig(lr=1e-2, epochs=1, batch_size=6), k=2, seed=1)
    assert len(result.reports) == 2
    assert np.isfinite(result.predictions["predicted"]).all()


def test_crossval_needs_target_data(baseline_spec, tiny_proxy):
    with pytest.raises(DataError):
        crossval(baseline_spec, tiny_proxy, None, FinetuneConfig(epochs=1), k=2)
