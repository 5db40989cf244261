""" Patient-grouped k-fold cross-validation of severity fine-tuning. """
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from loguru import logger as log

from hybridca.core.entity_model import ATTRIBUTES, Dataset
from hybridca.core.errors import DataError, ParameterError
from hybridca.evaluation.metrics import mae, mse, pearson, r_squared
from hybridca.nn.model import Checkpoint, ModelSpec, init, transplant
from hybridca.training.procedures import FinetuneConfig, LossTrace, finetune, mean_trace, predict_scores

METRIC_NAMES: tuple[str, ...] = ("mae", "mse") + tuple(
    f"{metric}_{attribute}" for attribute in ATTRIBUTES for metric in ("r2", "pearson")
)


@dataclass(frozen=True)
class Arm:
    """One cell column of the experiment matrix."""

    name: str
    attention_kind: str
    pretrained: bool = True


@dataclass(frozen=True)
class EvalConfig:
    k: int = 5
    seeds: tuple[int, ...] = (0,)
    arms: tuple[Arm, ...] = ()
    """ Empty means one arm built from the model section """

    def __post_init__(self):
        if self.k < 2:
            raise ParameterError(f"k must be at least 2, got {self.k}")
        if not self.seeds:
            raise ParameterError("At least one evaluation seed is needed")


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    folds: dict[str, int]
    """ sample_id -> fold index """

    def members(self, fold: int) -> list[str]:
        return [sample_id for sample_id, f in self.folds.items() if f == fold]


@dataclass(frozen=True)
class MetricReport:
    fold: int
    seed: int
    mae: float
    mse: float
    r2: dict[str, float]
    pearson: dict[str, float]

    def flat(self) -> dict[str, float]:
        values = {"mae": self.mae, "mse": self.mse}
        for attribute in ATTRIBUTES:
            values[f"r2_{attribute}"] = self.r2[attribute]
            values[f"pearson_{attribute}"] = self.pearson[attribute]
        return values


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    std: float
    per_fold: list[float]


AggregateReport = dict[str, MetricSummary]


@dataclass
class CrossValResult:
    reports: list[MetricReport]
    aggregate: AggregateReport
    predictions: pd.DataFrame
    traces: list[LossTrace] = field(default_factory=list)


#########################################################################
# SPLITS
#########################################################################


def _patients(samples: Sequence[tuple[str, str]]) -> tuple[list[str], Counter]:
    order = list(dict.fromkeys(patient for _, patient in samples))
    return order, Counter(patient for _, patient in samples)


def kfold_split(samples: Sequence[tuple[str, str]], k: int, seed: int) -> FoldAssignment:
    """Shuffle patients by seed, order them by descending sample count, deal them round-robin.

    :param samples: (sample_id, patient_id) pairs
    """
    if k < 2:
        raise ParameterError(f"k must be at least 2, got {k}")
    patients, counts = _patients(samples)
    if len(patients) < k:
        raise DataError(f"{len(patients)} distinct patients cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    shuffled = [patients[i] for i in rng.permutation(len(patients))]
    ranked = sorted(shuffled, key=lambda p: -counts[p])
    patient_fold = {patient: i % k for i, patient in enumerate(ranked)}
    return FoldAssignment(k=k, folds={sample_id: patient_fold[patient] for sample_id, patient in samples})


def holdout_split(
    samples: Sequence[tuple[str, str]], fraction: float, seed: int
) -> tuple[list[str], list[str]]:
    """Patient-grouped (train_ids, held_out_ids) with about ``fraction`` of samples held out."""
    if not 0 <= fraction < 1:
        raise ParameterError(f"fraction must be in [0, 1), got {fraction}")
    patients, counts = _patients(samples)
    rng = np.random.default_rng(seed)
    budget = fraction * len(samples)
    held: set[str] = set()
    taken = 0
    for i in rng.permutation(len(patients)):
        if taken >= budget or len(held) == len(patients) - 1:
            break
        held.add(patients[i])
        taken += counts[patients[i]]
    train = [s for s, p in samples if p not in held]
    return train, [s for s, p in samples if p in held]


#########################################################################
# CROSS-VALIDATION
#########################################################################


def evaluate_fold(fold: int, seed: int, sample_ids: list[str], actual: np.ndarray, predicted: np.ndarray):
    report = MetricReport(
        fold=fold,
        seed=seed,
        mae=mae(actual, predicted),
        mse=mse(actual, predicted),
        r2={a: r_squared(actual[:, j], predicted[:, j]) for j, a in enumerate(ATTRIBUTES)},
        pearson={a: pearson(actual[:, j], predicted[:, j]) for j, a in enumerate(ATTRIBUTES)},
    )
    rows = [
        {
            "fold": fold,
            "sample_id": sample_id,
            "attribute": attribute,
            "actual": actual[i, j],
            "predicted": predicted[i, j],
        }
        for i, sample_id in enumerate(sample_ids)
        for j, attribute in enumerate(ATTRIBUTES)
    ]
    return report, pd.DataFrame(rows)


def _run_fold(
    fold: int,
    spec: ModelSpec,
    dataset: Dataset,
    assignment: FoldAssignment,
    pretrain_ckpt: Optional[Checkpoint],
    cfg: FinetuneConfig,
    seed: int,
):
    fold_seed = seed * 1000 + fold
    held_ids = assignment.members(fold)
    held = dataset.subset(held_ids)
    train = dataset.subset(set(dataset.sample_ids) - set(held_ids))
    log.info(f"Fold {fold}/{assignment.k}: {len(train)} train, {len(held)} held out")

    if pretrain_ckpt is not None:
        start = transplant(pretrain_ckpt, "severity_2", seed=fold_seed)
    else:
        start = init(replace(spec, head_kind="severity_2"), seed=fold_seed)
    tuned, trace = finetune(start, train, replace(cfg, seed=fold_seed), val=held)
    report, predictions = evaluate_fold(
        fold, seed, held.sample_ids, held.labels(), predict_scores(tuned, held)
    )
    log.info(f"Fold {fold} done: mae {report.mae:.4f} mse {report.mse:.4f}")
    return report, predictions, trace


def aggregate(reports: list[MetricReport]) -> AggregateReport:
    """Mean and sample (n-1) standard deviation of every metric across folds."""
    table = pd.DataFrame([r.flat() for r in reports])
    return {
        name: MetricSummary(
            mean=float(table[name].mean()),
            std=float(table[name].std(ddof=1)) if len(table) > 1 else 0.0,
            per_fold=[float(v) for v in table[name]],
        )
        for name in METRIC_NAMES
    }


def crossval(
    spec: ModelSpec,
    dataset: Dataset,
    pretrain_ckpt: Optional[Checkpoint],
    cfg: FinetuneConfig,
    k: int = 5,
    seed: int = 0,
    jobs: int = 1,
) -> CrossValResult:
    """Fine-tune and evaluate once per fold; folds may run in ``jobs`` worker processes.

    Each fold starts from ``pretrain_ckpt`` transplanted to the severity head, or
    from a fresh initialisation when no checkpoint is given. Results are ordered
    by fold index whatever the completion order.
    """
    if dataset.kind != "target":
        raise DataError("Cross-validation needs a target dataset")
    assignment = kfold_split(list(zip(dataset.sample_ids, dataset.patient_ids)), k, seed)
    args = [(fold, spec, dataset, assignment, pretrain_ckpt, cfg, seed) for fold in range(k)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_fold, *zip(*args)))
    else:
        outcomes = [_run_fold(*a) for a in args]

    reports = [o[0] for o in outcomes]
    return CrossValResult(
        reports=reports,
        aggregate=aggregate(reports),
        predictions=pd.concat([o[1] for o in outcomes], ignore_index=True),
        traces=[o[2] for o in outcomes],
    )


def write_crossval_outputs(result: CrossValResult, directory: Path, run_meta: dict) -> Path:
    """predictions.csv, folds.csv, aggregate.json, run_meta.json, cv_loss.csv, loss_fold<i>.csv"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    result.predictions.to_csv(directory / "predictions.csv", index=False)
    pd.DataFrame([{"fold": r.fold, "seed": r.seed} | r.flat() for r in result.reports]).to_csv(
        directory / "folds.csv", index=False
    )
    (directory / "aggregate.json").write_text(
        json.dumps({name: asdict(summary) for name, summary in result.aggregate.items()}, indent=2)
    )
    (directory / "run_meta.json").write_text(json.dumps(run_meta, indent=2, sort_keys=True))
    for fold, trace in enumerate(result.traces):
        trace.write_csv(directory / f"loss_fold{fold}.csv")
    if result.traces:
        mean_trace(result.traces).to_csv(directory / "cv_loss.csv", index=False)
    log.info(f"Wrote cross-validation outputs to {directory}")
    return directory
