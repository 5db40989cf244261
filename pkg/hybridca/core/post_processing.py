""" Functions that take cross-validation outputs and produce report files.

Each cross-validation run directory holds an ``aggregate.json`` (metric ->
mean/std/per-fold values) and a ``run_meta.json`` naming the report block
(backbone label) and the row label (experiment arm).
"""
from dataclasses import dataclass
import json
from pathlib import Path
from typing import Iterable, Union

import numpy as np
import pandas as pd
from loguru import logger as log
from schema import And, Or, Schema, SchemaError

from hybridca.core.errors import MergeError
from hybridca.evaluation.crossval import MetricSummary

# constants
AGGREGATE_NAME = "aggregate.json"
RUN_META_NAME = "run_meta.json"
DEFAULT_BLOCK = "default"
LOWER_IS_BETTER = ("mae", "mse")

_number = Or(int, float)
AGGREGATE_SCHEMA = Schema(
    And(
        {str: {"mean": _number, "std": _number, "per_fold": And([_number], len)}},
        len,
        error="aggregate must map metric names to mean, std and per_fold entries",
    )
)


@dataclass(frozen=True)
class AggregateEntry:
    block: str
    label: str
    metrics: dict[str, MetricSummary]


def find_aggregates(paths: Iterable[Path]) -> list[Path]:
    """Resolve files or directories (searched recursively) to aggregate JSON paths."""
    found: list[Path] = list()
    for path in map(Path, paths):
        if path.is_file():
            hits = [path]
        elif (path / AGGREGATE_NAME).is_file():
            hits = [path / AGGREGATE_NAME]
        else:
            hits = sorted(path.rglob(AGGREGATE_NAME))
        if not hits:
            raise MergeError(f"No {AGGREGATE_NAME} found under {path}")
        found.extend(hit for hit in hits if hit not in found)
    return found


def load_aggregate(path: Path) -> AggregateEntry:
    path = Path(path)
    try:
        doc = AGGREGATE_SCHEMA.validate(json.loads(path.read_text()))
    except (json.JSONDecodeError, SchemaError) as e:
        raise MergeError(f"{path}: {e}") from e
    meta_path = path.parent / RUN_META_NAME
    meta = json.loads(meta_path.read_text()) if meta_path.is_file() else dict()
    log.debug(f"Loaded {path} ({len(doc)} metrics)")
    return AggregateEntry(
        block=str(meta.get("block", DEFAULT_BLOCK)),
        label=str(meta.get("label", path.parent.name)),
        metrics={
            name: MetricSummary(
                mean=float(v["mean"]), std=float(v["std"]), per_fold=[float(x) for x in v["per_fold"]]
            )
            for name, v in doc.items()
        },
    )


def merge_aggregates(entries: list[AggregateEntry]) -> list[AggregateEntry]:
    """Pool entries sharing (block, label), e.g. several seeds of one arm.

    Pooled cells are recomputed over the concatenated per-fold values (sample std).
    Raises ``MergeError`` when the entries do not report the same metrics.
    """
    if not entries:
        raise MergeError("Nothing to merge")
    names = list(entries[0].metrics)
    for entry in entries[1:]:
        if set(entry.metrics) != set(names):
            raise MergeError(
                f"Inconsistent metric sets: {sorted(names)} vs {sorted(entry.metrics)} "
                f"({entry.block}/{entry.label})"
            )

    pooled: dict[tuple[str, str], dict[str, list[float]]] = dict()
    for entry in entries:
        cell = pooled.setdefault((entry.block, entry.label), {name: list() for name in names})
        for name in names:
            cell[name].extend(entry.metrics[name].per_fold)

    def summarise(values: list[float]) -> MetricSummary:
        std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
        return MetricSummary(mean=float(np.mean(values)), std=std, per_fold=values)

    return [
        AggregateEntry(block=block, label=label, metrics={n: summarise(v) for n, v in cell.items()})
        for (block, label), cell in pooled.items()
    ]


def best_cells(entries: list[AggregateEntry]) -> dict[tuple[str, str], str]:
    """(block, metric) -> label of the best row; lowest mean for error metrics, highest otherwise."""
    best: dict[tuple[str, str], str] = dict()
    for block in dict.fromkeys(e.block for e in entries):
        rows = [e for e in entries if e.block == block]
        for metric in rows[0].metrics:
            means = np.array([row.metrics[metric].mean for row in rows])
            index = int(np.argmin(means)) if metric in LOWER_IS_BETTER else int(np.argmax(means))
            best[(block, metric)] = rows[index].label
    return best


def report_tables(entries: list[AggregateEntry], digits: int = 3) -> dict[str, pd.DataFrame]:
    """One table per block: rows are labels, cells ``mean ± std`` with the best cell in bold."""
    best = best_cells(entries)
    tables = dict()
    for block in dict.fromkeys(e.block for e in entries):
        rows = [e for e in entries if e.block == block]
        records = dict()
        for row in rows:
            cells = dict()
            for metric, summary in row.metrics.items():
                cell = f"{summary.mean:.{digits}f} ± {summary.std:.{digits}f}"
                cells[metric] = f"**{cell}**" if best[(block, metric)] == row.label else cell
            records[row.label] = cells
        table = pd.DataFrame.from_dict(records, orient="index")
        table.index.name = "setting"
        tables[block] = table
    return tables


def render_report(entries: list[AggregateEntry]) -> str:
    return "\n\n".join(
        f"## {block}\n\n{table.to_markdown()}" for block, table in report_tables(entries).items()
    ) + "\n"


def write_report(inputs: Iterable[Union[str, Path]], out: Path) -> Path:
    paths = find_aggregates(inputs)
    entries = merge_aggregates([load_aggregate(path) for path in paths])
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(render_report(entries))
    log.info(f"Wrote report over {len(paths)} aggregates ({len(entries)} rows) to {out}")
    return out
