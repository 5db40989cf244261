""" Manifest reading and writing.

A manifest is a CSV file with a short ``#`` preamble::

    # kind: target
    # score_ranges: geographic_extend=0:8;opacity=0:6
    sample_id,patient_id,tensor_path,label_0,label_1
    target-2-00000,target-2-p00000,tensors/target-2-00000.hcat,3.1,2.4

Tensor paths are resolved against the manifest's directory. Row numbers in
errors count data rows from 1.
"""
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
import pandera as pa
from loguru import logger as log

from hybridca.config.schemas import manifest_schema
from hybridca.core.entity_model import ATTRIBUTES, LABEL_ARITY, Dataset, Sample
from hybridca.core.errors import DataError, FormatError
from hybridca.core.files.tensor_file import load_tensor, save_tensor

MANIFEST_NAME = "manifest.csv"
TENSOR_DIR = "tensors"


def _parse_preamble(path: Path) -> tuple[dict[str, str], int]:
    meta: dict[str, str] = dict()
    n_lines = 0
    with open(path, "r") as f:
        for line in f:
            if not line.startswith("#"):
                break
            n_lines += 1
            key, sep, value = line[1:].partition(":")
            if sep:
                meta[key.strip()] = value.strip()
    return meta, n_lines


def _parse_score_ranges(raw: str) -> dict[str, tuple[float, float]]:
    ranges = dict()
    try:
        for item in raw.split(";"):
            attribute, bounds = item.split("=")
            lo, hi = bounds.split(":")
            ranges[attribute.strip()] = (float(lo), float(hi))
    except ValueError as exc:
        raise DataError(f"malformed score_ranges '{raw}'") from exc
    return ranges


def _format_score_ranges(ranges: dict[str, tuple[float, float]]) -> str:
    return ";".join(f"{a}={ranges[a][0]:g}:{ranges[a][1]:g}" for a in ATTRIBUTES)


def _failure_row(exc: pa.errors.SchemaError) -> Optional[int]:
    cases = getattr(exc, "failure_cases", None)
    if isinstance(cases, pd.DataFrame) and "index" in cases.columns:
        indices = pd.to_numeric(cases["index"], errors="coerce").dropna()
        if len(indices):
            return int(indices.min()) + 1
    return None


def load_manifest(path: Path) -> Dataset:
    path = Path(path)
    log.info(f"Loading manifest from {path}")
    meta, n_preamble = _parse_preamble(path)
    kind = meta.get("kind")
    if kind not in LABEL_ARITY:
        raise DataError(f"manifest preamble must declare '# kind: proxy' or '# kind: target', got {kind!r}")

    try:
        df = pd.read_csv(
            path,
            skiprows=n_preamble,
            dtype={"sample_id": str, "patient_id": str, "tensor_path": str},
        )
    except pd.errors.EmptyDataError as exc:
        raise DataError("no samples") from exc
    if df.empty:
        raise DataError("no samples")

    try:
        df = manifest_schema(kind).validate(df)
    except pa.errors.SchemaError as exc:
        raise DataError(f"manifest schema violation: {str(exc).splitlines()[0]}", row=_failure_row(exc)) from exc

    duplicated = df["sample_id"].duplicated()
    if duplicated.any():
        row = int(np.flatnonzero(duplicated.to_numpy())[0]) + 1
        raise DataError(f"duplicate sample_id '{df['sample_id'].iloc[row - 1]}'", row=row)

    label_columns = [f"label_{i}" for i in range(LABEL_ARITY[kind])]
    samples = list()
    for row, record in enumerate(df.itertuples(index=False), start=1):
        tensor_path = path.parent / record.tensor_path
        if not tensor_path.is_file():
            raise DataError(f"missing tensor file {tensor_path}", row=row)
        try:
            image = load_tensor(tensor_path).numpy()
        except FormatError as exc:
            raise DataError(f"unreadable tensor file {tensor_path}: {exc}", row=row) from exc
        samples.append(
            Sample(
                sample_id=record.sample_id,
                patient_id=record.patient_id,
                image=image,
                labels=np.array([getattr(record, c) for c in label_columns], dtype=np.float64),
            )
        )

    score_ranges = None
    if kind == "target" and "score_ranges" in meta:
        score_ranges = _parse_score_ranges(meta["score_ranges"])
    dataset = Dataset(kind=kind, samples=samples, score_ranges=score_ranges)
    log.info(f"Loaded {len(dataset)} {kind} samples")
    return dataset


def write_manifest(dataset: Dataset, directory: Path) -> Path:
    """Write one tensor file per sample plus ``manifest.csv`` into ``directory``."""
    directory = Path(directory)
    (directory / TENSOR_DIR).mkdir(parents=True, exist_ok=True)
    records = list()
    for sample in dataset.samples:
        relative = f"{TENSOR_DIR}/{sample.sample_id}.hcat"
        save_tensor(sample.image, directory / relative)
        record = {
            "sample_id": sample.sample_id,
            "patient_id": sample.patient_id,
            "tensor_path": relative,
        }
        record |= {f"label_{i}": float(v) for i, v in enumerate(sample.labels)}
        records.append(record)

    preamble = [f"# kind: {dataset.kind}"]
    if dataset.kind == "target":
        preamble.append(f"# score_ranges: {_format_score_ranges(dataset.score_ranges)}")
    manifest_path = directory / MANIFEST_NAME
    with open(manifest_path, "w") as f:
        f.write("\n".join(preamble) + "\n")
        pd.DataFrame.from_records(records).to_csv(f, index=False)
    log.info(f"Wrote {len(records)} row manifest to {manifest_path}")
    return manifest_path
