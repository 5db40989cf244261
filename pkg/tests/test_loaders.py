from pathlib import Path

import numpy as np
import pytest

from hybridca.core.errors import DataError
from hybridca.core.loaders import load_manifest, write_manifest
from hybridca.data.synthetic import synth_proxy, synth_target


def _rewrite_row(manifest: Path, row: int, column: str, value: str, preamble: int):
    lines = manifest.read_text().splitlines()
    header = lines[preamble].split(",")
    fields = lines[preamble + row].split(",")
    fields[header.index(column)] = value
    lines[preamble + row] = ",".join(fields)
    manifest.write_text("\n".join(lines) + "\n")


def test_target_round_trip(tmp_path):
    dataset = synth_target(seed=5, n_samples=3, geometry=(1, 8, 8), score_ranges={"geographic_extend": (0.0, 5.0), "opacity": (1.0, 4.0)})
    manifest = write_manifest(dataset, tmp_path / "target")
    assert manifest.read_text().startswith("# kind: target\n# score_ranges: geographic_extend=0:5;opacity=1:4\n")
    loaded = load_manifest(manifest)
    assert loaded.kind == "target"
    assert loaded.sample_ids == dataset.sample_ids
    assert loaded.patient_ids == dataset.patient_ids
    assert loaded.score_ranges == dataset.score_ranges
    assert np.array_equal(loaded.images(), dataset.images())
    assert np.array_equal(loaded.labels(), dataset.labels())


def test_proxy_round_trip(tmp_path):
    dataset = synth_proxy(seed=6, n_samples=5, geometry=(1, 8, 8))
    loaded = load_manifest(write_manifest(dataset, tmp_path))
    assert loaded.kind == "proxy"
    assert np.array_equal(loaded.labels(), dataset.labels())


def test_manifest_without_rows(tmp_path):
    path = tmp_path / "manifest.csv"
    path.write_text("# kind: proxy\n")
    with pytest.raises(DataError, match="no samples"):
        load_manifest(path)
    path.write_text("# kind: target\nsample_id,patient_id,tensor_path,label_0,label_1\n")
    with pytest.raises(DataError, match="no samples"):
        load_manifest(path)


def test_manifest_without_kind(tmp_path):
    path = tmp_path / "manifest.csv"
    path.write_text("sample_id,patient_id,tensor_path,label_0,label_1\n")
    with pytest.raises(DataError, match="kind"):
        load_manifest(path)


def test_duplicate_sample_id_reports_row(tmp_path):
    manifest = write_manifest(synth_proxy(seed=1, n_samples=8, geometry=(1, 8, 8)), tmp_path)
    _rewrite_row(manifest, 7, "sample_id", "proxy-1-00000", preamble=1)
    with pytest.raises(DataError, match="row 7") as excinfo:
        load_manifest(manifest)
    assert excinfo.value.row == 7


def test_missing_tensor_reports_row(tmp_path):
    dataset = synth_target(seed=1, n_samples=3, geometry=(1, 8, 8))
    manifest = write_manifest(dataset, tmp_path)
    (tmp_path / "tensors" / f"{dataset.sample_ids[1]}.hcat").unlink()
    with pytest.raises(DataError, match="missing tensor") as excinfo:
        load_manifest(manifest)
    assert excinfo.value.row == 2


def test_unreadable_tensor(tmp_path):
    dataset = synth_target(seed=1, n_samples=2, geometry=(1, 8, 8))
    manifest = write_manifest(dataset, tmp_path)
    (tmp_path / "tensors" / f"{dataset.sample_ids[0]}.hcat").write_bytes(b"HCAT\x01")
    with pytest.raises(DataError, match="unreadable"):
        load_manifest(manifest)


def test_non_binary_proxy_label(tmp_path):
    manifest = write_manifest(synth_proxy(seed=1, n_samples=3, geometry=(1, 8, 8)), tmp_path)
    _rewrite_row(manifest, 2, "label_4", "0.5", preamble=1)
    with pytest.raises(DataError, match="schema"):
        load_manifest(manifest)


def test_target_score_outside_range(tmp_path):
    manifest = write_manifest(synth_target(seed=1, n_samples=3, geometry=(1, 8, 8)), tmp_path)
    _rewrite_row(manifest, 3, "label_1", "9.5", preamble=2)
    with pytest.raises(DataError, match="row 3"):
        load_manifest(manifest)
