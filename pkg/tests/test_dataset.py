import json
import os

import numpy as np
import pytest

from tavrseg.dataset import *
from tavrseg.nifti_io import write_label_volume
from tavrseg.volume_common import *

import logging

logger = logging.getLogger(__name__)


def _write_case(path, classes):
    grid = VoxelGrid3((4, 4, 4))
    voxels = np.zeros(grid.dims, dtype=np.uint8)
    for k, c in enumerate(classes):
        voxels[k, 0, 0] = c
    write_label_volume(LabelVolume(grid, voxels), path)


def _write_manifest(tmp_path, cases, **extra):
    data = dict(format_version=MANIFEST_FORMAT_VERSION, cases=cases, **extra)
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(data))
    return path


@pytest.fixture
def dataset(tmp_path):
    (tmp_path / "labels").mkdir()
    _write_case(tmp_path / "labels" / "c1.nii.gz", [1, 2, 3])
    _write_case(tmp_path / "labels" / "c2.nii.gz", [1, 2, 6, 7])
    _write_case(tmp_path / "labels" / "c3.nii.gz", [1])
    cases = [
        dict(case_id="c1", label_path="labels/c1.nii.gz", split="train"),
        dict(case_id="c2", label_path="labels/c2.nii.gz", split="train"),
        dict(case_id="c3", label_path="labels/c3.nii.gz", split="test"),
    ]
    return _write_manifest(tmp_path, cases)


def test_parse_manifest_resolves_relative_paths(tmp_path):
    manifest = parse_manifest(
        {"cases": [{"case_id": 7, "label_path": "a.nii", "split": "val"}]}, tmp_path
    )
    (case,) = manifest.cases
    assert case == CaseEntry("7", tmp_path / "a.nii", Split.VAL)
    assert manifest.counts() == {Split.TRAIN: 0, Split.VAL: 1, Split.TEST: 0}


@pytest.mark.parametrize(
    "data",
    [
        [],
        {"format_version": 2, "cases": []},
        {"cases": [{"case_id": "a", "split": "train"}]},
        {"cases": [{"case_id": "a", "label_path": "a.nii", "split": "holdout"}]},
    ],
)
def test_parse_manifest_errors(data):
    with pytest.raises(ManifestError):
        parse_manifest(data)


def test_load_manifest(dataset):
    manifest = load_manifest(dataset)
    assert len(manifest) == 3
    assert manifest.source == dataset
    assert [c.case_id for c in manifest.in_split("train")] == ["c1", "c2"]
    assert all(c.label_path.exists() for c in manifest)


def test_load_manifest_checks(tmp_path, caplog):
    cases = [
        dict(case_id="a", label_path="a.nii", split="train"),
        dict(case_id="a", label_path="b.nii", split="test"),
    ]
    path = _write_manifest(tmp_path, cases)
    with pytest.raises(ManifestError, match="duplicate case ids: a"):
        load_manifest(path)

    with caplog.at_level(logging.WARNING):
        manifest = load_manifest(path, lenient=True)
    assert len(manifest) == 2
    assert "duplicate case ids" in caplog.text
    assert "missing label files" in caplog.text


def test_load_manifest_bad_json(tmp_path):
    path = tmp_path / "manifest.json"
    path.write_text("{not json")
    with pytest.raises(ManifestError, match="Cannot parse"):
        load_manifest(path)


def test_validate_manifest_census(dataset):
    result = validate_manifest(load_manifest(dataset))
    assert result.counts == {Split.TRAIN: 2, Split.VAL: 0, Split.TEST: 1}
    assert result.total == 3
    assert result.census[Split.TRAIN] == {1: 2, 2: 2, 3: 1, 4: 0, 5: 0, 6: 1, 7: 1}
    assert result.census[Split.TEST][TavrClass.AORTA] == 1
    assert result.census[Split.TEST][TavrClass.LEFT_VENTRICLE] == 0
    # c3 has no left ventricle
    assert result.excludable == ["c3"]
    assert not result.ok

    data = result.to_dict()
    assert data["counts"] == {"train": 2, "val": 0, "test": 1}
    assert data["census"]["train"]["6"] == 1
    assert data["ok"] is False


def test_validate_manifest_release_splits(dataset):
    result = validate_manifest(load_manifest(dataset), expect_release_splits=True)
    assert "split train has 2 cases, expected 378" in result.problems
    assert "split test has 1 cases, expected 100" in result.problems


def test_validate_unreadable_case(dataset, caplog):
    manifest = load_manifest(dataset)
    (dataset.parent / "labels" / "c1.nii.gz").write_bytes(b"not a volume")
    with caplog.at_level(logging.WARNING):
        result = validate_manifest(manifest)
    assert any(p.startswith("unreadable case c1") for p in result.problems)
    assert "Cannot read case c1" in caplog.text

    lenient = validate_manifest(manifest, lenient=True)
    assert not any("unreadable" in p for p in lenient.problems)
    assert lenient.census[Split.TRAIN][TavrClass.AORTIC_ROOT] == 0


def test_format_census(dataset):
    result = validate_manifest(load_manifest(dataset))
    lines = format_census(result.census).splitlines()
    assert lines[0].split()[0] == "Split"
    assert "Aorta" in lines[0]
    assert lines[1].split() == ["train", "2", "2", "1", "0", "0", "1", "1"]
    assert lines[3].split() == ["test", "1", "0", "0", "0", "0", "0", "0"]


@pytest.mark.skipif(
    "TAVRSEG_DATASET_MANIFEST" not in os.environ,
    reason="set TAVRSEG_DATASET_MANIFEST to check a full dataset",
)
def test_full_dataset_splits():
    manifest = load_manifest(os.environ["TAVRSEG_DATASET_MANIFEST"])
    assert manifest.counts() == RELEASE_SPLITS
    result = validate_manifest(manifest, expect_release_splits=True)
    logger.info("Census:\n%s", format_census(result.census))
    assert result.ok, result.problems
