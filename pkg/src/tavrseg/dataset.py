"""Dataset manifests: case ids, label paths and train/val/test splits."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
import enum
import json
import logging
import os
from pathlib import Path
import typing as tp

from .enrich import EnrichConfig
from .metrics import display_name
from .nifti_io import LabelVolumeReader
from .volume_common import TAVR_CLASS_MAP, ClassMap

_logger = logging.getLogger(__name__)

__all__ = [
    "Split",
    "CaseEntry",
    "DatasetManifest",
    "DatasetValidation",
    "ManifestError",
    "MANIFEST_FORMAT_VERSION",
    "RELEASE_SPLITS",
    "parse_manifest",
    "load_manifest",
    "validate_manifest",
    "format_census",
]

MANIFEST_FORMAT_VERSION = 1


class ManifestError(ValueError):
    """The manifest is malformed or fails its checks."""


@enum.unique
class Split(str, enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


# Published split sizes of the enriched dataset (578 cases in total)
RELEASE_SPLITS = {Split.TRAIN: 378, Split.VAL: 100, Split.TEST: 100}


@dataclass(frozen=True)
class CaseEntry:
    case_id: str
    label_path: Path
    split: Split


@dataclass
class DatasetManifest:
    cases: list[CaseEntry]
    format_version: int = MANIFEST_FORMAT_VERSION
    source: tp.Optional[Path] = None

    def __len__(self) -> int:
        return len(self.cases)

    def __iter__(self) -> tp.Iterator[CaseEntry]:
        return iter(self.cases)

    def counts(self) -> dict[Split, int]:
        counter = Counter(case.split for case in self.cases)
        return {split: counter.get(split, 0) for split in Split}

    def duplicate_ids(self) -> list[str]:
        counter = Counter(case.case_id for case in self.cases)
        return sorted(case_id for case_id, n in counter.items() if n > 1)

    def missing_paths(self) -> list[CaseEntry]:
        return [case for case in self.cases if not case.label_path.exists()]

    def in_split(self, split: tp.Union[Split, str]) -> list[CaseEntry]:
        split = Split(split)
        return [case for case in self.cases if case.split == split]


def parse_manifest(data: dict, base_dir: tp.Optional[Path] = None) -> DatasetManifest:
    """Build a manifest from decoded JSON; relative paths resolve against `base_dir`."""
    if not isinstance(data, dict) or "cases" not in data:
        raise ManifestError("Manifest must be an object with a 'cases' list")
    version = data.get("format_version", MANIFEST_FORMAT_VERSION)
    if version != MANIFEST_FORMAT_VERSION:
        raise ManifestError("Unsupported manifest format_version %r" % version)

    cases = []
    for k, entry in enumerate(data["cases"]):
        try:
            path = Path(entry["label_path"])
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            cases.append(CaseEntry(str(entry["case_id"]), path, Split(entry["split"])))
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestError("Invalid manifest case #%d: %s" % (k, e)) from e
    return DatasetManifest(cases, version)


def load_manifest(
    path: tp.Union[str, os.PathLike], lenient: bool = False
) -> DatasetManifest:
    """Load a manifest, checking ids are unique and label files exist.

    With `lenient`, failed checks are logged as warnings instead.

    """
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ManifestError("Cannot parse manifest %s: %s" % (path, e)) from e
    manifest = parse_manifest(data, path.parent)
    manifest.source = path

    problems = []
    if duplicates := manifest.duplicate_ids():
        problems.append("duplicate case ids: %s" % ", ".join(duplicates))
    if missing := manifest.missing_paths():
        problems.append(
            "missing label files: %s" % ", ".join(str(c.label_path) for c in missing)
        )
    for problem in problems:
        if not lenient:
            raise ManifestError("Manifest %s: %s" % (path, problem))
        _logger.warning("Manifest %s: %s", path, problem)
    _logger.info("Loaded manifest %s with %d cases", path, len(manifest))
    return manifest


@dataclass
class DatasetValidation:
    counts: dict[Split, int]
    census: dict[Split, dict[int, int]]
    problems: list[str] = field(default_factory=list)
    excludable: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "counts": {s.value: n for s, n in self.counts.items()},
            "total": self.total,
            "census": {
                s.value: {str(c): n for c, n in per_class.items()}
                for s, per_class in self.census.items()
            },
            "problems": list(self.problems),
            "excludable": list(self.excludable),
        }


def validate_manifest(
    manifest: DatasetManifest,
    expect_release_splits: bool = False,
    label_mapping: tp.Optional[dict[int, int]] = None,
    cfg: EnrichConfig = EnrichConfig(),
    class_map: ClassMap = TAVR_CLASS_MAP,
    lenient: bool = False,
) -> DatasetValidation:
    """Check split sizes, id uniqueness, readability and required classes.

    Every case volume is read once; the class presence census counts, per
    split, the cases in which each foreground class is non-empty. With
    `lenient`, unreadable cases are only logged.

    """
    counts = manifest.counts()
    census = {split: {c: 0 for c in class_map.foreground_ids} for split in Split}
    result = DatasetValidation(counts, census)

    if expect_release_splits:
        for split, expected in RELEASE_SPLITS.items():
            if counts[split] != expected:
                result.problems.append(
                    "split %s has %d cases, expected %d"
                    % (split.value, counts[split], expected)
                )
    if duplicates := manifest.duplicate_ids():
        result.problems.append("duplicate case ids: %s" % ", ".join(duplicates))

    reader = LabelVolumeReader(label_mapping, class_map)
    for case in manifest:
        try:
            vol = reader.read(case.label_path)
        except Exception as e:
            _logger.warning("Cannot read case %s: %s", case.case_id, e)
            if not lenient:
                result.problems.append("unreadable case %s: %s" % (case.case_id, e))
            continue
        present = set(vol.present_classes())
        for c in present:
            census[case.split][c] += 1
        missing = [c.label_name for c in cfg.required_classes if int(c) not in present]
        if missing:
            result.excludable.append(case.case_id)
            result.problems.append(
                "case %s is excludable: missing %s" % (case.case_id, ", ".join(missing))
            )
    return result


def format_census(
    census: dict[Split, dict[int, int]], class_map: ClassMap = TAVR_CLASS_MAP
) -> str:
    """Class presence per split, one row per split."""
    ids = class_map.foreground_ids
    header = ["Split"] + [display_name(c, class_map.name_of(c)) for c in ids]
    rows = [header]
    for split, per_class in census.items():
        rows.append([split.value] + [str(per_class.get(c, 0)) for c in ids])
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = [
        "  ".join(
            [r[0].ljust(widths[0])] + [v.rjust(w) for v, w in zip(r[1:], widths[1:])]
        )
        for r in rows
    ]
    return "\n".join(lines) + "\n"
