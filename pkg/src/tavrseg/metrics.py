"""Dice and IoU per class, aggregation over cases, and text tables."""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import dataclass
import logging
import typing as tp

import numpy as np

from .losses import Objective
from .volume_common import GridMismatchError, LabelVolume, TavrClass

_logger = logging.getLogger(__name__)

__all__ = [
    "MetricsReport",
    "dice_iou",
    "aggregate",
    "format_objective_table",
    "format_comparison_table",
    "display_name",
]


@dataclass(frozen=True)
class MetricsReport:
    """Per-class Dice and IoU with unweighted class means.

    Classes in `absent` are empty in both prediction and truth; they score 1
    and are left out of the means.

    """

    case_id: str
    class_names: dict[int, str]
    dice: dict[int, float]
    iou: dict[int, float]
    absent: frozenset[int] = frozenset()
    mean_dice: tp.Optional[float] = None
    mean_iou: tp.Optional[float] = None
    n_cases: int = 1

    def __post_init__(self):
        if self.mean_dice is None:
            object.__setattr__(self, "mean_dice", self._mean(self.dice))
        if self.mean_iou is None:
            object.__setattr__(self, "mean_iou", self._mean(self.iou))

    def _mean(self, scores: dict[int, float]) -> float:
        present = [v for c, v in scores.items() if c not in self.absent]
        return float(np.mean(present)) if present else 1.0

    @property
    def class_ids(self) -> list[int]:
        return sorted(self.class_names)

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "n_cases": self.n_cases,
            "mean_dice": self.mean_dice,
            "mean_iou": self.mean_iou,
            "classes": [
                {
                    "id": c,
                    "name": self.class_names[c],
                    "dice": self.dice[c],
                    "iou": self.iou[c],
                    "absent": c in self.absent,
                }
                for c in self.class_ids
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> MetricsReport:
        classes = data["classes"]
        return cls(
            case_id=data.get("case_id", ""),
            class_names={int(e["id"]): e["name"] for e in classes},
            dice={int(e["id"]): float(e["dice"]) for e in classes},
            iou={int(e["id"]): float(e["iou"]) for e in classes},
            absent=frozenset(int(e["id"]) for e in classes if e.get("absent")),
            mean_dice=data.get("mean_dice"),
            mean_iou=data.get("mean_iou"),
            n_cases=int(data.get("n_cases", 1)),
        )


def dice_iou(pred: LabelVolume, truth: LabelVolume, case_id: str = "") -> MetricsReport:
    """Score `pred` against `truth` for every foreground class."""
    if pred.grid != truth.grid:
        raise GridMismatchError("Prediction and truth grids differ")
    if pred.class_map != truth.class_map:
        raise ValueError("Prediction and truth use different class maps")

    class_map = truth.class_map
    n = class_map.n_channels
    joint = pred.voxels.astype(np.int64).ravel() * n + truth.voxels.ravel()
    confusion = np.bincount(joint, minlength=n * n).reshape(n, n)
    pred_sizes = confusion.sum(axis=1)
    truth_sizes = confusion.sum(axis=0)

    dice = {}
    iou = {}
    absent = set()
    for c in class_map.foreground_ids:
        inter = int(confusion[c, c])
        total = int(pred_sizes[c] + truth_sizes[c])
        if total == 0:
            dice[c] = iou[c] = 1.0
            absent.add(c)
            continue
        dice[c] = 2.0 * inter / total
        iou[c] = inter / (total - inter)

    report = MetricsReport(
        case_id=case_id,
        class_names={c: class_map.name_of(c) for c in class_map.foreground_ids},
        dice=dice,
        iou=iou,
        absent=frozenset(absent),
    )
    _logger.debug("Case %r mean dice %.4f", case_id, report.mean_dice)
    return report


def aggregate(reports: Sequence[MetricsReport], case_id: str = "aggregate") -> MetricsReport:
    """Average per class over the cases where the class is present."""
    if not reports:
        raise ValueError("Cannot aggregate an empty list of reports")
    class_names = reports[0].class_names
    for report in reports[1:]:
        if report.class_names != class_names:
            raise ValueError(
                "Reports %r and %r use different classes"
                % (reports[0].case_id, report.case_id)
            )

    dice = {}
    iou = {}
    absent = set()
    for c in class_names:
        scored = [r for r in reports if c not in r.absent]
        if not scored:
            dice[c] = iou[c] = 1.0
            absent.add(c)
            continue
        dice[c] = float(np.mean([r.dice[c] for r in scored]))
        iou[c] = float(np.mean([r.iou[c] for r in scored]))

    return MetricsReport(
        case_id=case_id,
        class_names=dict(class_names),
        dice=dice,
        iou=iou,
        absent=frozenset(absent),
        n_cases=sum(r.n_cases for r in reports),
    )


############################################################
# Text tables
############################################################

_DISPLAY_NAMES = {
    TavrClass.AORTA: "Aorta",
    TavrClass.LEFT_VENTRICLE: "Left Ventr.",
    TavrClass.AORTIC_ROOT: "Aortic Root",
    TavrClass.VALVE: "Valve",
    TavrClass.ANNULUS: "Annulus",
    TavrClass.ILIAC_ARTERY_LEFT: "I. A. left",
    TavrClass.ILIAC_ARTERY_RIGHT: "I. A. right",
}

_LOSS_COLUMNS = ("DiceCE", "Focal", "SR", "FocalSR")


def display_name(class_id: int, name: str) -> str:
    if class_id in _DISPLAY_NAMES and TavrClass(class_id).label_name == name:
        return _DISPLAY_NAMES[TavrClass(class_id)]
    return name.replace("_", " ").capitalize()


def _pct(report: MetricsReport, scores: dict[int, float], c: int) -> str:
    if c in report.absent:
        return "--"
    return "%.2f" % (100 * scores[c])


def _render(rows: list[list[str]]) -> str:
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = []
    for k, row in enumerate(rows):
        cells = [row[0].ljust(widths[0])]
        cells += [cell.rjust(w) for cell, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
        if k == 0:
            lines.append("-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def format_objective_table(
    rows: Iterable[tuple[str, MetricsReport]], metric: str = "dice"
) -> str:
    """One row per objective: loss check marks, per-class scores and the mean.

    Scores are percentages with two decimals.

    """
    rows = list(rows)
    if not rows:
        raise ValueError("No rows to format")
    first = rows[0][1]
    header = list(_LOSS_COLUMNS)
    header += [display_name(c, first.class_names[c]) for c in first.class_ids]
    header.append("Mean")
    table = [header]
    for objective, report in rows:
        columns = Objective.get(objective).COLUMNS
        scores = report.dice if metric == "dice" else report.iou
        mean = report.mean_dice if metric == "dice" else report.mean_iou
        row = ["x" if col in columns else "--" for col in _LOSS_COLUMNS]
        row += [_pct(report, scores, c) for c in first.class_ids]
        row.append("%.2f" % (100 * mean))
        table.append(row)
    return _render(table)


def format_comparison_table(columns: Iterable[tuple[str, MetricsReport]]) -> str:
    """One column per run; Dice and IoU rows per class, then the means."""
    columns = list(columns)
    if not columns:
        raise ValueError("No runs to format")
    first = columns[0][1]
    table = [["Target"] + [label for label, _ in columns]]
    for c in first.class_ids:
        name = display_name(c, first.class_names[c])
        table.append([name + " Dice"] + [_pct(r, r.dice, c) for _, r in columns])
        table.append([name + " IoU"] + [_pct(r, r.iou, c) for _, r in columns])
    table.append(["Mean Dice"] + ["%.2f" % (100 * r.mean_dice) for _, r in columns])
    table.append(["Mean IoU"] + ["%.2f" % (100 * r.mean_iou) for _, r in columns])
    return _render(table)
