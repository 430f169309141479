"""Gradient descent on a per-voxel logit field.

Fits logits directly to a target label volume with any registered
objective, so the behaviour of the losses can be observed without a
network.

"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
import io
import logging
import typing as tp

import numpy as np

from .losses import (
    LogitField,
    LossConfig,
    LossReport,
    Objective,
    ProbabilityField,
    combined_loss,
    softmax,
)
from .metrics import MetricsReport, dice_iou
from .skeleton import SkeletonMask
from .volume_common import BinaryMask, GridMismatchError, LabelVolume
from .voxel_ops import connected_components

_logger = logging.getLogger(__name__)

__all__ = [
    "FitConfig",
    "FitStep",
    "FitTrace",
    "DivergenceError",
    "fit_probability_field",
]


class DivergenceError(RuntimeError):
    """The loss became non-finite."""

    def __init__(self, iteration: int, total: float):
        super().__init__("Loss diverged at iteration %d (total=%r)" % (iteration, total))
        self.iteration = iteration


@dataclass(frozen=True)
class FitConfig:
    objective: str = "FocalSK*"
    lr: float = 0.5
    iterations: int = 500

    init_logit: float = 0.0
    # Added to every foreground channel at init; negative values handicap them
    init_foreground_logit: float = 0.0

    seed: int = 0
    sample_fraction: tp.Optional[float] = None

    # Multiply lr by the voxel count (the losses average over voxels).
    # The applied step is recorded as `FitTrace.step_size`; set False for
    # the plain update logits -= lr * grad.
    normalize_lr: bool = True
    track_components: bool = False
    loss: LossConfig = LossConfig()

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive, got %r" % self.lr)
        if self.iterations <= 0:
            raise ValueError("iterations must be positive, got %r" % self.iterations)
        if self.sample_fraction is not None and not 0 < self.sample_fraction <= 1:
            raise ValueError("sample_fraction must be in (0, 1]")
        Objective.get(self.objective)

    @property
    def loss_config(self) -> LossConfig:
        return replace(self.loss, objective=self.objective)


@dataclass
class FitStep:
    iteration: int
    report: LossReport
    metrics: MetricsReport
    components: dict[int, int] = field(default_factory=dict)
    skeleton_coverage: dict[int, float] = field(default_factory=dict)


@dataclass
class FitTrace:
    objective: str
    steps: list[FitStep] = field(default_factory=list)
    #: Factor applied to the logit gradient in each update.
    step_size: float = 0.0

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def totals(self) -> np.ndarray:
        return np.array([s.report.total for s in self.steps])

    @property
    def final(self) -> FitStep:
        return self.steps[-1]

    def first_connected(self, class_id: int) -> tp.Optional[int]:
        """First iteration whose prediction of `class_id` is one component
        covering the whole skeleton, or None.

        Needs a trace recorded with `track_components`.

        """
        for step in self.steps:
            if (
                step.components.get(class_id) == 1
                and step.skeleton_coverage.get(class_id, 0.0) >= 1.0
            ):
                return step.iteration
        return None

    def columns(self) -> list[str]:
        terms = list(self.steps[0].report.terms) if self.steps else []
        return ["iteration", "total", "dice_mean"] + terms

    def write_csv(self, stream: tp.TextIO) -> None:
        writer = csv.writer(stream, lineterminator="\n")
        columns = self.columns()
        writer.writerow(columns)
        for step in self.steps:
            row = [step.iteration, repr(step.report.total), repr(step.metrics.mean_dice)]
            row += [repr(step.report.terms[name]) for name in columns[3:]]
            writer.writerow(row)

    def to_csv(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()


def _initial_logits(target: LabelVolume, cfg: FitConfig) -> np.ndarray:
    n_channels = target.class_map.n_channels
    logits = np.full((n_channels,) + target.grid.dims, cfg.init_logit, dtype=np.float64)
    logits[1:] += cfg.init_foreground_logit
    return logits


def _connectivity(
    prediction: LabelVolume, skel: tp.Optional[SkeletonMask]
) -> tuple[dict[int, int], dict[int, float]]:
    components = {}
    coverage = {}
    for class_id in prediction.class_map.foreground_ids:
        bits = prediction.voxels == class_id
        components[class_id] = connected_components(BinaryMask(prediction.grid, bits))[1]
        if skel is not None and class_id in skel.masks:
            skeleton = skel[class_id].bits
            coverage[class_id] = float(bits[skeleton].mean()) if skeleton.any() else 1.0
    return components, coverage


def fit_probability_field(
    target: LabelVolume,
    skel: tp.Optional[SkeletonMask],
    cfg: FitConfig = FitConfig(),
) -> tuple[LogitField, FitTrace]:
    """Plain gradient descent on logits against `cfg.objective`.

    The trace holds one step per iteration, including iteration 0 before
    any update. Raises `DivergenceError` if the loss becomes non-finite.

    """
    if skel is not None and skel.grid != target.grid:
        raise GridMismatchError("Skeleton and target grids differ")
    loss_cfg = cfg.loss_config
    if Objective.get(cfg.objective).needs_skeleton() and skel is None:
        raise ValueError("Objective %r needs skeletons" % cfg.objective)

    grid = target.grid
    logits = _initial_logits(target, cfg)
    scale = float(grid.n_voxels) if cfg.normalize_lr else 1.0
    rng = np.random.default_rng(cfg.seed)
    trace = FitTrace(cfg.objective, step_size=cfg.lr * scale)

    for iteration in range(cfg.iterations + 1):
        if not np.all(np.isfinite(logits)):
            raise DivergenceError(iteration, float("nan"))
        probs = softmax(LogitField(grid, logits))
        report = combined_loss(probs, target, skel, loss_cfg)
        if not np.isfinite(report.total):
            raise DivergenceError(iteration, report.total)

        prediction = LabelVolume(grid, probs.argmax_labels(), target.class_map)
        step = FitStep(
            iteration=iteration,
            report=report.without_gradients(),
            metrics=dice_iou(prediction, target, case_id="iteration-%d" % iteration),
        )
        if cfg.track_components:
            step.components, step.skeleton_coverage = _connectivity(prediction, skel)
        trace.steps.append(step)
        _logger.debug(
            "iteration %d total %.6g mean dice %.4f",
            iteration,
            report.total,
            step.metrics.mean_dice,
        )
        if iteration == cfg.iterations:
            break

        grad = report.grad_logits
        if cfg.sample_fraction is not None:
            keep = rng.random(grid.dims) < cfg.sample_fraction
            grad = grad * keep / cfg.sample_fraction
        logits = logits - trace.step_size * grad

    _logger.info(
        "Fit %s: %d iterations at step size %g, final total %.6g, mean dice %.4f",
        cfg.objective,
        cfg.iterations,
        trace.step_size,
        trace.final.report.total,
        trace.final.metrics.mean_dice,
    )
    return LogitField(grid, logits), trace
