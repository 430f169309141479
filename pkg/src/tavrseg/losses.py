"""Segmentation losses with analytic gradients.

Probability and logit arrays have shape ``(C, nx, ny, nz)`` with channel 0
the background. Every kernel returns ``(value, grad_p)`` where `grad_p` has
the shape of the probabilities. Objectives combine kernels by name and
chain the gradient through the softmax to the logits.

"""

from __future__ import annotations

from abc import ABC
from dataclasses import dataclass, field
import enum
import logging
import typing as tp

import numpy as np
from scipy import special

from .skeleton import SkeletonMask
from .volume_common import GridMismatchError, LabelVolume, VoxelGrid3

_logger = logging.getLogger(__name__)

__all__ = [
    "PROB_EPSILON",
    "ProbabilityField",
    "LogitField",
    "FocalSRMode",
    "LossConfig",
    "LossReport",
    "Objective",
    "NoSupervisionError",
    "UnnormalizedProbabilityError",
    "UnknownObjectiveError",
    "softmax",
    "softmax_backward",
    "one_hot",
    "skeleton_recall_loss",
    "focal_skeleton_recall_loss",
    "focal_loss",
    "cross_entropy_loss",
    "soft_dice_loss",
    "dice_ce_loss",
    "evaluate_objective",
    "combined_loss",
    "TABLE_OBJECTIVES",
]

PROB_EPSILON = 1e-7

_SUM_TOLERANCE = 1e-6


class NoSupervisionError(ValueError):
    """Every skeleton is empty."""


class UnnormalizedProbabilityError(ValueError):
    """Per-voxel channel sums differ from one."""


class UnknownObjectiveError(KeyError):
    """No objective is registered under the requested name."""


############################################################
# Fields
############################################################


@dataclass(frozen=True, eq=False)
class ProbabilityField:
    grid: VoxelGrid3
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 4 or values.shape[1:] != self.grid.dims:
            raise GridMismatchError(
                "Probability shape %r does not match grid dims %r"
                % (values.shape, self.grid.dims)
            )
        if values.min() < -1e-9 or values.max() > 1 + 1e-9:
            raise ValueError("Probabilities must lie in [0, 1]")
        object.__setattr__(self, "values", values)

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    def check_normalized(self) -> None:
        deviation = np.abs(self.values.sum(axis=0) - 1.0).max()
        if deviation > _SUM_TOLERANCE:
            raise UnnormalizedProbabilityError(
                "Channel sums deviate from 1 by up to %g" % deviation
            )

    def argmax_labels(self) -> np.ndarray:
        return np.argmax(self.values, axis=0).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class LogitField:
    grid: VoxelGrid3
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 4 or values.shape[1:] != self.grid.dims:
            raise GridMismatchError(
                "Logit shape %r does not match grid dims %r"
                % (values.shape, self.grid.dims)
            )
        object.__setattr__(self, "values", values)

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]


def softmax(logits: LogitField) -> ProbabilityField:
    """Per-voxel softmax over channels."""
    if not np.all(np.isfinite(logits.values)):
        raise ValueError("Logits must be finite")
    probs = special.softmax(logits.values, axis=0)
    return ProbabilityField(logits.grid, probs, normalized=True)


def softmax_backward(probs: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    """Chain a probability gradient through the softmax Jacobian."""
    return probs * (grad_p - np.sum(probs * grad_p, axis=0, keepdims=True))


def one_hot(target: np.ndarray, n_channels: int) -> np.ndarray:
    out = np.zeros((n_channels,) + target.shape, dtype=np.float64)
    np.put_along_axis(out, target[None].astype(np.intp), 1.0, axis=0)
    return out


############################################################
# Array kernels
############################################################


def _sr_kernel(
    p: np.ndarray, y_skel: np.ndarray, weight_fn, deriv_fn
) -> tuple[float, np.ndarray]:
    sizes = y_skel.reshape(len(y_skel), -1).sum(axis=1)
    supervised = np.flatnonzero(sizes > 0)
    if len(supervised) == 0:
        raise NoSupervisionError("no supervision: every skeleton is empty")
    n = len(supervised)
    value = 0.0
    grad = np.zeros_like(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        for c in supervised:
            y = y_skel[c]
            value -= float(np.sum(weight_fn(p[c]) * y * p[c])) / (n * sizes[c])
            grad[c] = np.where(y > 0, -deriv_fn(p[c]) * y / (n * sizes[c]), 0.0)
    return value, grad


def _sr_arrays(p: np.ndarray, y_skel: np.ndarray) -> tuple[float, np.ndarray]:
    return _sr_kernel(p, y_skel, lambda q: 1.0, lambda q: 1.0)


def _focal_sr_arrays(
    p: np.ndarray, y_skel: np.ndarray, gamma: float, mode: FocalSRMode
) -> tuple[float, np.ndarray]:
    def weight(q):
        return (1.0 - q) ** gamma

    if gamma == 0:
        deriv = lambda q: 1.0  # noqa: E731
    elif mode == FocalSRMode.DETACHED:
        deriv = weight
    else:
        # d/dq [(1-q)^g q] = (1-q)^g - g q (1-q)^(g-1)
        def deriv(q):
            r = np.maximum(1.0 - q, 0.0)
            if gamma < 1:
                # (1-q)^(g-1) diverges at q = 1
                r_pow = np.maximum(r, PROB_EPSILON) ** (gamma - 1)
            else:
                r_pow = r ** (gamma - 1)
            return r**gamma - gamma * q * r_pow

    return _sr_kernel(p, y_skel, weight, deriv)


def _true_class_prob(p: np.ndarray, target: np.ndarray) -> np.ndarray:
    return np.take_along_axis(p, target[None].astype(np.intp), axis=0)[0]


def _scatter_true_class(grad_true: np.ndarray, target: np.ndarray, shape) -> np.ndarray:
    grad = np.zeros(shape)
    np.put_along_axis(grad, target[None].astype(np.intp), grad_true[None], axis=0)
    return grad


def _focal_arrays(
    p: np.ndarray, target: np.ndarray, gamma: float
) -> tuple[float, np.ndarray]:
    p_true = _true_class_prob(p, target)
    pc = np.clip(p_true, PROB_EPSILON, 1.0 - PROB_EPSILON)
    n = pc.size
    log_pc = np.log(pc)
    value = float(np.sum(-((1.0 - pc) ** gamma) * log_pc)) / n

    if gamma == 0:
        d = -1.0 / pc
    else:
        d = gamma * (1.0 - pc) ** (gamma - 1) * log_pc - (1.0 - pc) ** gamma / pc
    # clamped voxels have zero derivative
    d = np.where((p_true > PROB_EPSILON) & (p_true < 1.0 - PROB_EPSILON), d, 0.0)
    return value, _scatter_true_class(d / n, target, p.shape)


def _ce_arrays(p: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    return _focal_arrays(p, target, 0.0)


def _dice_arrays(
    p: np.ndarray, y: np.ndarray, smooth: float
) -> tuple[float, np.ndarray]:
    n_channels = len(p)
    axes = tuple(range(1, p.ndim))
    inter = np.sum(p * y, axis=axes)
    denom = np.sum(p, axis=axes) + np.sum(y, axis=axes) + smooth
    score = (2.0 * inter + smooth) / denom
    value = 1.0 - float(score.mean())
    shape = (n_channels,) + (1,) * (p.ndim - 1)
    inter_b = inter.reshape(shape)
    denom_b = denom.reshape(shape)
    grad = -(2.0 * y * denom_b - (2.0 * inter_b + smooth)) / (denom_b**2 * n_channels)
    return value, grad


############################################################
# Configuration and reports
############################################################


@enum.unique
class FocalSRMode(str, enum.Enum):
    COUPLED = "coupled"
    DETACHED = "detached"


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 2.0
    dice_weight: float = 0.25
    ce_weight: float = 0.75
    focal_sr_mode: FocalSRMode = FocalSRMode.COUPLED
    dice_smooth: float = 1e-5
    objective: str = "DiceCE"

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative, got %r" % self.gamma)
        if self.dice_weight < 0 or self.ce_weight < 0:
            raise ValueError("Loss weights must be non-negative")
        if not self.dice_smooth > 0:
            raise ValueError("dice_smooth must be positive")
        object.__setattr__(self, "focal_sr_mode", FocalSRMode(self.focal_sr_mode))
        Objective.get(self.objective)


@dataclass
class LossReport:
    objective: str
    total: float
    terms: dict[str, float]
    weights: dict[str, float]
    skeleton_recall: dict[int, float] = field(default_factory=dict)
    grad_p: tp.Optional[np.ndarray] = field(default=None, repr=False)
    grad_logits: tp.Optional[np.ndarray] = field(default=None, repr=False)

    def without_gradients(self) -> LossReport:
        return LossReport(
            self.objective,
            self.total,
            dict(self.terms),
            dict(self.weights),
            dict(self.skeleton_recall),
        )

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "total": self.total,
            "terms": dict(self.terms),
            "weights": dict(self.weights),
            "skeleton_recall": {str(k): v for k, v in self.skeleton_recall.items()},
        }


############################################################
# Objectives
############################################################


@dataclass
class _Inputs:
    p: np.ndarray
    target: np.ndarray
    y: np.ndarray
    y_skel: tp.Optional[np.ndarray]
    cfg: LossConfig


def _need_skeleton(inputs: _Inputs) -> np.ndarray:
    if inputs.y_skel is None:
        raise NoSupervisionError("no supervision: objective needs skeletons")
    return inputs.y_skel


_TERMS: dict[str, tp.Callable[[_Inputs], tuple[float, np.ndarray]]] = {
    "dice": lambda a: _dice_arrays(a.p, a.y, a.cfg.dice_smooth),
    "ce": lambda a: _ce_arrays(a.p, a.target),
    "focal": lambda a: _focal_arrays(a.p, a.target, a.cfg.gamma),
    "sr": lambda a: _sr_arrays(a.p, _need_skeleton(a)),
    "focal_sr": lambda a: _focal_sr_arrays(
        a.p, _need_skeleton(a), a.cfg.gamma, a.cfg.focal_sr_mode
    ),
}


class Objective(ABC):
    """A named weighted sum of loss terms.

    Subclasses declare `NAME` and `TERMS`; `lookup` finds them by name.

    """

    NAME: tp.ClassVar[str]
    TERMS: tp.ClassVar[tuple[str, ...]]

    # Check-mark columns of the objective ablation table
    COLUMNS: tp.ClassVar[frozenset[str]] = frozenset()

    @classmethod
    def lookup(cls, name: str) -> tp.Optional[tp.Type[Objective]]:
        if getattr(cls, "NAME", None) == name:
            return cls
        for subclass in cls.__subclasses__():
            if match := subclass.lookup(name):
                return match
        return None

    @classmethod
    def get(cls, name: str) -> tp.Type[Objective]:
        match = cls.lookup(name)
        if match is None:
            raise UnknownObjectiveError(
                "Unknown objective %r (known: %s)" % (name, ", ".join(cls.names()))
            )
        return match

    @classmethod
    def names(cls) -> list[str]:
        found = [cls.NAME] if "NAME" in cls.__dict__ else []
        for subclass in cls.__subclasses__():
            found.extend(subclass.names())
        return found

    @classmethod
    def weights(cls, cfg: LossConfig) -> dict[str, float]:
        weights = {name: 1.0 for name in cls.TERMS}
        if "dice" in weights:
            weights["dice"] = cfg.dice_weight
        if "ce" in weights:
            weights["ce"] = cfg.ce_weight
        return weights

    @classmethod
    def needs_skeleton(cls) -> bool:
        return "sr" in cls.TERMS or "focal_sr" in cls.TERMS


class DiceCEObjective(Objective):
    NAME = "DiceCE"
    TERMS = ("dice", "ce")
    COLUMNS = frozenset({"DiceCE"})


class FocalObjective(Objective):
    NAME = "Focal"
    TERMS = ("focal",)
    COLUMNS = frozenset({"Focal"})


class DiceCESRObjective(Objective):
    NAME = "DiceCE+SR"
    TERMS = ("dice", "ce", "sr")
    COLUMNS = frozenset({"DiceCE", "SR"})


class FocalSRSumObjective(Objective):
    NAME = "Focal+SR"
    TERMS = ("focal", "sr")
    COLUMNS = frozenset({"Focal", "SR"})


class FocalSKStarObjective(Objective):
    NAME = "FocalSK*"
    TERMS = ("focal_sr", "focal")
    COLUMNS = frozenset({"Focal", "FocalSR"})


class SROnlyObjective(Objective):
    NAME = "SR"
    TERMS = ("sr",)
    COLUMNS = frozenset({"SR"})


class FocalSROnlyObjective(Objective):
    NAME = "FocalSR"
    TERMS = ("focal_sr",)
    COLUMNS = frozenset({"FocalSR"})


# Rows of the loss ablation, in display order
TABLE_OBJECTIVES = ("DiceCE", "Focal", "DiceCE+SR", "Focal+SR", "FocalSK*")


def evaluate_objective(
    probs: np.ndarray,
    target: np.ndarray,
    y_skel: tp.Optional[np.ndarray],
    cfg: LossConfig,
    objective: tp.Optional[str] = None,
) -> tuple[float, dict[str, float], dict[str, float], np.ndarray]:
    """Array-level objective: returns total, terms, weights and grad_p."""
    obj = Objective.get(objective or cfg.objective)
    inputs = _Inputs(probs, target, one_hot(target, len(probs)), y_skel, cfg)
    weights = obj.weights(cfg)
    terms = {}
    grad = np.zeros_like(probs)
    total = 0.0
    for name in obj.TERMS:
        value, term_grad = _TERMS[name](inputs)
        terms[name] = value
        total += weights[name] * value
        grad += weights[name] * term_grad
    return total, terms, weights, grad


############################################################
# Public API on fields
############################################################


def _check_target(p: ProbabilityField, target: LabelVolume) -> None:
    if target.grid != p.grid:
        raise GridMismatchError("Prediction and target grids differ")
    if int(target.voxels.max(initial=0)) >= p.n_channels:
        raise ValueError(
            "Target class %d has no probability channel" % target.voxels.max()
        )


def _skeleton_array(p: ProbabilityField, skel: SkeletonMask) -> np.ndarray:
    if skel.grid != p.grid:
        raise GridMismatchError("Prediction and skeleton grids differ")
    return skel.to_array(p.n_channels)


def skeleton_recall_loss(
    p: ProbabilityField, skel: SkeletonMask
) -> tuple[float, np.ndarray]:
    """Negative mean soft recall of `p` on each non-empty class skeleton."""
    return _sr_arrays(p.values, _skeleton_array(p, skel))


def focal_skeleton_recall_loss(
    p: ProbabilityField,
    skel: SkeletonMask,
    gamma: float = 2.0,
    mode: FocalSRMode = FocalSRMode.COUPLED,
) -> tuple[float, np.ndarray]:
    """Skeleton recall with each term weighted by ``(1 - p)^gamma``."""
    return _focal_sr_arrays(
        p.values, _skeleton_array(p, skel), gamma, FocalSRMode(mode)
    )


def focal_loss(
    p: ProbabilityField, target: LabelVolume, gamma: float = 2.0
) -> tuple[float, np.ndarray]:
    """Mean of ``-(1 - p*)^gamma log p*`` with p* the true-class probability."""
    p.check_normalized()
    _check_target(p, target)
    return _focal_arrays(p.values, target.voxels, gamma)


def cross_entropy_loss(
    p: ProbabilityField, target: LabelVolume
) -> tuple[float, np.ndarray]:
    p.check_normalized()
    _check_target(p, target)
    return _ce_arrays(p.values, target.voxels)


def soft_dice_loss(
    p: ProbabilityField, target: LabelVolume, smooth: float = 1e-5
) -> tuple[float, np.ndarray]:
    _check_target(p, target)
    return _dice_arrays(p.values, one_hot(target.voxels, p.n_channels), smooth)


def dice_ce_loss(
    p: ProbabilityField, target: LabelVolume, cfg: LossConfig = LossConfig()
) -> tuple[float, np.ndarray]:
    """Weighted sum of soft Dice over all channels and cross-entropy."""
    p.check_normalized()
    _check_target(p, target)
    total, _, _, grad = evaluate_objective(
        p.values, target.voxels, None, cfg, objective="DiceCE"
    )
    return total, grad


def _recall_per_class(p: np.ndarray, y_skel: np.ndarray) -> dict[int, float]:
    recall = {}
    for c in range(len(y_skel)):
        size = y_skel[c].sum()
        if size > 0:
            recall[c] = float(np.sum(y_skel[c] * p[c]) / size)
    return recall


def combined_loss(
    p: ProbabilityField,
    target: LabelVolume,
    skel: tp.Optional[SkeletonMask],
    cfg: LossConfig = LossConfig(),
) -> LossReport:
    """Evaluate the configured objective with gradients to probabilities and logits.

    The logit gradient assumes `p` is the softmax of the logits.

    """
    p.check_normalized()
    _check_target(p, target)
    y_skel = _skeleton_array(p, skel) if skel is not None else None
    total, terms, weights, grad_p = evaluate_objective(
        p.values, target.voxels, y_skel, cfg
    )
    report = LossReport(
        objective=cfg.objective,
        total=total,
        terms=terms,
        weights=weights,
        skeleton_recall=_recall_per_class(p.values, y_skel) if y_skel is not None else {},
        grad_p=grad_p,
        grad_logits=softmax_backward(p.values, grad_p),
    )
    _logger.debug("%s loss %.6g terms %s", cfg.objective, total, terms)
    return report
