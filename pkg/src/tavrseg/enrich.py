"""Derive valve, annulus and aortic root labels from aorta and ventricle.

The valve is the part of the aorta close to the left ventricle, the annulus
is the thin sheet of ventricle touching the aorta. A plane fitted through the
annulus is swept along its normal into the aorta; the aortic root ends at
the first local minimum after the first local maximum of the cross-section
curve.

"""

from __future__ import annotations

from dataclasses import dataclass, field
import enum
import logging
import math
import typing as tp

import numpy as np

from .volume_common import (
    BinaryMask,
    CaseExcludedError,
    LabelVolume,
    Metric,
    TavrClass,
    UnknownClassError,
    check_same_grid,
)
from .voxel_ops import class_mask, edt

_logger = logging.getLogger(__name__)

__all__ = [
    "EnrichConfig",
    "PlaneFrame",
    "CrossSectionCurve",
    "RootStatus",
    "RootExtent",
    "RootResult",
    "DegenerateAnnulusError",
    "RootDetectionError",
    "extract_valve",
    "extract_annulus",
    "fit_annulus_plane",
    "sweep_cross_sections",
    "sweep_distances",
    "moving_average",
    "detect_root_extent",
    "extract_root",
    "enrich_volume",
    "strip_derived",
    "DERIVED_CLASSES",
]


class DegenerateAnnulusError(ValueError):
    """The annulus does not define a unique plane."""


class RootDetectionError(ValueError):
    """The aortic root extent could not be determined."""


DERIVED_CLASSES = (TavrClass.VALVE, TavrClass.ANNULUS, TavrClass.AORTIC_ROOT)


@dataclass(frozen=True)
class EnrichConfig:
    """Thresholds and sweep parameters for label enrichment.

    Distances are in voxels unless `metric` is world, in which case the
    valve and annulus thresholds are millimetres. The sweep always works in
    voxel index units.

    """

    valve_distance: float = 3.0
    annulus_distance: float = 1.0
    sweep_max_distance: float = 60.0
    sweep_step: float = 1.0
    slab_half_width: float = 0.5
    smoothing_window: int = 5

    # Highest precedence first
    precedence: tuple[TavrClass, ...] = DERIVED_CLASSES
    metric: Metric = Metric.INDEX

    # Used when no minimum is found; None disables the fallback
    fallback_min_distance: tp.Optional[float] = 25.0
    refine_minimum: bool = True
    required_classes: tuple[TavrClass, ...] = (
        TavrClass.AORTA,
        TavrClass.LEFT_VENTRICLE,
    )

    def __post_init__(self):
        for name in (
            "valve_distance",
            "annulus_distance",
            "sweep_max_distance",
            "sweep_step",
            "slab_half_width",
        ):
            value = getattr(self, name)
            if not value > 0:
                raise ValueError("%s must be positive, got %r" % (name, value))
        if self.smoothing_window < 1 or self.smoothing_window % 2 == 0:
            raise ValueError(
                "smoothing_window must be odd and positive, got %r"
                % self.smoothing_window
            )
        precedence = tuple(TavrClass(c) for c in self.precedence)
        if sorted(precedence) != sorted(DERIVED_CLASSES):
            raise ValueError(
                "precedence must list each derived class exactly once: %r"
                % (precedence,)
            )
        object.__setattr__(self, "precedence", precedence)
        object.__setattr__(
            self, "required_classes", tuple(TavrClass(c) for c in self.required_classes)
        )
        object.__setattr__(self, "metric", Metric(self.metric))
        if self.fallback_min_distance is not None and self.fallback_min_distance < 0:
            raise ValueError("fallback_min_distance must be non-negative")


############################################################
# Valve and annulus
############################################################


def extract_valve(
    aorta: BinaryMask, ventricle: BinaryMask, cfg: EnrichConfig = EnrichConfig()
) -> BinaryMask:
    """Aorta voxels within `valve_distance` of any ventricle voxel."""
    check_same_grid(aorta, ventricle)
    near = edt(ventricle, cfg.metric).values <= cfg.valve_distance
    return BinaryMask(aorta.grid, aorta.bits & near)


def extract_annulus(
    aorta: BinaryMask, ventricle: BinaryMask, cfg: EnrichConfig = EnrichConfig()
) -> BinaryMask:
    """Ventricle voxels within `annulus_distance` of any aorta voxel."""
    check_same_grid(aorta, ventricle)
    near = edt(aorta, cfg.metric).values <= cfg.annulus_distance
    return BinaryMask(ventricle.grid, ventricle.bits & near)


############################################################
# Annulus plane
############################################################


@dataclass(frozen=True, eq=False)
class PlaneFrame:
    """Plane through `point` with unit `normal`, in voxel index coordinates."""

    point: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        point = np.asarray(self.point, dtype=np.float64).reshape(3)
        normal = np.asarray(self.normal, dtype=np.float64).reshape(3)
        length = np.linalg.norm(normal)
        if not length > 0:
            raise ValueError("Plane normal must be non-zero")
        object.__setattr__(self, "point", point)
        object.__setattr__(self, "normal", normal / length)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        "Signed distance of (n, 3) points, positive on the normal side."
        return (np.asarray(points, dtype=np.float64) - self.point) @ self.normal

    def to_dict(self) -> dict:
        return {"point": self.point.tolist(), "normal": self.normal.tolist()}


def fit_annulus_plane(annulus: BinaryMask, aorta: BinaryMask) -> PlaneFrame:
    """Total least squares plane through the annulus voxel centres.

    The normal is the eigenvector of the smallest eigenvalue of the
    coordinate covariance, oriented so the aorta lies on average on the
    positive side.

    """
    check_same_grid(annulus, aorta)
    points = annulus.coordinates().astype(np.float64)
    if len(points) < 3:
        raise DegenerateAnnulusError(
            "degenerate annulus: %d voxels, need at least 3" % len(points)
        )
    centroid = points.mean(axis=0)
    cov = np.cov(points, rowvar=False, bias=True)
    eigvals, eigvecs = np.linalg.eigh(cov)
    scale = eigvals[2]
    if not scale > 0 or eigvals[1] <= 1e-9 * scale:
        raise DegenerateAnnulusError("degenerate annulus: voxels are collinear")
    if eigvals[1] - eigvals[0] <= 1e-9 * scale:
        raise DegenerateAnnulusError(
            "no unique plane: smallest covariance eigenvalues are tied (%g, %g)"
            % (eigvals[0], eigvals[1])
        )

    plane = PlaneFrame(centroid, eigvecs[:, 0])
    if aorta.any():
        if plane.signed_distance(aorta.coordinates()).mean() < 0:
            plane = PlaneFrame(centroid, -plane.normal)
    else:
        _logger.warning("Empty aorta; annulus plane orientation is arbitrary")
    _logger.debug("Annulus plane point=%s normal=%s", plane.point, plane.normal)
    return plane


############################################################
# Cross-section sweep
############################################################


def moving_average(values: np.ndarray, window: int) -> np.ndarray:
    """Centred moving average whose window shrinks symmetrically at the ends."""
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    if n == 0:
        return values.copy()
    idx = np.arange(n)
    half = np.minimum(window // 2, np.minimum(idx, n - 1 - idx))
    csum = np.concatenate([[0.0], np.cumsum(values)])
    return (csum[idx + half + 1] - csum[idx - half]) / (2 * half + 1)


@dataclass(frozen=True, eq=False)
class CrossSectionCurve:
    """Aorta voxel counts per slab, by distance from the annulus plane."""

    distances: np.ndarray
    raw_counts: np.ndarray
    smoothed: np.ndarray
    window: int = 5

    def __post_init__(self):
        distances = np.asarray(self.distances, dtype=np.float64)
        raw = np.asarray(self.raw_counts, dtype=np.int64)
        smoothed = np.asarray(self.smoothed, dtype=np.float64)
        if not (len(distances) == len(raw) == len(smoothed)):
            raise ValueError(
                "Curve arrays differ in length: %d, %d, %d"
                % (len(distances), len(raw), len(smoothed))
            )
        if np.any(np.diff(distances) <= 0):
            raise ValueError("Curve distances must be strictly increasing")
        object.__setattr__(self, "distances", distances)
        object.__setattr__(self, "raw_counts", raw)
        object.__setattr__(self, "smoothed", smoothed)

    @classmethod
    def from_raw(
        cls, distances: np.ndarray, raw_counts: np.ndarray, window: int = 5
    ) -> CrossSectionCurve:
        return cls(distances, raw_counts, moving_average(raw_counts, window), window)

    def __len__(self) -> int:
        return len(self.distances)

    def rows(self) -> tp.Iterator[tuple[float, int, float]]:
        for d, r, s in zip(self.distances, self.raw_counts, self.smoothed):
            yield float(d), int(r), float(s)


def sweep_distances(cfg: EnrichConfig) -> np.ndarray:
    n = math.floor(cfg.sweep_max_distance / cfg.sweep_step + 1e-9) + 1
    return cfg.sweep_step * np.arange(n, dtype=np.float64)


def sweep_cross_sections(
    aorta: BinaryMask, plane: PlaneFrame, cfg: EnrichConfig = EnrichConfig()
) -> CrossSectionCurve:
    """Count aorta voxels in parallel slabs ``[d - hw, d + hw)`` along the normal."""
    distances = sweep_distances(cfg)
    sd = np.sort(plane.signed_distance(aorta.coordinates()))
    hw = cfg.slab_half_width
    lo = np.searchsorted(sd, distances - hw, side="left")
    hi = np.searchsorted(sd, distances + hw, side="left")
    curve = CrossSectionCurve.from_raw(distances, hi - lo, cfg.smoothing_window)
    _logger.debug("Swept %d slabs, peak raw count %d", len(curve), curve.raw_counts.max())
    return curve


############################################################
# Root extent
############################################################


@enum.unique
class RootStatus(str, enum.Enum):
    FOUND = "found"
    FALLBACK = "fallback"
    FAILED = "failed"
    EXCLUDED = "excluded"


@dataclass(frozen=True)
class RootExtent:
    max_distance: tp.Optional[float]
    min_distance: tp.Optional[float]
    status: RootStatus


def _first(condition: np.ndarray, start: int) -> tp.Optional[int]:
    hits = np.flatnonzero(condition[start:])
    return int(hits[0]) + start if len(hits) else None


def detect_root_extent(
    curve: CrossSectionCurve, refine_on_raw: bool = False
) -> RootExtent:
    """Find the first local minimum after the first local maximum.

    The rule runs on the smoothed series. A maximum is an index i with
    ``s[i-1] < s[i] >= s[i+1]``, a minimum an index j > i with
    ``s[j-1] > s[j] <= s[j+1]``, so plateaus resolve to their first index.

    With `refine_on_raw`, the minimum is moved to the lowest raw count
    within half a smoothing window of it (earliest on ties, always after
    the maximum).

    """
    s = curve.smoothed
    n = len(s)
    if n == 0:
        raise RootDetectionError("Empty cross-section curve")
    if n < curve.window:
        raise RootDetectionError(
            "Curve has %d samples, shorter than smoothing window %d"
            % (n, curve.window)
        )

    # Conditions evaluated at interior indices 1..n-2, padded to length n
    is_max = np.zeros(n, dtype=bool)
    is_min = np.zeros(n, dtype=bool)
    if n >= 3:
        is_max[1:-1] = (s[:-2] < s[1:-1]) & (s[1:-1] >= s[2:])
        is_min[1:-1] = (s[:-2] > s[1:-1]) & (s[1:-1] <= s[2:])

    i = _first(is_max, 0)
    j = _first(is_min, i + 1) if i is not None else None
    if i is None or j is None:
        _logger.debug("No extremum pair in cross-section curve (max index %s)", i)
        max_distance = float(curve.distances[i]) if i is not None else None
        return RootExtent(max_distance, None, RootStatus.FAILED)

    if refine_on_raw:
        half = curve.window // 2
        lo = max(i + 1, j - half)
        hi = min(n - 1, j + half)
        window = curve.raw_counts[lo : hi + 1]
        refined = lo + int(np.argmin(window))
        if refined != j:
            _logger.debug("Refined minimum from index %d to %d", j, refined)
        j = refined

    return RootExtent(
        float(curve.distances[i]), float(curve.distances[j]), RootStatus.FOUND
    )


def extract_root(
    aorta: BinaryMask, plane: PlaneFrame, extent: RootExtent
) -> BinaryMask:
    """Aorta voxels with ``0 <= signed distance <= min_distance``."""
    if extent.status not in (RootStatus.FOUND, RootStatus.FALLBACK):
        raise RootDetectionError(
            "Cannot extract root from extent with status %r" % extent.status.value
        )
    assert extent.min_distance is not None
    coords = aorta.coordinates()
    sd = plane.signed_distance(coords)
    keep = coords[(sd >= 0) & (sd <= extent.min_distance)]
    bits = np.zeros(aorta.grid.dims, dtype=bool)
    bits[tuple(keep.T)] = True
    return BinaryMask(aorta.grid, bits)


############################################################
# Whole-volume enrichment
############################################################


@dataclass(frozen=True, eq=False)
class RootResult:
    curve: CrossSectionCurve
    max_distance: tp.Optional[float]
    min_distance: tp.Optional[float]
    root_mask: BinaryMask
    status: RootStatus
    plane: PlaneFrame

    def to_dict(self) -> dict:
        return {
            "status": self.status.value,
            "max_distance": self.max_distance,
            "min_distance": self.min_distance,
            "root_voxels": len(self.root_mask),
            "plane": self.plane.to_dict(),
        }


def _check_required(vol: LabelVolume, cfg: EnrichConfig) -> None:
    counts = vol.class_counts()
    missing = [c.label_name for c in cfg.required_classes if counts.get(int(c), 0) == 0]
    if missing:
        raise CaseExcludedError("case excluded: missing %s" % ", ".join(missing))
    # the output volume must be able to hold every canonical class
    expected = (*DERIVED_CLASSES, TavrClass.ILIAC_ARTERY_LEFT, TavrClass.ILIAC_ARTERY_RIGHT)
    unregistered = [c.label_name for c in expected if int(c) not in vol.class_map]
    if unregistered:
        raise UnknownClassError(
            "Class map does not register: %s" % ", ".join(unregistered)
        )


def enrich_volume(
    vol: LabelVolume, cfg: EnrichConfig = EnrichConfig()
) -> tuple[LabelVolume, RootResult]:
    """Add valve, annulus and aortic root labels to a copy of `vol`.

    Overlaps are resolved by `cfg.precedence`; every voxel keeps exactly
    one label. Raises `CaseExcludedError` if a required class is missing.

    """
    _check_required(vol, cfg)
    aorta = class_mask(vol, TavrClass.AORTA)
    ventricle = class_mask(vol, TavrClass.LEFT_VENTRICLE)

    valve = extract_valve(aorta, ventricle, cfg)
    annulus = extract_annulus(aorta, ventricle, cfg)
    plane = fit_annulus_plane(annulus, aorta)
    curve = sweep_cross_sections(aorta, plane, cfg)
    extent = detect_root_extent(curve, refine_on_raw=cfg.refine_minimum)

    if extent.status == RootStatus.FAILED and cfg.fallback_min_distance is not None:
        _logger.warning(
            "No local minimum in cross-section curve; "
            "using fallback root distance %g",
            cfg.fallback_min_distance,
        )
        extent = RootExtent(
            extent.max_distance, float(cfg.fallback_min_distance), RootStatus.FALLBACK
        )
    root = extract_root(aorta, plane, extent)

    derived = {
        TavrClass.VALVE: valve,
        TavrClass.ANNULUS: annulus,
        TavrClass.AORTIC_ROOT: root,
    }
    voxels = vol.voxels.copy()
    for class_id in reversed(cfg.precedence):
        voxels[derived[class_id].bits] = class_id

    _logger.info(
        "Enriched: status=%s max=%s min=%s valve=%d annulus=%d root=%d",
        extent.status.value,
        extent.max_distance,
        extent.min_distance,
        len(valve),
        len(annulus),
        len(root),
    )
    result = RootResult(
        curve=curve,
        max_distance=extent.max_distance,
        min_distance=extent.min_distance,
        root_mask=root,
        status=extent.status,
        plane=plane,
    )
    return vol.with_voxels(voxels), result


def strip_derived(vol: LabelVolume) -> LabelVolume:
    """Fold valve and root back into the aorta and annulus into the ventricle."""
    voxels = vol.voxels.copy()
    voxels[np.isin(voxels, [TavrClass.VALVE, TavrClass.AORTIC_ROOT])] = TavrClass.AORTA
    voxels[voxels == TavrClass.ANNULUS] = TavrClass.LEFT_VENTRICLE
    return vol.with_voxels(voxels)
