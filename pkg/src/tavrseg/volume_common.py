"""Voxel grids, label volumes and masks shared by all modules.

Arrays are indexed ``[x, y, z]`` with shape ``(nx, ny, nz)``, the same
orientation nibabel returns for NIfTI data. The linear voxel order used
whenever a volume is flattened is x-fastest (Fortran order).

"""

from __future__ import annotations

from dataclasses import dataclass, field
import enum
import logging
import typing as tp

import numpy as np

_logger = logging.getLogger(__name__)

__all__ = [
    "TavrClass",
    "Metric",
    "ClassMap",
    "TAVR_CLASS_MAP",
    "VoxelGrid3",
    "LabelVolume",
    "BinaryMask",
    "DistanceField",
    "GridMismatchError",
    "UnknownClassError",
    "CaseExcludedError",
    "check_same_grid",
]


class GridMismatchError(ValueError):
    """Operands live on different voxel grids."""


class UnknownClassError(ValueError):
    """A class id is not registered in the class map."""


class CaseExcludedError(Exception):
    """A case lacks the anatomy required for enrichment."""


@enum.unique
class TavrClass(enum.IntEnum):
    """Canonical class ids of the enriched TAVR label volumes."""

    BACKGROUND = 0
    AORTA = 1
    LEFT_VENTRICLE = 2
    AORTIC_ROOT = 3
    VALVE = 4
    ANNULUS = 5
    ILIAC_ARTERY_LEFT = 6
    ILIAC_ARTERY_RIGHT = 7

    @property
    def label_name(self) -> str:
        return self.name.lower()

    @classmethod
    def from_name(cls, name: str) -> TavrClass:
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise UnknownClassError("Unknown class name %r" % name) from None


class Metric(str, enum.Enum):
    "Distance metric used by distance transforms."
    INDEX = "index_euclidean"
    WORLD = "world_euclidean"


@dataclass(frozen=True)
class ClassMap:
    """Mapping between class ids and names.

    Id 0 is always "background".

    """

    entries: tuple[tuple[int, str], ...]

    def __post_init__(self):
        ids = [i for i, _ in self.entries]
        names = [n for _, n in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("Duplicate class ids in %r" % (self.entries,))
        if len(set(names)) != len(names):
            raise ValueError("Duplicate class names in %r" % (self.entries,))
        if dict(self.entries).get(0) != "background":
            raise ValueError("Class id 0 must be 'background'")
        if any(i < 0 or i > 255 for i in ids):
            raise ValueError("Class ids must fit in an unsigned byte")

    @classmethod
    def from_enum(cls, members: tp.Iterable[TavrClass] = TavrClass) -> ClassMap:
        return cls(tuple((int(m), m.label_name) for m in members))

    def __contains__(self, class_id: int) -> bool:
        return any(i == class_id for i, _ in self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> list[int]:
        return [i for i, _ in self.entries]

    @property
    def foreground_ids(self) -> list[int]:
        return sorted(i for i, _ in self.entries if i != 0)

    @property
    def n_channels(self) -> int:
        "Number of probability channels needed to cover every id."
        return max(self.ids) + 1

    def name_of(self, class_id: int) -> str:
        for i, name in self.entries:
            if i == class_id:
                return name
        raise UnknownClassError("Class id %d is not registered" % class_id)

    def id_of(self, name: str) -> int:
        for i, n in self.entries:
            if n == name:
                return i
        raise UnknownClassError("Class name %r is not registered" % name)


TAVR_CLASS_MAP = ClassMap.from_enum()


@dataclass(frozen=True, eq=False)
class VoxelGrid3:
    """Dimensions, spacing (mm per voxel) and voxel-to-world affine."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ValueError("Grid dims must be three positive integers: %r" % (dims,))
        if len(spacing) != 3 or any(not s > 0 for s in spacing):
            raise ValueError("Grid spacing must be strictly positive: %r" % (spacing,))
        affine = self.affine
        if affine is None:
            affine = np.diag(list(spacing) + [1.0])
        affine = np.array(affine, dtype=np.float64)
        if affine.shape != (4, 4):
            raise ValueError("Affine must be 4x4, got %r" % (affine.shape,))
        if abs(np.linalg.det(affine[:3, :3])) < 1e-12:
            raise ValueError("Affine is not invertible")
        affine.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", affine)

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid3):
            return NotImplemented
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=1e-6)
            and np.allclose(self.affine, other.affine, rtol=0, atol=1e-6)
        )

    def __repr__(self) -> str:
        return f"VoxelGrid3(dims={self.dims}, spacing={self.spacing})"

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def diagonal(self, metric: Metric = Metric.INDEX) -> float:
        "Length of the grid diagonal in the units of `metric`."
        extent = np.array(self.dims, dtype=np.float64)
        if metric == Metric.WORLD:
            extent = extent * np.array(self.spacing)
        return float(np.linalg.norm(extent))

    def index_to_world(self, points: np.ndarray) -> np.ndarray:
        "Map (n, 3) voxel index coordinates to world millimeters."
        points = np.asarray(points, dtype=np.float64)
        return points @ self.affine[:3, :3].T + self.affine[:3, 3]


def check_same_grid(*items) -> VoxelGrid3:
    """Return the shared grid of `items`, raising if any differ."""
    grid = items[0].grid
    for item in items[1:]:
        if item.grid != grid:
            raise GridMismatchError("Grid mismatch: %r != %r" % (grid, item.grid))
    return grid


@dataclass(frozen=True, eq=False)
class BinaryMask:
    "One boolean per voxel."
    grid: VoxelGrid3
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.shape != self.grid.dims:
            raise GridMismatchError(
                "Mask shape %r does not match grid dims %r" % (bits.shape, self.grid.dims)
            )
        object.__setattr__(self, "bits", bits)

    @classmethod
    def empty(cls, grid: VoxelGrid3) -> BinaryMask:
        return cls(grid, np.zeros(grid.dims, dtype=bool))

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.bits, other.bits)

    def __len__(self) -> int:
        "Number of set voxels."
        return int(np.count_nonzero(self.bits))

    def __or__(self, other: BinaryMask) -> BinaryMask:
        check_same_grid(self, other)
        return BinaryMask(self.grid, self.bits | other.bits)

    def __and__(self, other: BinaryMask) -> BinaryMask:
        check_same_grid(self, other)
        return BinaryMask(self.grid, self.bits & other.bits)

    def __sub__(self, other: BinaryMask) -> BinaryMask:
        check_same_grid(self, other)
        return BinaryMask(self.grid, self.bits & ~other.bits)

    def issubset(self, other: BinaryMask) -> bool:
        check_same_grid(self, other)
        return not np.any(self.bits & ~other.bits)

    def any(self) -> bool:
        return bool(self.bits.any())

    def coordinates(self) -> np.ndarray:
        "Voxel index coordinates of set voxels, shape (n, 3), x-fastest order."
        flat = np.flatnonzero(self.bits.ravel(order="F"))
        return np.column_stack(np.unravel_index(flat, self.grid.dims, order="F"))


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Dense grid of class ids."""

    grid: VoxelGrid3
    voxels: np.ndarray
    class_map: ClassMap = TAVR_CLASS_MAP

    def __post_init__(self):
        voxels = np.asarray(self.voxels)
        if voxels.shape != self.grid.dims:
            raise GridMismatchError(
                "Label shape %r does not match grid dims %r"
                % (voxels.shape, self.grid.dims)
            )
        if not np.issubdtype(voxels.dtype, np.integer):
            raise TypeError("Label voxels must be integers, got %s" % voxels.dtype)
        present = np.unique(voxels)
        unknown = [int(v) for v in present if int(v) not in self.class_map]
        if unknown:
            raise UnknownClassError("Unregistered class ids in volume: %s" % unknown)
        object.__setattr__(self, "voxels", voxels.astype(np.uint8, copy=False))

    def __eq__(self, other):
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return (
            self.grid == other.grid
            and self.class_map == other.class_map
            and np.array_equal(self.voxels, other.voxels)
        )

    def with_voxels(self, voxels: np.ndarray) -> LabelVolume:
        "Return a volume on the same grid and class map with new voxels."
        return LabelVolume(self.grid, voxels, self.class_map)

    def linear_voxels(self) -> np.ndarray:
        "Voxels in x-fastest linear order."
        return self.voxels.ravel(order="F")

    def class_counts(self) -> dict[int, int]:
        counts = np.bincount(self.voxels.ravel(), minlength=self.class_map.n_channels)
        return {i: int(counts[i]) for i in self.class_map.ids}

    def present_classes(self) -> list[int]:
        return [i for i, n in self.class_counts().items() if n > 0 and i != 0]

    def foreground_mask(self) -> BinaryMask:
        return BinaryMask(self.grid, self.voxels != 0)


@dataclass(frozen=True, eq=False)
class DistanceField:
    """Per-voxel distance to the nearest foreground voxel of a mask."""

    grid: VoxelGrid3
    values: np.ndarray
    metric: Metric = Metric.INDEX

    def __post_init__(self):
        if self.values.shape != self.grid.dims:
            raise GridMismatchError(
                "Field shape %r does not match grid dims %r"
                % (self.values.shape, self.grid.dims)
            )
