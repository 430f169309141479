"""Distance transforms, morphology and connected components on voxel masks.

All operations take immutable inputs and return new objects.

"""

from __future__ import annotations

import logging
import typing as tp

import numpy as np
from scipy import ndimage

from .volume_common import (
    BinaryMask,
    DistanceField,
    LabelVolume,
    Metric,
    UnknownClassError,
)

_logger = logging.getLogger(__name__)

__all__ = [
    "class_mask",
    "edt",
    "dilate",
    "connected_components",
    "Connectivity",
]

Connectivity = tp.Literal[6, 26]

_STRUCTURE_RANK = {6: 1, 26: 3}


def class_mask(vol: LabelVolume, class_id: int) -> BinaryMask:
    """Mask of voxels labelled `class_id`."""
    if class_id not in vol.class_map:
        raise UnknownClassError("Class id %d is not registered" % class_id)
    return BinaryMask(vol.grid, vol.voxels == class_id)


def edt(mask: BinaryMask, metric: Metric = Metric.INDEX) -> DistanceField:
    """Exact Euclidean distance from each voxel centre to the nearest set voxel.

    Uses the separable linear-time transform from scipy. With an empty mask
    every value is the grid diagonal plus one, in the units of `metric`.

    """
    metric = Metric(metric)
    grid = mask.grid
    if not mask.bits.any():
        sentinel = grid.diagonal(metric) + 1.0
        return DistanceField(grid, np.full(grid.dims, sentinel), metric)

    sampling = grid.spacing if metric == Metric.WORLD else None
    values = ndimage.distance_transform_edt(~mask.bits, sampling=sampling)
    return DistanceField(grid, np.asarray(values, dtype=np.float64), metric)


def dilate(
    mask: BinaryMask, radius: float, metric: Metric = Metric.INDEX
) -> BinaryMask:
    """Ball dilation: voxels within `radius` of the mask (inclusive)."""
    if radius < 0:
        raise ValueError("Dilation radius must be non-negative, got %r" % radius)
    if radius == 0 or not mask.bits.any():
        return BinaryMask(mask.grid, mask.bits.copy())
    field = edt(mask, metric)
    return BinaryMask(mask.grid, field.values <= radius)


def connected_components(
    mask: BinaryMask, connectivity: Connectivity = 26
) -> tuple[np.ndarray, int]:
    """Label connected components of `mask`.

    Returns an integer array on the mask's grid (0 for background) and the
    number of components. Component ids follow the x-fastest scan order of
    each component's first voxel.

    """
    if connectivity not in _STRUCTURE_RANK:
        raise ValueError("Connectivity must be 6 or 26, got %r" % (connectivity,))
    structure = ndimage.generate_binary_structure(3, _STRUCTURE_RANK[connectivity])
    labels, count = ndimage.label(mask.bits, structure=structure)
    if count == 0:
        return np.zeros(mask.grid.dims, dtype=np.int32), 0

    # scipy numbers components in C order; renumber in x-fastest order
    flat = labels.ravel(order="F")
    ids, first = np.unique(flat[flat > 0], return_index=True)
    mapping = np.zeros(count + 1, dtype=np.int32)
    mapping[ids[np.argsort(first)]] = np.arange(1, count + 1, dtype=np.int32)
    _logger.debug("Found %d components (%d-connectivity)", count, connectivity)
    return mapping[labels], int(count)
