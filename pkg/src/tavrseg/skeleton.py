"""Per-class skeletons used as recall-loss supervision."""

from __future__ import annotations

from dataclasses import dataclass, field
import logging

import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize as _skimage_skeletonize

from .volume_common import BinaryMask, LabelVolume, Metric, VoxelGrid3
from .voxel_ops import class_mask, connected_components, dilate

_logger = logging.getLogger(__name__)

__all__ = [
    "SkeletonMask",
    "skeletonize",
    "tubed_skeleton",
    "skeletons_for_volume",
]


@dataclass(frozen=True, eq=False)
class SkeletonMask:
    """Skeleton masks keyed by class id, all on one grid."""

    grid: VoxelGrid3
    masks: dict[int, BinaryMask] = field(default_factory=dict)
    tube_radius: float = 0.0

    def __post_init__(self):
        for class_id, mask in self.masks.items():
            if mask.grid != self.grid:
                raise ValueError("Skeleton for class %d is on another grid" % class_id)

    def __len__(self) -> int:
        return len(self.masks)

    def __getitem__(self, class_id: int) -> BinaryMask:
        return self.masks[class_id]

    @property
    def class_ids(self) -> list[int]:
        return sorted(self.masks)

    def to_array(self, n_channels: int) -> np.ndarray:
        """Skeletons as a float array of shape (n_channels, nx, ny, nz)."""
        out = np.zeros((n_channels,) + self.grid.dims, dtype=np.float64)
        for class_id, mask in self.masks.items():
            if class_id >= n_channels:
                raise ValueError(
                    "Skeleton class %d has no channel (n_channels=%d)"
                    % (class_id, n_channels)
                )
            out[class_id] = mask.bits
        return out

    def as_label_volume(self, like: LabelVolume) -> LabelVolume:
        """Write skeletons into a label volume; higher class ids win overlaps."""
        voxels = np.zeros(self.grid.dims, dtype=np.uint8)
        for class_id in self.class_ids:
            voxels[self.masks[class_id].bits] = class_id
        return LabelVolume(self.grid, voxels, like.class_map)


def skeletonize(mask: BinaryMask) -> BinaryMask:
    """Topology-preserving 3D thinning (Lee's method).

    Every 26-connected component of `mask` keeps at least one voxel: a
    component that thinning removes entirely is replaced by its deepest
    voxel (largest distance to the background).

    """
    if not mask.any():
        return BinaryMask(mask.grid, mask.bits.copy())
    thin = _skimage_skeletonize(mask.bits, method="lee") != 0

    labels, count = connected_components(mask, 26)
    kept = np.unique(labels[thin])
    lost = np.setdiff1d(np.arange(1, count + 1), kept)
    if len(lost):
        depth = ndimage.distance_transform_edt(np.pad(mask.bits, 1))[1:-1, 1:-1, 1:-1]
        for position in ndimage.maximum_position(depth, labels, lost):
            thin[position] = True
        _logger.debug("Restored %d components erased by thinning", len(lost))
    _logger.debug("Thinned %d voxels to %d", len(mask), int(thin.sum()))
    return BinaryMask(mask.grid, thin)


def tubed_skeleton(
    mask: BinaryMask, tube_radius: float, metric: Metric = Metric.INDEX
) -> BinaryMask:
    """Skeleton dilated by `tube_radius`; radius 0 is the plain skeleton."""
    if tube_radius < 0:
        raise ValueError("Tube radius must be non-negative, got %r" % tube_radius)
    return dilate(skeletonize(mask), tube_radius, metric)


def skeletons_for_volume(vol: LabelVolume, tube_radius: float = 0.0) -> SkeletonMask:
    """Tubed skeletons of every non-empty foreground class."""
    masks = {}
    for class_id in vol.class_map.foreground_ids:
        mask = class_mask(vol, class_id)
        if not mask.any():
            continue
        masks[class_id] = tubed_skeleton(mask, tube_radius)
    _logger.debug("Skeletonized %d classes", len(masks))
    return SkeletonMask(vol.grid, masks, tube_radius)
