"""Read and write label and logit volumes as NIfTI-1 files.

Labels are stored as unsigned bytes; logits as 32-bit floats with the
class channels along the fourth axis. Files are written to a temporary
name in the target directory and renamed into place.

"""

from __future__ import annotations

from contextlib import contextmanager
import logging
import os
from pathlib import Path
import tempfile
import typing as tp

import nibabel as nib
import numpy as np

from .losses import LogitField
from .volume_common import TAVR_CLASS_MAP, ClassMap, LabelVolume, VoxelGrid3

_logger = logging.getLogger(__name__)

__all__ = [
    "LabelVolumeReader",
    "read_label_volume",
    "write_label_volume",
    "read_logit_volume",
    "write_logit_volume",
    "atomic_output",
]

PathLike = tp.Union[str, os.PathLike]


def _suffix(path: Path) -> str:
    name = path.name.lower()
    if name.endswith(".nii.gz"):
        return ".nii.gz"
    return path.suffix


@contextmanager
def atomic_output(path: PathLike) -> tp.Iterator[Path]:
    """Yield a temporary path next to `path`; rename it into place on success."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(
        dir=str(path.parent), prefix="." + path.name + ".", suffix=_suffix(path)
    )
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _grid_from_image(img, shape) -> VoxelGrid3:
    zooms = img.header.get_zooms()[:3]
    return VoxelGrid3(tuple(shape[:3]), tuple(float(z) for z in zooms), img.affine)


class LabelVolumeReader:
    """Reads label volumes, translating source ids to the canonical class map.

    With `label_mapping`, source ids missing from the mapping become
    background; without one, every stored id must already be registered.
    Oddities are logged once per reader.

    """

    def __init__(
        self,
        label_mapping: tp.Optional[dict[int, int]] = None,
        class_map: ClassMap = TAVR_CLASS_MAP,
    ):
        self.label_mapping = label_mapping
        self.class_map = class_map
        self._warned_about_unmapped = False
        self._warned_about_float_storage = False

    def _integer_labels(self, data: np.ndarray, path: PathLike) -> np.ndarray:
        if np.issubdtype(data.dtype, np.integer):
            return data.astype(np.int64)
        rounded = np.rint(data)
        if not np.array_equal(rounded, data):
            raise ValueError("Label volume %s holds non-integer values" % path)
        if not self._warned_about_float_storage:
            _logger.warning(
                "Label volume %s is stored as %s; converting to integers",
                path,
                data.dtype,
            )
            self._warned_about_float_storage = True
        return rounded.astype(np.int64)

    def _translate(self, data: np.ndarray, path: PathLike) -> np.ndarray:
        if self.label_mapping is None:
            return data
        out = np.zeros(data.shape, dtype=np.uint8)
        for source_id, class_id in self.label_mapping.items():
            out[data == source_id] = class_id
        unmapped = sorted(
            int(v) for v in np.unique(data) if v != 0 and int(v) not in self.label_mapping
        )
        if unmapped and not self._warned_about_unmapped:
            _logger.warning(
                "Unmapped source labels %s in %s set to background "
                "(further warnings suppressed)",
                unmapped,
                path,
            )
            self._warned_about_unmapped = True
        return out

    def read(self, path: PathLike) -> LabelVolume:
        img = nib.load(str(path))
        data = np.asanyarray(img.dataobj)
        if data.ndim == 4 and data.shape[3] == 1:
            data = data[..., 0]
        if data.ndim != 3:
            raise ValueError("Label volume %s has shape %r, expected 3D" % (path, data.shape))
        labels = self._translate(self._integer_labels(data, path), path)
        vol = LabelVolume(_grid_from_image(img, labels.shape), labels, self.class_map)
        _logger.debug("Read %s: dims %s spacing %s", path, vol.grid.dims, vol.grid.spacing)
        return vol


def read_label_volume(
    path: PathLike, label_mapping: tp.Optional[dict[int, int]] = None
) -> LabelVolume:
    return LabelVolumeReader(label_mapping).read(path)


def _image(data: np.ndarray, grid: VoxelGrid3, dtype) -> nib.Nifti1Image:
    img = nib.Nifti1Image(data.astype(dtype), np.array(grid.affine))
    img.header.set_data_dtype(dtype)
    img.set_qform(np.array(grid.affine), code=1)
    img.set_sform(np.array(grid.affine), code=1)
    # after the forms, which overwrite pixdim from the affine
    img.header.set_zooms(tuple(grid.spacing) + tuple(1.0 for _ in data.shape[3:]))
    return img


def write_label_volume(vol: LabelVolume, path: PathLike) -> None:
    """Write `vol` as an unsigned byte NIfTI-1 file (.nii or .nii.gz)."""
    img = _image(vol.voxels, vol.grid, np.uint8)
    with atomic_output(path) as tmp:
        nib.save(img, str(tmp))
    _logger.debug("Wrote %s", path)


def read_logit_volume(path: PathLike) -> LogitField:
    """Read a 4D float volume, channels last on disk, as a logit field."""
    img = nib.load(str(path))
    data = np.asanyarray(img.dataobj).astype(np.float64)
    if data.ndim != 4:
        raise ValueError("Logit volume %s has shape %r, expected 4D" % (path, data.shape))
    return LogitField(_grid_from_image(img, data.shape), np.moveaxis(data, 3, 0))


def write_logit_volume(logits: LogitField, path: PathLike) -> None:
    img = _image(np.moveaxis(logits.values, 0, 3), logits.grid, np.float32)
    with atomic_output(path) as tmp:
        nib.save(img, str(tmp))
