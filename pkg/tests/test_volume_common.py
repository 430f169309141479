import numpy as np
import pytest

from tavrseg.volume_common import *

import logging

logger = logging.getLogger(__name__)


def test_tavr_class_ids():
    assert [int(c) for c in TavrClass] == list(range(8))
    assert TavrClass.AORTIC_ROOT.label_name == "aortic_root"
    assert TavrClass.from_name("Left_Ventricle") is TavrClass.LEFT_VENTRICLE


def test_tavr_class_unknown_name():
    with pytest.raises(UnknownClassError):
        TavrClass.from_name("pulmonary_artery")


def test_class_map_canonical():
    assert TAVR_CLASS_MAP.ids == list(range(8))
    assert TAVR_CLASS_MAP.foreground_ids == list(range(1, 8))
    assert TAVR_CLASS_MAP.n_channels == 8
    assert TAVR_CLASS_MAP.name_of(5) == "annulus"
    assert TAVR_CLASS_MAP.id_of("valve") == 4
    assert 7 in TAVR_CLASS_MAP
    assert 8 not in TAVR_CLASS_MAP


@pytest.mark.parametrize(
    "entries",
    [
        ((0, "background"), (1, "aorta"), (1, "valve")),
        ((0, "background"), (1, "aorta"), (2, "aorta")),
        ((0, "void"), (1, "aorta")),
        ((0, "background"), (300, "aorta")),
    ],
)
def test_class_map_invalid(entries):
    with pytest.raises(ValueError):
        ClassMap(entries)


def test_class_map_lookup_errors():
    with pytest.raises(UnknownClassError):
        TAVR_CLASS_MAP.name_of(9)
    with pytest.raises(UnknownClassError):
        TAVR_CLASS_MAP.id_of("vein")


def test_grid_default_affine():
    grid = VoxelGrid3((4, 5, 6), (0.5, 1.0, 2.0))
    assert grid.n_voxels == 120
    np.testing.assert_array_equal(grid.affine, np.diag([0.5, 1.0, 2.0, 1.0]))
    assert not grid.affine.flags.writeable
    np.testing.assert_allclose(grid.index_to_world([[2, 2, 2]]), [[1.0, 2.0, 4.0]])


def test_grid_diagonal():
    grid = VoxelGrid3((3, 4, 12), (2.0, 2.0, 2.0))
    assert grid.diagonal() == pytest.approx(13.0)
    assert grid.diagonal(Metric.WORLD) == pytest.approx(26.0)


@pytest.mark.parametrize(
    "dims,spacing",
    [
        ((0, 4, 4), (1, 1, 1)),
        ((4, 4), (1, 1, 1)),
        ((4, 4, 4), (1, 0, 1)),
        ((4, 4, 4), (1, -1, 1)),
    ],
)
def test_grid_invalid(dims, spacing):
    with pytest.raises(ValueError):
        VoxelGrid3(dims, spacing)


def test_grid_singular_affine():
    with pytest.raises(ValueError):
        VoxelGrid3((2, 2, 2), affine=np.zeros((4, 4)))


def test_grid_equality_tolerance():
    a = VoxelGrid3((4, 4, 4), (1.0, 1.0, 1.0))
    assert a == VoxelGrid3((4, 4, 4), (1.0 + 1e-8, 1.0, 1.0))
    assert a != VoxelGrid3((4, 4, 4), (1.1, 1.0, 1.0))
    assert a != VoxelGrid3((4, 4, 5))


def test_binary_mask_set_operations():
    grid = VoxelGrid3((3, 3, 3))
    a = np.zeros(grid.dims, dtype=bool)
    b = np.zeros(grid.dims, dtype=bool)
    a[0, :, 0] = True
    b[:, 0, 0] = True
    ma, mb = BinaryMask(grid, a), BinaryMask(grid, b)
    assert len(ma) == 3
    assert len(ma | mb) == 5
    assert len(ma & mb) == 1
    assert len(ma - mb) == 2
    assert (ma & mb).issubset(ma)
    assert not ma.issubset(mb)
    assert not BinaryMask.empty(grid).any()


def test_binary_mask_grid_mismatch():
    a = BinaryMask.empty(VoxelGrid3((3, 3, 3)))
    b = BinaryMask.empty(VoxelGrid3((3, 3, 4)))
    with pytest.raises(GridMismatchError):
        a | b
    with pytest.raises(GridMismatchError):
        BinaryMask(VoxelGrid3((3, 3, 3)), np.zeros((3, 3, 4), dtype=bool))


def test_binary_mask_coordinates_x_fastest():
    grid = VoxelGrid3((2, 2, 2))
    mask = BinaryMask(grid, np.ones(grid.dims, dtype=bool))
    coords = mask.coordinates()
    assert coords[:4].tolist() == [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]]
    assert coords[4].tolist() == [0, 0, 1]


def test_label_volume_counts():
    grid = VoxelGrid3((2, 2, 2))
    voxels = np.zeros(grid.dims, dtype=np.int16)
    voxels[0, 0, 0] = 1
    voxels[1, 1, 1] = 2
    voxels[1, 0, 1] = 2
    vol = LabelVolume(grid, voxels)
    assert vol.voxels.dtype == np.uint8
    counts = vol.class_counts()
    assert counts[0] == 5 and counts[1] == 1 and counts[2] == 2 and counts[7] == 0
    assert vol.present_classes() == [1, 2]
    assert len(vol.foreground_mask()) == 3
    assert vol.linear_voxels()[0] == 1


def test_label_volume_rejects_unknown_ids():
    grid = VoxelGrid3((2, 2, 2))
    voxels = np.zeros(grid.dims, dtype=np.int32)
    voxels[0, 0, 0] = 8
    with pytest.raises(UnknownClassError, match="8"):
        LabelVolume(grid, voxels)


def test_label_volume_rejects_floats():
    grid = VoxelGrid3((2, 2, 2))
    with pytest.raises(TypeError):
        LabelVolume(grid, np.zeros(grid.dims))


def test_label_volume_equality():
    grid = VoxelGrid3((2, 2, 2))
    a = LabelVolume(grid, np.zeros(grid.dims, dtype=np.uint8))
    b = a.with_voxels(np.zeros(grid.dims, dtype=np.uint8))
    assert a == b
    voxels = b.voxels.copy()
    voxels[1, 1, 1] = 3
    assert a != b.with_voxels(voxels)


def test_check_same_grid():
    grid = VoxelGrid3((2, 2, 2))
    a = BinaryMask.empty(grid)
    assert check_same_grid(a, BinaryMask.empty(VoxelGrid3((2, 2, 2)))) == grid
    with pytest.raises(GridMismatchError):
        check_same_grid(a, BinaryMask.empty(VoxelGrid3((2, 2, 2), (2, 1, 1))))
