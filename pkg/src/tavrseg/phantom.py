"""Synthetic label volumes with analytically known anatomy.

Every phantom is voxelized by centre inclusion: a voxel belongs to a shape
iff its centre satisfies the shape's inclusion predicate. Vessels run along
+z; the left ventricle is a box whose top layer ``z = interface_z`` touches
the aorta from below.

"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import enum
from functools import cached_property
import logging
import math
import typing as tp

import numpy as np
from scipy import ndimage

from .enrich import PlaneFrame, strip_derived
from .volume_common import BinaryMask, LabelVolume, TavrClass, VoxelGrid3
from .voxel_ops import class_mask, connected_components

_logger = logging.getLogger(__name__)

__all__ = [
    "PhantomKind",
    "PhantomSpec",
    "GroundTruthRecord",
    "PhantomGeometryError",
    "generate",
    "radius_profile_phantom",
    "dip_and_rise_profile",
    "brute_force_within",
]


class PhantomGeometryError(ValueError):
    """Phantom parameters are invalid or the geometry leaves the grid."""


@enum.unique
class PhantomKind(str, enum.Enum):
    BOX_INTERFACE = "box_interface"
    CYLINDER_BULB = "cylinder_bulb"
    RADIUS_PROFILE = "radius_profile"
    Y_BIFURCATION = "y_bifurcation"
    SEVEN_CLASS_COMPOSITE = "seven_class_composite"
    TILTED_DISK = "tilted_disk"


def dip_and_rise_profile(length: int = 64) -> tuple[float, ...]:
    """Aorta radius by distance 1..length: hump near 10, dip at 25, then a rise."""
    d = np.arange(1, length + 1, dtype=np.float64)
    r = 10.0 + 3.0 * np.exp(-(((d - 10.0) / 5.0) ** 2)) + 0.15 * np.abs(d - 25.0)
    return tuple(float(v) for v in r)


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of a phantom; unused fields are ignored by a kind.

    `jitter` is the probability of growing each class into a touching
    background voxel, except for tilted_disk where it is the amplitude (in
    voxels) of the random offset applied to the disk plane per voxel.

    """

    kind: PhantomKind
    dims: tuple[int, int, int] = (32, 32, 32)

    # z of the annulus layer (top of the ventricle box)
    interface_z: int = 10
    ventricle_half_width: float = 8.0
    radius: float = 5.0

    gap: int = 0
    bulb_radius: float = 12.0
    bulb_center: float = 40.0
    profile: tuple[float, ...] = ()

    bifurcation_z: int = 22
    branch_radius: float = 2.5
    branch_spread: float = 10.0

    normal: tuple[float, float, float] = (0.0, 0.0, 1.0)
    disk_radius: float = 8.0

    jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", PhantomKind(self.kind))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "profile", tuple(float(r) for r in self.profile))
        if self.jitter < 0:
            raise PhantomGeometryError("jitter must be non-negative")

    @classmethod
    def for_kind(cls, kind: tp.Union[PhantomKind, str], **overrides) -> PhantomSpec:
        """Spec with the standard parameters of `kind`, updated by `overrides`."""
        kind = PhantomKind(kind)
        params = dict(_KIND_DEFAULTS[kind])
        params.update(overrides)
        return cls(kind=kind, **params)

    @property
    def grid(self) -> VoxelGrid3:
        return VoxelGrid3(self.dims)


_KIND_DEFAULTS: dict[PhantomKind, dict[str, tp.Any]] = {
    PhantomKind.BOX_INTERFACE: dict(dims=(24, 24, 24), interface_z=10, radius=4.0),
    PhantomKind.CYLINDER_BULB: dict(
        dims=(32, 32, 80),
        interface_z=20,
        radius=5.0,
        bulb_radius=12.0,
        bulb_center=40.0,
    ),
    PhantomKind.RADIUS_PROFILE: dict(
        dims=(40, 40, 72), interface_z=4, profile=dip_and_rise_profile(64)
    ),
    PhantomKind.Y_BIFURCATION: dict(
        dims=(40, 40, 48), radius=3.0, bifurcation_z=22, branch_spread=10.0
    ),
    PhantomKind.SEVEN_CLASS_COMPOSITE: dict(
        dims=(40, 40, 64),
        interface_z=12,
        radius=4.0,
        bulb_radius=9.0,
        bulb_center=22.0,
        bifurcation_z=44,
        branch_radius=2.5,
        branch_spread=10.0,
    ),
    PhantomKind.TILTED_DISK: dict(
        dims=(32, 32, 32), normal=(0.3, -0.2, 1.0), disk_radius=8.0, jitter=0.4
    ),
}


############################################################
# Ground truth
############################################################


def brute_force_within(
    source: BinaryMask, target: BinaryMask, threshold: float
) -> BinaryMask:
    """Source voxels within `threshold` (index units) of any target voxel.

    Compares every pair of voxels; meant as a test oracle.

    """
    out = np.zeros(source.grid.dims, dtype=bool)
    src = source.coordinates().astype(np.float64)
    tgt = target.coordinates().astype(np.float64)
    if len(src) == 0 or len(tgt) == 0:
        return BinaryMask(source.grid, out)
    limit = threshold**2
    chunk = max(1, 2_000_000 // len(tgt))
    hits = []
    for start in range(0, len(src), chunk):
        block = src[start : start + chunk]
        d2 = ((block[:, None, :] - tgt[None, :, :]) ** 2).sum(axis=2)
        hits.append(d2.min(axis=1) <= limit)
    keep = src[np.concatenate(hits)].astype(np.intp)
    out[tuple(keep.T)] = True
    return BinaryMask(source.grid, out)


@dataclass(frozen=True, eq=False)
class GroundTruthRecord:
    """Analytic answers that come with a generated phantom."""

    kind: PhantomKind
    volume: LabelVolume
    interface_plane: tp.Optional[PlaneFrame] = None
    waist_z: tp.Optional[float] = None
    waist_distance: tp.Optional[float] = None
    profile_extrema: tp.Optional[tuple[float, float]] = None
    expected_components: dict[int, int] = field(default_factory=dict)
    valve_distance: float = 3.0
    annulus_distance: float = 1.0

    @cached_property
    def base_volume(self) -> LabelVolume:
        "The volume with derived classes folded back into aorta and ventricle."
        return strip_derived(self.volume)

    @cached_property
    def expected_valve(self) -> BinaryMask:
        base = self.base_volume
        return brute_force_within(
            class_mask(base, TavrClass.AORTA),
            class_mask(base, TavrClass.LEFT_VENTRICLE),
            self.valve_distance,
        )

    @cached_property
    def expected_annulus(self) -> BinaryMask:
        base = self.base_volume
        return brute_force_within(
            class_mask(base, TavrClass.LEFT_VENTRICLE),
            class_mask(base, TavrClass.AORTA),
            self.annulus_distance,
        )


############################################################
# Shapes
############################################################


def _centres(dims) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return np.ogrid[: dims[0], : dims[1], : dims[2]]


def _axis_xy(dims) -> tuple[float, float]:
    return (dims[0] - 1) / 2.0, (dims[1] - 1) / 2.0


def _require_inside(lo, hi, dims, what: str) -> None:
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(lo < 0) or np.any(hi > np.asarray(dims) - 1):
        raise PhantomGeometryError(
            "%s spans %s..%s, outside grid %s"
            % (what, lo.tolist(), hi.tolist(), tuple(dims))
        )


def _require_positive(**values: float) -> None:
    for name, value in values.items():
        if not value > 0:
            raise PhantomGeometryError("%s must be positive, got %r" % (name, value))


def _ventricle_box(spec: PhantomSpec) -> np.ndarray:
    dims = spec.dims
    cx, cy = _axis_xy(dims)
    hw = spec.ventricle_half_width
    z_a = spec.interface_z
    if z_a < 2:
        raise PhantomGeometryError("interface_z must be at least 2, got %d" % z_a)
    _require_inside((cx - hw, cy - hw, 1), (cx + hw, cy + hw, z_a), dims, "ventricle")
    x, y, z = _centres(dims)
    return (np.abs(x - cx) <= hw) & (np.abs(y - cy) <= hw) & (z >= 1) & (z <= z_a)


def _segment_distance(dims, a, b) -> np.ndarray:
    """Distance from each voxel centre to the segment a-b."""
    x, y, z = _centres(dims)
    a = np.asarray(a, dtype=np.float64)
    ab = np.asarray(b, dtype=np.float64) - a
    px, py, pz = x - a[0], y - a[1], z - a[2]
    t = np.clip((px * ab[0] + py * ab[1] + pz * ab[2]) / ab.dot(ab), 0.0, 1.0)
    return np.sqrt(
        (px - t * ab[0]) ** 2 + (py - t * ab[1]) ** 2 + (pz - t * ab[2]) ** 2
    )


def _cylinder_bulb_aorta(spec: PhantomSpec, z_top: int) -> np.ndarray:
    dims = spec.dims
    _require_positive(radius=spec.radius, bulb_radius=spec.bulb_radius)
    if spec.bulb_radius <= spec.radius:
        raise PhantomGeometryError("bulb_radius must exceed radius")
    cx, cy = _axis_xy(dims)
    r, big_r, zc = spec.radius, spec.bulb_radius, spec.bulb_center
    _require_inside(
        (cx - big_r, cy - big_r, spec.interface_z + 1),
        (cx + big_r, cy + big_r, z_top),
        dims,
        "aorta bulb",
    )
    if zc + big_r > z_top:
        raise PhantomGeometryError("bulb extends above the aorta top z=%d" % z_top)
    x, y, z = _centres(dims)
    rho2 = (x - cx) ** 2 + (y - cy) ** 2
    shape = (rho2 <= r * r) | (rho2 + (z - zc) ** 2 <= big_r * big_r)
    return shape & (z > spec.interface_z) & (z <= z_top)


def _waist_z(spec: PhantomSpec) -> float:
    return spec.bulb_center + math.sqrt(spec.bulb_radius**2 - spec.radius**2)


def _paint(voxels: np.ndarray, mask: np.ndarray, class_id: int) -> None:
    voxels[mask] = class_id


def _jitter_boundaries(voxels: np.ndarray, amount: float, rng) -> np.ndarray:
    """Grow each class into touching background voxels with probability `amount`."""
    if amount <= 0:
        return voxels
    structure = ndimage.generate_binary_structure(3, 1)
    out = voxels.copy()
    for class_id in np.unique(voxels):
        if class_id == 0:
            continue
        draws = rng.random(voxels.shape)
        touching = ndimage.binary_dilation(out == class_id, structure) & (out == 0)
        out[touching & (draws < amount)] = class_id
    return out


def _components(vol: LabelVolume) -> dict[int, int]:
    return {
        c: connected_components(class_mask(vol, c), 26)[1] for c in vol.present_classes()
    }


############################################################
# Generators
############################################################


def _box_interface(spec: PhantomSpec, rng) -> tuple[np.ndarray, dict]:
    dims = spec.dims
    cx, cy = _axis_xy(dims)
    hw = spec.radius
    z_bottom = spec.interface_z + 1 + spec.gap
    z_top = dims[2] - 3
    if spec.gap < 0 or z_bottom > z_top:
        raise PhantomGeometryError("Invalid gap %d for grid %s" % (spec.gap, dims))
    _require_inside((cx - hw, cy - hw, z_bottom), (cx + hw, cy + hw, z_top), dims, "aorta")
    voxels = np.zeros(dims, dtype=np.uint8)
    _paint(voxels, _ventricle_box(spec), TavrClass.LEFT_VENTRICLE)
    x, y, z = _centres(dims)
    aorta = (np.abs(x - cx) <= hw) & (np.abs(y - cy) <= hw) & (z >= z_bottom) & (z <= z_top)
    _paint(voxels, aorta, TavrClass.AORTA)
    plane = PlaneFrame((cx, cy, spec.interface_z), (0, 0, 1))
    return voxels, dict(interface_plane=plane)


def _cylinder_bulb(spec: PhantomSpec, rng) -> tuple[np.ndarray, dict]:
    dims = spec.dims
    voxels = np.zeros(dims, dtype=np.uint8)
    _paint(voxels, _ventricle_box(spec), TavrClass.LEFT_VENTRICLE)
    _paint(voxels, _cylinder_bulb_aorta(spec, dims[2] - 3), TavrClass.AORTA)
    cx, cy = _axis_xy(dims)
    waist = _waist_z(spec)
    return voxels, dict(
        interface_plane=PlaneFrame((cx, cy, spec.interface_z), (0, 0, 1)),
        waist_z=waist,
        waist_distance=waist - spec.interface_z,
    )


def _profile_extrema(profile: tp.Sequence[float]) -> tp.Optional[tuple[float, float]]:
    r = np.asarray(profile)
    i = next(
        (k for k in range(1, len(r) - 1) if r[k - 1] < r[k] >= r[k + 1]), None
    )
    if i is None:
        return None
    j = next(
        (k for k in range(i + 1, len(r) - 1) if r[k - 1] > r[k] <= r[k + 1]), None
    )
    if j is None:
        return None
    # profile index k is distance k + 1 from the annulus layer
    return float(i + 1), float(j + 1)


def _radius_profile(spec: PhantomSpec, rng) -> tuple[np.ndarray, dict]:
    dims = spec.dims
    profile = spec.profile
    if not profile:
        raise PhantomGeometryError("radius_profile phantom needs a profile")
    if min(profile) <= 0:
        raise PhantomGeometryError("Profile radii must be positive")
    z_a = spec.interface_z
    cx, cy = _axis_xy(dims)
    r_max = max(profile)
    _require_inside(
        (cx - r_max, cy - r_max, z_a + 1),
        (cx + r_max, cy + r_max, z_a + len(profile)),
        dims,
        "aorta tube",
    )
    voxels = np.zeros(dims, dtype=np.uint8)
    _paint(voxels, _ventricle_box(spec), TavrClass.LEFT_VENTRICLE)
    x, y, _ = _centres(dims)
    rho2 = ((x - cx) ** 2 + (y - cy) ** 2)[:, :, 0]
    for k, r in enumerate(profile):
        voxels[:, :, z_a + 1 + k][rho2 <= r * r] = TavrClass.AORTA
    return voxels, dict(
        interface_plane=PlaneFrame((cx, cy, z_a), (0, 0, 1)),
        profile_extrema=_profile_extrema(profile),
    )


def _branch_ends(spec: PhantomSpec, z_end: float):
    cx, cy = _axis_xy(spec.dims)
    start = (cx, cy, float(spec.bifurcation_z))
    left = (cx - spec.branch_spread, cy, z_end)
    right = (cx + spec.branch_spread, cy, z_end)
    return start, left, right


def _y_bifurcation(spec: PhantomSpec, rng) -> tuple[np.ndarray, dict]:
    dims = spec.dims
    _require_positive(radius=spec.radius)
    r = spec.radius
    cx, cy = _axis_xy(dims)
    z_end = dims[2] - 2 - r
    z0 = 1 + r
    start, left, right = _branch_ends(spec, z_end)
    if not z0 < spec.bifurcation_z < z_end:
        raise PhantomGeometryError("bifurcation_z must lie inside the tube")
    _require_inside(
        (cx - spec.branch_spread - r, cy - r, z0 - r),
        (cx + spec.branch_spread + r, cy + r, z_end + r),
        dims,
        "bifurcation",
    )
    tube = _segment_distance(dims, (cx, cy, z0), start) <= r
    tube |= _segment_distance(dims, start, left) <= r
    tube |= _segment_distance(dims, start, right) <= r
    voxels = np.zeros(dims, dtype=np.uint8)
    _paint(voxels, tube, TavrClass.AORTA)
    return voxels, {}


def _seven_class_composite(spec: PhantomSpec, rng) -> tuple[np.ndarray, dict]:
    dims = spec.dims
    _require_positive(branch_radius=spec.branch_radius)
    z_bif = spec.bifurcation_z
    voxels = np.zeros(dims, dtype=np.uint8)
    _paint(voxels, _ventricle_box(spec), TavrClass.LEFT_VENTRICLE)
    _paint(voxels, _cylinder_bulb_aorta(spec, z_bif), TavrClass.AORTA)

    cx, cy = _axis_xy(dims)
    rb = spec.branch_radius
    z_end = dims[2] - 2 - rb
    start, left, right = _branch_ends(spec, z_end)
    _require_inside(
        (cx - spec.branch_spread - rb, cy - rb, z_bif),
        (cx + spec.branch_spread + rb, cy + rb, z_end + rb),
        dims,
        "iliac branches",
    )
    x, _, _ = _centres(dims)
    free = voxels == 0
    left_tube = (_segment_distance(dims, start, left) <= rb) & (x < cx) & free
    right_tube = (_segment_distance(dims, start, right) <= rb) & (x > cx) & free
    _paint(voxels, left_tube, TavrClass.ILIAC_ARTERY_LEFT)
    _paint(voxels, right_tube, TavrClass.ILIAC_ARTERY_RIGHT)

    voxels = _jitter_boundaries(voxels, spec.jitter, rng)
    voxels = _paint_derived(voxels, spec)
    waist = _waist_z(spec)
    return voxels, dict(
        interface_plane=PlaneFrame((cx, cy, spec.interface_z), (0, 0, 1)),
        waist_z=waist,
        waist_distance=waist - spec.interface_z,
    )


def _paint_derived(voxels: np.ndarray, spec: PhantomSpec) -> np.ndarray:
    """Paint root, annulus and valve (lowest precedence first) by rule oracles."""
    grid = VoxelGrid3(spec.dims)
    aorta = BinaryMask(grid, voxels == TavrClass.AORTA)
    ventricle = BinaryMask(grid, voxels == TavrClass.LEFT_VENTRICLE)
    valve = brute_force_within(aorta, ventricle, 3.0)
    annulus = brute_force_within(ventricle, aorta, 1.0)
    _, _, z = _centres(spec.dims)
    root = aorta.bits & (z > spec.interface_z) & (z <= _waist_z(spec))

    out = voxels.copy()
    _paint(out, root, TavrClass.AORTIC_ROOT)
    _paint(out, annulus.bits, TavrClass.ANNULUS)
    _paint(out, valve.bits, TavrClass.VALVE)
    return out


def _tilted_disk(spec: PhantomSpec, rng) -> tuple[np.ndarray, dict]:
    dims = spec.dims
    _require_positive(disk_radius=spec.disk_radius)
    normal = np.asarray(spec.normal, dtype=np.float64)
    if not np.linalg.norm(normal) > 0:
        raise PhantomGeometryError("Disk normal must be non-zero")
    normal /= np.linalg.norm(normal)
    centre = (np.asarray(dims, dtype=np.float64) - 1) / 2.0
    cap_height = 4.0
    reach = spec.disk_radius + cap_height + 1
    _require_inside(centre - reach, centre + reach, dims, "tilted disk")

    x, y, z = _centres(dims)
    px, py, pz = x - centre[0], y - centre[1], z - centre[2]
    height = px * normal[0] + py * normal[1] + pz * normal[2]
    radial2 = px**2 + py**2 + pz**2 - height**2
    offset = rng.uniform(-spec.jitter, spec.jitter, size=dims)
    inside = radial2 <= spec.disk_radius**2
    disk = inside & (np.abs(height + offset) <= 0.5)
    cap = inside & (height >= 1.5) & (height <= cap_height)

    voxels = np.zeros(dims, dtype=np.uint8)
    _paint(voxels, cap, TavrClass.AORTA)
    _paint(voxels, disk, TavrClass.LEFT_VENTRICLE)
    return voxels, dict(interface_plane=PlaneFrame(centre, normal))


_GENERATORS = {
    PhantomKind.BOX_INTERFACE: _box_interface,
    PhantomKind.CYLINDER_BULB: _cylinder_bulb,
    PhantomKind.RADIUS_PROFILE: _radius_profile,
    PhantomKind.Y_BIFURCATION: _y_bifurcation,
    PhantomKind.SEVEN_CLASS_COMPOSITE: _seven_class_composite,
    PhantomKind.TILTED_DISK: _tilted_disk,
}

# Kinds whose jitter is applied inside the generator
_OWN_JITTER = {PhantomKind.SEVEN_CLASS_COMPOSITE, PhantomKind.TILTED_DISK}


def generate(
    spec: PhantomSpec, grid: tp.Optional[VoxelGrid3] = None
) -> tuple[LabelVolume, GroundTruthRecord]:
    """Voxelize `spec` on `grid` (default: a unit-spaced grid of `spec.dims`)."""
    if grid is not None and grid.dims != spec.dims:
        spec = replace(spec, dims=grid.dims)
    grid = grid or spec.grid
    rng = np.random.default_rng(spec.seed)
    voxels, truth = _GENERATORS[spec.kind](spec, rng)
    if spec.kind not in _OWN_JITTER:
        voxels = _jitter_boundaries(voxels, spec.jitter, rng)
    vol = LabelVolume(grid, voxels)
    record = GroundTruthRecord(
        kind=spec.kind,
        volume=vol,
        expected_components=_components(vol),
        **truth,
    )
    _logger.info("Generated %s phantom on %s", spec.kind.value, grid)
    return vol, record


def radius_profile_phantom(
    profile: tp.Sequence[float],
    grid: VoxelGrid3,
    interface_z: int = 4,
    ventricle_half_width: float = 8.0,
) -> LabelVolume:
    """Tube whose slice at distance ``k + 1`` above the annulus has radius ``profile[k]``."""
    spec = PhantomSpec(
        kind=PhantomKind.RADIUS_PROFILE,
        dims=grid.dims,
        interface_z=interface_z,
        ventricle_half_width=ventricle_half_width,
        profile=tuple(profile),
    )
    vol, _ = generate(spec, grid)
    return vol
