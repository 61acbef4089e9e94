"""Synthetic CT phantoms with known liver ground truth.

Every phantom is a z-window of one full-length body layout (feet at z=0,
vertex at ~1760 mm). Coordinates are body millimetres: x towards the patient's
left, y posterior, z cranial. Tissue values are generator constants picked
from standard CT ranges, not clinical claims.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from .atlas import REFERENCE_VARIANTS, LiverShape, LiverShapeType, rasterize_shape
from .volume import HU_MAX, HU_MIN, BinaryMask, CtVolume, InvalidArgumentError, VoxelGrid

AIR = -1000
LUNG = -800
FAT = -100
SOFT = 30
MUSCLE = 40
BONE = 700
DISC = 80
BRAIN = 35
CSF = 8
FLUID = 15
BOWEL_WALL = 25

BODY_TOP_MM = 1760.0
LIVER_DOME_MM = 1262.0
FAT_PLANE_MM = 4.0

KINDS = ("body", "chest_crop", "head", "limb")
LIVER_KINDS = ("body", "chest_crop")


@dataclass(frozen=True)
class Lesion:
    hu: float
    radius_mm: Optional[float] = None
    fraction: Optional[float] = None

    def __post_init__(self):
        if self.radius_mm is None and self.fraction is None:
            raise InvalidArgumentError("lesion needs radius_mm or fraction")
        if self.radius_mm is not None and self.radius_mm <= 0:
            raise InvalidArgumentError("lesion radius must be > 0")
        if self.fraction is not None and not 0 < self.fraction < 1:
            raise InvalidArgumentError("lesion fraction must be in (0, 1)")
        if not -200 <= self.hu <= 300:
            raise InvalidArgumentError("lesion hu must be in [-200, 300]")


@dataclass(frozen=True)
class PhantomSpec:
    kind: str = "body"
    liver_hu: float = 50.0
    lesion: Optional[Lesion] = None
    noise_sigma_hu: float = 10.0
    liver_scale: float = 1.0
    fov_liver_fraction: float = 1.0
    seed: int = 0
    shape_type: Optional[LiverShapeType] = None
    spacing_mm: Tuple[float, float, float] = (2.0, 2.0, 2.0)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgumentError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not -200 <= self.liver_hu <= 300:
            raise InvalidArgumentError(f"liver_hu must be in [-200, 300], got {self.liver_hu}")
        if not self.noise_sigma_hu >= 0:
            raise InvalidArgumentError("noise_sigma_hu must be >= 0")
        if not 0.5 <= self.liver_scale <= 1.5:
            raise InvalidArgumentError("liver_scale must be in [0.5, 1.5]")
        if not 0 < self.fov_liver_fraction <= 1:
            raise InvalidArgumentError("fov_liver_fraction must be in (0, 1]")
        if any(s <= 0 for s in self.spacing_mm):
            raise InvalidArgumentError("spacing must be > 0")


@dataclass
class PhantomTruth:
    liver_mask: BinaryMask
    liver_mean_hu: float
    lesion_mask: Optional[BinaryMask] = None
    label: bool = True
    shape_type: Optional[LiverShapeType] = None
    extra: dict = field(default_factory=dict)


# --- body layout ---------------------------------------------------------------


def _trunk_axes(z):
    """Trunk ellipse semi-axes (x, y) as a function of body z."""
    z = np.asarray(z, dtype=float)
    ax = np.interp(z, [860, 950, 1100, 1300, 1480], [168, 165, 158, 164, 160])
    ay = np.interp(z, [860, 950, 1100, 1300, 1480], [118, 116, 112, 118, 112])
    return ax, ay


@dataclass(frozen=True)
class _Anatomy:
    liver: Optional[LiverShape]
    liver_anchor: Tuple[float, float, float]
    lesion_center: Tuple[float, float, float]
    stomach_z: float
    kidney_z: float


def _ellipse_q(x, y, cx, cy, ax, ay):
    return ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2


def _ellipsoid(X, Y, Z, c, r):
    return ((X - c[0]) / r[0]) ** 2 + ((Y - c[1]) / r[1]) ** 2 + ((Z - c[2]) / r[2]) ** 2 <= 1.0


def _vertebra(z, top, bottom, period, disc):
    """(bone, disc) boolean profiles along z for a vertebral column segment."""
    inside = (z >= bottom) & (z < top)
    phase = np.mod(z - bottom, period)
    is_disc = inside & (phase >= period - disc)
    return inside & ~is_disc, is_disc


class _Renderer:
    def __init__(self, grid: VoxelGrid, anat: _Anatomy, rng: np.random.Generator):
        self.grid = grid
        self.anat = anat
        self.rng = rng
        self.x = grid.axis_coords(0)
        self.y = grid.axis_coords(1)
        self.z = grid.axis_coords(2)

    def render(self):
        nz, ny, nx = self.grid.shape
        vol = np.full((nz, ny, nx), AIR, dtype=np.int16)
        X = self.x[None, None, :]
        Y = self.y[None, :, None]
        Z = self.z[:, None, None]
        liver = np.zeros(vol.shape, dtype=bool)
        if self.anat.liver is not None:
            liver = rasterize_shape(self.anat.liver, self.grid, self.anat.liver_anchor)

        self._legs(vol, X, Y, Z)
        self._trunk(vol, X, Y, Z, liver)
        self._neck_head(vol, X, Y, Z)

        if liver.any():
            sp = self.grid.spacing_zyx
            dist = ndimage.distance_transform_edt(~liver, sampling=sp)
            plane = (dist > 0) & (dist <= FAT_PLANE_MM + 1e-6) & (vol != BONE)
            vol[plane] = FAT
            vol[liver] = 0  # filled by the caller with the liver value
        return vol, liver

    # legs: two tapered cylinders with tibia/fibula, knee, femur, feet
    def _legs(self, vol, X, Y, Z):
        z = self.z
        sel = z < 900
        if not sel.any():
            return
        zs = z[sel][:, None, None]
        sub = vol[sel]
        radius = np.interp(zs, [0, 80, 450, 520, 860, 900], [45, 45, 55, 60, 78, 80])
        for side in (-1, 1):
            cx = 95.0 * side
            q = ((X - cx) ** 2 + Y**2) / radius**2
            foot = _ellipsoid(X, Y, zs, (cx, -45.0, 35.0), (32.0, 80.0, 35.0))
            leg = (q <= 1.0) & (zs >= 50)
            skin = leg | foot
            sub[skin] = FAT
            inner = ((X - cx) ** 2 + Y**2) <= (radius - 8.0) ** 2
            sub[(inner & (zs >= 50)) | _ellipsoid(X, Y, zs, (cx, -45.0, 35.0), (26.0, 72.0, 28.0))] = MUSCLE
            bone = np.zeros(sub.shape, dtype=bool)
            bone |= _ellipsoid(X, Y, zs, (cx, -40.0, 32.0), (20.0, 55.0, 22.0))
            tib = (zs >= 60) & (zs < 470) & (((X - cx) ** 2 + (Y + 5) ** 2) <= 13.0**2)
            fib = (zs >= 80) & (zs < 460) & (((X - cx - 24 * side) ** 2 + (Y - 10) ** 2) <= 6.0**2)
            knee = _ellipsoid(X, Y, zs, (cx, 0.0, 500.0), (38.0, 32.0, 42.0))
            patella = _ellipsoid(X, Y, zs, (cx, -42.0, 522.0), (14.0, 8.0, 18.0))
            femur = (zs >= 520) & (zs < 860) & (((X - cx) ** 2 + (Y - 5) ** 2) <= 14.0**2)
            head = _ellipsoid(X, Y, zs, (cx - 10 * side, 5.0, 868.0), (24.0, 24.0, 24.0))
            bone |= tib | fib | knee | patella | femur | head
            sub[bone] = BONE
        vol[sel] = sub

    def _trunk(self, vol, X, Y, Z, liver):
        z = self.z
        sel = (z >= 860) & (z < 1490)
        if not sel.any():
            return
        zs = z[sel]
        Zs = zs[:, None, None]
        sub = vol[sel]
        ax, ay = _trunk_axes(zs)
        ax = ax[:, None, None]
        ay = ay[:, None, None]
        q = _ellipse_q(X, Y, 0.0, 0.0, ax, ay)
        body = q <= 1.0
        sub[body] = FAT
        wall = _ellipse_q(X, Y, 0.0, 0.0, ax - 15, ay - 15) <= 1.0
        sub[wall] = MUSCLE
        cavity = _ellipse_q(X, Y, 0.0, 0.0, ax - 25, ay - 25) <= 1.0
        sub[cavity] = SOFT

        dome = self.anat.liver_anchor[2] if self.anat.liver is not None else LIVER_DOME_MM
        # abdominal contents: bowel mottle below the diaphragm, above the pelvic floor
        abdo = cavity & (Zs < dome - 25) & (Zs > 900) & ~(
            _ellipse_q(X, Y, 0.0, 62.0, 60.0, 40.0) <= 1.0
        )
        if abdo.any():
            field_ = self._smooth_field(sub.shape)
            mott = np.full(sub.shape, BOWEL_WALL, dtype=np.int16)
            mott[field_ > 0.45] = AIR
            mott[field_ < -0.45] = FAT
            sub[abdo] = mott[abdo]
        kz = self.anat.kidney_z
        for side, dz in ((-1, 0.0), (1, 15.0)):
            kid = _ellipsoid(X, Y, Zs, (62.0 * side, 58.0, kz + dz), (28.0, 26.0, 55.0))
            peri = _ellipsoid(X, Y, Zs, (62.0 * side, 58.0, kz + dz), (36.0, 34.0, 63.0))
            sub[peri & cavity] = FAT
            sub[kid] = SOFT
        sz_ = self.anat.stomach_z
        stomach = _ellipsoid(X, Y, Zs, (62.0, -18.0, sz_), (48.0, 42.0, 58.0))
        sub[stomach] = FLUID
        sub[stomach & (Zs > sz_ + 18)] = AIR

        # chest: lungs, heart
        for cx, cz, r in ((-80.0, 1338.0, (62.0, 86.0, 150.0)), (84.0, 1348.0, (58.0, 86.0, 140.0))):
            lung = _ellipsoid(X, Y, Zs, (cx, 12.0, cz), r)
            sub[lung & cavity] = LUNG
        heart = _ellipsoid(X, Y, Zs, (22.0, -18.0, 1318.0), (55.0, 50.0, 62.0))
        sub[heart] = MUSCLE
        # diaphragm: soft tissue under the lungs next to the liver
        if liver.any():
            near = ndimage.distance_transform_edt(
                ~liver[sel], sampling=self.grid.spacing_zyx
            ) <= FAT_PLANE_MM + 6.0
            sub[near & (sub == LUNG)] = MUSCLE

        # spine
        bone = np.zeros(sub.shape, dtype=bool)
        disc = np.zeros(sub.shape, dtype=bool)
        for top, bottom, period, dlen, cy, r in (
            (1180.0, 1000.0, 36.0, 8.0, 55.0, (22.0, 18.0)),
            (1470.0, 1180.0, 26.0, 5.0, 50.0, (17.0, 15.0)),
        ):
            b, d = _vertebra(zs, top, bottom, period, dlen)
            ring = _ellipse_q(X, Y, 0.0, cy, r[0], r[1]) <= 1.0
            proc = _ellipse_q(X, Y, 0.0, cy + r[1] + 14.0, 7.0, 14.0) <= 1.0
            bone |= b[:, None, None] & (ring | proc)
            disc |= d[:, None, None] & ring
        sacrum = (Zs >= 900) & (Zs < 1000) & (_ellipse_q(X, Y, 0.0, 62.0, 45.0, 20.0) <= 1.0)
        bone |= sacrum
        # pelvis: iliac wings and the lower ring
        for side in (-1, 1):
            wing_q = _ellipse_q(X, Y, 72.0 * side, 25.0, 58.0, 42.0)
            wing_in = _ellipse_q(X, Y, 72.0 * side, 25.0, 49.0, 33.0)
            lateral = (X * side) > 40.0
            bone |= (Zs >= 930) & (Zs < 1030) & (wing_q <= 1.0) & (wing_in > 1.0) & lateral
        ring_q = _ellipse_q(X, Y, 0.0, 5.0, 112.0, 72.0)
        ring_in = _ellipse_q(X, Y, 0.0, 5.0, 98.0, 58.0)
        bone |= (Zs >= 860) & (Zs < 930) & (ring_q <= 1.0) & (ring_in > 1.0)
        # ribs: sloping bands following the body wall
        bone |= self._ribs(X, Y, Zs, ax, ay)
        sternum = (Zs >= 1290) & (Zs < 1450) & (_ellipse_q(X, Y, 0.0, -(ay - 16.0), 15.0, 6.0) <= 1.0)
        bone |= sternum
        for side in (-1, 1):
            scap = (Zs >= 1330) & (Zs < 1470) & (_ellipse_q(X, Y, 92.0 * side, ay - 22.0, 48.0, 6.0) <= 1.0)
            clav = (Zs >= 1455) & (Zs < 1475) & (_ellipse_q(X, Y, 80.0 * side, -(ay - 30.0), 70.0, 8.0) <= 1.0)
            bone |= scap | clav
        sub[disc] = DISC
        sub[bone & body] = BONE
        vol[sel] = sub

    def _ribs(self, X, Y, Zs, ax, ay):
        out = np.zeros(np.broadcast_shapes(X.shape, Y.shape, Zs.shape), dtype=bool)
        zmin, zmax = 1100.0, 1450.0
        zz = Zs[:, 0, 0]
        rows = (zz >= zmin) & (zz <= zmax)
        if not rows.any():
            return out
        Zr = Zs[rows]
        axr = ax[rows] - 20.0
        ayr = ay[rows] - 20.0
        # angle from the posterior midline: 0 at the back, pi at the front
        phi = np.abs(np.arctan2(X / axr, Y / ayr))
        t = np.sqrt((X / axr) ** 2 + (Y / ayr) ** 2)
        radial = np.abs(t - 1.0) * (0.5 * (axr + ayr))
        band = radial <= 4.0
        ribs = np.zeros(band.shape, dtype=bool)
        for k in range(1, 13):
            z_post = 1445.0 - 25.0 * (k - 1)
            end = 0.85 * np.pi if k <= 7 else (0.7 * np.pi if k <= 10 else 0.45 * np.pi)
            zc = z_post - 45.0 * (1.0 - np.cos(phi)) / 2.0
            ribs |= band & (phi >= 0.12) & (phi <= end) & (np.abs(Zr - zc) <= 5.0)
        out[rows] = ribs
        return out

    def _neck_head(self, vol, X, Y, Z):
        z = self.z
        sel = z >= 1470
        if not sel.any():
            return
        zs = z[sel]
        Zs = zs[:, None, None]
        sub = vol[sel]
        neck = (Zs < 1600) & (((X**2) + (Y - 15.0) ** 2) <= 58.0**2)
        sub[neck] = SOFT
        head_c = (0.0, 0.0, 1665.0)
        scalp = _ellipsoid(X, Y, Zs, head_c, (80.0, 100.0, 97.0))
        sub[scalp] = SOFT
        outer = _ellipsoid(X, Y, Zs, head_c, (74.0, 94.0, 91.0))
        inner = _ellipsoid(X, Y, Zs, head_c, (67.0, 87.0, 84.0))
        brain = inner & (Zs > 1605)
        sub[outer] = BONE
        sub[inner] = SOFT
        sub[brain] = BRAIN
        for side in (-1, 1):
            vent = _ellipsoid(X, Y, Zs, (10.0 * side, 5.0, 1680.0), (7.0, 30.0, 14.0))
            sub[vent] = CSF
            sinus = _ellipsoid(X, Y, Zs, (25.0 * side, -60.0, 1600.0), (14.0, 14.0, 16.0))
            sub[sinus] = AIR
        mandible_q = _ellipse_q(X, Y, 0.0, -20.0, 55.0, 70.0)
        mandible_in = _ellipse_q(X, Y, 0.0, -20.0, 47.0, 62.0)
        jaw = (Zs >= 1560) & (Zs < 1600) & (mandible_q <= 1.0) & (mandible_in > 1.0) & (Y < 10.0)
        sub[jaw] = BONE
        b, d = _vertebra(zs, 1600.0, 1470.0, 18.0, 4.0)
        cerv = _ellipse_q(X, Y, 0.0, 30.0, 11.0, 10.0) <= 1.0
        sub[b[:, None, None] & cerv] = BONE
        sub[d[:, None, None] & cerv] = DISC
        vol[sel] = sub

    def _smooth_field(self, shape):
        coarse = tuple(max(2, int(np.ceil(n * s / 10.0)) + 2) for n, s in zip(shape, self.grid.spacing_zyx))
        noise = ndimage.gaussian_filter(self.rng.standard_normal(coarse), 1.0)
        noise /= noise.std() + 1e-12
        zoom = [n / c for n, c in zip(shape, coarse)]
        out = ndimage.zoom(noise, zoom, order=1, grid_mode=True, mode="nearest")
        return out[: shape[0], : shape[1], : shape[2]]


# --- public generator ---------------------------------------------------------


def _liver_shape(spec: PhantomSpec, rng: np.random.Generator):
    st = spec.shape_type
    if st is None:
        st = list(LiverShapeType)[int(rng.integers(6))]
    variant = REFERENCE_VARIANTS[st][int(rng.integers(2))]
    jitter = 1.0 + 0.03 * rng.uniform(-1.0, 1.0, size=4)
    cc, rx, ry, ratio = (float(v) for v in np.multiply(variant, jitter))
    return st, LiverShape(cc, rx, ry, ratio).scaled(spec.liver_scale)


def _anatomy(spec: PhantomSpec, rng: np.random.Generator) -> Tuple[_Anatomy, Optional[LiverShapeType]]:
    st, shape = _liver_shape(spec, rng)
    dome = LIVER_DOME_MM + float(rng.uniform(-5.0, 5.0))
    ax, _ = _trunk_axes(dome)
    x_right = -(float(ax) - 27.0)
    anchor = (x_right + shape.right_rx, float(rng.uniform(-4.0, 4.0)), dome)
    lc = (
        anchor[0] + float(rng.uniform(-8, 8)),
        anchor[1] + float(rng.uniform(-8, 8)),
        dome - shape.cc_mm / 2.0 + float(rng.uniform(-8, 8)),
    )
    anat = _Anatomy(
        liver=shape if spec.kind in LIVER_KINDS else None,
        liver_anchor=anchor,
        lesion_center=lc,
        stomach_z=dome - 75.0,
        kidney_z=dome - 175.0 * spec.liver_scale,
    )
    return anat, st


def _z_window(spec: PhantomSpec, rng: np.random.Generator, anat: _Anatomy):
    sz = spec.spacing_mm[2]
    if spec.kind == "body":
        lo, hi = float(rng.uniform(975, 1000)), float(rng.uniform(1305, 1330))
        if anat.liver is not None:
            lo = min(lo, anat.liver_anchor[2] - anat.liver.cc_mm - 20.0)
        return lo, hi
    if spec.kind == "chest_crop":
        return None, float(rng.uniform(1465, 1490))
    if spec.kind == "head":
        return float(rng.uniform(1520, 1550)), BODY_TOP_MM - sz
    centre = float(rng.uniform(440, 560))
    return centre - 130.0, centre + 130.0


def _xy_fov(kind: str):
    if kind == "head":
        return (-120.0, 120.0), (-126.0, 126.0)
    if kind == "limb":
        return (-190.0, 190.0), (-130.0, 110.0)
    return (-176.0, 176.0), (-126.0, 126.0)


def _make_grid(spec, x_rng, y_rng, z_lo, z_hi):
    sx, sy, sz = spec.spacing_mm
    nx = int(round((x_rng[1] - x_rng[0]) / sx))
    ny = int(round((y_rng[1] - y_rng[0]) / sy))
    nz = max(1, int(np.floor((z_hi - z_lo) / sz)) + 1)
    return VoxelGrid((nx, ny, nz), (sx, sy, sz), (x_rng[0] + sx / 2, y_rng[0] + sy / 2, z_lo))


def _chest_cut(spec, anat, x_rng, y_rng, z_hi):
    """Lowest z keeping ``fov_liver_fraction`` of the liver voxels in view."""
    sz = spec.spacing_mm[2]
    z_lo = anat.liver_anchor[2] - anat.liver.cc_mm - 10.0
    # align the probe grid with the final grid so slice membership is identical
    n_down = int(np.ceil((z_hi - z_lo) / sz))
    g = _make_grid(spec, x_rng, y_rng, z_hi - n_down * sz, z_hi)
    bits = rasterize_shape(anat.liver, g, anat.liver_anchor)
    per_slice = bits.sum(axis=(1, 2)).astype(float)
    total = per_slice.sum()
    from_top = np.cumsum(per_slice[::-1]) / total
    # slices kept from the top; pick the count whose fraction is closest
    k = int(np.argmin(np.abs(from_top - spec.fov_liver_fraction))) + 1
    return g.axis_coords(2)[::-1][k - 1], total


def generate(spec: PhantomSpec) -> Tuple[CtVolume, PhantomTruth]:
    """Render the phantom described by ``spec``; deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    anat, st = _anatomy(spec, rng)
    x_rng, y_rng = _xy_fov(spec.kind)
    z_lo, z_hi = _z_window(spec, rng, anat)
    full_count = None
    if spec.kind == "chest_crop":
        z_lo, full_count = _chest_cut(spec, anat, x_rng, y_rng, z_hi)
    grid = _make_grid(spec, x_rng, y_rng, z_lo, z_hi)
    return _render_phantom(spec, anat, st, grid, rng, full_count)


def _render_phantom(spec, anat, st, grid, rng, full_count=None):
    renderer = _Renderer(grid, anat, rng)
    vol, liver = renderer.render()
    vol = vol.astype(np.float32)
    lesion_bits = None
    if anat.liver is not None:
        vol[liver] = spec.liver_hu
        if spec.lesion is not None and liver.any():
            lesion_bits = _lesion_bits(spec.lesion, anat, grid, liver)
            vol[lesion_bits] = spec.lesion.hu
    if spec.noise_sigma_hu > 0:
        vol += rng.normal(0.0, spec.noise_sigma_hu, size=vol.shape).astype(np.float32)
    vol = np.clip(np.rint(vol), HU_MIN, HU_MAX).astype(np.int16)
    label = spec.kind in LIVER_KINDS and bool(liver.any())
    truth = PhantomTruth(
        liver_mask=BinaryMask(grid, liver, copy=False),
        liver_mean_hu=float(spec.liver_hu) if label else float("nan"),
        lesion_mask=None if lesion_bits is None else BinaryMask(grid, lesion_bits, copy=False),
        label=label,
        shape_type=st if label else None,
    )
    if full_count is not None:
        truth.extra["uncropped_liver_voxels"] = float(full_count)
    return CtVolume(grid, vol, copy=False), truth


def _lesion_bits(lesion: Lesion, anat: _Anatomy, grid: VoxelGrid, liver: np.ndarray) -> np.ndarray:
    c = anat.lesion_center
    X = grid.axis_coords(0)[None, None, :]
    Y = grid.axis_coords(1)[None, :, None]
    Z = grid.axis_coords(2)[:, None, None]
    d2 = (X - c[0]) ** 2 + (Y - c[1]) ** 2 + (Z - c[2]) ** 2
    if lesion.radius_mm is not None:
        return liver & (d2 <= lesion.radius_mm**2)
    target = lesion.fraction * liver.sum()
    d = np.sqrt(d2[liver])
    d.sort()
    k = int(round(target))
    r = d[min(max(k - 1, 0), d.size - 1)]
    return liver & (d2 <= r**2)


def generate_full_body(seed: int = 0, spacing_mm=(2.0, 2.0, 4.0), liver_scale: float = 0.85) -> Tuple[CtVolume, PhantomTruth]:
    """Whole-body phantom (feet to vertex) used to derive the skeleton template.

    The reference liver is the smallest generator variant, so its
    craniocaudal band is covered by every phantom liver.
    """
    spec = PhantomSpec(
        kind="body",
        liver_hu=55.0,
        noise_sigma_hu=0.0,
        liver_scale=liver_scale,
        seed=seed,
        shape_type=LiverShapeType.I,
        spacing_mm=spacing_mm,
    )
    rng = np.random.default_rng(seed)
    anat, st = _anatomy(spec, rng)
    shape = LiverShape(*REFERENCE_VARIANTS[LiverShapeType.I][0]).scaled(liver_scale)
    anat = _Anatomy(shape, (anat.liver_anchor[0], 0.0, LIVER_DOME_MM), anat.lesion_center, anat.stomach_z, anat.kidney_z)
    sz = spacing_mm[2]
    grid = _make_grid(spec, (-200.0, 200.0), (-130.0, 130.0), sz / 2, BODY_TOP_MM - sz / 2)
    return _render_phantom(spec, anat, st, grid, rng)
