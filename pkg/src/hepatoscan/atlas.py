"""Liver shape taxonomy and the template base used for localization.

Six shape types are defined by the size class of the right lobe
(craniocaudal extent) and the left lobe (lateral extent relative to the
right lobe). Templates are binary masks on a canonical 2 mm isotropic grid.

Orientation convention for every mask handled here: x increases towards the
patient's left (the right lobe sits at low x), y increases posteriorly and
z increases cranially.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .volume import (
    BinaryMask,
    InvalidArgumentError,
    VoxelGrid,
    label_bits,
    largest_component_bits,
    resample_array,
    resampled_grid,
)

CANONICAL_SPACING_MM = (2.0, 2.0, 2.0)

RIGHT_NORMAL_MIN_MM = 135.0
RIGHT_NORMAL_MAX_MM = 155.0
# left/right lateral-extent ratio bands (calibration constants)
LEFT_RATIO_SHORT = 0.5
LEFT_RATIO_LONG = 0.9

SHORTENED = "shortened"
NORMAL = "normal"
ELONGATED = "elongated"
UNCLASSIFIED = "unclassified"


class AtlasError(ValueError):
    """Invalid template base or atlas directory."""


class LiverShapeType(enum.Enum):
    I = (NORMAL, NORMAL)
    II = (NORMAL, ELONGATED)
    III = (NORMAL, SHORTENED)
    IV = (ELONGATED, NORMAL)
    V = (ELONGATED, ELONGATED)
    VI = (ELONGATED, SHORTENED)

    @property
    def right_lobe(self) -> str:
        return self.value[0]

    @property
    def left_lobe(self) -> str:
        return self.value[1]

    @classmethod
    def parse(cls, text: str) -> "LiverShapeType":
        try:
            return cls[text.strip()]
        except KeyError:
            raise AtlasError(f"shape_type must be one of I-VI, got {text!r}") from None


_BY_CLASSES = {t.value: t for t in LiverShapeType}


def classify_right_lobe(cc_mm: float) -> str:
    """Size class of the right lobe from its craniocaudal extent in mm."""
    if not cc_mm > 0:
        raise InvalidArgumentError(f"cc_mm must be > 0, got {cc_mm}")
    if cc_mm < RIGHT_NORMAL_MIN_MM:
        return SHORTENED
    if cc_mm <= RIGHT_NORMAL_MAX_MM:
        return NORMAL
    return ELONGATED


def classify_left_lobe(left_extent_mm: float, right_extent_mm: float) -> str:
    if not (left_extent_mm > 0 and right_extent_mm > 0):
        raise InvalidArgumentError("lobe extents must be > 0")
    r = left_extent_mm / right_extent_mm
    if r < LEFT_RATIO_SHORT:
        return SHORTENED
    if r <= LEFT_RATIO_LONG:
        return NORMAL
    return ELONGATED


def shape_type(right_class: str, left_class: str):
    """Map lobe classes to a :class:`LiverShapeType`, or ``"unclassified"``."""
    return _BY_CLASSES.get((right_class, left_class), UNCLASSIFIED)


def lobe_extents_mm(bits: np.ndarray, spacing_mm: Sequence[float]) -> Tuple[float, float, float]:
    """Return ``(cc_extent, right_lateral, left_lateral)`` for a liver mask.

    The right lobe is the run of x-slabs, starting at the patient-right edge,
    whose craniocaudal height is at least half the tallest slab; the rest of
    the lateral extent belongs to the left lobe.
    """
    sx, _, sz = spacing_mm
    zs = np.nonzero(bits.any(axis=(1, 2)))[0]
    if zs.size == 0:
        raise InvalidArgumentError("empty mask")
    cc = (zs[-1] - zs[0] + 1) * sz
    occ = bits.any(axis=1)  # (nz, nx)
    cols = np.nonzero(occ.any(axis=0))[0]
    heights = np.zeros(bits.shape[2])
    for x in cols:
        z = np.nonzero(occ[:, x])[0]
        heights[x] = (z[-1] - z[0] + 1) * sz
    tall = heights >= 0.5 * heights.max()
    x0 = cols[0]
    x = int(np.argmax(tall))
    while x < bits.shape[2] and tall[x]:
        x += 1
    right = (x - x0) * sx
    left = (cols[-1] + 1 - x) * sx
    return float(cc), float(right), float(left)


def classify_mask(bits: np.ndarray, spacing_mm: Sequence[float]):
    cc, right, left = lobe_extents_mm(bits, spacing_mm)
    if left <= 0:
        left_class = SHORTENED
    else:
        left_class = classify_left_lobe(left, right)
    return shape_type(classify_right_lobe(cc), left_class)


@dataclass(frozen=True)
class LiverTemplate:
    id: str
    shape_type: LiverShapeType
    mask: BinaryMask
    cc_extent_mm: float

    def __post_init__(self):
        if not self.id or any(c.isspace() for c in self.id):
            raise AtlasError(f"template id must be a non-empty token, got {self.id!r}")
        if not isinstance(self.shape_type, LiverShapeType):
            raise AtlasError(f"template {self.id}: shape_type must be LiverShapeType")
        if self.mask.grid.spacing_mm != CANONICAL_SPACING_MM:
            raise AtlasError(
                f"template {self.id}: spacing {self.mask.grid.spacing_mm} is not canonical"
            )
        bits = self.mask.bits
        if not bits.any():
            raise AtlasError(f"template {self.id}: empty mask")
        if len(label_bits(bits)) != 1:
            raise AtlasError(f"template {self.id}: mask is not a single component")
        zs = np.nonzero(bits.any(axis=(1, 2)))[0]
        z_extent = (zs[-1] - zs[0] + 1) * CANONICAL_SPACING_MM[2]
        if abs(z_extent - self.cc_extent_mm) > CANONICAL_SPACING_MM[2] + 1e-6:
            raise AtlasError(
                f"template {self.id}: cc_extent {self.cc_extent_mm} vs mask z-extent {z_extent}"
            )

    @property
    def voxel_count(self) -> int:
        return self.mask.count()

    def centroid_index(self) -> np.ndarray:
        """Centroid of the set voxels in template index space ``(z, y, x)``."""
        return np.argwhere(self.mask.bits).mean(axis=0)


@dataclass(frozen=True)
class TemplateAtlas:
    templates: Tuple[LiverTemplate, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "templates", tuple(self.templates))
        ids = [t.id for t in self.templates]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise AtlasError(f"duplicate template ids: {dup}")

    def __len__(self):
        return len(self.templates)

    def __iter__(self) -> Iterator[LiverTemplate]:
        return iter(self.templates)

    def __getitem__(self, key):
        if isinstance(key, str):
            for t in self.templates:
                if t.id == key:
                    return t
            raise KeyError(key)
        return self.templates[key]

    def validate_reference(self) -> None:
        """Check the reference layout: 12 templates, two per shape type."""
        counts: Dict[LiverShapeType, int] = {t: 0 for t in LiverShapeType}
        for t in self.templates:
            counts[t.shape_type] += 1
        bad = {t.name: c for t, c in counts.items() if c != 2}
        if len(self.templates) != 12 or bad:
            raise AtlasError(f"reference atlas needs two templates per type, got {bad or len(self)}")


def build_template(
    mask: BinaryMask, id: str, shape_type: Optional[LiverShapeType] = None
) -> LiverTemplate:
    """Turn a labelled liver mask into a canonical-spacing template."""
    if mask.count() == 0:
        raise InvalidArgumentError("cannot build a template from an empty mask")
    bits = largest_component_bits(mask.bits)
    grid = mask.grid
    if grid.spacing_mm != CANONICAL_SPACING_MM:
        out_grid = resampled_grid(grid, CANONICAL_SPACING_MM)
        occ = resample_array(bits.astype(np.float32), grid, out_grid, dtype=np.float32)
        bits = largest_component_bits(occ >= 0.5)
        grid = out_grid
        if not bits.any():
            raise InvalidArgumentError("mask vanished when resampled to canonical spacing")
    bits, grid = crop_to_bits(bits, grid, margin=1)
    if shape_type is None:
        st = classify_mask(bits, grid.spacing_mm)
        if st == UNCLASSIFIED:
            raise InvalidArgumentError(
                f"template {id}: lobe extents fall outside the six-type table; pass shape_type"
            )
        shape_type = st
    zs = np.nonzero(bits.any(axis=(1, 2)))[0]
    cc = float((zs[-1] - zs[0] + 1) * grid.spacing_mm[2])
    return LiverTemplate(id, shape_type, BinaryMask(grid, bits, copy=False), cc)


def crop_to_bits(bits: np.ndarray, grid: VoxelGrid, margin: int = 0):
    """Crop to the tight bounding box plus ``margin`` voxels (zero padded)."""
    idx = np.argwhere(bits)
    lo = idx.min(axis=0) - margin
    hi = idx.max(axis=0) + 1 + margin
    shape = tuple(int(h - l) for l, h in zip(lo, hi))
    out = np.zeros(shape, dtype=bool)
    src_lo = np.maximum(lo, 0)
    src_hi = np.minimum(hi, bits.shape)
    dst_lo = src_lo - lo
    dst_hi = dst_lo + (src_hi - src_lo)
    out[tuple(slice(a, b) for a, b in zip(dst_lo, dst_hi))] = bits[
        tuple(slice(a, b) for a, b in zip(src_lo, src_hi))
    ]
    oz, oy, ox = (o + l * s for o, l, s in zip(grid.origin_zyx, lo, grid.spacing_zyx))
    new_grid = VoxelGrid((shape[2], shape[1], shape[0]), grid.spacing_mm, (ox, oy, oz))
    return out, new_grid


# --- procedural liver geometry ------------------------------------------------


@dataclass(frozen=True)
class LiverShape:
    """Two-lobe ellipsoid-union liver in liver-local millimetres.

    The local frame has its origin at the top of the right lobe, on the right
    lobe's vertical axis; the right lobe spans ``w`` in ``[-cc, 0]``.
    """

    cc_mm: float
    right_rx: float
    right_ry: float
    left_ratio: float
    left_ry: float = 40.0
    left_rz: float = 26.0
    left_dy: float = -22.0

    def right_lobe(self):
        return (0.0, 0.0, -self.cc_mm / 2.0), (self.right_rx, self.right_ry, self.cc_mm / 2.0)

    def left_lobe(self):
        # right lateral extent as measured by lobe_extents_mm on the right lobe alone
        right_extent = (1.0 + np.sqrt(0.75)) * self.right_rx
        tip = self.left_ratio * right_extent + np.sqrt(0.75) * self.right_rx
        start = 0.3 * self.right_rx
        rx = (tip - start) / 2.0
        return (start + rx, self.left_dy, -(self.left_rz + 8.0)), (rx, self.left_ry, self.left_rz)

    def scaled(self, s: float) -> "LiverShape":
        return replace(
            self,
            cc_mm=self.cc_mm * s,
            right_rx=self.right_rx * s,
            right_ry=self.right_ry * s,
            left_ry=self.left_ry * s,
            left_rz=self.left_rz * s,
            left_dy=self.left_dy * s,
        )

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        lo, hi = [], []
        for c, r in (self.right_lobe(), self.left_lobe()):
            lo.append(np.subtract(c, r))
            hi.append(np.add(c, r))
        return np.min(lo, axis=0), np.max(hi, axis=0)

    def contains(self, u: np.ndarray, v: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Membership test for local coordinates (broadcastable arrays)."""
        inside = None
        for c, r in (self.right_lobe(), self.left_lobe()):
            q = ((u - c[0]) / r[0]) ** 2 + ((v - c[1]) / r[1]) ** 2 + ((w - c[2]) / r[2]) ** 2
            inside = q <= 1.0 if inside is None else inside | (q <= 1.0)
        return inside


def rasterize_shape(shape: LiverShape, grid: VoxelGrid, anchor_mm: Sequence[float]) -> np.ndarray:
    """Boolean array on ``grid`` with the shape's local origin at ``anchor_mm``."""
    lo, hi = shape.bounds()
    out = np.zeros(grid.shape, dtype=bool)
    sl = []
    local = []
    for axis in range(3):
        coords = grid.axis_coords(axis) - anchor_mm[axis]
        idx = np.nonzero((coords >= lo[axis] - 1e-9) & (coords <= hi[axis] + 1e-9))[0]
        if idx.size == 0:
            return out
        sl.append(slice(int(idx[0]), int(idx[-1]) + 1))
        local.append(coords[idx[0] : idx[-1] + 1])
    u = local[0][None, None, :]
    v = local[1][None, :, None]
    w = local[2][:, None, None]
    out[sl[2], sl[1], sl[0]] = shape.contains(u, v, w)
    return out


# Two size variants per type: (cc_mm, right_rx, right_ry, left_ratio).
REFERENCE_VARIANTS: Dict[LiverShapeType, Tuple[Tuple[float, float, float, float], ...]] = {
    LiverShapeType.I: ((144.0, 55.0, 63.0, 0.76), (148.0, 60.0, 69.0, 0.90)),
    LiverShapeType.II: ((144.0, 55.0, 63.0, 1.16), (148.0, 59.0, 68.0, 1.30)),
    LiverShapeType.III: ((144.0, 56.0, 65.0, 0.40), (148.0, 61.0, 70.0, 0.48)),
    LiverShapeType.IV: ((162.0, 55.0, 63.0, 0.76), (168.0, 59.0, 68.0, 0.90)),
    LiverShapeType.V: ((162.0, 55.0, 63.0, 1.16), (168.0, 58.0, 67.0, 1.30)),
    LiverShapeType.VI: ((162.0, 56.0, 65.0, 0.40), (168.0, 61.0, 70.0, 0.48)),
}


def reference_shapes(seed: int = 0, jitter: float = 0.02) -> List[Tuple[str, LiverShapeType, LiverShape]]:
    """The twelve reference shapes, with a small seeded jitter on each axis."""
    rng = np.random.default_rng(seed)
    out = []
    for st, variants in REFERENCE_VARIANTS.items():
        for k, (cc, rx, ry, ratio) in enumerate(variants):
            j = 1.0 + jitter * rng.uniform(-1.0, 1.0, size=4)
            shape = LiverShape(*(float(v) for v in np.multiply((cc, rx, ry, ratio), j)))
            out.append((f"{st.name}-{'ab'[k]}", st, shape))
    return out


def shape_mask(shape: LiverShape, spacing_mm=CANONICAL_SPACING_MM) -> BinaryMask:
    """Rasterize ``shape`` on a grid just large enough to hold it."""
    lo, hi = shape.bounds()
    sp = np.asarray(spacing_mm, dtype=float)
    dims = tuple(int(np.ceil((h - l) / s)) + 3 for l, h, s in zip(lo, hi, sp))
    origin = tuple(float(l - s) for l, s in zip(lo, sp))
    grid = VoxelGrid(dims, tuple(sp), origin)
    return BinaryMask(grid, rasterize_shape(shape, grid, (0.0, 0.0, 0.0)), copy=False)


def generate_reference_atlas(seed: int = 0) -> TemplateAtlas:
    """Procedural 12-template reference atlas, reproducible from ``seed``."""
    templates = []
    for tid, st, shape in reference_shapes(seed):
        templates.append(build_template(shape_mask(shape), tid, st))
    atlas = TemplateAtlas(tuple(templates))
    atlas.validate_reference()
    return atlas
