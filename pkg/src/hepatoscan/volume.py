"""Grid-aware CT volumes and binary masks.

Arrays are stored in C order with shape ``(nz, ny, nx)`` so that the flat
buffer runs x-fastest, then y, then z. Grid metadata (dims, spacing, origin)
is always given in ``(x, y, z)`` order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy import ndimage

HU_MIN = -1024
HU_MAX = 3071

_EPS_MM = 1e-9
_FACE_CONNECTIVITY = ndimage.generate_binary_structure(3, 1)


class InvalidArgumentError(ValueError):
    """Raised when an operation receives arguments outside its contract."""


class GridMismatchError(InvalidArgumentError):
    pass


Triple = Tuple[float, float, float]


@dataclass(frozen=True)
class VoxelGrid:
    dims: Tuple[int, int, int]
    spacing_mm: Triple
    origin_mm: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing_mm)
        origin = tuple(float(o) for o in self.origin_mm)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise InvalidArgumentError("grid fields must have three components")
        if any(d < 1 for d in dims):
            raise InvalidArgumentError(f"dims must be >= 1, got {dims}")
        if any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise InvalidArgumentError(f"spacing must be > 0, got {spacing}")
        if any(not np.isfinite(o) for o in origin):
            raise InvalidArgumentError(f"origin must be finite, got {origin}")
        if dims[0] * dims[1] * dims[2] > np.iinfo(np.intp).max:
            raise InvalidArgumentError("voxel count exceeds addressable range")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "origin_mm", origin)

    @property
    def shape(self) -> Tuple[int, int, int]:
        """Array shape ``(nz, ny, nx)``."""
        nx, ny, nz = self.dims
        return (nz, ny, nx)

    @property
    def spacing_zyx(self) -> Triple:
        sx, sy, sz = self.spacing_mm
        return (sz, sy, sx)

    @property
    def origin_zyx(self) -> Triple:
        ox, oy, oz = self.origin_mm
        return (oz, oy, ox)

    @property
    def voxel_count(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing_mm
        return sx * sy * sz

    def axis_coords(self, axis: int) -> np.ndarray:
        """Physical voxel-center coordinates along x (0), y (1) or z (2)."""
        return self.origin_mm[axis] + np.arange(self.dims[axis]) * self.spacing_mm[axis]

    def extent_mm(self) -> Triple:
        return tuple(d * s for d, s in zip(self.dims, self.spacing_mm))


def _as_grid(grid) -> VoxelGrid:
    if isinstance(grid, VoxelGrid):
        return grid
    raise InvalidArgumentError(f"expected VoxelGrid, got {type(grid).__name__}")


class CtVolume:
    """Hounsfield-unit volume on a :class:`VoxelGrid`.

    ``values`` is an int16 array of shape ``grid.shape``; it is made read-only
    on construction.
    """

    __slots__ = ("grid", "values")

    def __init__(self, grid: VoxelGrid, values, *, copy: bool = True):
        grid = _as_grid(grid)
        arr = np.array(values, copy=copy)
        if arr.shape != grid.shape:
            if arr.size != grid.voxel_count:
                raise InvalidArgumentError(
                    f"values length {arr.size} != voxel count {grid.voxel_count}"
                )
            arr = arr.reshape(grid.shape)
        if arr.dtype != np.int16:
            if np.issubdtype(arr.dtype, np.floating) and not np.all(np.isfinite(arr)):
                raise InvalidArgumentError("values must be finite")
            lo, hi = (arr.min(), arr.max()) if arr.size else (0, 0)
            if lo < HU_MIN or hi > HU_MAX:
                raise InvalidArgumentError(f"values outside [{HU_MIN}, {HU_MAX}]")
            arr = arr.astype(np.int16)
        elif arr.size and (arr.min() < HU_MIN or arr.max() > HU_MAX):
            raise InvalidArgumentError(f"values outside [{HU_MIN}, {HU_MAX}]")
        arr.flags.writeable = False
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", arr)

    def __setattr__(self, name, value):
        raise AttributeError("CtVolume is immutable")

    def __repr__(self):
        return f"CtVolume(dims={self.grid.dims}, spacing_mm={self.grid.spacing_mm})"

    def __eq__(self, other):
        if not isinstance(other, CtVolume):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.values, other.values)

    __hash__ = None


class BinaryMask:
    """Boolean mask on a :class:`VoxelGrid`, same ordering as :class:`CtVolume`."""

    __slots__ = ("grid", "bits")

    def __init__(self, grid: VoxelGrid, bits, *, copy: bool = True):
        grid = _as_grid(grid)
        arr = np.array(bits, copy=copy)
        if arr.shape != grid.shape:
            if arr.size != grid.voxel_count:
                raise InvalidArgumentError(
                    f"bits length {arr.size} != voxel count {grid.voxel_count}"
                )
            arr = arr.reshape(grid.shape)
        if arr.dtype != np.bool_:
            arr = arr.astype(bool)
        arr.flags.writeable = False
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "bits", arr)

    def __setattr__(self, name, value):
        raise AttributeError("BinaryMask is immutable")

    def __repr__(self):
        return f"BinaryMask(dims={self.grid.dims}, count={self.count()})"

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.bits, other.bits)

    __hash__ = None

    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    @classmethod
    def empty(cls, grid: VoxelGrid) -> "BinaryMask":
        return cls(grid, np.zeros(grid.shape, dtype=bool), copy=False)


def check_same_grid(a, b) -> None:
    """Raise :class:`GridMismatchError` unless ``a`` and ``b`` share a grid."""
    if a.grid != b.grid:
        raise GridMismatchError(f"grid mismatch: {a.grid} vs {b.grid}")


def resampled_grid(grid: VoxelGrid, target_spacing_mm: Sequence[float]) -> VoxelGrid:
    target = tuple(float(t) for t in target_spacing_mm)
    if len(target) != 3 or any(not np.isfinite(t) or t <= 0 for t in target):
        raise InvalidArgumentError(f"target spacing must be > 0, got {target}")
    dims = []
    origin = []
    for n, s, o, t in zip(grid.dims, grid.spacing_mm, grid.origin_mm, target):
        m = int(round(n * s / t))
        if m < 1:
            raise InvalidArgumentError(
                f"degenerate extent: {n} x {s} mm resampled at {t} mm gives 0 voxels"
            )
        dims.append(m)
        # keep the lower edge of the physical extent fixed
        origin.append(o - s / 2.0 + t / 2.0)
    return VoxelGrid(tuple(dims), target, tuple(origin))


def _linear_axis(arr: np.ndarray, axis: int, pos: np.ndarray) -> np.ndarray:
    """Linear interpolation of ``arr`` along ``axis`` at fractional indices ``pos``.

    Positions outside ``[0, n-1]`` take the edge value.
    """
    n = arr.shape[axis]
    pos = np.clip(np.asarray(pos, dtype=np.float64), 0.0, n - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    w = (pos - lo).astype(np.float32 if arr.dtype == np.float32 else np.float64)
    shape = [1] * arr.ndim
    shape[axis] = -1
    w = w.reshape(shape)
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    if np.all(w == 0):
        return a
    return a + (b - a) * w


def resample_array(
    values: np.ndarray, grid: VoxelGrid, out_grid: VoxelGrid, dtype=np.float64
) -> np.ndarray:
    """Trilinear resampling of a ``grid``-shaped array onto ``out_grid``.

    Separable along axes, which is exactly trilinear interpolation. Samples
    beyond the input extent are clamped to the edge voxels.
    """
    out = np.asarray(values)
    axes_zyx = (2, 1, 0)  # array axis for x, y, z
    # do the axis with the largest reduction first to keep intermediates small
    order = sorted(range(3), key=lambda a: out_grid.dims[a] / grid.dims[a])
    for a in order:
        axis = axes_zyx[a]
        src = grid.origin_mm[a] + 0.0
        pos = (out_grid.axis_coords(a) - src) / grid.spacing_mm[a]
        if out_grid.dims[a] == grid.dims[a] and np.allclose(pos, np.arange(grid.dims[a])):
            if out.dtype != dtype:
                out = out.astype(dtype)
            continue
        if out.dtype != dtype:
            out = out.astype(dtype)
        out = _linear_axis(out, axis, pos)
    if out.dtype != dtype:
        out = out.astype(dtype)
    return out


def resample(vol: CtVolume, target_spacing_mm: Sequence[float]) -> CtVolume:
    """Resample ``vol`` to ``target_spacing_mm`` with trilinear interpolation.

    The output covers the input's physical extent to within one voxel;
    interpolated values are rounded and clamped to the HU range.
    """
    out_grid = resampled_grid(vol.grid, target_spacing_mm)
    if out_grid.dims == vol.grid.dims and out_grid.spacing_mm == vol.grid.spacing_mm:
        return CtVolume(out_grid, vol.values)
    data = resample_array(vol.values, vol.grid, out_grid, dtype=np.float32)
    data = np.clip(np.rint(data), HU_MIN, HU_MAX).astype(np.int16)
    return CtVolume(out_grid, data, copy=False)


def threshold(vol: CtVolume, lo_hu: float, hi_hu: float = float("inf")) -> BinaryMask:
    if lo_hu > hi_hu:
        raise InvalidArgumentError(f"lo_hu {lo_hu} > hi_hu {hi_hu}")
    v = vol.values
    return BinaryMask(vol.grid, (v >= lo_hu) & (v <= hi_hu), copy=False)


def ball_offsets(radius_mm: float, spacing_mm: Sequence[float]) -> np.ndarray:
    """Integer ``(dz, dy, dx)`` offsets whose physical length is <= ``radius_mm``."""
    sx, sy, sz = (float(s) for s in spacing_mm)
    rz, ry, rx = (int(np.floor(radius_mm / s + _EPS_MM)) for s in (sz, sy, sx))
    dz, dy, dx = np.mgrid[-rz : rz + 1, -ry : ry + 1, -rx : rx + 1]
    d2 = (dz * sz) ** 2 + (dy * sy) ** 2 + (dx * sx) ** 2
    keep = d2 <= radius_mm**2 + _EPS_MM
    return np.stack([dz[keep], dy[keep], dx[keep]], axis=1)


def _dilate_bits(bits: np.ndarray, radius_mm: float, spacing_zyx) -> np.ndarray:
    if not bits.any():
        return np.zeros_like(bits)
    dist = ndimage.distance_transform_edt(~bits, sampling=spacing_zyx)
    return dist <= radius_mm + _EPS_MM


def _erode_bits(bits: np.ndarray, radius_mm: float, spacing_zyx) -> np.ndarray:
    if not bits.any():
        return np.zeros_like(bits)
    padded = np.pad(bits, 1, constant_values=False)
    dist = ndimage.distance_transform_edt(padded, sampling=spacing_zyx)
    return (dist > radius_mm + _EPS_MM)[1:-1, 1:-1, 1:-1]


def _crop_box(bits: np.ndarray, margin):
    idx = (
        np.nonzero(bits.any(axis=(1, 2)))[0],
        np.nonzero(bits.any(axis=(0, 2)))[0],
        np.nonzero(bits.any(axis=(0, 1)))[0],
    )
    return tuple(
        slice(max(int(i[0]) - m, 0), min(int(i[-1]) + 1 + m, n))
        for i, m, n in zip(idx, margin, bits.shape)
    )


def morph_bits(bits: np.ndarray, op: str, radius_mm: float, spacing_zyx) -> np.ndarray:
    """Array-level morphology with a physical-radius Euclidean ball.

    Voxels outside the array count as background. Work is restricted to the
    mask's bounding box (plus the ball radius) to keep large volumes cheap.
    """
    if radius_mm < 0:
        raise InvalidArgumentError(f"radius_mm must be >= 0, got {radius_mm}")
    if op not in ("erode", "dilate", "close", "open"):
        raise InvalidArgumentError(f"unknown morphology op {op!r}")
    bits = np.asarray(bits, dtype=bool)
    if radius_mm == 0 or not bits.any():
        return bits.copy()
    margin = [int(np.ceil(radius_mm / s)) + 1 for s in spacing_zyx]
    if op == "erode":
        margin = [1, 1, 1]
    box = _crop_box(bits, margin)
    sub = bits[box]
    if op == "dilate":
        res = _dilate_bits(sub, radius_mm, spacing_zyx)
    elif op == "erode":
        res = _erode_bits(sub, radius_mm, spacing_zyx)
    elif op == "close":
        # the crop margin exceeds the ball, so everything outside the crop is
        # background after dilation and eroding inside the crop is exact
        res = _erode_bits(_dilate_bits(sub, radius_mm, spacing_zyx), radius_mm, spacing_zyx)
    else:
        res = _erode_bits(sub, radius_mm, spacing_zyx)
        res = _dilate_bits(res, radius_mm, spacing_zyx)
    out = np.zeros_like(bits)
    out[box] = res
    return out


def morph(mask: BinaryMask, op: str, radius_mm: float) -> BinaryMask:
    """Binary ``erode``, ``dilate`` or ``close`` with a ball of ``radius_mm``."""
    out = morph_bits(mask.bits, op, float(radius_mm), mask.grid.spacing_zyx)
    return BinaryMask(mask.grid, out, copy=False)


@dataclass(frozen=True)
class Components:
    """Connected-component labelling, largest component first.

    ``labels`` holds 0 for background and 1..K, with label 1 the largest.
    """

    labels: np.ndarray
    sizes: Tuple[int, ...]

    def __len__(self):
        return len(self.sizes)

    def component(self, k: int) -> np.ndarray:
        return self.labels == k


def label_bits(bits: np.ndarray) -> Components:
    raw, k = ndimage.label(bits, structure=_FACE_CONNECTIVITY)
    if k == 0:
        return Components(np.zeros(bits.shape, dtype=np.int32), ())
    sizes = np.bincount(raw.ravel(), minlength=k + 1)[1:]
    # scipy numbers components in raster order of their first voxel, so a
    # stable sort on size gives the smallest-first-index tie-break
    order = np.argsort(-sizes, kind="stable")
    remap = np.zeros(k + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, k + 1, dtype=np.int32)
    return Components(remap[raw], tuple(int(s) for s in sizes[order]))


def connected_components(mask: BinaryMask) -> Components:
    return label_bits(mask.bits)


def largest_component_bits(bits: np.ndarray) -> np.ndarray:
    comps = label_bits(bits)
    if not comps.sizes:
        return np.zeros(bits.shape, dtype=bool)
    return comps.labels == 1


def mask_volume_ml(mask: BinaryMask) -> float:
    return mask.count() * mask.grid.voxel_volume_mm3 / 1000.0
