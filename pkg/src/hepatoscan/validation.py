"""Input checks shared by the estimator and the public entry points."""
from __future__ import annotations

from numbers import Real
from typing import Iterable, List, Sequence

import numpy as np

from .volume import HU_MAX, HU_MIN, BinaryMask, CtVolume, InvalidArgumentError, VoxelGrid


def check_spacing(spacing_mm) -> tuple:
    sp = tuple(float(s) for s in spacing_mm)
    if len(sp) != 3 or not all(np.isfinite(s) and s > 0 for s in sp):
        raise InvalidArgumentError(f"spacing must be three positive numbers, got {spacing_mm!r}")
    return sp


def check_volume(x, spacing_mm: Sequence[float] = (1.0, 1.0, 1.0)) -> CtVolume:
    """Accept a CtVolume or a (nz, ny, nx) integer HU array."""
    if isinstance(x, CtVolume):
        return x
    arr = np.asarray(x)
    if arr.ndim != 3:
        raise InvalidArgumentError(f"volume must be 3-D (nz, ny, nx), got ndim={arr.ndim}")
    if arr.size == 0:
        raise InvalidArgumentError("volume is empty")
    if not np.issubdtype(arr.dtype, np.number) or np.issubdtype(arr.dtype, np.complexfloating):
        raise InvalidArgumentError(f"volume must be numeric, got {arr.dtype}")
    if np.issubdtype(arr.dtype, np.floating):
        if not np.isfinite(arr).all():
            raise InvalidArgumentError("volume contains non-finite values")
        if not np.array_equal(arr, np.rint(arr)):
            raise InvalidArgumentError("HU values must be integers")
    if arr.min() < HU_MIN or arr.max() > HU_MAX:
        raise InvalidArgumentError(f"HU values outside [{HU_MIN}, {HU_MAX}]")
    nz, ny, nx = arr.shape
    grid = VoxelGrid((nx, ny, nz), check_spacing(spacing_mm))
    return CtVolume(grid, arr.astype(np.int16))


def check_volumes(X, spacing_mm: Sequence[float] = (1.0, 1.0, 1.0)) -> List[CtVolume]:
    if isinstance(X, (CtVolume, np.ndarray)) and not (isinstance(X, np.ndarray) and X.ndim == 4):
        X = [X]
    if not isinstance(X, Iterable):
        raise InvalidArgumentError("expected a volume or a sequence of volumes")
    out = [check_volume(x, spacing_mm) for x in X]
    if not out:
        raise InvalidArgumentError("no volumes given")
    return out


def check_mask(m, grid: VoxelGrid) -> BinaryMask:
    if isinstance(m, BinaryMask):
        if m.grid != grid:
            raise InvalidArgumentError("mask grid differs from volume grid")
        return m
    arr = np.asarray(m)
    if arr.shape != grid.shape:
        raise InvalidArgumentError(f"mask shape {arr.shape} differs from {grid.shape}")
    return BinaryMask(grid, arr.astype(bool))


def check_fraction(name: str, value, low_open: bool = True) -> float:
    if not isinstance(value, Real) or isinstance(value, bool):
        raise InvalidArgumentError(f"{name} must be a number")
    v = float(value)
    ok = (0 < v if low_open else 0 <= v) and v <= 1
    if not ok:
        raise InvalidArgumentError(f"{name} must be in {'(' if low_open else '['}0, 1], got {value}")
    return v
