"""Boundary refinement: adapt the placed template to the organ actually imaged.

Voxels whose density fits any measured mode are "consistent". A seed taken
from the template interior grows over consistent voxels, but never further
than a fixed distance from the placed template.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .densitometry import DensityReport, measure
from .volume import (
    BinaryMask,
    CtVolume,
    InvalidArgumentError,
    check_same_grid,
    largest_component_bits,
    morph_bits,
)

MODE_GATE_SIGMA = 2.5
SEED_EROSION_MM = 4.0
MAX_SURFACE_DIST_MM = 15.0
CLOSING_MM = 3.0
MAX_SWEEPS = 100
# growth beyond this volume ratio (or shrinkage below its inverse) is treated as a leak
GUARD_RATIO = 1.35

_SIX = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class RefinementResult:
    final_mask: BinaryMask
    added: BinaryMask
    excluded: BinaryMask
    iterations: int
    failed: bool = False
    reason: str = ""


def gate_intervals(report: DensityReport, k: float = MODE_GATE_SIGMA):
    """(lo, hi) HU acceptance band per mode: core mean +- k * core std.

    Core statistics come from the interior histogram inside each mode's
    interval, so overhang voxels assigned to an edge mode do not widen it.
    """
    out = []
    for m in report.modes:
        mean, std = m.core_stats(report.histogram)
        out.append((mean - k * std, mean + k * std))
    return out


def consistent_bits(values: np.ndarray, report: DensityReport, k: float = MODE_GATE_SIGMA) -> np.ndarray:
    """HU within the acceptance band of any mode."""
    out = np.zeros(values.shape, dtype=bool)
    for lo, hi in gate_intervals(report, k):
        out |= (values >= lo) & (values <= hi)
    return out


def _bbox(bits: np.ndarray, margin_vox, shape):
    idx = np.nonzero(bits.any(axis=(1, 2)))[0], np.nonzero(bits.any(axis=(0, 2)))[0], np.nonzero(bits.any(axis=(0, 1)))[0]
    return tuple(
        slice(max(0, int(i[0]) - m), min(n, int(i[-1]) + 1 + m)) for i, m, n in zip(idx, margin_vox, shape)
    )


def grow(seed: np.ndarray, allowed: np.ndarray, max_sweeps: int = MAX_SWEEPS):
    """6-connected growth of ``seed`` inside ``allowed``; returns (region, sweeps)."""
    cur = seed & allowed
    sweeps = 0
    while sweeps < max_sweeps:
        nxt = ndimage.binary_dilation(cur, _SIX, mask=allowed)
        sweeps += 1
        if np.array_equal(nxt, cur):
            break
        cur = nxt
    return cur, sweeps


def _closing_padded(bits: np.ndarray, radius_mm: float, spacing_zyx) -> np.ndarray:
    """Closing that treats the array border as open space (edge replicated)."""
    pad = [int(np.ceil(radius_mm / s)) + 1 for s in spacing_zyx]
    p = np.pad(bits, [(q, q) for q in pad], mode="edge")
    c = morph_bits(p, "close", radius_mm, spacing_zyx)
    return c[tuple(slice(q, q + n) for q, n in zip(pad, bits.shape))] | bits


def refine_boundary(
    vol: CtVolume,
    template: BinaryMask,
    report: DensityReport,
    mode_gate_sigma: float = MODE_GATE_SIGMA,
    max_surface_dist_mm: float = MAX_SURFACE_DIST_MM,
    closing_mm: float = CLOSING_MM,
    seed_erosion_mm: float = SEED_EROSION_MM,
    guard_ratio: Optional[float] = GUARD_RATIO,
) -> RefinementResult:
    """Mode-gated, distance-capped region growing from the template interior."""
    check_same_grid(vol, template)
    if not report.modes:
        raise InvalidArgumentError("report has no modes")
    grid = vol.grid
    tbits = template.bits
    empty = np.zeros(grid.shape, dtype=bool)

    def fallback(reason: str) -> RefinementResult:
        return RefinementResult(
            template, BinaryMask(grid, empty, copy=False), BinaryMask(grid, empty, copy=False), 0, True, reason
        )

    if not tbits.any():
        return fallback("empty template")
    sp = grid.spacing_zyx
    margin = [int(np.ceil((max_surface_dist_mm + closing_mm) / s)) + 2 for s in sp]
    box = _bbox(tbits, margin, grid.shape)
    t = tbits[box]
    vals = vol.values[box]
    consistent = consistent_bits(vals, report, mode_gate_sigma)

    seed = morph_bits(t & consistent, "erode", seed_erosion_mm, sp)
    if not seed.any():
        return fallback("empty seed")
    seed = largest_component_bits(seed)
    dist = ndimage.distance_transform_edt(~t, sampling=sp)
    allowed = consistent & (dist <= max_surface_dist_mm + 1e-9)
    region, sweeps = grow(seed, allowed)
    if closing_mm > 0:
        region = _closing_padded(region, closing_mm, sp)
    region &= dist <= max_surface_dist_mm + 1e-9
    region = largest_component_bits(region)
    if not region.any():
        return fallback("empty result")
    n_t, n_r = int(t.sum()), int(region.sum())
    if guard_ratio is not None and (n_r > guard_ratio * n_t or n_r * guard_ratio < n_t):
        return fallback(f"volume ratio {n_r / n_t:.2f} outside guard")

    final = empty.copy()
    final[box] = region
    added = final & ~tbits
    excluded = tbits & ~final
    return RefinementResult(
        BinaryMask(grid, final, copy=False),
        BinaryMask(grid, added, copy=False),
        BinaryMask(grid, excluded, copy=False),
        sweeps,
    )


def remeasure(vol: CtVolume, result: RefinementResult, **density_params) -> DensityReport:
    if not result.final_mask.bits.any():
        raise InvalidArgumentError("empty final mask")
    return measure(vol, result.final_mask, **density_params)
