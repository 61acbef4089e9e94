"""Radiodensity distribution inside a liver mask, split into modes."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.signal import find_peaks

from .volume import BinaryMask, CtVolume, InvalidArgumentError, check_same_grid, mask_volume_ml, morph_bits

HIST_LO = -200
HIST_HI = 300
N_BINS = HIST_HI - HIST_LO + 1
INTERIOR_EROSION_MM = 4.0
SMOOTH_BINS = 3.0
PROMINENCE = 0.05
MIN_SEPARATION_HU = 8


@dataclass(frozen=True)
class Histogram:
    counts: np.ndarray  # one bin per integer HU in [HIST_LO, HIST_HI]
    below: int = 0
    above: int = 0

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.below + self.above

    @property
    def hu(self) -> np.ndarray:
        return np.arange(HIST_LO, HIST_HI + 1)


@dataclass(frozen=True)
class ModeInterval:
    peak_hu: int
    lo_hu: int
    hi_hu: int


@dataclass(frozen=True)
class DensityMode:
    mean_hu: float
    std_hu: float
    voxel_count: int
    volume_ml: float
    fraction: float
    interval: Tuple[int, int] = (HIST_LO, HIST_HI)

    def core_stats(self, hist: "Histogram") -> Tuple[float, float]:
        """Mean and std of the interior histogram restricted to this mode's interval."""
        lo, hi = self.interval
        c = hist.counts[lo - HIST_LO: hi - HIST_LO + 1].astype(float)
        if c.sum() <= 0:
            return self.mean_hu, self.std_hu
        hu = np.arange(lo, hi + 1, dtype=float)
        mean = float((c * hu).sum() / c.sum())
        return mean, float(np.sqrt((c * (hu - mean) ** 2).sum() / c.sum()))


@dataclass(frozen=True)
class DensityReport:
    modes: Tuple[DensityMode, ...]
    total_volume_ml: float
    histogram: Histogram
    dominant_mode_index: int = 0

    @property
    def dominant(self) -> DensityMode:
        return self.modes[self.dominant_mode_index]


def _histogram_of(values: np.ndarray) -> Histogram:
    v = np.asarray(values).astype(np.int64).ravel()
    below = int(np.count_nonzero(v < HIST_LO))
    above = int(np.count_nonzero(v > HIST_HI))
    inside = v[(v >= HIST_LO) & (v <= HIST_HI)]
    counts = np.bincount(inside - HIST_LO, minlength=N_BINS)
    return Histogram(counts, below, above)


def interior_bits(mask: BinaryMask, erosion_mm: float = INTERIOR_EROSION_MM) -> np.ndarray:
    inner = morph_bits(mask.bits, "erode", erosion_mm, mask.grid.spacing_zyx)
    return inner if inner.any() else mask.bits


def hu_histogram(vol: CtVolume, mask: BinaryMask, erosion_mm: float = INTERIOR_EROSION_MM) -> Histogram:
    """1-HU histogram of the eroded mask interior, with under/overflow counts."""
    check_same_grid(vol, mask)
    if not mask.bits.any():
        raise InvalidArgumentError("empty mask")
    return _histogram_of(vol.values[interior_bits(mask, erosion_mm)])


def find_modes(
    hist: Histogram,
    smooth_bins: float = SMOOTH_BINS,
    prominence: float = PROMINENCE,
    separation_hu: int = MIN_SEPARATION_HU,
) -> List[ModeInterval]:
    """Peaks of the smoothed histogram, each with its valley-to-valley interval."""
    if hist.total <= 0:
        raise InvalidArgumentError("empty histogram")
    counts = hist.counts.astype(float)
    if counts.sum() == 0:
        # everything overflowed: one mode spanning the range, nearest edge takes the rest
        edge = 0 if hist.below >= hist.above else N_BINS - 1
        return [ModeInterval(HIST_LO + edge, HIST_LO, HIST_HI)]
    sm = gaussian_filter1d(counts, smooth_bins, mode="constant")
    top = float(sm.max())
    g = int(np.argmax(sm))
    # zero padding lets peaks sit on the range ends
    padded = np.concatenate([[0.0], sm, [0.0]])
    peaks, _ = find_peaks(padded, prominence=prominence * top, distance=separation_hu)
    peaks = sorted(set((peaks - 1).tolist()) | {g})
    # drop peaks too close to a stronger one (the global maximum added above)
    kept: List[int] = []
    for p in sorted(peaks, key=lambda q: (-sm[q], q)):
        if all(abs(p - q) >= separation_hu for q in kept):
            kept.append(p)
    kept.sort()
    floor = 1e-6 * top
    out = []
    for i, p in enumerate(kept):
        if i > 0:
            lo = kept[i - 1] + int(np.argmin(sm[kept[i - 1]: p + 1]))
            lo += 1 if lo < p else 0
        else:
            lo = p
            while lo > 0 and sm[lo - 1] <= sm[lo] and sm[lo] > floor:
                lo -= 1
        if i + 1 < len(kept):
            hi = p + int(np.argmin(sm[p: kept[i + 1] + 1]))
        else:
            hi = p
            while hi < N_BINS - 1 and sm[hi + 1] <= sm[hi] and sm[hi] > floor:
                hi += 1
        out.append(ModeInterval(HIST_LO + p, HIST_LO + lo, HIST_LO + hi))
    return out


def assign_modes(values: np.ndarray, modes: List[ModeInterval]) -> np.ndarray:
    """Index of the mode whose interval contains each value, else the nearest edge."""
    v = np.asarray(values, dtype=np.float64).ravel()
    lo = np.array([m.lo_hu for m in modes], dtype=np.float64)
    hi = np.array([m.hi_hu for m in modes], dtype=np.float64)
    d = np.maximum(lo[None, :] - v[:, None], 0.0) + np.maximum(v[:, None] - hi[None, :], 0.0)
    return np.argmin(d, axis=1)


def assign_and_measure(
    vol: CtVolume, mask: BinaryMask, modes: List[ModeInterval], hist: Optional[Histogram] = None
) -> DensityReport:
    check_same_grid(vol, mask)
    if not modes:
        raise InvalidArgumentError("no modes")
    if not mask.bits.any():
        raise InvalidArgumentError("empty mask")
    values = vol.values[mask.bits].astype(np.float64)
    which = assign_modes(values, modes)
    total = values.size
    vox_ml = mask.grid.voxel_volume_mm3 / 1000.0
    stats = []
    for i in range(len(modes)):
        sel = values[which == i]
        if sel.size == 0:
            continue
        stats.append((sel.size, modes[i].peak_hu, float(sel.mean()), float(sel.std()), modes[i]))
    stats.sort(key=lambda t: (-t[0], t[1]))
    out = tuple(
        DensityMode(mean, std, n, n * vox_ml, n / total, (m.lo_hu, m.hi_hu))
        for n, _, mean, std, m in stats
    )
    if hist is None:
        hist = _histogram_of(values)
    return DensityReport(out, mask_volume_ml(mask), hist)


def measure(
    vol: CtVolume,
    mask: BinaryMask,
    erosion_mm: float = INTERIOR_EROSION_MM,
    smooth_bins: float = SMOOTH_BINS,
    prominence: float = PROMINENCE,
    separation_hu: int = MIN_SEPARATION_HU,
) -> DensityReport:
    """Histogram, modes and per-mode statistics for one mask."""
    hist = hu_histogram(vol, mask, erosion_mm)
    modes = find_modes(hist, smooth_bins, prominence, separation_hu)
    return assign_and_measure(vol, mask, modes, hist)


def _num(x: float, nd: int) -> str:
    s = f"{round(float(x), nd) + 0.0:.{nd}f}"
    return "0." + "0" * nd if s == "-0." + "0" * nd else s


def render_report(report: Optional[DensityReport], match) -> str:
    """Fixed-format ASCII report; ``report`` is ignored for non-detections."""
    if report is None or match is None or not getattr(match, "found", False):
        best = getattr(match, "score", -1.0) if match is not None else -1.0
        return f"LIVER REPORT\ndetected: no\nbest_score: {_num(best, 3)}\n"
    st = match.shape_type.name if match.shape_type is not None else "?"
    lines = [
        "LIVER REPORT",
        "detected: yes",
        f"template: {match.template_id} type: {st} score: {_num(match.score, 3)}",
        f"visible_fraction: {_num(match.visible_fraction, 2)}",
        f"total_volume_ml: {_num(report.total_volume_ml, 1)}",
        f"modes: {len(report.modes)}",
    ]
    for i, m in enumerate(report.modes, 1):
        lines.append(
            f"mode {i}: mean_hu {_num(m.mean_hu, 1)} std_hu {_num(m.std_hu, 1)} "
            f"volume_ml {_num(m.volume_ml, 1)} fraction {_num(m.fraction, 2)}"
        )
    lines.append(f"dominant_mode: {report.dominant_mode_index + 1}")
    return "\n".join(lines) + "\n"
