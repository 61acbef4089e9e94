"""Craniocaudal localisation against a whole-body skeleton template.

The volume's bone content is collapsed to a 1D area-per-millimetre curve and
slid along the template curve; the best normalised correlation gives the
template coordinate of the scan, which in turn says whether the liver band is
in view.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .volume import CtVolume, InvalidArgumentError

BONE_HU = 200
MIN_OVERLAP_MM = 30
SCORE_GATE = 0.5
DEFAULT_MIN_OVERLAP = 0.4
SKEL_MAGIC = "SKEL 1"


class SkeletonFormatError(ValueError):
    def __init__(self, field: str, message: str, path=None):
        self.field = field
        self.path = None if path is None else str(path)
        where = f"{self.path}: " if path is not None else ""
        super().__init__(f"{where}{field}: {message}")


@dataclass(frozen=True)
class SkeletonTemplate:
    bone_profile: np.ndarray
    liver_interval: Tuple[float, float]

    def __post_init__(self):
        prof = np.asarray(self.bone_profile, dtype=float).ravel()
        if prof.size == 0:
            raise InvalidArgumentError("skeleton profile is empty")
        if not np.all(np.isfinite(prof)) or prof.min() < 0:
            raise InvalidArgumentError("skeleton areas must be finite and >= 0")
        lo, hi = (float(v) for v in self.liver_interval)
        if not 0 <= lo < hi <= prof.size:
            raise InvalidArgumentError(
                f"liver interval must satisfy 0 <= lo < hi <= {prof.size}, got ({lo}, {hi})"
            )
        prof.setflags(write=False)
        object.__setattr__(self, "bone_profile", prof)
        object.__setattr__(self, "liver_interval", (lo, hi))

    @property
    def length_mm(self) -> int:
        return int(self.bone_profile.size)


@dataclass(frozen=True)
class AnatomyMatch:
    z_offset_mm: float
    score: float
    liver_overlap_fraction: float
    volume_z_start_mm: float = 0.0
    volume_length_mm: float = 0.0
    liver_interval: Tuple[float, float] = (0.0, 0.0)
    no_bone: bool = False


@dataclass(frozen=True)
class GateDecision:
    present: bool
    z_range_mm: Optional[Tuple[float, float]] = None


def bone_profile(vol: CtVolume, flip_z: bool = False) -> np.ndarray:
    """Bone area (mm^2) per craniocaudal millimetre, resampled to 1 mm bins."""
    sx, sy, sz = vol.grid.spacing_mm
    per_slice = (vol.values >= BONE_HU).sum(axis=(1, 2)).astype(float) * (sx * sy)
    if flip_z:
        per_slice = per_slice[::-1]
    nz = per_slice.size
    n_mm = max(1, int(round(nz * sz)))
    # bin centres in slice-index units, clamped at the ends
    pos = (np.arange(n_mm) + 0.5) / sz - 0.5
    return np.interp(pos, np.arange(nz), per_slice)


def _window_sums(x: np.ndarray) -> np.ndarray:
    c = np.zeros(x.size + 1)
    np.cumsum(x, out=c[1:])
    return c


def ncc_profile(profile: np.ndarray, template: np.ndarray, min_overlap: int = MIN_OVERLAP_MM):
    """Pearson correlation of ``profile`` against ``template`` for every offset.

    Offset k places profile[0] at template[k]. Only offsets with at least
    ``min_overlap`` shared samples are returned. The template counts as zero
    bone beyond its ends (there is no skeleton past the feet or the vertex),
    so every score is taken over the whole profile. Returns (offsets, scores).
    """
    p = np.asarray(profile, dtype=float)
    t = np.asarray(template, dtype=float)
    n_p, n_t = p.size, t.size
    need = min(min_overlap, n_p, n_t)
    pad = n_p - need
    offsets = np.arange(-pad, n_t - need + 1)
    tp = np.concatenate([np.zeros(pad), t, np.zeros(pad)])
    # window of offset k is tp[k + pad : k + pad + n_p]
    a = offsets + pad
    b = a + n_p
    ct, ct2 = _window_sums(tp), _window_sums(tp * tp)
    st, stt = ct[b] - ct[a], ct2[b] - ct2[a]
    sp, spp = p.sum(), (p * p).sum()
    spt = np.correlate(tp, p, mode="valid")[a]
    n = float(n_p)
    vp = n * spp - sp * sp
    vt = n * stt - st * st
    cov = n * spt - sp * st
    scale_t = np.maximum(n * stt, 1e-300)
    ok = (vt > 1e-12 * scale_t) & (vp > 1e-12 * max(n * spp, 1e-300))
    scores = np.zeros(offsets.size)
    scores[ok] = cov[ok] / np.sqrt(vp * vt[ok])
    return offsets, np.clip(scores, -1.0, 1.0)


def _overlap_fraction(start: float, length: float, interval: Tuple[float, float]) -> float:
    lo, hi = interval
    cover = min(hi, start + length) - max(lo, start)
    return float(min(1.0, max(0.0, cover / (hi - lo))))


def locate_anatomy(vol: CtVolume, tmpl: SkeletonTemplate, flip_z: bool = False) -> AnatomyMatch:
    prof = bone_profile(vol, flip_z=flip_z)
    sz = vol.grid.spacing_mm[2]
    z_start = vol.grid.origin_mm[2] - sz / 2.0
    length = float(prof.size)
    if not np.ptp(prof) > 0:
        return AnatomyMatch(0.0, 0.0, 0.0, z_start, length, tmpl.liver_interval, no_bone=True)
    offsets, scores = ncc_profile(prof, tmpl.bone_profile)
    best = int(np.argmax(scores))  # first maximum = smallest offset
    off = float(offsets[best])
    return AnatomyMatch(
        z_offset_mm=off,
        score=float(scores[best]),
        liver_overlap_fraction=_overlap_fraction(off, length, tmpl.liver_interval),
        volume_z_start_mm=z_start,
        volume_length_mm=length,
        liver_interval=tmpl.liver_interval,
    )


def gate_liver(match: AnatomyMatch, min_overlap: float = DEFAULT_MIN_OVERLAP) -> GateDecision:
    """Decide whether the liver band can be in view and where, in volume z mm."""
    if not 0 < min_overlap <= 1:
        raise InvalidArgumentError(f"min_overlap must be in (0, 1], got {min_overlap}")
    if match.no_bone or match.score < SCORE_GATE or match.liver_overlap_fraction < min_overlap:
        return GateDecision(False)
    lo, hi = match.liver_interval
    shift = match.volume_z_start_mm - match.z_offset_mm
    z_lo = max(lo + shift, match.volume_z_start_mm)
    z_hi = min(hi + shift, match.volume_z_start_mm + match.volume_length_mm)
    return GateDecision(True, (float(z_lo), float(z_hi)))


def read_skeleton(path) -> SkeletonTemplate:
    try:
        text = Path(path).read_text(encoding="ascii")
    except UnicodeDecodeError:
        raise SkeletonFormatError("encoding", "file is not ASCII", path) from None
    lines = text.splitlines()
    if not lines or lines[0].strip() != SKEL_MAGIC:
        raise SkeletonFormatError("magic", f"expected {SKEL_MAGIC!r}", path)
    parts = lines[1].split() if len(lines) > 1 else []
    if len(parts) != 3 or parts[0] != "liver":
        raise SkeletonFormatError("liver", "expected 'liver <z_lo> <z_hi>'", path)
    try:
        interval = (float(parts[1]), float(parts[2]))
        values = [float(v) for v in lines[2:] if v.strip()]
    except ValueError as exc:
        raise SkeletonFormatError("profile", str(exc), path) from None
    try:
        return SkeletonTemplate(np.array(values), interval)
    except InvalidArgumentError as exc:
        raise SkeletonFormatError("profile", str(exc), path) from None


def write_skeleton(tmpl: SkeletonTemplate, path) -> None:
    lo, hi = tmpl.liver_interval
    body = [SKEL_MAGIC, f"liver {lo!r} {hi!r}"] + [repr(float(v)) for v in tmpl.bone_profile]
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_text("\n".join(body) + "\n", encoding="ascii")
    os.replace(tmp, path)


# The reference body carries a deliberately small liver (about 100 mm tall), so
# the gate only screens coverage coarsely; whether enough of the organ is in
# view is settled later by the matcher's visible fraction.
REFERENCE_LIVER_SCALE = 0.70


def build_skeleton_template(seed: int = 0, liver_scale: float = REFERENCE_LIVER_SCALE) -> SkeletonTemplate:
    """Derive the template from the generator's full-body phantom."""
    from .phantom import generate_full_body

    vol, truth = generate_full_body(seed=seed, liver_scale=liver_scale)
    prof = bone_profile(vol)
    z_start = vol.grid.origin_mm[2] - vol.grid.spacing_mm[2] / 2.0
    zs = np.nonzero(truth.liver_mask.bits.any(axis=(1, 2)))[0]
    sz = vol.grid.spacing_mm[2]
    lo = z_start + zs[0] * sz
    hi = z_start + (zs[-1] + 1) * sz
    return SkeletonTemplate(prof, (float(lo), float(hi)))


_DEFAULT: Optional[SkeletonTemplate] = None


def default_skeleton() -> SkeletonTemplate:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = build_skeleton_template()
    return _DEFAULT
