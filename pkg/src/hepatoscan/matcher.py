"""Template search: where, at what scale, and which atlas shape fits best.

The volume is turned into a soft-tissue feature map (anything that could be
parenchyma, whatever its density) and every template is correlated against
it over translation and isotropic scale. A coarse pass on block-averaged
8 mm data proposes candidates, a 2 mm pass refines them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import fft as sfft

from .atlas import LiverShapeType, LiverTemplate, TemplateAtlas
from .volume import (
    BinaryMask,
    CtVolume,
    InvalidArgumentError,
    VoxelGrid,
    _linear_axis,
    resample_array,
    resampled_grid,
)

FEATURE_SPACING_MM = (2.0, 2.0, 2.0)
FEATURE_HU_RANGE = (-200.0, 300.0)
GRADIENT_SCALE = 20.0  # HU/mm
DEFAULT_TAU = 0.35
CENTROID_SLACK_MM = 30.0
FINE_WINDOW_MM = 8.0
FINE_SCALE_DELTAS = (-0.05, -0.025, 0.0, 0.025, 0.05)
TOP_K = 5
# placements showing less than this share of the floor are not considered at all
ADMIT_FRACTION = 0.5


@dataclass(frozen=True)
class FeatureVolume:
    grid: VoxelGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.shape != self.grid.shape:
            raise InvalidArgumentError(f"values shape {v.shape} != grid {self.grid.shape}")
        v = v.copy() if v is self.values else v
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class SearchConfig:
    scale_min: float = 0.80
    scale_max: float = 1.25
    scale_step: float = 0.05
    coarse_step_mm: float = 8.0
    visibility_floor: float = 0.4

    def __post_init__(self):
        if not 0 < self.scale_min <= self.scale_max:
            raise InvalidArgumentError("need 0 < scale_min <= scale_max")
        if self.scale_step <= 0:
            raise InvalidArgumentError("scale_step must be > 0")
        if self.coarse_step_mm < FEATURE_SPACING_MM[0] or self.coarse_step_mm % FEATURE_SPACING_MM[0]:
            raise InvalidArgumentError("coarse_step_mm must be a positive multiple of 2")
        if not 0 < self.visibility_floor <= 1:
            raise InvalidArgumentError("visibility_floor must be in (0, 1]")

    def scales(self) -> List[float]:
        n = int(np.floor((self.scale_max - self.scale_min) / self.scale_step + 1e-9)) + 1
        return [round(self.scale_min + i * self.scale_step, 6) for i in range(n)]


@dataclass(frozen=True)
class MatchResult:
    template_id: Optional[str]
    shape_type: Optional[LiverShapeType]
    offset_mm: Tuple[float, float, float]
    scale: float
    score: float
    visible_fraction: float
    found: bool = True
    corner_index: Tuple[int, int, int] = (0, 0, 0)  # (z, y, x) on the feature grid


def not_found(best_score: float) -> MatchResult:
    return MatchResult(None, None, (0.0, 0.0, 0.0), 0.0, float(best_score), 0.0, found=False)


# --- feature map ------------------------------------------------------------


def soft_tissue_feature(vol: CtVolume) -> FeatureVolume:
    """Soft-tissue candidacy in [0, 1] on the 2 mm grid.

    In-range HU times a smoothness weight 1/(1 + (g/g0)^2) with g the
    central-difference gradient magnitude.
    """
    grid = vol.grid
    if grid.spacing_mm == FEATURE_SPACING_MM:
        hu = vol.values.astype(np.float32)
        out_grid = grid
    else:
        out_grid = resampled_grid(grid, FEATURE_SPACING_MM)
        hu = resample_array(vol.values, grid, out_grid, dtype=np.float32)
    lo, hi = FEATURE_HU_RANGE
    in_range = (hu >= lo) & (hu <= hi)
    g2 = np.zeros(hu.shape, dtype=np.float32)
    for axis, s in enumerate(out_grid.spacing_zyx):
        if hu.shape[axis] > 1:
            d = np.gradient(hu, s, axis=axis)
            g2 += d * d
    smooth = 1.0 / (1.0 + g2 / np.float32(GRADIENT_SCALE**2))
    return FeatureVolume(out_grid, np.where(in_range, smooth, 0.0).astype(np.float32))


# --- scaled templates -------------------------------------------------------


def scale_bits(bits: np.ndarray, scale: float) -> np.ndarray:
    """Isotropically rescale a binary mask on its own grid (occupancy >= 0.5)."""
    if scale <= 0:
        raise InvalidArgumentError("scale must be > 0")
    out = bits.astype(np.float32)
    for axis in range(3):
        n = bits.shape[axis]
        m = max(1, int(round(n * scale)))
        pos = (np.arange(m) + 0.5) / scale - 0.5
        out = _linear_axis(out, axis, pos)
    return out >= 0.5


_SCALED: Dict[Tuple[str, float, int], Tuple[np.ndarray, np.ndarray, dict]] = {}
_SCALED_MAX = 1024


class _ScaledCache:
    """Scaled templates keyed by (id, scale); shared by every search in the process.

    Entries remember the source array so a different template with the same
    id is never served stale data.
    """

    def _entry(self, tmpl: LiverTemplate, scale: float):
        src = tmpl.mask.bits
        key = (tmpl.id, round(scale, 3), id(src))
        hit = _SCALED.get(key)
        if hit is None or hit[0] is not src:
            if len(_SCALED) >= _SCALED_MAX:
                _SCALED.clear()
            hit = (src, scale_bits(src, key[1]), {})
            _SCALED[key] = hit
        return hit

    def get(self, tmpl: LiverTemplate, scale: float) -> np.ndarray:
        return self._entry(tmpl, scale)[1]

    def centroid(self, tmpl: LiverTemplate, scale: float) -> Tuple[float, float, float]:
        extra = self._entry(tmpl, scale)[2]
        if "centroid" not in extra:
            extra["centroid"] = tuple(float(v.mean()) for v in np.nonzero(self.get(tmpl, scale)))
        return extra["centroid"]

    def z_extent(self, tmpl: LiverTemplate, scale: float) -> Tuple[int, int]:
        """First and last occupied slice of the scaled template."""
        extra = self._entry(tmpl, scale)[2]
        if "z_extent" not in extra:
            occ = np.nonzero(self.get(tmpl, scale).any(axis=(1, 2)))[0]
            extra["z_extent"] = (int(occ[0]), int(occ[-1]))
        return extra["z_extent"]

    def blocks(self, tmpl: LiverTemplate, scale: float, k: int) -> np.ndarray:
        entry = self._entry(tmpl, scale)
        if k not in entry[2]:
            entry[2][k] = _block_mean(entry[1], k)
        return entry[2][k]


# --- correlation ------------------------------------------------------------


def _cumsum0(a: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0] + 1,) + a.shape[1:], dtype=np.float64)
    np.cumsum(a, axis=0, out=out[1:])
    return out


def _box(cs0: np.ndarray, corners: Sequence[np.ndarray], M: Sequence[int]) -> np.ndarray:
    """Sum over the box [c, c+M) clipped to the array, for each corner.

    ``cs0`` is the array's cumulative sum along axis 0 with a leading zero row.
    """
    n0 = cs0.shape[0] - 1
    out = cs0[np.clip(corners[0] + M[0], 0, n0)] - cs0[np.clip(corners[0], 0, n0)]
    for axis in (1, 2):
        c, m = corners[axis], M[axis]
        n = out.shape[axis]
        shape = list(out.shape)
        shape[axis] = 1
        cs = np.concatenate([np.zeros(shape), np.cumsum(out, axis=axis)], axis=axis)
        out = np.take(cs, np.clip(c + m, 0, n), axis=axis) - np.take(cs, np.clip(c, 0, n), axis=axis)
    return out


def _pearson(n, sw, sww, sf, sff, swf, w_floor=0.0):
    """Pearson from window sums; ``w_floor`` bounds round-off in the template variance."""
    vw = n * sww - sw * sw
    vf = n * sff - sf * sf
    cov = n * swf - sw * sf
    tiny_w = np.maximum(1e-9 * n * sww, w_floor * n)
    tiny_f = 1e-9 * np.maximum(n * sff, 1e-300)
    ok = (n > 0) & (vw > tiny_w) & (vf > tiny_f)
    score = np.full(np.shape(n), -1.0)
    score[ok] = cov[ok] / np.sqrt(vw[ok] * vf[ok])
    return np.clip(score, -1.0, 1.0)


class _Correlator:
    """Masked Pearson of templates against one feature array via FFT.

    ``ind`` marks voxels that belong to the volume (a crop may extend past
    it). Corners are template-origin positions in array index units; a corner
    c is wrap-free when N - P <= c <= P - M on every axis.
    """

    def __init__(self, f: np.ndarray, fft_shape: Sequence[int], ind: Optional[np.ndarray] = None, dtype=np.float64):
        self.dtype = dtype
        ind = np.ones(f.shape, dtype=dtype) if ind is None else ind.astype(dtype)
        self.N = f.shape
        # Pearson is shift invariant; centring keeps the window variances well conditioned
        inside = ind > 0
        mu = float(f[inside].astype(np.float64).mean()) if inside.any() else 0.0
        self.f = (f.astype(np.float64) - mu).astype(dtype) * ind
        self.ind = ind
        self.shape = tuple(sfft.next_fast_len(int(n), real=True) for n in fft_shape)
        self.Ff = sfft.rfftn(self.f, self.shape)
        self.Fi = sfft.rfftn(self.ind, self.shape)
        f64 = self.f.astype(np.float64)
        self.cs_n = _cumsum0(self.ind.astype(np.float64))
        self.cs_f = _cumsum0(f64)
        self.cs_ff = _cumsum0(f64 * f64)

    def corners_full(self, M):
        return [np.arange(-(m - 1), n) for m, n in zip(M, self.N)]

    def ncc(self, w: np.ndarray, corners: Optional[Sequence[np.ndarray]] = None, binary: bool = False):
        """Scores and visible template weight at the grid of ``corners`` (per axis)."""
        M = w.shape
        if corners is None:
            corners = self.corners_full(M)
        corners = [np.asarray(c, dtype=np.intp) for c in corners]
        for c, m, n, p in zip(corners, M, self.N, self.shape):
            if c.size and (c.min() < n - p or c.max() > p - m):
                raise InvalidArgumentError("corner outside the wrap-free range")
        w = w.astype(self.dtype, copy=False)
        Fw = np.conj(sfft.rfftn(w, self.shape))
        take = np.ix_(*[c % p for c, p in zip(corners, self.shape)])
        swf = sfft.irfftn(self.Ff * Fw, self.shape)[take].astype(np.float64)
        sw = sfft.irfftn(self.Fi * Fw, self.shape)[take].astype(np.float64)
        if binary:
            # integer counts: rounding removes FFT noise, variance becomes exact
            sw = np.rint(sw)
            sww = sw
            w_floor = 0.0
        else:
            Fw2 = np.conj(sfft.rfftn(w * w, self.shape))
            sww = sfft.irfftn(self.Fi * Fw2, self.shape)[take].astype(np.float64)
            eps = 1e-9 if self.dtype == np.float64 else 1e-4
            w_floor = eps * float((w * w).max()) * float(np.abs(w).sum())
        n = _box(self.cs_n, corners, M)
        sf = _box(self.cs_f, corners, M)
        sff = _box(self.cs_ff, corners, M)
        return _pearson(n, sw, sww, sf, sff, swf, w_floor), sw


def fast_ncc(f: np.ndarray, w: np.ndarray, binary: bool = False):
    """Masked Pearson correlation of template ``w`` against ``f`` at all corners.

    Returns ``(scores, visible_weight, corner_origin)`` where
    ``scores[i, j, k]`` belongs to corner ``corner_origin + (i, j, k)``.
    """
    f = np.asarray(f, dtype=np.float64)
    corr = _Correlator(f, [n + m - 1 for n, m in zip(f.shape, w.shape)])
    score, sw = corr.ncc(np.asarray(w, dtype=np.float64), binary=binary)
    return score, sw, tuple(-(m - 1) for m in w.shape)


def _intersection(corner, M, N):
    sl_f, sl_t = [], []
    for c, m, n in zip(corner, M, N):
        a, b = max(c, 0), min(c + m, n)
        if b <= a:
            return None, None
        sl_f.append(slice(a, b))
        sl_t.append(slice(a - c, b - c))
    return tuple(sl_f), tuple(sl_t)


def ncc_at(f: np.ndarray, w: np.ndarray, corner) -> Tuple[float, float]:
    """Direct Pearson over the intersection of the placed template box and ``f``."""
    total = float(w.sum())
    sl_f, sl_t = _intersection(tuple(int(c) for c in corner), w.shape, f.shape)
    if sl_f is None:
        return -1.0, 0.0
    a = w[sl_t].astype(np.float64).ravel()
    b = f[sl_f].astype(np.float64).ravel()
    vis = float(a.sum()) / total if total > 0 else 0.0
    if a.std() <= 1e-12 * max(abs(a).max(), 1e-300) or b.std() <= 1e-12 * max(abs(b).max(), 1e-300):
        return -1.0, vis
    r = float(np.corrcoef(a, b)[0, 1])
    return max(-1.0, min(1.0, r)), vis


def _corner_from_offset(feat: FeatureVolume, offset_mm) -> Tuple[int, int, int]:
    g = feat.grid
    cx, cy, cz = (
        int(round((o - g.origin_mm[a]) / g.spacing_mm[a])) for a, o in enumerate(offset_mm)
    )
    return cz, cy, cx


def _offset_from_corner(feat: FeatureVolume, corner) -> Tuple[float, float, float]:
    g = feat.grid
    cz, cy, cx = corner
    return tuple(float(g.origin_mm[a] + c * g.spacing_mm[a]) for a, c in enumerate((cx, cy, cz)))


def ncc_score(tmpl: LiverTemplate, feat: FeatureVolume, offset_mm, scale: float) -> Tuple[float, float]:
    """Score and visible fraction of one placement of ``tmpl`` at ``scale``."""
    if not scale > 0:
        raise InvalidArgumentError("scale must be > 0")
    bits = scale_bits(tmpl.mask.bits, scale)
    return ncc_at(feat.values, bits, _corner_from_offset(feat, offset_mm))


# --- search -----------------------------------------------------------------


def _block_mean(a: np.ndarray, k: int, weights: Optional[np.ndarray] = None):
    """Mean over k^3 blocks (edge blocks zero padded); optional in-extent weights."""
    pad = [(0, (-n) % k) for n in a.shape]
    p = np.pad(a.astype(np.float64), pad)
    s = p.reshape(p.shape[0] // k, k, p.shape[1] // k, k, p.shape[2] // k, k).sum(axis=(1, 3, 5))
    if weights is None:
        return s / k**3
    return s / np.maximum(weights, 1)


@dataclass(frozen=True)
class _Cand:
    score: float
    tindex: int
    tid: str
    scale: float
    corner: Tuple[int, int, int]
    vis: float

    def key(self):
        return (-self.score, self.tid, self.corner)


def _admit(floor: float) -> float:
    return ADMIT_FRACTION * floor


def _open_faces(feat: FeatureVolume, z_range) -> Tuple[bool, bool]:
    """Whether the gated liver interval reaches the bottom / top face of the volume.

    A placement may run out of the volume through a z face only if the liver
    itself can: a template cut by the top face of a study whose gated liver
    interval ends well below that face is some other organ.
    """
    g = feat.grid
    bottom = g.origin_mm[2]
    top = bottom + (feat.values.shape[0] - 1) * g.spacing_mm[2]
    return z_range[0] - CENTROID_SLACK_MM <= bottom, z_range[1] + CENTROID_SLACK_MM >= top


def _z_admissible(corner_z: np.ndarray, extent: Tuple[int, int], nz: int, faces) -> np.ndarray:
    """Corner slices whose template is cut only through open z faces."""
    bottom_open, top_open = faces
    ok = np.ones(corner_z.shape, dtype=bool)
    if not bottom_open:
        ok &= corner_z + extent[0] >= 0
    if not top_open:
        ok &= corner_z + extent[1] <= nz - 1
    return ok


def search(
    vol_or_feat,
    atlas: TemplateAtlas,
    z_range: Tuple[float, float],
    config: SearchConfig = SearchConfig(),
) -> MatchResult:
    """Best (template, scale, translation) whose liver centroid lies near ``z_range``.

    Placements are ranked by correlation alone. The visibility floor is then
    applied to the winner: if the best explanation of the image leaves less
    than ``visibility_floor`` of the template inside the volume, the liver is
    reported as not found (with that placement's score attached).
    """
    feat = vol_or_feat if isinstance(vol_or_feat, FeatureVolume) else soft_tissue_feature(vol_or_feat)
    z_lo, z_hi = z_range
    if not z_hi >= z_lo:
        raise InvalidArgumentError("empty z_range")
    cache = _ScaledCache()
    floor = config.visibility_floor
    coarse, best_rejected = _coarse(feat, atlas, (z_lo, z_hi), config, cache)
    if not coarse:
        return not_found(best_rejected)
    fine, rejected = _fine(feat, atlas, coarse[:TOP_K], config, cache, _open_faces(feat, (z_lo, z_hi)))
    best_rejected = max(best_rejected, rejected)
    if not fine:
        return not_found(best_rejected)
    fine.sort(key=_Cand.key)
    b = fine[0]
    t = atlas[b.tindex]
    return MatchResult(
        template_id=t.id,
        shape_type=t.shape_type,
        offset_mm=_offset_from_corner(feat, b.corner),
        scale=b.scale,
        score=b.score,
        visible_fraction=min(1.0, b.vis),
        found=b.vis >= floor,
        corner_index=b.corner,
    )


def _coarse(feat, atlas, z_range, config, cache):
    g = feat.grid
    k = int(round(config.coarse_step_mm / g.spacing_mm[0]))
    f = feat.values
    floor = config.visibility_floor
    fc = _block_mean(f, k, _block_mean(np.ones(f.shape), k) * k**3)
    blocks = {}
    max_dims = [1, 1, 1]
    for ti, t in enumerate(atlas):
        for s in config.scales():
            wc = cache.blocks(t, s, k)
            blocks[ti, s] = wc
            max_dims = [max(a, b) for a, b in zip(max_dims, wc.shape)]
    corr = _Correlator(fc, [n + m - 1 for n, m in zip(fc.shape, max_dims)], dtype=np.float32)
    z_lo, z_hi = z_range
    faces = _open_faces(feat, z_range)
    best_rejected = -1.0
    out: List[_Cand] = []
    for (ti, s), wc in blocks.items():
        t = atlas[ti]
        cz, cy, cx = cache.centroid(t, s)
        full = corr.corners_full(wc.shape)
        # centroid constraints, evaluated on the 2 mm grid the corners map to
        cent_z = g.origin_mm[2] + (full[0] * k + cz) * g.spacing_mm[2]
        in_window = (cent_z >= z_lo - CENTROID_SLACK_MM) & (cent_z <= z_hi + CENTROID_SLACK_MM)
        keep_z = full[0][in_window & _z_admissible(full[0] * k, cache.z_extent(t, s), f.shape[0], faces)]
        keep_y = full[1][(full[1] * k + cy >= 0) & (full[1] * k + cy <= f.shape[1] - 1)]
        keep_x = full[2][(full[2] * k + cx >= 0) & (full[2] * k + cx <= f.shape[2] - 1)]
        if not (keep_z.size and keep_y.size and keep_x.size):
            continue
        corners = [keep_z, keep_y, keep_x]
        score, sw = corr.ncc(wc, corners)
        vis = sw / max(float(wc.sum()), 1e-12)
        good = vis >= _admit(floor)
        if (~good).any():
            best_rejected = max(best_rejected, float(score[~good].max()))
        if not good.any():
            continue
        sc = np.where(good, score, -np.inf)
        flat = sc.ravel()
        part = np.argpartition(-flat, min(TOP_K, flat.size - 1))[: min(TOP_K, flat.size)]
        # order by score, then by flat index (= lexicographic corner)
        for fi in sorted(part.tolist(), key=lambda q: (-flat[q], q)):
            i, j, l = np.unravel_index(fi, sc.shape)
            if not np.isfinite(sc[i, j, l]):
                break
            corner = (int(keep_z[i]) * k, int(keep_y[j]) * k, int(keep_x[l]) * k)
            out.append(_Cand(float(sc[i, j, l]), ti, t.id, s, corner, float(vis[i, j, l])))
    out.sort(key=_Cand.key)
    return out, best_rejected


def _fine(feat, atlas, cands, config, cache, faces=(True, True)):
    g = feat.grid
    f = feat.values
    N = f.shape
    floor = config.visibility_floor
    r = int(round(FINE_WINDOW_MM / g.spacing_mm[0]))
    best_rejected = -1.0
    out: List[_Cand] = []
    for cand in cands:
        t = atlas[cand.tindex]
        m0 = cache.get(t, cand.scale).shape
        plan = []
        for d in FINE_SCALE_DELTAS:
            s = round(cand.scale + d, 6)
            if s < config.scale_min - 1e-9 or s > config.scale_max + 1e-9:
                continue
            bits = cache.get(t, s)
            # keep the scaled template centred where the coarse one was
            base = tuple(c + int(round((a - b) / 2.0)) for c, a, b in zip(cand.corner, m0, bits.shape))
            plan.append((s, bits, base))
        # one crop (zero padded past the volume) covering every window of this candidate
        lo = [min(p[2][a] for p in plan) - r for a in range(3)]
        hi = [max(p[2][a] + p[1].shape[a] for p in plan) + r for a in range(3)]
        size = [h - l_ for l_, h in zip(lo, hi)]
        crop = np.zeros(size, dtype=np.float64)
        ind = np.zeros(size, dtype=np.float64)
        src = tuple(slice(max(l_, 0), min(h, n)) for l_, h, n in zip(lo, hi, N))
        dst = tuple(slice(sl.start - l_, sl.stop - l_) for sl, l_ in zip(src, lo))
        if any(sl.stop <= sl.start for sl in src):
            continue
        crop[dst] = f[src]
        ind[dst] = 1.0
        corr = _Correlator(crop, size, ind)
        for s, bits, base in plan:
            rel = [np.arange(b - r, b + r + 1) - l_ for b, l_ in zip(base, lo)]
            score, sw = corr.ncc(bits, rel, binary=True)
            vis = np.rint(sw) / float(bits.sum())
            z_ok = _z_admissible(rel[0] + lo[0], cache.z_extent(t, s), N[0], faces)[:, None, None]
            ok = (vis >= _admit(floor)) & z_ok
            dim = z_ok & ~ok
            if dim.any():
                best_rejected = max(best_rejected, float(score[dim].max()))
            if not ok.any():
                continue
            wsc = np.where(ok, score, -np.inf)
            best = float(wsc.max())
            i, j, l = np.argwhere(wsc == best)[0]  # lexicographically smallest corner
            corner = tuple(int(rel[a][v] + lo[a]) for a, v in enumerate((i, j, l)))
            out.append(_Cand(best, cand.tindex, t.id, s, corner, float(vis[i, j, l])))
    return out, best_rejected


def decide(match: MatchResult, tau: float = DEFAULT_TAU) -> bool:
    if not 0 < tau < 1:
        raise InvalidArgumentError(f"tau must be in (0, 1), got {tau}")
    return bool(match.found and match.score >= tau)


def placed_bits(match: MatchResult, atlas: TemplateAtlas, grid: VoxelGrid) -> np.ndarray:
    """The matched, scaled template rasterised on ``grid`` (a feature-aligned 2 mm grid)."""
    out = np.zeros(grid.shape, dtype=bool)
    if match.template_id is None:
        return out
    bits = scale_bits(atlas[match.template_id].mask.bits, match.scale)
    corner = tuple(
        int(round((o - grid.origin_mm[a]) / grid.spacing_mm[a])) for a, o in enumerate(match.offset_mm)
    )[::-1]
    sl_f, sl_t = _intersection(corner, bits.shape, grid.shape)
    if sl_f is not None:
        out[sl_f] = bits[sl_t]
    return out


def placed_mask(match: MatchResult, atlas: TemplateAtlas, grid: VoxelGrid) -> BinaryMask:
    """Matched template on an arbitrary volume grid (occupancy >= 0.5)."""
    fgrid = resampled_grid(grid, FEATURE_SPACING_MM)
    bits = placed_bits(match, atlas, fgrid)
    if fgrid == grid:
        return BinaryMask(grid, bits, copy=False)
    occ = resample_array(bits.astype(np.float32), fgrid, grid, dtype=np.float32)
    return BinaryMask(grid, occ >= 0.5, copy=False)
