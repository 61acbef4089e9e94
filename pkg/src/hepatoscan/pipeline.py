"""Per-study pipeline, batch runner and corpus evaluation."""
from __future__ import annotations

import concurrent.futures as cf
import dataclasses
import logging
import math
import os
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from . import anatomy, densitometry, matcher, refine
from .atlas import TemplateAtlas, generate_reference_atlas
from .io import FormatError, decode, read_mask, write_mask
from .metrics import EvalStats, density_error_stats, dice, roc_auc, sens_spec
from .volume import HU_MAX, HU_MIN, BinaryMask, CtVolume, InvalidArgumentError

log = logging.getLogger(__name__)

STATUSES = ("ok", "no-liver", "not-found", "refine-fallback", "error")


class ConfigError(ValueError):
    pass


class SourceError(RuntimeError):
    """The study source as a whole is unusable (unreachable, unlistable)."""


@dataclass(frozen=True)
class PipelineConfig:
    tau: float = matcher.DEFAULT_TAU
    scale_min: float = 0.80
    scale_max: float = 1.25
    scale_step: float = 0.05
    coarse_step_mm: float = 8.0
    visibility_floor: float = 0.4
    min_overlap: float = anatomy.DEFAULT_MIN_OVERLAP
    mode_gate_sigma: float = refine.MODE_GATE_SIGMA
    max_surface_dist_mm: float = refine.MAX_SURFACE_DIST_MM
    closing_mm: float = refine.CLOSING_MM
    interior_erosion_mm: float = densitometry.INTERIOR_EROSION_MM
    hist_smooth_bins: float = densitometry.SMOOTH_BINS
    mode_prominence: float = densitometry.PROMINENCE
    mode_separation_hu: int = densitometry.MIN_SEPARATION_HU
    workers: int = 1
    source: str = ""
    flip_z: bool = False
    pre_smooth_mm: float = 0.0

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ConfigError("tau must be in (0, 1)")
        if not 0 < self.min_overlap <= 1:
            raise ConfigError("min_overlap must be in (0, 1]")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.pre_smooth_mm < 0:
            raise ConfigError("pre_smooth_mm must be >= 0")
        for name in ("mode_gate_sigma", "max_surface_dist_mm", "hist_smooth_bins", "mode_prominence"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("closing_mm", "interior_erosion_mm"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.mode_separation_hu < 1:
            raise ConfigError("mode_separation_hu must be >= 1")
        try:
            self.search_config()
        except InvalidArgumentError as exc:
            raise ConfigError(str(exc)) from None

    def search_config(self) -> matcher.SearchConfig:
        return matcher.SearchConfig(
            self.scale_min, self.scale_max, self.scale_step, self.coarse_step_mm, self.visibility_floor
        )

    def density_params(self) -> dict:
        return dict(
            erosion_mm=self.interior_erosion_mm,
            smooth_bins=self.hist_smooth_bins,
            prominence=self.mode_prominence,
            separation_hu=self.mode_separation_hu,
        )

    def replace(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, text: str):
    ftype = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}[name]
    text = text.strip()
    try:
        if ftype in (bool, "bool"):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if ftype in (int, "int"):
            return int(text)
        if ftype in (float, "float"):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None


def parse_overrides(pairs: Dict[str, str], base: Optional[PipelineConfig] = None) -> PipelineConfig:
    known = {f.name for f in dataclasses.fields(PipelineConfig)}
    values = {}
    for k, v in pairs.items():
        if k not in known:
            raise ConfigError(f"unknown configuration key {k!r}")
        values[k] = _coerce(k, v)
    return (base or PipelineConfig()).replace(**values)


def parse_config_text(text: str, base: Optional[PipelineConfig] = None) -> PipelineConfig:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v
    return parse_overrides(pairs, base)


def load_config(path) -> PipelineConfig:
    try:
        text = Path(path).read_text(encoding="ascii")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text)


# --- per study -----------------------------------------------------------------


@dataclass
class StudyOutcome:
    study_id: str
    status: str
    report_text: str
    score: float = -1.0
    gate: Optional[anatomy.GateDecision] = None
    anatomy_match: Optional[anatomy.AnatomyMatch] = None
    match: Optional[matcher.MatchResult] = None
    report: Optional[densitometry.DensityReport] = None
    mask: Optional[BinaryMask] = None
    mask_path: Optional[str] = None
    timings_ms: Dict[str, float] = field(default_factory=dict)
    message: str = ""

    @property
    def detected(self) -> bool:
        return self.status in ("ok", "refine-fallback")


class _Timer:
    def __init__(self, timings: Dict[str, float], name: str):
        self.timings, self.name = timings, name

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.timings[self.name] = (time.perf_counter() - self.t0) * 1000.0


def _flip(vol: CtVolume) -> CtVolume:
    return CtVolume(vol.grid, vol.values[::-1], copy=True)


def _smooth(vol: CtVolume, width_mm: float) -> CtVolume:
    sigma = [width_mm / s for s in vol.grid.spacing_zyx]
    v = ndimage.gaussian_filter(vol.values.astype(np.float32), sigma)
    return CtVolume(vol.grid, np.clip(np.rint(v), HU_MIN, HU_MAX).astype(np.int16), copy=False)


def run_study(
    vol: CtVolume,
    atlas: Optional[TemplateAtlas] = None,
    skeleton: Optional[anatomy.SkeletonTemplate] = None,
    cfg: PipelineConfig = PipelineConfig(),
    study_id: str = "study",
) -> StudyOutcome:
    """Gate, search, decide, measure, refine, remeasure and render one study."""
    atlas = atlas if atlas is not None else default_atlas()
    skeleton = skeleton if skeleton is not None else anatomy.default_skeleton()
    timings: Dict[str, float] = {}
    t_start = time.perf_counter()
    grid = vol.grid
    empty = BinaryMask.empty(grid)

    def done(status, text, score=-1.0, **kw):
        timings["total"] = (time.perf_counter() - t_start) * 1000.0
        mask = kw.pop("mask", empty)
        if cfg.flip_z and mask is not empty:
            mask = BinaryMask(grid, mask.bits[::-1], copy=True)
        return StudyOutcome(study_id, status, text, score, mask=mask, timings_ms=timings, **kw)

    work = _flip(vol) if cfg.flip_z else vol
    with _Timer(timings, "gate"):
        am = anatomy.locate_anatomy(work, skeleton)
        gate = anatomy.gate_liver(am, cfg.min_overlap)
    if not gate.present:
        return done("no-liver", densitometry.render_report(None, None), gate=gate, anatomy_match=am)
    if cfg.pre_smooth_mm > 0:
        with _Timer(timings, "pre_smooth"):
            work = _smooth(work, cfg.pre_smooth_mm)
    with _Timer(timings, "search"):
        match = matcher.search(work, atlas, gate.z_range_mm, cfg.search_config())
    if not matcher.decide(match, cfg.tau):
        return done(
            "not-found",
            densitometry.render_report(None, match),
            match.score,
            gate=gate,
            anatomy_match=am,
            match=match,
        )
    dp = cfg.density_params()
    with _Timer(timings, "densitometry"):
        placed = matcher.placed_mask(match, atlas, grid)
        if not placed.bits.any():
            return done(
                "not-found", densitometry.render_report(None, match), match.score, gate=gate, match=match
            )
        first = densitometry.measure(work, placed, **dp)
    with _Timer(timings, "refine"):
        res = refine.refine_boundary(
            work,
            placed,
            first,
            mode_gate_sigma=cfg.mode_gate_sigma,
            max_surface_dist_mm=cfg.max_surface_dist_mm,
            closing_mm=cfg.closing_mm,
        )
    with _Timer(timings, "remeasure"):
        final = first if res.failed else refine.remeasure(work, res, **dp)
    with _Timer(timings, "render"):
        text = densitometry.render_report(final, match)
    status = "refine-fallback" if res.failed else "ok"
    return done(
        status,
        text,
        match.score,
        gate=gate,
        anatomy_match=am,
        match=match,
        report=final,
        mask=res.final_mask,
        message=res.reason,
    )


# --- atlas / skeleton defaults -----------------------------------------------

_ATLAS: Optional[TemplateAtlas] = None


def default_atlas() -> TemplateAtlas:
    global _ATLAS
    if _ATLAS is None:
        _ATLAS = generate_reference_atlas(seed=0)
    return _ATLAS


# --- sources -------------------------------------------------------------------


def _is_url(source: str) -> bool:
    return source.startswith("http://") or source.startswith("https://")


def list_studies(source: str, timeout: float = 30.0) -> List[str]:
    if _is_url(source):
        url = source.rstrip("/") + "/studies"
        try:
            with urllib.request.urlopen(url, timeout=timeout) as resp:
                body = resp.read().decode("ascii")
        except (urllib.error.URLError, OSError, UnicodeDecodeError) as exc:
            raise SourceError(f"cannot list studies at {url}: {exc}") from None
        return [line.strip() for line in body.splitlines() if line.strip()]
    d = Path(source)
    if not d.is_dir():
        raise SourceError(f"source directory {source} does not exist")
    ids = []
    for p in sorted(d.glob("*.mvol")):
        if p.name.endswith(".mask.mvol"):
            continue
        ids.append(p.name[: -len(".mvol")])
    return ids


def fetch_study(source: str, study_id: str, timeout: float = 60.0) -> CtVolume:
    if _is_url(source):
        url = source.rstrip("/") + f"/studies/{study_id}.mvol"
        with urllib.request.urlopen(url, timeout=timeout) as resp:
            buf = resp.read()
        path = url
    else:
        path = Path(source) / f"{study_id}.mvol"
        buf = path.read_bytes()
    grid, dtype, arr = decode(buf, path)
    if dtype != "int16le":
        raise FormatError("dtype", f"volume must be int16le, got {dtype}", path)
    if arr.size and (arr.min() < HU_MIN or arr.max() > HU_MAX):
        raise FormatError("payload", f"values outside [{HU_MIN}, {HU_MAX}]", path)
    return CtVolume(grid, arr.astype(np.int16))


# --- batch ---------------------------------------------------------------------

_WORKER_STATE: dict = {}


def _init_worker(atlas, skeleton, cfg, out_dir):
    _WORKER_STATE.update(atlas=atlas, skeleton=skeleton, cfg=cfg, out_dir=out_dir)


def write_outcome(outcome: StudyOutcome, out_dir: Path) -> None:
    if outcome.status == "error":
        return
    mask_path = out_dir / f"{outcome.study_id}.mask.mvol"
    write_mask(outcome.mask, mask_path)
    outcome.mask_path = str(mask_path)
    tmp = out_dir / f"{outcome.study_id}.report.txt.tmp{os.getpid()}"
    tmp.write_text(outcome.report_text, encoding="ascii")
    os.replace(tmp, out_dir / f"{outcome.study_id}.report.txt")


def _process(study_id: str):
    st = _WORKER_STATE
    cfg = st["cfg"]
    t0 = time.perf_counter()
    try:
        vol = fetch_study(cfg.source, study_id)
    except (OSError, FormatError, urllib.error.URLError, InvalidArgumentError) as exc:
        return (study_id, "error", -1.0, f"fetch failed: {exc}", (time.perf_counter() - t0) * 1000.0)
    try:
        out = run_study(vol, st["atlas"], st["skeleton"], cfg, study_id)
        write_outcome(out, Path(st["out_dir"]))
    except Exception as exc:  # one bad study must not stop the batch
        log.exception("study %s failed", study_id)
        return (study_id, "error", -1.0, f"{type(exc).__name__}: {exc}", (time.perf_counter() - t0) * 1000.0)
    return (study_id, out.status, out.score, out.message, (time.perf_counter() - t0) * 1000.0)


@dataclass
class BatchSummary:
    results: List[Tuple[str, str, float, str, float]]
    wall_s: float

    def counts(self) -> Dict[str, int]:
        c = {s: 0 for s in STATUSES}
        for r in self.results:
            c[r[1]] += 1
        return c

    def render(self) -> str:
        n = len(self.results)
        lines = [f"studies = {n}"]
        lines += [f"status_{s.replace('-', '_')} = {k}" for s, k in self.counts().items()]
        lines.append(f"wall_time_s = {self.wall_s:.3f}")
        lines.append(f"throughput_studies_per_min = {60.0 * n / self.wall_s if self.wall_s > 0 else 0.0:.3f}")
        lines.append("# study_id status score")
        for sid, status, score, msg, _ in sorted(self.results):
            lines.append(f"{sid} {status} {score:.3f}" + (f" # {msg}" if msg else ""))
        return "\n".join(lines) + "\n"


def run_batch(
    source: str,
    cfg: PipelineConfig,
    out_dir,
    atlas: Optional[TemplateAtlas] = None,
    skeleton: Optional[anatomy.SkeletonTemplate] = None,
) -> BatchSummary:
    """Process every study of ``source`` with ``cfg.workers`` processes."""
    t0 = time.perf_counter()
    cfg = cfg.replace(source=source)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    atlas = atlas if atlas is not None else default_atlas()
    skeleton = skeleton if skeleton is not None else anatomy.default_skeleton()
    ids = list_studies(source)
    if len(set(ids)) != len(ids):
        raise SourceError("duplicate study ids in source")
    if cfg.workers == 1 or len(ids) <= 1:
        _init_worker(atlas, skeleton, cfg, str(out_dir))
        results = [_process(i) for i in ids]
    else:
        with cf.ProcessPoolExecutor(
            max_workers=cfg.workers,
            initializer=_init_worker,
            initargs=(atlas, skeleton, cfg, str(out_dir)),
        ) as pool:
            results = list(pool.map(_process, ids))
    summary = BatchSummary(results, time.perf_counter() - t0)
    (out_dir / "batch_summary.txt").write_text(summary.render(), encoding="ascii")
    return summary


# --- evaluation ----------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    study_id: str
    kind: str
    liver_present: bool
    expected_mean_hu: float
    path: str


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ValueError(f"bad boolean {text!r}")


def read_manifest(path) -> List[ManifestEntry]:
    out = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="ascii").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise FormatError("manifest", f"line {lineno}: expected 5 fields", path)
        sid, kind, present, mean, vpath = parts
        try:
            out.append(ManifestEntry(sid, kind, _parse_bool(present), float(mean), vpath))
        except ValueError as exc:
            raise FormatError("manifest", f"line {lineno}: {exc}", path) from None
    return out


def write_manifest(entries: Sequence[ManifestEntry], path) -> None:
    lines = ["# study_id kind liver_present expected_mean_hu path"]
    for e in entries:
        lines.append(f"{e.study_id} {e.kind} {int(e.liver_present)} {e.expected_mean_hu!r} {e.path}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


@dataclass(frozen=True)
class ParsedReport:
    detected: bool
    score: float
    dominant_mean_hu: float


def parse_report(text: str) -> ParsedReport:
    lines = text.splitlines()
    if len(lines) < 2 or lines[0] != "LIVER REPORT" or not lines[1].startswith("detected: "):
        raise FormatError("report", "not a liver report")
    detected = lines[1] == "detected: yes"
    if not detected:
        for line in lines:
            if line.startswith("best_score: "):
                return ParsedReport(False, float(line.split()[1]), float("nan"))
        raise FormatError("report", "missing best_score")
    score = float(lines[2].split("score:")[1])
    mean = float("nan")
    for line in lines:
        if line.startswith("mode 1: "):
            mean = float(line.split()[3])
    return ParsedReport(True, score, mean)


def truth_mask_path(volume_path) -> Path:
    p = Path(volume_path)
    return p.with_name(p.name[: -len(".mvol")] + ".truth.mask.mvol") if p.name.endswith(".mvol") else p


def evaluate(manifest_path, outputs_dir) -> EvalStats:
    """Join manifest truth with per-study outputs into corpus statistics."""
    entries = read_manifest(manifest_path)
    outputs_dir = Path(outputs_dir)
    base = Path(manifest_path).parent
    det, lab, scores, dices, pred, truth = [], [], [], [], [], []
    skipped = 0
    for e in entries:
        rpath = outputs_dir / f"{e.study_id}.report.txt"
        try:
            rep = parse_report(rpath.read_text(encoding="ascii"))
        except (OSError, FormatError, ValueError, IndexError):
            skipped += 1
            continue
        det.append(rep.detected)
        lab.append(e.liver_present)
        scores.append(rep.score)
        if e.liver_present:
            vpath = Path(e.path) if Path(e.path).is_absolute() else base / e.path
            tpath = truth_mask_path(vpath)
            mpath = outputs_dir / f"{e.study_id}.mask.mvol"
            if tpath.is_file() and mpath.is_file():
                try:
                    dices.append(dice(read_mask(mpath), read_mask(tpath)))
                except (FormatError, InvalidArgumentError, OSError):
                    pass
            if rep.detected and math.isfinite(e.expected_mean_hu) and math.isfinite(rep.dominant_mean_hu):
                pred.append(rep.dominant_mean_hu)
                truth.append(e.expected_mean_hu)
    nan = float("nan")
    y = np.array(lab, dtype=bool)
    d = np.array(det, dtype=bool)
    sens = float((d & y).sum() / y.sum()) if y.any() else nan
    spec = float((~d & ~y).sum() / (~y).sum()) if (~y).any() else nan
    auc = roc_auc(scores, lab) if (y.any() and (~y).any()) else nan
    if pred:
        e_std, e_p95, e_max = density_error_stats(pred, truth)
    else:
        e_std = e_p95 = e_max = nan
    return EvalStats(
        sensitivity=sens,
        specificity=spec,
        auc=auc,
        dice_mean=float(np.mean(dices)) if dices else nan,
        density_err_std_hu=e_std,
        density_err_p95_hu=e_p95,
        density_err_max_hu=e_max,
        n_studies=len(det),
        n_skipped=skipped,
    )


__all__ = [
    "PipelineConfig",
    "ConfigError",
    "SourceError",
    "StudyOutcome",
    "run_study",
    "run_batch",
    "evaluate",
    "load_config",
    "parse_config_text",
    "read_manifest",
    "write_manifest",
    "ManifestEntry",
    "sens_spec",
]
