"""scikit-learn style wrapper around the per-study pipeline."""
from __future__ import annotations

from typing import List, Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import anatomy, densitometry, matcher, refine
from .pipeline import PipelineConfig, StudyOutcome, default_atlas, run_study
from .validation import check_spacing, check_volumes


class LiverSegmenter(ClassifierMixin, BaseEstimator):
    """Detect, segment and measure the liver in CT volumes.

    ``X`` is a sequence of ``CtVolume`` objects or (nz, ny, nx) HU arrays
    sampled at ``spacing_mm``. ``predict`` gives liver detections,
    ``decision_function`` the match scores and ``transform`` the final masks.
    There is nothing to learn from labels; ``fit`` only binds the atlas and
    skeleton template and validates the parameters.
    """

    def __init__(
        self,
        tau: float = matcher.DEFAULT_TAU,
        scale_min: float = 0.80,
        scale_max: float = 1.25,
        scale_step: float = 0.05,
        coarse_step_mm: float = 8.0,
        visibility_floor: float = 0.4,
        min_overlap: float = anatomy.DEFAULT_MIN_OVERLAP,
        mode_gate_sigma: float = refine.MODE_GATE_SIGMA,
        max_surface_dist_mm: float = refine.MAX_SURFACE_DIST_MM,
        closing_mm: float = refine.CLOSING_MM,
        interior_erosion_mm: float = densitometry.INTERIOR_EROSION_MM,
        pre_smooth_mm: float = 0.0,
        flip_z: bool = False,
        spacing_mm=(1.0, 1.0, 1.0),
        atlas=None,
        skeleton=None,
    ):
        self.tau = tau
        self.scale_min = scale_min
        self.scale_max = scale_max
        self.scale_step = scale_step
        self.coarse_step_mm = coarse_step_mm
        self.visibility_floor = visibility_floor
        self.min_overlap = min_overlap
        self.mode_gate_sigma = mode_gate_sigma
        self.max_surface_dist_mm = max_surface_dist_mm
        self.closing_mm = closing_mm
        self.interior_erosion_mm = interior_erosion_mm
        self.pre_smooth_mm = pre_smooth_mm
        self.flip_z = flip_z
        self.spacing_mm = spacing_mm
        self.atlas = atlas
        self.skeleton = skeleton

    def _config(self) -> PipelineConfig:
        return PipelineConfig(
            tau=float(self.tau),
            scale_min=float(self.scale_min),
            scale_max=float(self.scale_max),
            scale_step=float(self.scale_step),
            coarse_step_mm=float(self.coarse_step_mm),
            visibility_floor=float(self.visibility_floor),
            min_overlap=float(self.min_overlap),
            mode_gate_sigma=float(self.mode_gate_sigma),
            max_surface_dist_mm=float(self.max_surface_dist_mm),
            closing_mm=float(self.closing_mm),
            interior_erosion_mm=float(self.interior_erosion_mm),
            pre_smooth_mm=float(self.pre_smooth_mm),
            flip_z=bool(self.flip_z),
        )

    def fit(self, X=None, y=None):
        self.config_ = self._config()
        check_spacing(self.spacing_mm)
        self.atlas_ = self.atlas if self.atlas is not None else default_atlas()
        self.skeleton_ = self.skeleton if self.skeleton is not None else anatomy.default_skeleton()
        self.classes_ = np.array([False, True])
        return self

    def run(self, X) -> List[StudyOutcome]:
        check_is_fitted(self, "config_")
        vols = check_volumes(X, self.spacing_mm)
        return [run_study(v, self.atlas_, self.skeleton_, self.config_, f"study{i}") for i, v in enumerate(vols)]

    def decision_function(self, X) -> np.ndarray:
        return np.array([o.score for o in self.run(X)], dtype=float)

    def predict(self, X) -> np.ndarray:
        return np.array([o.detected for o in self.run(X)], dtype=bool)

    def transform(self, X) -> List[np.ndarray]:
        return [o.mask.bits for o in self.run(X)]

    def measure(self, X) -> List[Optional[densitometry.DensityReport]]:
        return [o.report for o in self.run(X)]
