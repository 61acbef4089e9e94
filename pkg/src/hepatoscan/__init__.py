"""CT liver segmentation and radiodensity measurement."""
from .anatomy import SkeletonTemplate, default_skeleton, gate_liver, locate_anatomy
from .atlas import LiverShapeType, LiverTemplate, TemplateAtlas, generate_reference_atlas
from .densitometry import DensityMode, DensityReport, measure, render_report
from .estimator import LiverSegmenter
from .io import FormatError, read_atlas, read_mask, read_volume, write_atlas, write_mask, write_volume
from .matcher import MatchResult, SearchConfig, decide, search
from .metrics import EvalStats, dice, roc_auc, sens_spec
from .phantom import Lesion, PhantomSpec, generate
from .pipeline import PipelineConfig, StudyOutcome, evaluate, run_batch, run_study
from .refine import RefinementResult, refine_boundary, remeasure
from .volume import BinaryMask, CtVolume, GridMismatchError, InvalidArgumentError, VoxelGrid

__version__ = "0.1.0"
