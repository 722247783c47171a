"""Structured epipolar matching at desk scale."""

from .errors import SemError
from .geometry import CameraModel, Correspondence, EpipolarBand, RelativePose
from .features import AnchorSet, FeatureMap
from .matching import MatchMatrix, MatchSet
from .params import ParamStore, init_params
from .pipeline import Features, IterationTrace, PipelineConfig, run_pipeline, sem_forward
from .synthetic import Scene, generate_scene, ground_truth_matches, render_feature_maps

__version__ = "0.1.0"
