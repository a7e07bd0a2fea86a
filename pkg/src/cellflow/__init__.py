"""Flow-based cell instance segmentation: flow targets, gradient flow tracking,
tiled inference with test-time augmentation, and challenge-style evaluation."""

__version__ = "0.1.0"

from .core import Raster, InstanceRecord, extract_instances, relabel_sequential
from .flowgen import FlowTarget, cell_center, flow_error, label_to_flow, pseudo_diffusion
from .labelops import ShapeStats, boundary_exclusion, cell_intensity_diversify, shape_stats
from .metrics import (EvalReport, MatchResult, f1_score, match_instances, segmentation_loss,
                      time_tolerance)
from .modality import ClusterModel, EmbeddingSet, amplified_weights, kmeans
from .stitcher import (StitchConfig, Window, ensemble, gaussian_importance, plan_windows,
                       stitch, tta_merge)
from .tracker import TrackConfig, expand_masks, filter_instances, follow_flows, seed_peaks, track

__all__ = [
    "Raster", "InstanceRecord", "extract_instances", "relabel_sequential",
    "FlowTarget", "cell_center", "flow_error", "label_to_flow", "pseudo_diffusion",
    "ShapeStats", "boundary_exclusion", "cell_intensity_diversify", "shape_stats",
    "EvalReport", "MatchResult", "f1_score", "match_instances", "segmentation_loss",
    "time_tolerance", "ClusterModel", "EmbeddingSet", "amplified_weights", "kmeans",
    "StitchConfig", "Window", "ensemble", "gaussian_importance", "plan_windows", "stitch",
    "tta_merge", "TrackConfig", "expand_masks", "filter_instances", "follow_flows",
    "seed_peaks", "track",
]
