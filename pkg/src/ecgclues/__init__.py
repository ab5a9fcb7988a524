"""Beat-level ECG features, a gradient-boosted MI classifier and counterfactual clues on ECG reports."""

from __future__ import annotations

from .counterfactual import CounterfactualExplainer, CounterfactualSet, derive_ranges
from .features import FEATURE_NAMES, BeatFeatureExtractor, build_feature_matrix, decode_feature_name
from .io import LEAD_NAMES, EcgRecord, load_record
from .model import GradientBoostedTrees, RecursiveFeatureEliminator
from .signal import FiducialSet, process_record

__version__ = "0.1.0"

__all__ = [
    "BeatFeatureExtractor",
    "CounterfactualExplainer",
    "CounterfactualSet",
    "EcgRecord",
    "FEATURE_NAMES",
    "FiducialSet",
    "GradientBoostedTrees",
    "LEAD_NAMES",
    "RecursiveFeatureEliminator",
    "build_feature_matrix",
    "decode_feature_name",
    "derive_ranges",
    "load_record",
    "process_record",
]
