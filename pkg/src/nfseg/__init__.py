"""Motion segmentation of event-camera normal flow.

Clusters per-event normal-flow observations into a background and
independently moving objects by alternating graph-cut labeling with affine
motion-model fitting, windowed over time.
"""

from .core import (
    AffineMotionModel,
    Labeling,
    ModelVector,
    NormalFlowObservation,
    SegmentationResult,
    Window,
    affine_flow,
    decouple_model,
    flow_residual,
    to_vector,
)
from .pipeline import PipelineConfig, run_sequence, segment_window

__version__ = "0.1.0"

__all__ = [
    "AffineMotionModel",
    "Labeling",
    "ModelVector",
    "NormalFlowObservation",
    "PipelineConfig",
    "SegmentationResult",
    "Window",
    "affine_flow",
    "decouple_model",
    "flow_residual",
    "run_sequence",
    "segment_window",
    "to_vector",
    "__version__",
]
