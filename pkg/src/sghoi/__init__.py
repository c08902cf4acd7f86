"""Scene-graph conditioned human-object interaction detection."""

import os as _os

# SG2HOI_THREADS caps BLAS worker pools; must bind before numpy loads
_cap = _os.environ.get("SG2HOI_THREADS")
if _cap:
    for _var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        _os.environ.setdefault(_var, _cap)

__version__ = "0.1.0"

from .datamodel import (
    AnnotationSet,
    BoundingBox,
    FeatureBundle,
    GroundTruthHOI,
    HOIDetection,
    SceneGraph,
    SGEdge,
    SGNode,
    Vocabulary,
    iou,
    load_scene_graph,
    validate_scene_graph,
)

__all__ = [
    "AnnotationSet",
    "BoundingBox",
    "FeatureBundle",
    "GroundTruthHOI",
    "HOIDetection",
    "SceneGraph",
    "SGEdge",
    "SGNode",
    "Vocabulary",
    "iou",
    "load_scene_graph",
    "validate_scene_graph",
]
