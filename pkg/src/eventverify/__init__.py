"""Event verification from pretrained-backbone transfer features and classical classifiers."""

__version__ = "0.1.0"

from .backbone import (
    BackboneError,
    BackboneModel,
    FineTuneConfig,
    ShapeMismatchError,
    TapError,
    extract,
    fine_tune,
    load_backbone,
    load_from_registry,
    replace_head,
)
from .cache import FeatureCache
from .classifiers import ClassifierError, ClassifierSpec, TrainedClassifier, fit, knn_distance
from .dataset import DatasetManifest, ImageRecord, ManifestError, RasterImage, load_image, load_manifest
from .evaluation import EvaluationReport, auc, evaluate, roc_curve
from .features_global import FeatureSpec, FeatureVector, global_features
from .features_local import full_features, patch_grid, sum_features
from .pipeline import FeatureStore, GridResult, MissingFeaturesError, grid_sweep

__all__ = [
    "BackboneError",
    "BackboneModel",
    "ClassifierError",
    "ClassifierSpec",
    "DatasetManifest",
    "EvaluationReport",
    "FeatureCache",
    "FeatureSpec",
    "FeatureStore",
    "FeatureVector",
    "FineTuneConfig",
    "GridResult",
    "ImageRecord",
    "ManifestError",
    "MissingFeaturesError",
    "RasterImage",
    "ShapeMismatchError",
    "TapError",
    "TrainedClassifier",
    "auc",
    "evaluate",
    "extract",
    "fine_tune",
    "fit",
    "full_features",
    "global_features",
    "grid_sweep",
    "knn_distance",
    "load_backbone",
    "load_from_registry",
    "load_image",
    "load_manifest",
    "patch_grid",
    "replace_head",
    "roc_curve",
    "sum_features",
]
