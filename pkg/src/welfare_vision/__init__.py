"""welfare_vision: predict household consumption and extreme poverty from images."""

__version__ = "0.1.0"

from .config import PipelineConfig, load_config
from .manifest import CATEGORIES, DatasetManifest, HouseholdMeta, RawImageAsset
from .metrics import ConfusionMatrix, MetricsReport, RegressionPairs
from .modeling import LabeledImage, ModelCheckpoint, TrainConfig
from .preprocess import HouseholdRecord, IncomeGroup, MosaicSpec, PovertyPolicy, SplitSpec
from .recipes import ExperimentRecipe, Stage, builtin_recipes, run_recipe

__all__ = [
    "CATEGORIES",
    "ConfusionMatrix",
    "DatasetManifest",
    "ExperimentRecipe",
    "HouseholdMeta",
    "HouseholdRecord",
    "IncomeGroup",
    "LabeledImage",
    "MetricsReport",
    "ModelCheckpoint",
    "MosaicSpec",
    "PipelineConfig",
    "PovertyPolicy",
    "RawImageAsset",
    "RegressionPairs",
    "SplitSpec",
    "Stage",
    "TrainConfig",
    "builtin_recipes",
    "load_config",
    "run_recipe",
    "__version__",
]
