"""Ablation-based architecture search over Transformer blocks for time-series forecasting."""

__version__ = "0.1.0"

from .errors import (
                     ConfigError,
                     DimensionError,
                     IngestionError,
                     NumericError,
                     ParseError,
                     StateError,
                     TsnasError,
                     UndefinedMetricError,
                     UsageError,
)
from .hypernet import (
                     HyperNetwork,
                     discretize_node,
                     extract_spec,
                     mask_operation,
                     to_subnetwork,
)
from .metrics import MetricsReport, evaluate_forecast
from .nnops import ForecastModel, ModelConfig
from .search import (
                     SearchConfig,
                     SearchTrace,
                     ab_darts_search,
                     darts_search,
                     train_subnet,
)
from .searchspace import (
                     ArchitectureSpec,
                     BlockSpec,
                     SearchSpaceConfig,
                     cardinality,
                     full_space,
                     load_fixture,
                     parse_spec,
                     reduced_space,
                     serialize_spec,
                     vanilla_spec,
)

__all__ = [
    "ArchitectureSpec", "BlockSpec", "ConfigError", "DimensionError", "ForecastModel", "HyperNetwork",
    "IngestionError", "MetricsReport", "ModelConfig", "NumericError", "ParseError", "SearchConfig",
    "SearchSpaceConfig", "SearchTrace", "StateError", "TsnasError", "UndefinedMetricError", "UsageError",
    "ab_darts_search", "cardinality", "darts_search", "discretize_node", "evaluate_forecast", "extract_spec",
    "full_space", "load_fixture", "mask_operation", "parse_spec", "reduced_space", "serialize_spec",
    "to_subnetwork", "train_subnet", "vanilla_spec",
]
