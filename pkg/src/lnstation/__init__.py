"""Station-aware metastatic lymph node detection on synthetic CT phantoms.

Two cooperating branches: a GCN-based classifier that scores the twelve
mediastinal-style station regions for metastatic involvement, and a
candidate detector whose fused input concatenates candidate appearance,
station-distance geometry, and the nearest station's learned feature.
"""

from .config import (
    AblationConfig,
    ExperimentConfig,
    config_from_dict,
    config_hash,
    config_profile,
    config_to_dict,
    load_config,
)
from .errors import ConfigError, DataError, NumericDivergenceError
from .phantom import PhantomConfig, PatientCase, generate_cohort, generate_patient

__version__ = "0.1.0"

__all__ = [
    "AblationConfig",
    "ConfigError",
    "DataError",
    "ExperimentConfig",
    "NumericDivergenceError",
    "PatientCase",
    "PhantomConfig",
    "config_from_dict",
    "config_hash",
    "config_profile",
    "config_to_dict",
    "generate_cohort",
    "generate_patient",
    "load_config",
    "__version__",
]
