"""Hierarchical federated learning simulator with configurable DP noise placement."""

from hflsim.dpcore import DpPolicy, PrivacyLedger, classic_gm_epsilon, config_budget
from hflsim.engine import (
    DataSpec,
    EngineSpec,
    ExperimentConfig,
    ModelSpec,
    TopoSpec,
    equivalence,
    run_flat,
    run_hier,
)
from hflsim.errors import ConfigurationError, DivergenceError, IncompleteSharesError, SaturationError
from hflsim.numkit import ClipMode, Model, ParamVector

__version__ = "0.1.0"

__all__ = [
    "ClipMode",
    "ConfigurationError",
    "DataSpec",
    "DivergenceError",
    "DpPolicy",
    "EngineSpec",
    "ExperimentConfig",
    "IncompleteSharesError",
    "Model",
    "ModelSpec",
    "ParamVector",
    "PrivacyLedger",
    "SaturationError",
    "TopoSpec",
    "classic_gm_epsilon",
    "config_budget",
    "equivalence",
    "run_flat",
    "run_hier",
]
