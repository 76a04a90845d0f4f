"""Federated OOD-aware prompt learning, simulated at the embedding level."""

from .core import (BdroConfig, ConfigError, PromptBank, PromptContext, Role, RunConfig,
                   SemiUotConfig, ServerConfig, config_from_text, config_to_text,
                   derive_rng, validate_config)
from .data import EmbeddingDataset, gen_synthetic, read_dataset, write_dataset
from .encoder import FrozenEncoder
from .estimator import FederatedPromptClassifier
from .federation import RoundReport, RunResult, run
from .transport import TransportPlan, semiuot_solve

__version__ = "0.1.0"

__all__ = [
    "BdroConfig", "ConfigError", "EmbeddingDataset", "FederatedPromptClassifier",
    "FrozenEncoder", "PromptBank", "PromptContext", "Role", "RoundReport", "RunConfig",
    "RunResult", "SemiUotConfig", "ServerConfig", "TransportPlan", "config_from_text",
    "config_to_text", "derive_rng", "gen_synthetic", "read_dataset", "run",
    "semiuot_solve", "validate_config", "write_dataset",
]
