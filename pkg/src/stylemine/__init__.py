"""Adversarial style mining for one-shot domain adaptation at desk scale."""

from .errors import ConfigError, ContractError, DivergenceError, FormatError, InvalidShapeError
from .miner import ASMClassifier, MiningConfig, baseline_strategy, train_asm
from .models import NetConfig
from .rain import RAINStylizer

__all__ = [
    "ASMClassifier", "ConfigError", "ContractError", "DivergenceError", "FormatError",
    "InvalidShapeError", "MiningConfig", "NetConfig", "RAINStylizer", "baseline_strategy",
    "train_asm",
]
__version__ = "0.1.0"
