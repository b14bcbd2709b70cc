"""Cross-scenario sequential recommendation with a two-tower recall model."""

from .events import (Catalog, GeneratorConfig, InteractionEvent, Scenario, UserHistory,
                     ValidityPolicy, generate_synthetic, parse_log, temporal_split, validate_user)
from .mixer import MixQuota, MixStrategy, mix
from .encoders import ItemEncoderConfig, TwoTowerModel, UserEncoderConfig

__version__ = "0.1.0"

__all__ = [
    "Catalog", "GeneratorConfig", "InteractionEvent", "Scenario", "UserHistory", "ValidityPolicy",
    "generate_synthetic", "parse_log", "temporal_split", "validate_user",
    "MixQuota", "MixStrategy", "mix",
    "ItemEncoderConfig", "TwoTowerModel", "UserEncoderConfig",
]
