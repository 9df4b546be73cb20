from .config import ModelConfig, VARIANTS, variant_config
from .moe import ExpertPool, LayerSpec, RoutingStats, eligibility, update_router_bias
from .network import PriseModel, build_specs

__all__ = ["ModelConfig", "VARIANTS", "variant_config", "ExpertPool", "LayerSpec", "RoutingStats",
           "eligibility", "update_router_bias", "PriseModel", "build_specs"]
