"""Forward-only MoE-ViT inference with an accelerator execution simulator.

The package splits into numeric execution (``kernels``, ``moe``, ``vit``),
schedule simulation (``scheduler``), and the experiment surface
(``config``, ``experiment``, ``service``, ``cli``).  The load-bearing
contract throughout: expert-by-expert reordered execution reproduces the
token-serial reference bit for bit while touching only two experts' worth
of on-chip memory.
"""

__version__ = "0.1.0"

from .config import ConfigError, ExperimentConfig, load_config
from .experiment import run_experiment, verify_equivalence
from .initialization import seeded_init
from .moe import (
    GatingDecision,
    MoeLayerParams,
    balancing_loss,
    moe_forward_reference,
    top_k_gate,
)
from .scheduler import (
    CostModel,
    SimReport,
    Workload,
    build_queues,
    execute_reordered,
    memory_account,
    simulate_cached,
    simulate_model,
    simulate_naive,
    simulate_reordered,
)
from .vit import ModelConfig, flop_count, model_forward

__all__ = [
    "ConfigError",
    "CostModel",
    "ExperimentConfig",
    "GatingDecision",
    "ModelConfig",
    "MoeLayerParams",
    "SimReport",
    "Workload",
    "balancing_loss",
    "build_queues",
    "execute_reordered",
    "flop_count",
    "load_config",
    "memory_account",
    "model_forward",
    "moe_forward_reference",
    "run_experiment",
    "seeded_init",
    "simulate_cached",
    "simulate_model",
    "simulate_naive",
    "simulate_reordered",
    "top_k_gate",
    "verify_equivalence",
]
