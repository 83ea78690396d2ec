"""Sequential counterfactual risk minimization experiments."""
from .engine import RolloutPlan, RunError, RunResult, run_crm, run_many, run_scrm
from .env import GaussianQuadratic
from .estimators import Batch, ips_estimate, ips_ix_estimate, mis_estimate
from .objective import ObjectiveConfig, svp_gradient, svp_objective
from .optimizer import OptimizerConfig
from .policy import Family, PolicySpec

__all__ = [
    "Batch",
    "Family",
    "GaussianQuadratic",
    "ObjectiveConfig",
    "OptimizerConfig",
    "PolicySpec",
    "RolloutPlan",
    "RunError",
    "RunResult",
    "ips_estimate",
    "ips_ix_estimate",
    "mis_estimate",
    "run_crm",
    "run_many",
    "run_scrm",
    "svp_gradient",
    "svp_objective",
]
