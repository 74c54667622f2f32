"""Optimal m-mode switching with risk of default on a Markov-chain grid."""

from .chain import ChainApprox, ChainError, DiscreteProblem, Grid, auto_dt, auto_steps, build, discretize
from .expr import ExprError, evaluate, free_vars, parse, to_text
from .model import (
    Finite,
    Infinite,
    ModelError,
    SwitchingModel,
    ValidationReport,
    drift_diffusion,
    make_model,
    obstacle_value,
    validate,
)
from .oracle import Policy, enumerate_policies, evaluate_policy, random_policy
from .solver import (
    SolveDiagnostics,
    SolverError,
    ValueField,
    check_complementarity,
    compare_resolutions,
    coupled_step,
    solve_finite,
    solve_infinite,
)
from .strategy import MCEstimate, PathResult, StrategyRegions, estimate_J, extract, simulate_path

__version__ = "0.1.0"
