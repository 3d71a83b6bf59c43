"""Simulation, backward equations and optimal control for pure-jump Markov processes
on a finite state space with piecewise-constant rates."""

__version__ = "0.1.0"

from .errors import (BadGrid, DiagonalRate, IoError, NegativeRate, NonFiniteValue, NotAbsolutelyContinuous,
                     OutOfRange, ParseError, PureJumpError, ValidationError)
from .model import CallbackRates, JumpDecomposition, Model, generator_apply, jump_decomposition, validate_model
from .simulate import (IntegralPair, MarkedPath, PathBatch, RngStream, martingale_mean, sample_first_jump,
                       simulate_batch, simulate_path, stochastic_integral)
from .pde import (AffineDriver, CustomDriver, Driver, ValueFunction, ZeroDriver, picard_iterate,
                  residual_norm, solve_kolmogorov, truncate)
from .bsde import PathYZ, bsde_residual, energy_identity_gap, verify_ito, yz_from_value
from .control import (ControlModel, FeedbackPolicy, HamiltonianDriver, HamiltonianResult, HistoryControl,
                      controlled_model, cost_direct, cost_reweighted, fundamental_gap, girsanov_weight,
                      hamiltonian, lipschitz_bounds, policy_cost_exact, reduce_model, solve_hjb,
                      validate_control)
from .problem import ProblemSpec, load_spec
from .report import Check, RunReport, emit

__all__ = [
    "__version__",
    "BadGrid",
    "DiagonalRate",
    "IoError",
    "NegativeRate",
    "NonFiniteValue",
    "NotAbsolutelyContinuous",
    "OutOfRange",
    "ParseError",
    "PureJumpError",
    "ValidationError",
    "CallbackRates",
    "JumpDecomposition",
    "Model",
    "generator_apply",
    "jump_decomposition",
    "validate_model",
    "IntegralPair",
    "MarkedPath",
    "PathBatch",
    "RngStream",
    "martingale_mean",
    "sample_first_jump",
    "simulate_batch",
    "simulate_path",
    "stochastic_integral",
    "AffineDriver",
    "CustomDriver",
    "Driver",
    "ValueFunction",
    "ZeroDriver",
    "picard_iterate",
    "residual_norm",
    "solve_kolmogorov",
    "truncate",
    "PathYZ",
    "bsde_residual",
    "energy_identity_gap",
    "verify_ito",
    "yz_from_value",
    "ControlModel",
    "FeedbackPolicy",
    "HamiltonianDriver",
    "HamiltonianResult",
    "HistoryControl",
    "controlled_model",
    "cost_direct",
    "cost_reweighted",
    "fundamental_gap",
    "girsanov_weight",
    "hamiltonian",
    "lipschitz_bounds",
    "policy_cost_exact",
    "reduce_model",
    "solve_hjb",
    "validate_control",
    "ProblemSpec",
    "load_spec",
    "Check",
    "RunReport",
    "emit",
]
