"""Mean-field social pressure model: finite actor system, its McKean-Vlasov
limit, the coupling between them and the invariant measures of the limit."""

from .rates import Family, RateFunction
from .finite_system import InitialCondition, ModelParams, simulate, simulate_replicas
from .limit_sde import DriftCurve, PicardConfig, picard_solve, sample_limit_path
from .coupling import coupled_run, fit_rate, strong_error_curve
from .invariant import InvariantDensity, gamma_residual, solve_gamma, phase_diagram

__version__ = "0.1.0"
