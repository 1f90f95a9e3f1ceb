"""Factor-based stochastic volatility modelling of large intraday covariance matrices."""

__version__ = "0.1.0"

from .factor import FactorState, estimate_factor_vols, estimate_loading, sample_var_matrix, select_rank
from .portfolio import PortfolioProblem, PortfolioResult, min_variance, oos_risk
from .predict import PoetConfig, PredictedVol, matrix_errors, poet_idio, sv_poet
from .realized import DailyVolMatrix, TickPanel, prvm, psd_project
from .sim import SimConfig, SimOutput, conditional_oracle, default_idio, default_loading, derive_beta, simulate
from .svmodel import FitReport, SVParams, build_H, lse_fit, qmle_fit, unvech, vech

__all__ = [
    "__version__",
    "DailyVolMatrix",
    "FactorState",
    "FitReport",
    "PoetConfig",
    "PortfolioProblem",
    "PortfolioResult",
    "PredictedVol",
    "SVParams",
    "SimConfig",
    "SimOutput",
    "TickPanel",
    "build_H",
    "conditional_oracle",
    "default_idio",
    "default_loading",
    "derive_beta",
    "estimate_factor_vols",
    "estimate_loading",
    "lse_fit",
    "matrix_errors",
    "min_variance",
    "oos_risk",
    "poet_idio",
    "prvm",
    "psd_project",
    "qmle_fit",
    "sample_var_matrix",
    "select_rank",
    "simulate",
    "sv_poet",
    "unvech",
    "vech",
]
