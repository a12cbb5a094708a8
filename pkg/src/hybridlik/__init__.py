"""Hybrid parametric / empirical likelihood estimation with focused balance selection."""
from .el import ELSolution, Status, log_el, neg2_log_el, solve_lambda
from .estimator import HLFit, HLProblem, Plugin, fit_mhl, fit_mhl_plugin, fit_path, hybrid_loglik
from .hfic import FocusSpec, cdf_focus, hfic_scan, hfic_score, quantile_focus
from .inference import correct_spec_matrices, delta_ci, sandwich, stacked_sandwich
from .models import get_model, parse_control

__version__ = "0.1.0"

__all__ = [
    "ELSolution", "Status", "log_el", "neg2_log_el", "solve_lambda",
    "HLFit", "HLProblem", "Plugin", "fit_mhl", "fit_mhl_plugin", "fit_path", "hybrid_loglik",
    "FocusSpec", "cdf_focus", "hfic_scan", "hfic_score", "quantile_focus",
    "correct_spec_matrices", "delta_ci", "sandwich", "stacked_sandwich",
    "get_model", "parse_control", "__version__",
]
