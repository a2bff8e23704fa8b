"""Particle solver for coupled mean-field forward-backward systems with
initial and terminal couplings, solved by continuation in a homotopy
parameter, plus the linear-convex and constrained linear-quadratic
control problems built on them."""
from .core import (AdmissibilityViolation, BrownianEnsemble, EnsembleProcess, ExtendedStateView,
                   InvalidArgument, NonConvergence, NumericFailure, TimeGrid, TripleProcess,
                   empirical_mean, m_norm, make_grid, sample_brownian, script_m_norm)
from .coefficients import (CoefficientSet, Dynamics, LCProblemData, LQICProblemData,
                           PerturbationData, StructuralData, base_coefficients,
                           exponential_lc_example, interpolate, lc_hamiltonian, lqic_hamiltonian,
                           scalar_lqic_example)
from .solver import (RegressionBasis, SolveReport, SolverConfig, backward_solve, continuation_solve,
                     forward_solve, picard_solve, regress_conditional, stability_probe)
from .control import (ControlQuartet, CostBreakdown, cost_lc, cost_lqic, duality_residual,
                      extract_lc_controls, extract_lqic_controls, optimality_gap_check, simulate_state)

__version__ = "0.1.0"

__all__ = [
    "AdmissibilityViolation", "BrownianEnsemble", "EnsembleProcess", "ExtendedStateView",
    "InvalidArgument", "NonConvergence", "NumericFailure", "TimeGrid", "TripleProcess",
    "empirical_mean", "m_norm", "make_grid", "sample_brownian", "script_m_norm",
    "CoefficientSet", "Dynamics", "LCProblemData", "LQICProblemData", "PerturbationData",
    "StructuralData", "base_coefficients", "exponential_lc_example", "interpolate",
    "lc_hamiltonian", "lqic_hamiltonian", "scalar_lqic_example",
    "RegressionBasis", "SolveReport", "SolverConfig", "backward_solve", "continuation_solve",
    "forward_solve", "picard_solve", "regress_conditional", "stability_probe",
    "ControlQuartet", "CostBreakdown", "cost_lc", "cost_lqic", "duality_residual",
    "extract_lc_controls", "extract_lqic_controls", "optimality_gap_check", "simulate_state",
]
