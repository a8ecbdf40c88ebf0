"""Optimal event-triggered remote state estimation for linear-Gaussian plants.

Modules
-------
lin_gauss
    Plant model, Kalman filter, steady-state Riccati solution.
etc_scheme
    Innovation whitening, cumulative-innovation trigger, transmission probabilities.
remote_estimator
    Remote MMSE estimator and its conditional-moment factors.
mdp_solver
    Threshold-scheduling MDP and its value-iteration solver.
sim_harness
    Seeded Monte-Carlo evaluation of policies.
validation
    Cross-module property suites.
cli
    ``etcest solve | simulate | validate``.
"""

from .etc_scheme import ThresholdSchedule, chi2_cdf, transmission_probability
from .lin_gauss import SteadyState, SystemModel, example_system, solve_riccati
from .mdp_solver import MdpConfig, average_cost, build_mdp, extract_degenerate_policy, value_iteration
from .remote_estimator import beta, eta_factors, remote_update
from .sim_harness import monte_carlo_cost, policy_comparison, run_episode

__version__ = "0.1.0"

__all__ = [
    "MdpConfig",
    "SteadyState",
    "SystemModel",
    "ThresholdSchedule",
    "average_cost",
    "beta",
    "build_mdp",
    "chi2_cdf",
    "eta_factors",
    "example_system",
    "extract_degenerate_policy",
    "monte_carlo_cost",
    "policy_comparison",
    "remote_update",
    "run_episode",
    "solve_riccati",
    "transmission_probability",
    "value_iteration",
]
