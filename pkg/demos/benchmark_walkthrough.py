"""Walk through the benchmark plant: filter, optimal thresholds, simulation.

Run with ``python demos/benchmark_walkthrough.py [kappa]``; about 30 seconds.
"""

import sys

import numpy as np

from etcest import MdpConfig, build_mdp, example_system, extract_degenerate_policy, solve_riccati, value_iteration
from etcest.mdp_solver import average_cost
from etcest.sim_harness import monte_carlo_cost, policy_comparison

kappa = float(sys.argv[1]) if len(sys.argv) > 1 else 20.0

# the local Kalman filter runs at its steady state
model = example_system()
steady = solve_riccati(model)
print("steady prior covariance\n", np.round(steady.P_hat, 4))
print("steady posterior covariance\n", np.round(steady.P_bar, 4))

# solve the threshold MDP; the optimal policy only depends on the silence length
mdp = build_mdp(MdpConfig(kappa=kappa), steady, model.A)
vi = value_iteration(mdp)
chain = extract_degenerate_policy(vi.policy, mdp)
print(f"\nkappa={kappa:g}: thresholds by steps since last transmission {chain}")
print(f"value iteration: {vi.iterations} sweeps, residual {vi.bellman_residual:.1e}")

ac = average_cost(mdp)
print(f"average cost per step {ac.lambda_hat:.4f} (discounts {ac.alphas})")

# simulate the optimal policy and a few fixed thresholds on the same noise
summary = monte_carlo_cost(model, steady, vi.policy, T=400, runs=500, kappa=kappa, alpha=0.999)
print(f"simulated time average {summary.time_avg:.4f}, communication rate {summary.comm_rate:.3f}")

table = policy_comparison(
    model, steady, {kappa: {"mdp": vi.policy, "fixed_1": 1.0, "fixed_3": 3.0, "fixed_5": 5.0}}, T=400, runs=500, alpha=0.999
)
print("\npolicy      discounted   time-avg   rate")
for r in table.rows:
    print(f"{r.policy:<10} {r.discounted_cost:11.1f} {r.time_avg:10.3f} {r.comm_rate:6.3f}")
print("optimal policy is cheapest:", table.reference_is_min[kappa])
