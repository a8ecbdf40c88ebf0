"""Transmission statistics of the cumulative-innovation trigger.

Compares the renewal recursion for the per-step transmission probability with
a direct simulation of the trigger, then shows the conditional moment factor
that shrinks the remote covariance during a silence.

Run with ``python demos/trigger_statistics.py``; a few seconds.
"""

import numpy as np

from etcest import ThresholdSchedule, beta, transmission_probability
from etcest.etc_scheme import simulate_trigger_rates

n, K = 2, 6
for delta in (1.0, 2.0, 4.0):
    sched = ThresholdSchedule.constant(delta)
    tp = transmission_probability(sched, K, n)
    rates, se = simulate_trigger_rates(sched, K, n, episodes=200_000, seed=0)
    print(f"threshold {delta:g}")
    print("  recursion ", np.round(tp.alphas[1:], 4))
    print("  simulation", np.round(rates, 4), "+/-", np.round(se, 4))
    print(f"  long-run rate 1/(1 + delta/2) = {1 / (1 + delta / 2):.4f}")

# beta is the truncated chi-square mean over its full mean; it scales the
# covariance growth accumulated since the last transmission
print("\nbeta(tau, delta) for n = 2")
deltas = (0.5, 2.0, 8.0, 32.0)
print("tau  " + "".join(f"{d:>9g}" for d in deltas))
for tau in (1, 2, 4, 8):
    print(f"{tau:<4} " + "".join(f"{beta(tau, d, n):9.4f}" for d in deltas))
