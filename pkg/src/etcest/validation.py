"""Cross-module property suites with machine-readable results.

Each suite returns a :class:`SuiteResult` holding a pass flag and the measured
quantities it was judged on.  Sample sizes come from
:class:`ValidationSettings`; the defaults are the full-size runs, tests use
smaller ones.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .etc_scheme import (
    ThresholdSchedule,
    build_normalizer,
    chi2_cdf,
    simulate_trigger_rates,
    transmission_probability,
)
from .lin_gauss import psd_sqrt, riccati_residual, solve_riccati
from .mdp_solver import MdpConfig, bellman_backup, build_mdp, value_iteration
from .remote_estimator import beta, moment_bound_check
from .rng import child_seed, derive_rng
from .sim_harness import simulate_batch

FAULTS = ("beta-dof",)


@dataclass(frozen=True)
class ValidationSettings:
    whiteness_steps: int = 200_000
    moment_tuples: int = 20
    moment_samples: int = 1_000_000
    recursion_episodes: int = 1_000_000
    recursion_horizon: int = 6
    recursion_deltas: tuple = (1.0, 2.0, 4.0)
    mse_runs: int = 500
    mse_steps: int = 400
    mse_kappa: float = 5.0
    contraction_pairs: int = 100

    @classmethod
    def from_dict(cls, data):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown validation setting(s): {', '.join(sorted(unknown))}")
        data = dict(data)
        if "recursion_deltas" in data:
            data["recursion_deltas"] = tuple(float(d) for d in data["recursion_deltas"])
        return cls(**data)

    def to_dict(self):
        d = asdict(self)
        d["recursion_deltas"] = list(self.recursion_deltas)
        return d


@dataclass(frozen=True)
class SuiteResult:
    name: str
    passed: bool
    measured: dict = field(default_factory=dict)

    def to_dict(self):
        return {"name": self.name, "passed": bool(self.passed), "measured": _jsonable(self.measured)}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def _faulty_beta(tau, delta, n):
    # denominator degrees of freedom shifted by one
    if tau == 0:
        return 0.0
    return chi2_cdf(tau * n + 2, delta) / chi2_cdf(tau * n + 1, delta)


def suite_numerics(model, steady):
    x = np.linspace(0.0, 50.0, 501)
    chi_err = float(np.max(np.abs(chi2_cdf(2, x) - (1.0 - np.exp(-x / 2.0)))))
    res = riccati_residual(steady.P_hat, model)
    return SuiteResult("numerics", chi_err <= 1e-12 and res < 1e-8, {"chi2_dof2_max_err": chi_err, "riccati_residual": res})


def suite_whiteness(model, steady, steps, seed):
    """Normalized steady innovations should be i.i.d. standard normal."""
    rng = derive_rng(seed, "validate", "whiteness")
    norm = build_normalizer(steady.P_hat, steady.P_bar)
    n = model.n
    Lq, Lr = model._noise_factors
    # filter error recursion e_k = (I - K C)(A e_{k-1} + w) - K v
    K, A, C = steady.gain, model.A, model.C
    E0 = psd_sqrt(steady.P_bar) @ rng.standard_normal(n)
    Z = rng.standard_normal((steps, n + model.m))
    W = Z[:, :n] @ Lq.T
    V = Z[:, n:] @ Lr.T
    e = E0
    eps = np.empty((steps, norm.q))
    for k in range(steps):
        e_pred = A @ e + W[k]
        z = K @ (C @ e_pred + V[k])
        e = e_pred - z
        eps[k] = norm.F @ z
    cov = eps.T @ eps / steps
    lag1 = eps[1:].T @ eps[:-1] / (steps - 1)
    # entries of a sample covariance of N(0, I) have SE about 1/sqrt(steps)
    lim = 5.0 / math.sqrt(steps) * math.sqrt(2.0)
    cov_err = float(np.max(np.abs(cov - np.eye(norm.q))))
    lag_err = float(np.max(np.abs(lag1)))
    return SuiteResult(
        "whiteness",
        cov_err < lim and lag_err < lim,
        {"cov_max_err": cov_err, "lag1_max_abs": lag_err, "limit": lim, "steps": steps},
    )


def random_threshold_tuples(count, seed, max_len=4, low=1.0, high=8.0):
    rng = derive_rng(seed, "validate", "moment_tuples")
    out = []
    for _ in range(count):
        length = int(rng.integers(1, max_len + 1))
        out.append(tuple(float(v) for v in np.round(rng.uniform(low, high, size=length), 3)))
    return out


def suite_moment_bound(n, settings, seed):
    tuples = random_threshold_tuples(settings.moment_tuples, seed)
    rows = []
    ok = True
    for i, thr in enumerate(tuples):
        r = moment_bound_check(thr, n, samples=settings.moment_samples, seed=derive_rng(seed, "validate", "moment_bound", i))
        holds = bool(r.holds)
        if all(a >= b for a, b in zip(thr, thr[1:])):
            # only the last constraint binds, so both sides agree
            holds &= abs(r.gap) <= 3.0 * r.combined_se + 1e-12
        rows.append({"thresholds": thr, "lhs": r.lhs, "rhs": r.rhs, "se": r.combined_se, "holds": holds})
        ok &= holds
    mono = (6.0, 4.0, 3.0, 2.0)
    r_eq = moment_bound_check(mono, n, samples=settings.moment_samples, seed=derive_rng(seed, "validate", "moment_bound", "eq"))
    eq_ok = abs(r_eq.lhs - r_eq.rhs) <= 3.0 * r_eq.combined_se + 1e-12
    inc = (1.0, 6.0, 6.0)
    r_gap = moment_bound_check(inc, n, samples=settings.moment_samples, seed=derive_rng(seed, "validate", "moment_bound", "gap"))
    gap_ok = r_gap.rhs - r_gap.lhs > 3.0 * r_gap.combined_se
    return SuiteResult(
        "moment_bound",
        ok and eq_ok and gap_ok,
        {
            "tuples": rows,
            "equality_case": {"thresholds": mono, "lhs": r_eq.lhs, "rhs": r_eq.rhs, "se": r_eq.combined_se, "ok": eq_ok},
            "strict_case": {"thresholds": inc, "lhs": r_gap.lhs, "rhs": r_gap.rhs, "se": r_gap.combined_se, "ok": gap_ok},
        },
    )


def beta_grid_violations(n, beta_fn=beta, taus=range(1, 11), deltas=None):
    """Count violations of ``0 <= beta <= 1``, ``tau n beta <= min(delta, tau n)``
    and monotonicity in ``delta`` over a grid."""
    deltas = np.concatenate([np.geomspace(1e-3, 1.0, 15), np.linspace(1.0, 100.0, 100)[1:]]) if deltas is None else deltas
    bad = {"range": 0, "upper": 0, "monotone": 0}
    worst = {"range": 0.0, "upper": 0.0, "monotone": 0.0}
    for tau in taus:
        vals = np.array([beta_fn(tau, float(d), n) for d in deltas])
        r = np.maximum(-vals, vals - 1.0)
        up = tau * n * vals - np.minimum(deltas, tau * n)
        mono = -np.diff(vals)
        for key, arr, tol in (("range", r, 1e-12), ("upper", up / np.maximum(deltas, 1.0), 1e-10), ("monotone", mono, 1e-12)):
            bad[key] += int(np.sum(arr > tol))
            worst[key] = max(worst[key], float(np.max(arr)))
    return bad, worst


def suite_beta_bounds(n, fault=None):
    fn = _faulty_beta if fault == "beta-dof" else beta
    bad, worst = beta_grid_violations(n, fn)
    return SuiteResult("beta_bounds", sum(bad.values()) == 0, {"violations": bad, "worst_excess": worst, "fault": fault})


def suite_transmission_recursion(n, settings, seed):
    rows = []
    ok = True
    K = settings.recursion_horizon
    for i, d in enumerate(settings.recursion_deltas):
        sched = ThresholdSchedule.constant(d)
        tp = transmission_probability(sched, K, n, method="quadrature", depth_cap=4)
        rates, se = simulate_trigger_rates(
            sched, K, n, settings.recursion_episodes, seed=child_seed(seed, "validate", "transmission_recursion", i)
        )
        alphas, errs = tp.alphas[1:], tp.errors[1:]
        z = np.abs(alphas - rates) / np.maximum(se, 1e-300)
        ok &= bool(np.all(np.abs(alphas - rates) <= 3.0 * se + errs))
        rows.append({"delta": d, "recursion": alphas, "simulated": rates, "se": se, "z": z})
    return SuiteResult("transmission_recursion", ok, {"cases": rows, "episodes": settings.recursion_episodes})


def suite_mse_consistency(model, steady, policy, settings, seed, min_bucket=1000):
    batch = simulate_batch(model, steady, policy, settings.mse_steps, settings.mse_runs, settings.mse_kappa, seed)
    buckets = []
    ok = True
    for tp in np.unique(batch.tau_plus):
        mask = batch.tau_plus == tp
        count = int(mask.sum())
        if count < min_bucket:
            continue
        emp = float(batch.sq_error[mask].mean())
        ana = float(batch.trace_P[mask].mean())
        rel = abs(emp - ana) / ana
        ok &= rel < 0.10
        buckets.append({"tau_plus": int(tp), "count": count, "empirical": emp, "analytic": ana, "rel_err": rel})
    err = batch.errors.reshape(-1, model.n)
    # runs are independent; per-run means give the standard error
    per_run = batch.errors.mean(axis=1)
    se = per_run.std(axis=0, ddof=1) / math.sqrt(per_run.shape[0])
    z = np.abs(err.mean(axis=0)) / se
    ok &= bool(np.all(z < 4.0))
    bound_ok = bool(np.all(batch.trace_P <= batch.bound * (1 + 1e-12)))
    ok &= bound_ok
    return SuiteResult(
        "mse_consistency",
        ok and bool(buckets),
        {"buckets": buckets, "bias_z": z, "bound_holds": bound_ok, "runs": batch.runs, "T": batch.T},
    )


def suite_kernel_rows(mdp):
    worst = 0.0
    for u in range(mdp.N):
        P = mdp.kernel(u)
        rows = P.sum(axis=1)
        adm = mdp.admissible[:, :, u].reshape(-1)
        if np.any(adm):
            worst = max(worst, float(np.max(np.abs(rows[adm] - 1.0))))
    return SuiteResult("kernel_rows", worst <= 1e-10, {"max_row_sum_err": worst})


def suite_contraction(mdp, pairs, seed):
    rng = derive_rng(seed, "validate", "contraction")
    alpha = mdp.config.alpha
    scale = mdp.cost_transmit / (1.0 - alpha)
    worst = 0.0
    for _ in range(pairs):
        J1 = rng.uniform(0.0, scale, size=mdp.g.shape[:-1])
        J2 = J1 + rng.normal(0.0, rng.uniform(0.01, 10.0), size=J1.shape)
        d_in = float(np.max(np.abs(J1 - J2)))
        d_out = bellman_backup(J1, mdp)[0].sup_distance(bellman_backup(J2, mdp)[0])
        worst = max(worst, d_out / d_in)
    return SuiteResult("contraction", worst <= alpha * (1 + 1e-9), {"max_ratio": worst, "alpha": alpha, "pairs": pairs})


def run_all(model, mdp_config: MdpConfig, settings: ValidationSettings, seed=0, fault=None, policy=None):
    """Run every suite; ``policy`` (MDP policy or threshold schedule) drives the
    MSE-consistency simulation and defaults to the solved optimum."""
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; choose from {FAULTS}")
    steady = solve_riccati(model)
    n = model.rank_C
    mdp = build_mdp(mdp_config, steady, model.A)
    if policy is None:
        policy = value_iteration(mdp).policy
    return [
        suite_numerics(model, steady),
        suite_whiteness(model, steady, settings.whiteness_steps, seed),
        suite_moment_bound(n, settings, seed),
        suite_beta_bounds(n, fault),
        suite_transmission_recursion(n, settings, seed),
        suite_mse_consistency(model, steady, policy, settings, seed),
        suite_kernel_rows(mdp),
        suite_contraction(mdp, settings.contraction_pairs, seed),
    ]
