"""Monte-Carlo simulation of plant, local filter, trigger and remote estimator.

Steady-state mode (the default) runs the local filter at its fixed point.
The initial local estimate error is drawn from ``N(0, P_bar)``, so the filter
error is stationary from the first step.  The remote covariance uses the
closed form, which needs thresholds that never increase within a silence.

Per-run random streams come from :func:`etcest.rng.derive_rng` with labels
``("episode", run)``.  Each stream is consumed as ``n`` normals for the
initial error, then, step by step, ``n`` process-noise and ``m``
measurement-noise normals.  Runs are therefore independent of each other and
of the order in which they are simulated.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from .etc_scheme import ThresholdSchedule, build_normalizer, normalize, trigger, LinkState
from .lin_gauss import (
    initial_filter_state,
    kalman_predict,
    kalman_update,
    psd_sqrt,
    simulate_step,
)
from .mdp_solver import StationaryPolicy
from .remote_estimator import (
    beta,
    initial_remote_state,
    mse_upper_bound,
    remote_update,
    silence_sums,
)
from .rng import derive_rng

TRACE_COLUMNS = ("k", "gamma", "tau_plus", "delta", "trace_P", "bound", "sq_error", "stage_cost")


class _Policy:
    """Uniform vectorised view of the supported policy types."""

    def __init__(self, policy):
        self.source = policy
        if isinstance(policy, StationaryPolicy):
            self.kind = "mdp"
            self.action = np.asarray(policy.action)
            self.controls = np.asarray(policy.controls, float)
            self.ident = "mdp:" + ",".join(f"{v:g}" for v in self.controls[self.action[:, 0]])
        elif isinstance(policy, ThresholdSchedule):
            self.kind = policy.kind
            self.values = np.asarray(policy.values, float)
            self.ident = json.dumps(policy.to_dict())
        elif isinstance(policy, (int, float)):
            if not policy > 0:
                raise ValueError("threshold must be positive")
            self.kind = "stationary"
            self.values = np.array([float(policy)])
            self.ident = f"fixed:{float(policy):g}"
        else:
            raise TypeError(f"unsupported policy type {type(policy).__name__}")

    def initial_index(self, runs):
        return np.zeros(runs, dtype=int)

    def __call__(self, k, tp, d_idx):
        """Thresholds for step ``k`` and the lattice index to carry forward."""
        if self.kind == "mdp":
            M = self.action.shape[0] - 1
            u = self.action[np.minimum(tp, M), d_idx]
            return self.controls[u], u
        if self.kind == "sequence":
            if k > self.values.size:
                raise ValueError(f"sequence schedule has no threshold for step {k}")
            return np.full(tp.shape, self.values[k - 1]), d_idx
        return self.values[np.minimum(tp, self.values.size - 1)], d_idx


@dataclass(frozen=True, eq=False)
class BatchTrace:
    """Per-run, per-step records; arrays have shape ``(runs, T)``.

    ``errors`` has shape ``(runs, T, n)`` and holds ``x_k - x_hat_k``.
    """

    gamma: np.ndarray
    tau_plus: np.ndarray
    delta: np.ndarray
    trace_P: np.ndarray
    bound: np.ndarray
    errors: np.ndarray
    kappa: float
    seeds: tuple
    policy_id: str

    @property
    def sq_error(self):
        return np.sum(self.errors**2, axis=-1)

    @property
    def stage_cost(self):
        return self.trace_P + self.kappa * self.gamma

    @property
    def runs(self):
        return self.gamma.shape[0]

    @property
    def T(self):
        return self.gamma.shape[1]


@dataclass(frozen=True, eq=False)
class EpisodeTrace:
    k: np.ndarray
    gamma: np.ndarray
    tau_plus: np.ndarray
    delta: np.ndarray
    trace_P: np.ndarray
    bound: np.ndarray
    sq_error: np.ndarray
    stage_cost: np.ndarray
    errors: np.ndarray
    seed: object
    policy_id: str

    def rows(self):
        for i in range(self.k.size):
            yield {
                "k": int(self.k[i]),
                "gamma": int(self.gamma[i]),
                "tau_plus": int(self.tau_plus[i]),
                "delta": float(self.delta[i]),
                "trace_P": float(self.trace_P[i]),
                "bound": float(self.bound[i]),
                "sq_error": float(self.sq_error[i]),
                "stage_cost": float(self.stage_cost[i]),
            }

    def to_csv(self, path=None):
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=TRACE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows())
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text


def _draw_noise(model, T, master_seed, run):
    rng = derive_rng(master_seed, "episode", run)
    e0 = rng.standard_normal(model.n)
    Z = rng.standard_normal((T, model.n + model.m))
    return e0, Z


class _BetaCache:
    def __init__(self, n):
        self.n = n
        self.cache = {}

    def __call__(self, tp, delta):
        out = np.empty(tp.shape)
        keys = np.stack([tp, delta], axis=-1)
        for t, d in np.unique(keys, axis=0):
            key = (int(t), float(d))
            if key not in self.cache:
                self.cache[key] = beta(key[0], key[1], self.n)
            out[(tp == t) & (delta == d)] = self.cache[key]
        return out


def simulate_batch(model, steady, policy, T, runs, kappa=0.0, master_seed=0, run_offset=0):
    """Steady-state simulation of ``runs`` independent episodes of ``T`` steps.

    Starts right after a transmission at step 0; the threshold for step ``k``
    is ``policy(tau_plus_{k-1}, delta_{k-1})``.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if runs < 1:
        raise ValueError("runs must be >= 1")
    pol = _Policy(policy)
    n = model.n
    dof = model.rank_C
    A, C = model.A, model.C
    K = steady.gain
    norm = build_normalizer(steady.P_hat, steady.P_bar)
    Lq, Lr = model._noise_factors
    Lbar = psd_sqrt(steady.P_bar)
    tr_bar = float(np.trace(steady.P_bar))

    S = silence_sums(steady.P_hat, steady.P_bar, A, T)
    tr_S = np.trace(S, axis1=1, axis2=2)
    # largest eigenvalue over the blocks A^i dP A^i', i < t
    dP = steady.P_hat - steady.P_bar
    lam_prefix = np.zeros(T + 1)
    Ai = np.eye(n)
    for t in range(1, T + 1):
        lam_prefix[t] = max(lam_prefix[t - 1], float(np.linalg.eigvalsh(Ai @ dP @ Ai.T)[-1]))
        Ai = A @ Ai
    beta_of = _BetaCache(dof)

    run_ids = tuple(range(run_offset, run_offset + runs))
    noise = [_draw_noise(model, T, master_seed, r) for r in run_ids]
    E0 = np.stack([e for e, _ in noise])
    Z = np.stack([z for _, z in noise])
    W = Z[:, :, :n] @ Lq.T
    V = Z[:, :, n:] @ Lr.T

    xL = np.tile(model.x0_mean, (runs, 1))
    x = xL + E0 @ Lbar.T
    xR = xL.copy()
    cum = np.zeros(runs)
    tp = np.zeros(runs, dtype=int)
    d_idx = pol.initial_index(runs)
    delta_prev = np.full(runs, np.inf)

    out_gamma = np.zeros((runs, T), dtype=int)
    out_tp = np.zeros((runs, T), dtype=int)
    out_delta = np.zeros((runs, T))
    out_trP = np.zeros((runs, T))
    out_bound = np.zeros((runs, T))
    out_err = np.zeros((runs, T, n))
    for k in range(1, T + 1):
        delta, d_idx = pol(k, tp, d_idx)
        x = x @ A.T + W[:, k - 1]
        y = x @ C.T + V[:, k - 1]
        x_pred = xL @ A.T
        z = (y - x_pred @ C.T) @ K.T
        xL = x_pred + z
        eps = z @ norm.F.T
        cum = cum + np.sum(eps**2, axis=1)
        gamma = cum > delta
        silent = ~gamma
        if np.any(silent & (tp > 0) & (delta > delta_prev * (1 + 1e-12))):
            raise ValueError("threshold increased within a silence; the steady closed form does not apply")
        tp = np.where(gamma, 0, tp + 1)
        xR = np.where(gamma[:, None], xL, xR @ A.T)
        cum = np.where(gamma, 0.0, cum)
        trP = np.full(runs, tr_bar)
        bnd = np.full(runs, tr_bar)
        if np.any(silent):
            b = beta_of(tp[silent], delta[silent])
            trP[silent] = tr_bar + b * tr_S[tp[silent]]
            bnd[silent] = tr_bar + tp[silent] * dof * b * lam_prefix[tp[silent]]
        out_gamma[:, k - 1] = gamma
        out_tp[:, k - 1] = tp
        out_delta[:, k - 1] = delta
        out_trP[:, k - 1] = trP
        out_bound[:, k - 1] = bnd
        out_err[:, k - 1] = x - xR
        delta_prev = delta
    return BatchTrace(
        gamma=out_gamma,
        tau_plus=out_tp,
        delta=out_delta,
        trace_P=out_trP,
        bound=out_bound,
        errors=out_err,
        kappa=float(kappa),
        seeds=tuple((master_seed, "episode", r) for r in run_ids),
        policy_id=pol.ident,
    )


def _episode_from_batch(batch, seed):
    return EpisodeTrace(
        k=np.arange(1, batch.T + 1),
        gamma=batch.gamma[0],
        tau_plus=batch.tau_plus[0],
        delta=batch.delta[0],
        trace_P=batch.trace_P[0],
        bound=batch.bound[0],
        sq_error=batch.sq_error[0],
        stage_cost=batch.stage_cost[0],
        errors=batch.errors[0],
        seed=seed,
        policy_id=batch.policy_id,
    )


def run_episode(model, steady, policy, T, seed=0, kappa=0.0, mode="steady", run=0, eta_samples=100_000):
    """Simulate one episode.

    ``mode="steady"`` is the fixed-point filter with the closed-form remote
    MSE.  ``mode="transient"`` runs the full time-varying filter from ``P0``
    with the general remote estimator (``steady`` is unused there).
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if mode == "steady":
        return _episode_from_batch(simulate_batch(model, steady, policy, T, 1, kappa, seed, run_offset=run), seed)
    if mode != "transient":
        raise ValueError(f"unknown mode {mode!r}")
    return _transient_episode(model, policy, T, seed, kappa, run, eta_samples)


def _transient_episode(model, policy, T, seed, kappa, run, eta_samples):
    pol = _Policy(policy)
    rng = derive_rng(seed, "episode", run)
    dof = model.rank_C
    x = model.x0_mean + psd_sqrt(model.P0) @ rng.standard_normal(model.n)
    local = initial_filter_state(model)
    remote = initial_remote_state(local)
    link = LinkState()
    tp = np.zeros(1, dtype=int)
    d_idx = pol.initial_index(1)
    silence_thr, pairs = [], []
    rec = {c: np.zeros(T) for c in TRACE_COLUMNS}
    errors = np.zeros((T, model.n))
    for k in range(1, T + 1):
        delta_arr, d_idx = pol(k, tp, d_idx)
        delta = float(delta_arr[0])
        x, y = simulate_step(x, model, rng)
        prior = kalman_predict(local, model)
        local = kalman_update(prior, y, model)
        norm = build_normalizer(local.P_pred, local.P_post)
        eps = normalize(local.x_post - local.x_pred, norm)
        gamma, link = trigger(link, eps, delta)
        if gamma:
            silence_thr, pairs = [], []
            remote = remote_update(remote, 1, local.x_post, local, (), model)
            bnd = float(np.trace(local.P_post))
        else:
            silence_thr.append(delta)
            pairs.append((local.P_pred, local.P_post))
            remote = remote_update(
                remote, 0, None, local, silence_thr, model, eta_samples=eta_samples, seed=derive_rng(seed, "eta", run, k)
            )
            bnd = mse_upper_bound(len(pairs), delta, pairs, model.A, dof)
        tp[0] = link.tau_plus
        trP = float(np.trace(remote.P))
        errors[k - 1] = x - remote.x_hat
        for col, val in zip(
            TRACE_COLUMNS,
            (k, gamma, link.tau_plus, delta, trP, bnd, float(errors[k - 1] @ errors[k - 1]), trP + kappa * gamma),
        ):
            rec[col][k - 1] = val
    return EpisodeTrace(
        k=rec["k"].astype(int),
        gamma=rec["gamma"].astype(int),
        tau_plus=rec["tau_plus"].astype(int),
        delta=rec["delta"],
        trace_P=rec["trace_P"],
        bound=rec["bound"],
        sq_error=rec["sq_error"],
        stage_cost=rec["stage_cost"],
        errors=errors,
        seed=seed,
        policy_id=pol.ident,
    )


@dataclass(frozen=True, eq=False)
class CostSummary:
    """Aggregates over runs; ``*_se`` fields are standard errors across runs."""

    discounted_cost: float
    discounted_cost_se: float
    time_avg_curve: np.ndarray
    time_avg_final_se: float
    comm_rate: float
    comm_rate_se: float
    runs: int
    T: int
    kappa: float
    alpha: float
    master_seed: int
    policy_id: str

    @property
    def time_avg(self):
        return float(self.time_avg_curve[-1])

    def to_dict(self):
        return {
            "discounted_cost": self.discounted_cost,
            "discounted_cost_se": self.discounted_cost_se,
            "time_avg": self.time_avg,
            "time_avg_se": self.time_avg_final_se,
            "comm_rate": self.comm_rate,
            "comm_rate_se": self.comm_rate_se,
            "runs": self.runs,
            "T": self.T,
            "kappa": self.kappa,
            "alpha": self.alpha,
            "master_seed": self.master_seed,
            "policy_id": self.policy_id,
        }


def _se(per_run):
    per_run = np.asarray(per_run, float)
    if per_run.size < 2:
        return 0.0
    return float(per_run.std(ddof=1) / math.sqrt(per_run.size))


def summarize(batch, alpha, master_seed=0):
    cost = batch.stage_cost
    disc = cost @ (alpha ** np.arange(batch.T))
    mean_cost = cost.mean(axis=0)
    curve = np.cumsum(mean_cost) / np.arange(1, batch.T + 1)
    rate = batch.gamma.mean(axis=1)
    return CostSummary(
        discounted_cost=float(disc.mean()),
        discounted_cost_se=_se(disc),
        time_avg_curve=curve,
        time_avg_final_se=_se(cost.mean(axis=1)),
        comm_rate=float(rate.mean()),
        comm_rate_se=_se(rate),
        runs=batch.runs,
        T=batch.T,
        kappa=batch.kappa,
        alpha=alpha,
        master_seed=master_seed,
        policy_id=batch.policy_id,
    )


def monte_carlo_cost(model, steady, policy, T, runs, kappa, alpha, master_seed=0, return_batch=False):
    """Empirical costs over ``runs`` episodes: discounted cost
    ``sum_k alpha^(k-1) (tr P_k + kappa gamma_k)``, the running average of the
    per-step sample-mean cost, and the communication rate."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    batch = simulate_batch(model, steady, policy, T, runs, kappa, master_seed)
    summary = summarize(batch, alpha, master_seed)
    return (summary, batch) if return_batch else summary


@dataclass(frozen=True)
class ComparisonRow:
    kappa: float
    policy: str
    discounted_cost: float
    discounted_cost_se: float
    time_avg: float
    time_avg_se: float
    comm_rate: float


@dataclass(frozen=True)
class ComparisonTable:
    rows: tuple
    reference: str | None
    reference_is_min: dict

    def for_kappa(self, kappa):
        return [r for r in self.rows if r.kappa == kappa]


def policy_comparison(model, steady, policies_by_kappa, T, runs, alpha, seed=0, reference="mdp", z=2.0):
    """Simulate every policy at every kappa.

    ``policies_by_kappa`` maps ``kappa -> {label: policy}``.  For each kappa
    ``reference_is_min[kappa]`` records whether the ``reference`` policy's
    discounted and time-averaged costs are both within ``z`` combined standard
    errors of (or below) every other policy's.  All policies share the same
    noise streams.
    """
    rows = []
    is_min = {}
    for kappa, policies in policies_by_kappa.items():
        summaries = {}
        for label, pol in policies.items():
            s = monte_carlo_cost(model, steady, pol, T, runs, kappa, alpha, seed)
            summaries[label] = s
            rows.append(
                ComparisonRow(
                    kappa=float(kappa),
                    policy=label,
                    discounted_cost=s.discounted_cost,
                    discounted_cost_se=s.discounted_cost_se,
                    time_avg=s.time_avg,
                    time_avg_se=s.time_avg_final_se,
                    comm_rate=s.comm_rate,
                )
            )
        if reference in summaries:
            ref = summaries[reference]
            ok = True
            for label, s in summaries.items():
                if label == reference:
                    continue
                ok &= ref.discounted_cost <= s.discounted_cost + z * math.hypot(
                    ref.discounted_cost_se, s.discounted_cost_se
                )
                ok &= ref.time_avg <= s.time_avg + z * math.hypot(ref.time_avg_final_se, s.time_avg_final_se)
            is_min[float(kappa)] = bool(ok)
    return ComparisonTable(rows=tuple(rows), reference=reference, reference_is_min=is_min)


def comparison_to_csv(table, path=None):
    buf = io.StringIO()
    fields = ["kappa", "policy", "discounted_cost", "discounted_cost_se", "time_avg", "time_avg_se", "comm_rate"]
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for r in table.rows:
        writer.writerow({f: getattr(r, f) for f in fields})
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text
