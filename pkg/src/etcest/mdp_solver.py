"""Finite-state MDP over the (elapsed time, last threshold) lattice.

State ``(tau_plus, delta)`` records the elapsed time since the last
transmission and the threshold used at the previous step; the control is the
next threshold ``u``.  From ``tau_plus > 0`` only ``u <= delta`` is admissible,
which keeps thresholds non-increasing over every silence so that the remote
MSE has a closed form.

The state space is truncated at ``tau_plus = M``.  With the default
``boundary="transmit"`` a silence may not continue past ``M`` (the transition
from ``M`` transmits with probability one); ``boundary="self_loop"`` instead
keeps the elapsed-time coordinate at ``M`` and charges the cost of ``M``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .etc_scheme import chi2_cdf
from .remote_estimator import beta_array, silence_sums

TIE_RTOL = 1e-12


class ValueIterationError(RuntimeError):
    def __init__(self, message, residual, iterations):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class DegeneracyError(RuntimeError):
    """Optimal policy does not collapse onto a single chain of thresholds."""


@dataclass(frozen=True)
class MdpConfig:
    M: int = 6
    zeta: float = 0.1
    delta_max: float = 10.0
    alpha: float = 0.999
    kappa: float = 5.0
    n: int = 2
    boundary: str = "transmit"

    def __post_init__(self):
        if self.M < 0:
            raise ValueError("M must be >= 0")
        if not self.zeta > 0 or not self.delta_max > 0:
            raise ValueError("zeta and delta_max must be positive")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.boundary not in ("transmit", "self_loop"):
            raise ValueError(f"unknown boundary {self.boundary!r}")

    @property
    def N(self):
        return int(math.ceil(self.delta_max / self.zeta - 1e-9))

    @property
    def controls(self):
        return np.round(self.zeta * np.arange(1, self.N + 1), 12)

    def to_dict(self):
        return {
            "M": self.M,
            "zeta": self.zeta,
            "delta_max": self.delta_max,
            "alpha": self.alpha,
            "kappa": self.kappa,
            "n": self.n,
            "boundary": self.boundary,
        }


@dataclass(frozen=True, eq=False)
class MdpModel:
    """Lattice MDP in successor-list form.

    From state ``(tp, d)`` under control ``u`` there are at most two
    successors: silence to ``(next_tau[tp], u)`` with probability
    ``p_silence[tp, d, u]`` and transmission to ``(0, u)``.  Arrays are indexed
    by lattice position: ``tp`` in ``0..M``, ``d`` and ``u`` in ``0..N-1``.
    """

    config: MdpConfig
    controls: np.ndarray
    p_silence: np.ndarray
    admissible: np.ndarray
    next_tau: np.ndarray
    cost_silence: np.ndarray
    cost_transmit: float
    g: np.ndarray
    trace_P_bar: float

    @property
    def M(self):
        return self.config.M

    @property
    def N(self):
        return self.controls.size

    @property
    def n_states(self):
        return (self.M + 1) * self.N

    def state_index(self, tau_plus, d_idx):
        return tau_plus * self.N + d_idx

    def states(self):
        return [(tp, float(d)) for tp in range(self.M + 1) for d in self.controls]

    def successors(self, tau_plus, d_idx, u_idx):
        """``[(tau_plus', d_idx', probability, transition cost)]`` with zero-probability entries dropped."""
        if not self.admissible[tau_plus, d_idx, u_idx]:
            return []
        p = float(self.p_silence[tau_plus, d_idx, u_idx])
        out = []
        if p > 0:
            out.append((int(self.next_tau[tau_plus]), u_idx, p, float(self.cost_silence[tau_plus, u_idx])))
        if p < 1:
            out.append((0, u_idx, 1.0 - p, self.cost_transmit))
        return out

    def kernel(self, u_idx):
        """Dense ``|S| x |S|`` transition matrix for control ``u_idx`` (rows of
        states where it is inadmissible are zero)."""
        S = self.n_states
        P = np.zeros((S, S))
        for tp in range(self.M + 1):
            for d in range(self.N):
                for tp2, d2, p, _ in self.successors(tp, d, u_idx):
                    P[self.state_index(tp, d), self.state_index(tp2, d2)] += p
        return P

    def to_finite(self):
        S, U = self.n_states, self.N
        P = np.zeros((S, U, S))
        for u in range(U):
            P[:, u, :] = self.kernel(u)
        g = self.g.reshape(S, U)
        admissible = self.admissible.reshape(S, U)
        return FiniteMdp(P=P, g=np.where(admissible, g, 0.0), admissible=admissible, alpha=self.config.alpha)

    def with_kappa(self, kappa):
        """Same lattice and kernel with another transmission price."""
        cfg = replace(self.config, kappa=kappa)
        ct = self.trace_P_bar + kappa
        g = self.p_silence * self.cost_silence[:, None, :] + (1.0 - self.p_silence) * ct
        return replace(self, config=cfg, cost_transmit=ct, g=np.where(self.admissible, g, np.inf))

    def with_alpha(self, alpha):
        return replace(self, config=replace(self.config, alpha=alpha))


@dataclass(frozen=True, eq=False)
class FiniteMdp:
    """Generic dense MDP: ``P[s, u, s']``, ``g[s, u]``, admissibility mask."""

    P: np.ndarray
    g: np.ndarray
    admissible: np.ndarray
    alpha: float

    @property
    def n_states(self):
        return self.g.shape[0]


@dataclass(frozen=True, eq=False)
class ValueFn:
    values: np.ndarray

    def sup_distance(self, other):
        return float(np.max(np.abs(np.asarray(self.values) - np.asarray(other.values))))


@dataclass(frozen=True, eq=False)
class StationaryPolicy:
    """Control index per state; ``controls`` maps indices to thresholds."""

    action: np.ndarray
    controls: np.ndarray

    def threshold(self, tau_plus, d_idx):
        return float(self.controls[self.action[tau_plus, d_idx]])

    def thresholds(self):
        return self.controls[self.action]

    def to_dict(self):
        return {"action": np.asarray(self.action).tolist(), "controls": np.asarray(self.controls).tolist()}

    @classmethod
    def from_dict(cls, data):
        action = np.asarray(data["action"], dtype=int)
        controls = np.asarray(data["controls"], dtype=float)
        if action.ndim != 2 or action.shape[1] != controls.size:
            raise ValueError(f"policy action table {action.shape} does not match {controls.size} controls")
        if action.min() < 0 or action.max() >= controls.size:
            raise ValueError("policy action index out of range")
        return cls(action=action, controls=controls)


def build_mdp(config, steady, A):
    """Assemble kernel and stage costs on the lattice.

    ``steady`` supplies the fixed-point covariances ``P_hat`` and ``P_bar``.
    """
    M, N, n = config.M, config.N, config.n
    d = config.controls
    tr_bar = float(np.trace(steady.P_bar))
    S = silence_sums(steady.P_hat, steady.P_bar, np.asarray(A, float), M + 1)
    tr_S = np.trace(S, axis1=1, axis2=2)
    cost_t = tr_bar + config.kappa

    p = np.zeros((M + 1, N, N))
    admissible = np.zeros((M + 1, N, N), dtype=bool)
    next_tau = np.zeros(M + 1, dtype=int)
    cost_sil = np.zeros((M + 1, N))
    lower = np.tril(np.ones((N, N), dtype=bool))  # u <= delta
    for tp in range(M + 1):
        if tp == 0:
            admissible[0] = True
            p[0] = chi2_cdf(n, d)[None, :]
        else:
            admissible[tp] = lower
            ratio = chi2_cdf((tp + 1) * n, d)[None, :] / chi2_cdf(tp * n, d)[:, None]
            p[tp] = np.where(lower, np.minimum(ratio, 1.0), 0.0)
        if tp < M:
            next_tau[tp] = tp + 1
        else:
            next_tau[tp] = M
            if config.boundary == "transmit":
                p[tp] = 0.0
        t2 = next_tau[tp]
        cost_sil[tp] = tr_bar + beta_array(t2, d, n) * tr_S[t2]
    g = p * cost_sil[:, None, :] + (1.0 - p) * cost_t
    g = np.where(admissible, g, np.inf)
    return MdpModel(
        config=config,
        controls=d,
        p_silence=p,
        admissible=admissible,
        next_tau=next_tau,
        cost_silence=cost_sil,
        cost_transmit=cost_t,
        g=g,
        trace_P_bar=tr_bar,
    )


def _greedy_from_q(q):
    """Minimum over the last axis with ties resolved toward the smallest control."""
    qmin = q.min(axis=-1)
    tol = TIE_RTOL * np.maximum(np.abs(qmin), 1.0)
    action = np.argmax(q <= (qmin + tol)[..., None], axis=-1)
    return qmin, action


def _q_lattice(J, model, alpha, rows=slice(None)):
    Jv = J.values if isinstance(J, ValueFn) else J
    ct = model.cost_transmit
    base = ct + alpha * Jv[0]
    w = model.cost_silence[rows] - ct + alpha * (Jv[model.next_tau[rows]] - Jv[0])
    q = base + model.p_silence[rows] * w[..., None, :]
    return np.where(model.admissible[rows], q, np.inf)


def _q_finite(J, mdp, alpha):
    Jv = J.values if isinstance(J, ValueFn) else J
    q = mdp.g + alpha * (mdp.P @ Jv)
    return np.where(mdp.admissible, q, np.inf)


def q_values(J, model, alpha=None):
    if isinstance(model, MdpModel):
        return _q_lattice(J, model, model.config.alpha if alpha is None else alpha)
    return _q_finite(J, model, model.alpha if alpha is None else alpha)


def bellman_backup(J, model, alpha=None):
    """``(TJ)(s) = min_u g(s,u) + alpha sum_s' p_ss'(u) J(s')`` with the greedy policy."""
    q = q_values(J, model, alpha)
    J_next, action = _greedy_from_q(q)
    controls = model.controls if isinstance(model, MdpModel) else np.arange(q.shape[-1])
    return ValueFn(J_next), StationaryPolicy(action=action, controls=controls)


@dataclass(frozen=True, eq=False)
class ValueIterationResult:
    J: ValueFn
    policy: StationaryPolicy
    iterations: int
    bellman_residual: float
    policy_residual: float
    alpha: float

    def __iter__(self):
        return iter((self.J, self.policy, self.iterations))


def _policy_backup(J, model, action, alpha):
    q = q_values(J, model, alpha)
    return np.take_along_axis(q, action[..., None], axis=-1)[..., 0]


def value_iteration(model, tol=1e-6, max_iter=2_000_000, alpha=None, J0=None, in_place=False):
    """Value iteration from ``J0`` (zero by default).

    Stops when successive iterates differ by less than
    ``tol (1 - alpha) / (2 alpha)`` in sup norm, which guarantees
    ``||J - J*|| < tol``.  ``in_place`` updates the elapsed-time rows of the
    lattice in Gauss-Seidel order; it has the same fixed point.
    """
    alpha = (model.config.alpha if isinstance(model, MdpModel) else model.alpha) if alpha is None else alpha
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    shape = model.g.shape[:-1]
    J = np.zeros(shape) if J0 is None else np.array(J0.values if isinstance(J0, ValueFn) else J0, dtype=float)
    stop = math.inf if alpha == 0 else tol * (1.0 - alpha) / (2.0 * alpha)
    diff = math.inf
    gs = in_place and isinstance(model, MdpModel)
    for it in range(1, max_iter + 1):
        if gs:
            J_next = J.copy()
            for tp in range(model.M + 1):
                J_next[tp] = _q_lattice(J_next, model, alpha, tp).min(axis=-1)
        else:
            J_next = q_values(J, model, alpha).min(axis=-1)
        diff = float(np.max(np.abs(J_next - J)))
        J = J_next
        if diff < stop:
            break
    else:
        raise ValueIterationError(
            f"value iteration did not converge in {max_iter} sweeps (last change {diff:.3e})",
            residual=diff,
            iterations=max_iter,
        )
    TJ, policy = bellman_backup(J, model, alpha)
    residual = float(np.max(np.abs(TJ.values - J)))
    pol_res = float(np.max(np.abs(_policy_backup(J, model, policy.action, alpha) - J)))
    return ValueIterationResult(
        J=ValueFn(J), policy=policy, iterations=it, bellman_residual=residual, policy_residual=pol_res, alpha=alpha
    )


def policy_transition(model, policy):
    """Dense transition matrix and expected stage cost of a stationary policy."""
    S = model.n_states
    P = np.zeros((S, S))
    g = np.zeros(S)
    for tp in range(model.M + 1):
        for d in range(model.N):
            u = int(policy.action[tp, d])
            s = model.state_index(tp, d)
            if not model.admissible[tp, d, u]:
                raise ValueError(f"policy picks an inadmissible control at state ({tp}, {d})")
            for tp2, d2, p, _ in model.successors(tp, d, u):
                P[s, model.state_index(tp2, d2)] += p
            g[s] = model.g[tp, d, u]
    return P, g


def policy_evaluation(model, policy, alpha=None):
    """Exact ``J_mu`` by solving ``(I - alpha P_mu) J = g_mu``."""
    alpha = model.config.alpha if alpha is None else alpha
    P, g = policy_transition(model, policy)
    J = np.linalg.solve(np.eye(P.shape[0]) - alpha * P, g)
    return ValueFn(J.reshape(model.M + 1, model.N))


def reachable_states(model, policy, start=None):
    """States reachable with positive probability from every ``(0, delta)``
    (or from ``start``) under ``policy``."""
    frontier = [(0, d) for d in range(model.N)] if start is None else [start]
    seen = set(frontier)
    while frontier:
        tp, d = frontier.pop()
        u = int(policy.action[tp, d])
        for tp2, d2, p, _ in model.successors(tp, d, u):
            if p > 0 and (tp2, d2) not in seen:
                seen.add((tp2, d2))
                frontier.append((tp2, d2))
    return seen


def extract_degenerate_policy(mu, model):
    """Thresholds indexed by elapsed time, ``(mu*(0), ..., mu*(M))``.

    Checks that ``mu(0, delta)`` does not depend on ``delta`` and that every
    elapsed time reachable from ``tau_plus = 0`` carries a single threshold.
    """
    first = np.unique(mu.action[0])
    if first.size != 1:
        raise DegeneracyError(f"mu(0, delta) takes {first.size} different values")
    reach = reachable_states(model, mu)
    by_tau = {}
    for tp, d in reach:
        if tp > 0:
            by_tau.setdefault(tp, set()).add(d)
    for tp, ds in by_tau.items():
        if len(ds) > 1:
            raise DegeneracyError(f"elapsed time {tp} is reached with {len(ds)} different thresholds")
    chain = [float(model.controls[first[0]])]
    d = int(first[0])
    for tp in range(1, model.M + 1):
        u = int(mu.action[tp, d])
        chain.append(float(model.controls[u]))
        d = u
    return tuple(chain)


def stationary_distribution(model, policy):
    """Stationary distribution of the chain induced by ``policy`` restricted to
    states reachable from ``(0, .)``; returned over the full lattice."""
    P, _ = policy_transition(model, policy)
    reach = sorted(model.state_index(tp, d) for tp, d in reachable_states(model, policy))
    sub = P[np.ix_(reach, reach)]
    k = len(reach)
    A = np.vstack([sub.T - np.eye(k), np.ones((1, k))])
    b = np.zeros(k + 1)
    b[-1] = 1.0
    pi_sub, *_ = np.linalg.lstsq(A, b, rcond=None)
    pi = np.zeros(model.n_states)
    pi[reach] = np.clip(pi_sub, 0.0, None)
    return (pi / pi.sum()).reshape(model.M + 1, model.N)


@dataclass(frozen=True)
class AverageCostResult:
    lambda_hat: float
    alphas: tuple
    per_alpha: tuple
    iterations: tuple
    spread: float
    warnings: tuple = ()


DEFAULT_ALPHAS = (0.99, 0.995, 0.999, 0.9995)


def average_cost(model, alphas=DEFAULT_ALPHAS, tol=0.01, vi_tol=1e-6, start=None, warm_start=True):
    """Vanishing-discount estimate of the optimal average cost per stage.

    Solves the discounted problem for each ``alpha`` (ascending) and returns
    ``(1 - alpha) J*_alpha(start)`` at the largest one.  ``start`` defaults to
    ``(0, zeta)`` on the lattice and to state 0 for a :class:`FiniteMdp`.  With ``warm_start``
    each solve starts from the previous solution rescaled by
    ``(1 - alpha_prev) / (1 - alpha)``.
    """
    alphas = tuple(float(a) for a in alphas)
    if not alphas:
        raise ValueError("need at least one alpha")
    if any(not 0.0 <= a < 1.0 for a in alphas):
        raise ValueError("every alpha must lie in [0, 1)")
    if any(b <= a for a, b in zip(alphas, alphas[1:])):
        raise ValueError("alphas must be strictly ascending")
    if start is None:
        start = (0, 0) if isinstance(model, MdpModel) else 0
    per, iters, notes = [], [], []
    J_prev, a_prev = None, None
    res = None
    for a in alphas:
        J0 = None
        if warm_start and J_prev is not None:
            J0 = J_prev * (1.0 - a_prev) / (1.0 - a)
        res = value_iteration(model, tol=vi_tol, alpha=a, J0=J0)
        per.append((1.0 - a) * float(res.J.values[start]))
        iters.append(res.iterations)
        J_prev, a_prev = res.J.values, a
    lam = per[-1]
    scaled = (1.0 - alphas[-1]) * res.J.values
    spread = float(np.max(np.abs(scaled - lam)))
    if spread >= 10 * tol:
        notes.append(f"(1-alpha) J* varies by {spread:.3g} across states at alpha={alphas[-1]}")
    steps = np.diff(per)
    if steps.size >= 2:
        if not (np.all(steps >= -tol) or np.all(steps <= tol)):
            notes.append("sequence (1-alpha) J* is not monotone in alpha")
        if np.any(np.abs(steps[1:]) > np.abs(steps[:-1]) + tol):
            notes.append("successive changes of (1-alpha) J* do not shrink")
    for note in notes:
        warnings.warn(note, RuntimeWarning, stacklevel=2)
    return AverageCostResult(
        lambda_hat=lam,
        alphas=alphas,
        per_alpha=tuple(per),
        iterations=tuple(iters),
        spread=spread,
        warnings=tuple(notes),
    )
