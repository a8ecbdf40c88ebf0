"""Cumulative-innovation transmission trigger.

The sensor whitens each estimate innovation ``z_k = K_k (y_k - C x_pred)``
into ``eps_k`` and transmits as soon as the running sum of ``||eps||^2``
since the last transmission exceeds the current threshold.  This module
also computes the unconditional transmission probability of that rule.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.integrate
import scipy.special

from .lin_gauss import symmetrize
from .rng import derive_rng

RANK_RTOL = 1e-10


# -- chi-square machinery ---------------------------------------------------

def _check_dof(dof):
    if dof <= 0:
        raise ValueError(f"degrees of freedom must be positive, got {dof}")


def chi2_cdf(dof, x):
    """``Pr(chi2_dof <= x)``, i.e. the regularized lower incomplete gamma P(dof/2, x/2).

    ``x`` may be an array; ``inf`` maps to 1.
    """
    _check_dof(dof)
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("chi2_cdf requires x >= 0")
    out = scipy.special.gammainc(0.5 * dof, 0.5 * x)
    return float(out) if out.ndim == 0 else out


def chi2_sf(dof, x):
    _check_dof(dof)
    x = np.asarray(x, dtype=float)
    out = scipy.special.gammaincc(0.5 * dof, 0.5 * x)
    return float(out) if out.ndim == 0 else out


def chi2_pdf(dof, x):
    """Scalar chi-square density (used inside quadrature integrands)."""
    if x < 0:
        return 0.0
    a = 0.5 * dof
    if x == 0:
        return 0.5 if dof == 2 else (math.inf if dof == 1 else 0.0)
    return math.exp((a - 1.0) * math.log(x) - 0.5 * x - a * math.log(2.0) - math.lgamma(a))


# -- whitening ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class InnovationNormalizer:
    """Whitening map for innovations with covariance ``P_pred - P_post``.

    ``F`` is q x n with ``F dP F' = I_q``; ``F_pinv`` is its n x q
    pseudo-inverse; ``eigvals`` are the retained eigenvalues (descending) and
    ``basis`` is the full orthogonal eigenvector matrix.
    """

    F: np.ndarray
    F_pinv: np.ndarray
    eigvals: np.ndarray
    basis: np.ndarray

    @property
    def q(self):
        return self.eigvals.size


def build_normalizer(P_pred, P_post, rtol=RANK_RTOL):
    dP = symmetrize(np.asarray(P_pred, dtype=float) - np.asarray(P_post, dtype=float))
    w, U = np.linalg.eigh(dP)
    order = np.argsort(w)[::-1]
    w, U = w[order], U[:, order]
    lam_max = w[0]
    if lam_max <= 0.0:
        raise ValueError("P_pred - P_post has no positive eigenvalue")
    if w[-1] < -rtol * lam_max:
        raise ValueError(f"P_pred - P_post is indefinite (min eigenvalue {w[-1]:.3e})")
    # sign convention: largest-magnitude entry of each eigenvector is positive
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    U = U * signs
    keep = w > rtol * lam_max
    lam = w[keep]
    Ur = U[:, keep]
    return InnovationNormalizer(
        F=(Ur / np.sqrt(lam)).T,
        F_pinv=Ur * np.sqrt(lam),
        eigvals=lam,
        basis=U,
    )


def normalize(z, norm):
    return norm.F @ np.asarray(z, dtype=float)


# -- link bookkeeping and trigger --------------------------------------------

@dataclass(frozen=True)
class LinkState:
    """Transmission bookkeeping after the decision at step ``time``.

    ``tau`` counts steps since the latest transmission strictly before
    ``time``; ``tau_plus`` counts up to and including ``time`` (0 right after
    a transmission).  The initial state anchors a transmission at step 0, for
    which ``tau`` is reported as 0.
    """

    gamma_last: int = 1
    t_last: int = 0
    tau: int = 0
    tau_plus: int = 0
    cum_stat: float = 0.0
    eps_history: tuple = ()
    time: int = 0


def trigger(link, eps, delta):
    """Apply the threshold rule at step ``link.time + 1``.

    Returns ``(gamma, next_link)``; ``gamma = 1`` iff the cumulative statistic
    including ``eps`` exceeds ``delta``.
    """
    if not delta > 0:
        raise ValueError(f"threshold must be positive, got {delta}")
    eps = np.asarray(eps, dtype=float)
    k = link.time + 1
    cum = link.cum_stat + float(eps @ eps)
    tau = k - link.t_last
    if cum > delta:
        return 1, LinkState(gamma_last=1, t_last=k, tau=tau, tau_plus=0, cum_stat=0.0, eps_history=(), time=k)
    return 0, LinkState(
        gamma_last=0,
        t_last=link.t_last,
        tau=tau,
        tau_plus=link.tau_plus + 1,
        cum_stat=cum,
        eps_history=link.eps_history + (eps,),
        time=k,
    )


# -- threshold schedules ------------------------------------------------------

@dataclass(frozen=True)
class ThresholdSchedule:
    """Either a per-step sequence ``delta_1, delta_2, ...`` or a stationary rule
    indexed by the elapsed time ``tau_plus`` of the previous step (the last
    entry is reused for longer silences).

    ``monotone=True`` asserts that thresholds never increase within a silence
    interval, and is checked on construction.
    """

    kind: str
    values: tuple
    monotone: bool = False

    def __post_init__(self):
        if self.kind not in ("sequence", "stationary"):
            raise ValueError(f"unknown schedule type {self.kind!r}")
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if not vals:
            raise ValueError("schedule has no thresholds")
        if any(not v > 0 for v in vals):
            raise ValueError("thresholds must be positive")
        if self.monotone and not self.is_nonincreasing():
            raise ValueError("schedule is flagged monotone but increases somewhere")

    @classmethod
    def constant(cls, delta):
        return cls("stationary", (delta,), monotone=True)

    @classmethod
    def sequence(cls, values, monotone=False):
        return cls("sequence", tuple(values), monotone=monotone)

    @classmethod
    def stationary(cls, by_tau_plus, monotone=False):
        return cls("stationary", tuple(by_tau_plus), monotone=monotone)

    def is_nonincreasing(self):
        v = np.asarray(self.values)
        return bool(np.all(np.diff(v) <= 0))

    def threshold(self, k, tau_plus_prev):
        """Threshold applied at step ``k`` (1-based) given the previous elapsed time."""
        if self.kind == "sequence":
            if k < 1 or k > len(self.values):
                raise IndexError(f"sequence schedule undefined at step {k}")
            return self.values[k - 1]
        return self.values[min(tau_plus_prev, len(self.values) - 1)]

    def window(self, start, length):
        """Thresholds of steps ``start+1 .. start+length`` for a silence that
        begins right after a transmission at ``start``."""
        return tuple(self.threshold(start + l, l - 1) for l in range(1, length + 1))

    def to_dict(self):
        key = "values" if self.kind == "sequence" else "by_tau_plus"
        return {"type": self.kind, key: list(self.values)}

    @classmethod
    def from_dict(cls, data):
        kind = data.get("type")
        if kind == "sequence":
            return cls("sequence", tuple(data["values"]))
        if kind == "stationary":
            return cls("stationary", tuple(data["by_tau_plus"]))
        raise ValueError(f"unknown schedule type {kind!r}")

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, source):
        if isinstance(source, Path) or not str(source).lstrip().startswith("{"):
            source = Path(source).read_text()
        return cls.from_dict(json.loads(source))


# -- transmission probability ----------------------------------------------

class QuadratureError(RuntimeError):
    def __init__(self, message, partial):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True)
class TransmissionProbability:
    """``alphas[k] = Pr(gamma_k = 1)`` for k = 0..K with ``alphas[0] = 1``.

    ``errors`` is a truncation bound (quadrature) or a standard error
    (Monte Carlo).
    """

    alphas: np.ndarray
    errors: np.ndarray
    method: str

    @property
    def value(self):
        return float(self.alphas[-1])

    @property
    def error(self):
        return float(self.errors[-1])


def survival_nested(window, n, rel_tol=1e-6):
    """``Pr(sum_{h<=l} u_h <= window[l-1] for all l)`` with ``u_h`` i.i.d. chi2_n,
    by recursively nested adaptive Gauss-Kronrod quadrature.

    Returns ``(value, abs_error_estimate)``.
    """
    j = len(window)
    if j == 0:
        return 1.0, 0.0
    errs = []

    def inner(level, c):
        rem = window[level] - c
        if rem <= 0.0:
            return 0.0
        if level == j - 1:
            return chi2_cdf(n, rem)
        val, err = scipy.integrate.quad(
            lambda u: chi2_pdf(n, u) * inner(level + 1, c + u), 0.0, rem, epsabs=1e-13, epsrel=rel_tol, limit=100
        )
        if level == 0:
            errs.append(err)
        return val

    with warnings.catch_warnings():
        warnings.simplefilter("error", scipy.integrate.IntegrationWarning)
        try:
            val = inner(0, 0.0)
        except scipy.integrate.IntegrationWarning as exc:
            raise QuadratureError(f"nested quadrature failed at depth {j}: {exc}", partial=None) from exc
    return val, (errs[0] if errs else 0.0)


def survival_exact(window, n, rel_tol=1e-6):
    """Survival probability of a silence window, using the single-constraint
    closed form when thresholds never increase and nested quadrature otherwise."""
    if all(a >= b for a, b in zip(window, window[1:])):
        return chi2_cdf(len(window) * n, window[-1]), 0.0
    return survival_nested(window, n, rel_tol)


def _recursion(first_hit, K):
    """alpha_k = sum_j first_hit(k, j) alpha_{k-j}, with alpha_0 = 1."""
    alphas = np.zeros(K + 1)
    alphas[0] = 1.0
    for k in range(1, K + 1):
        alphas[k] = sum(first_hit(k, j) * alphas[k - j] for j in range(1, k + 1))
    return alphas


def transmission_probability(
    schedule,
    k,
    n,
    method="quadrature",
    depth_cap=4,
    samples=100_000,
    seed=0,
    rel_tol=1e-6,
    exploit_monotone=True,
    batches=20,
):
    """Unconditional transmission probabilities up to step ``k``.

    Term ``j`` of the recursion is the probability that, after a transmission
    at ``k - j``, the next one happens exactly at ``k``; it equals the
    difference of two silence survival probabilities.

    ``quadrature``: survival probabilities by nested quadrature for windows of
    length ``<= depth_cap`` (monotone windows use the exact closed form when
    ``exploit_monotone``).  Deeper terms are dropped and bounded by
    ``min(prod of marginal probabilities, last computed survival)``.

    ``monte_carlo``: first-hitting frequencies from i.i.d. chi-square
    sequences; the standard error comes from ``batches`` independent batches.
    """
    if depth_cap < 1:
        raise ValueError("depth_cap must be >= 1")
    if k < 0:
        raise ValueError("k must be >= 0")
    if method == "quadrature":
        return _alpha_quadrature(schedule, k, n, depth_cap, rel_tol, exploit_monotone)
    if method == "monte_carlo":
        if samples < 1000:
            raise ValueError("samples must be >= 1000")
        return _alpha_monte_carlo(schedule, k, n, samples, seed, batches)
    raise ValueError(f"unknown method {method!r}")


def _alpha_quadrature(schedule, K, n, depth_cap, rel_tol, exploit_monotone):
    cache = {}

    def survival(start, j):
        """(value, exact?, bound)"""
        key = (start, j)
        if key in cache:
            return cache[key]
        window = schedule.window(start, j)
        monotone = all(a >= b for a, b in zip(window, window[1:]))
        if j == 0:
            out = (1.0, True, 1.0)
        elif exploit_monotone and monotone:
            out = (chi2_cdf(j * n, window[-1]), True, 0.0)
        elif j <= depth_cap:
            try:
                val, _ = survival_nested(window, n, rel_tol)
            except QuadratureError as exc:
                exc.partial = dict(cache)
                raise
            out = (val, True, 0.0)
        else:
            marg = float(np.prod([chi2_cdf(n, d) for d in window]))
            prev_val, prev_exact, prev_bound = survival(start, j - 1)
            out = (0.0, False, min(marg, prev_val + prev_bound))
        cache[key] = out
        return out

    alphas = np.zeros(K + 1)
    errors = np.zeros(K + 1)
    alphas[0] = 1.0
    for k in range(1, K + 1):
        total, err = 0.0, 0.0
        for j in range(1, k + 1):
            s_prev, ok_prev, b_prev = survival(k - j, j - 1)
            s_cur, ok_cur, b_cur = survival(k - j, j)
            if ok_prev and ok_cur:
                term = s_prev - s_cur
                total += term * alphas[k - j]
                err += term * errors[k - j]
            else:
                # dropped term is bounded by the survival of the first j-1 steps
                err += (s_prev + b_prev) * (alphas[k - j] + errors[k - j])
        alphas[k] = total
        errors[k] = err
    return TransmissionProbability(alphas=alphas, errors=errors, method="quadrature")


def _first_hit_counts(schedule, start, K, n, size, rng):
    """Counts of first transmission at offset j = 1..K-start after a transmission at ``start``."""
    L = K - start
    window = np.asarray(schedule.window(start, L))
    u = rng.chisquare(n, size=(size, L))
    silent = np.cumsum(u, axis=1) <= window
    alive = np.logical_and.accumulate(silent, axis=1)
    alive_prev = np.hstack([np.ones((size, 1), bool), alive[:, :-1]])
    return np.sum(alive_prev & ~alive, axis=0)


def _alpha_monte_carlo(schedule, K, n, samples, seed, batches):
    if K == 0:
        return TransmissionProbability(np.ones(1), np.zeros(1), "monte_carlo")
    stationary = schedule.kind == "stationary"
    starts = [0] if stationary else list(range(K))
    sizes = [samples // batches + (1 if b < samples % batches else 0) for b in range(batches)]
    per_batch = []
    for b, size in enumerate(sizes):
        rng = derive_rng(seed, "transmission_probability", b)
        hits = {s: _first_hit_counts(schedule, s, K, n, size, rng) / size for s in starts}

        def first_hit(k, j, hits=hits):
            s = 0 if stationary else k - j
            return hits[s][j - 1]

        per_batch.append(_recursion(first_hit, K))
    per_batch = np.array(per_batch)
    weights = np.asarray(sizes, float) / samples
    alphas = weights @ per_batch
    se = per_batch.std(axis=0, ddof=1) / math.sqrt(batches)
    return TransmissionProbability(alphas=alphas, errors=se, method="monte_carlo")


def simulate_trigger_rates(schedule, K, n, episodes, seed=0):
    """Empirical ``Pr(gamma_k = 1)`` for k = 1..K by running the trigger rule
    directly on i.i.d. chi-square increments, ``episodes`` independent times.

    Returns ``(rates, standard_errors)``.
    """
    rng = derive_rng(seed, "simulate_trigger_rates")
    cum = np.zeros(episodes)
    tp = np.zeros(episodes, dtype=int)
    rates = np.zeros(K)
    for k in range(1, K + 1):
        cum += rng.chisquare(n, size=episodes)
        if schedule.kind == "sequence":
            delta = schedule.values[k - 1]
        else:
            delta = np.asarray(schedule.values)[np.minimum(tp, len(schedule.values) - 1)]
        gamma = cum > delta
        rates[k - 1] = gamma.mean()
        cum[gamma] = 0.0
        tp = np.where(gamma, 0, tp + 1)
    return rates, np.sqrt(rates * (1 - rates) / episodes)
