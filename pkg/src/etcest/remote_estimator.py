"""Remote MMSE estimator under the cumulative-innovation trigger.

When nothing arrives the remote centre propagates its last estimate and
inflates the covariance by the conditional second moments of the
innovations accumulated during the silence.  Those moments are expressed
through ``eta`` factors; when thresholds never increase over the silence
they all equal ``beta(tau, delta_k)`` and no integration is needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.special

from .etc_scheme import chi2_cdf
from .lin_gauss import symmetrize
from .rng import derive_rng


class BetaUnderflowError(ArithmeticError):
    def __init__(self, message, log_value):
        super().__init__(message)
        self.log_value = log_value


class AcceptanceRateError(RuntimeError):
    def __init__(self, message, rate):
        super().__init__(message)
        self.rate = rate


def _log_series_ratio(a, x, max_terms=100_000):
    """``log S`` with ``S = sum_k x^k / ((a+1)...(a+k))``, so that
    P(a, x) = x^a e^-x / Gamma(a+1) * S."""
    term, total = 1.0, 1.0
    for k in range(1, max_terms):
        term *= x / (a + k)
        total += term
        if term < 1e-17 * total:
            return math.log(total)
    return math.log(total)


def beta(tau, delta, n):
    """``Pr(chi2_{tau n + 2} <= delta) / Pr(chi2_{tau n} <= delta)``; 0 for ``tau = 0``.

    ``tau * n * beta`` is the mean of ``chi2_{tau n}`` truncated to ``[0, delta]``.
    """
    if tau == 0:
        return 0.0
    if tau < 0:
        raise ValueError("tau must be non-negative")
    if not delta > 0:
        raise ValueError("delta must be positive when tau > 0")
    if math.isinf(delta):
        return 1.0
    num = chi2_cdf(tau * n + 2, delta)
    den = chi2_cdf(tau * n, delta)
    if den > 1e-280:
        return min(1.0, num / den)
    # deep lower tail: P(a+1,x)/P(a,x) = 1 - 1/S(a,x)
    a, x = 0.5 * tau * n, 0.5 * delta
    log_s = _log_series_ratio(a, x)
    val = -math.expm1(-log_s)
    if not np.isfinite(val):
        log_den = a * math.log(x) - x - scipy.special.gammaln(a + 1) + log_s
        raise BetaUnderflowError("beta denominator underflowed", log_value=log_den)
    return val


def beta_array(tau, delta, n):
    """Vectorised :func:`beta` over an array of thresholds for one ``tau``."""
    delta = np.asarray(delta, dtype=float)
    return np.array([beta(tau, d, n) for d in delta.ravel()]).reshape(delta.shape)


@dataclass(frozen=True)
class EtaFactors:
    """Conditional second-moment factors over a silence interval.

    ``etas[i]`` is ``E[||eps_i||^2 | silence] / n`` for the i-th step of the
    interval (oldest first).
    """

    etas: np.ndarray
    thresholds: tuple
    n: int
    method: str
    std_errors: np.ndarray | None = None
    acceptance_rate: float | None = None

    @property
    def total(self):
        """``sum_i n * eta_i``, the conditional mean of the cumulative statistic."""
        return float(self.n * np.sum(self.etas))


def _nonincreasing(thresholds):
    return all(a >= b for a, b in zip(thresholds, thresholds[1:]))


def _rejection_sample(thresholds, n, samples, rng, batch=200_000):
    """Sample i.i.d. chi2_n sequences and keep those satisfying every
    cumulative constraint.  Returns (accepted rows, acceptance rate)."""
    thr = np.asarray(thresholds, dtype=float)
    kept, drawn = [], 0
    while drawn < samples:
        size = min(batch, samples - drawn)
        u = rng.chisquare(n, size=(size, thr.size))
        ok = np.all(np.cumsum(u, axis=1) <= thr, axis=1)
        kept.append(u[ok])
        drawn += size
    acc = np.vstack(kept)
    return acc, acc.shape[0] / samples


def eta_factors(thresholds, n, samples=200_000, seed=0, method="auto", min_acceptance=1e-6):
    """Eta factors for the silence thresholds ``(delta_{t+1}, ..., delta_k)``.

    ``method="auto"`` uses the closed form when thresholds never increase and
    rejection sampling otherwise; ``"monte_carlo"`` always samples.
    """
    thresholds = tuple(float(d) for d in thresholds)
    if not thresholds:
        raise ValueError("empty threshold tuple")
    if any(not d > 0 for d in thresholds):
        raise ValueError("thresholds must be positive")
    tau = len(thresholds)
    if method == "closed_form" or (method == "auto" and _nonincreasing(thresholds)):
        if not _nonincreasing(thresholds):
            raise ValueError("closed form requires non-increasing thresholds")
        b = beta(tau, thresholds[-1], n)
        return EtaFactors(etas=np.full(tau, b), thresholds=thresholds, n=n, method="closed_form")
    if method not in ("auto", "monte_carlo"):
        raise ValueError(f"unknown method {method!r}")
    rng = seed if isinstance(seed, np.random.Generator) else derive_rng(seed, "eta_factors")
    acc, rate = _rejection_sample(thresholds, n, samples, rng)
    if rate < min_acceptance or acc.shape[0] < 2:
        raise AcceptanceRateError(
            f"acceptance rate {rate:.2e} too small; rescale thresholds or raise samples", rate=rate
        )
    etas = acc.mean(axis=0) / n
    se = acc.std(axis=0, ddof=1) / math.sqrt(acc.shape[0]) / n
    return EtaFactors(
        etas=etas, thresholds=thresholds, n=n, method="monte_carlo", std_errors=se, acceptance_rate=rate
    )


@dataclass(frozen=True, eq=False)
class RemoteState:
    """Remote estimate and its MSE matrix.

    ``thresholds`` and ``innovation_covs`` cover the current silence (oldest
    first) and are empty right after a reception.
    """

    x_hat: np.ndarray
    P: np.ndarray
    tau_plus: int = 0
    thresholds: tuple = ()
    innovation_covs: tuple = ()


def initial_remote_state(local):
    return RemoteState(x_hat=np.array(local.x_post, dtype=float), P=np.array(local.P_post, dtype=float))


def silence_covariance(P_post, innovation_covs, etas, A):
    """``P_post + sum_i eta_{k-i} A^i dP_{k-i} (A^i)'`` with ``innovation_covs`` oldest first."""
    P = np.array(P_post, dtype=float)
    Ai = np.eye(A.shape[0])
    for i, dP in enumerate(reversed(innovation_covs)):
        P = P + etas[len(etas) - 1 - i] * (Ai @ dP @ Ai.T)
        Ai = A @ Ai
    return symmetrize(P)


def remote_update(prev, gamma, payload, local, thresholds, model, eta_samples=200_000, seed=0):
    """One step of the remote estimator.

    Parameters
    ----------
    prev : RemoteState
    gamma : int
        Transmission decision at this step.
    payload : ndarray or None
        The local estimate, present exactly when ``gamma == 1``.
    local : LocalFilterState
        Sensor filter after this step's update (its covariances are known
        to the remote side because they do not depend on data).
    thresholds : sequence of float
        Thresholds of every step of the current silence, oldest first
        (ignored on reception).
    """
    if gamma not in (0, 1):
        raise ValueError("gamma must be 0 or 1")
    if (payload is None) == (gamma == 1):
        raise ValueError("payload must be given exactly when gamma == 1")
    if gamma == 1:
        return RemoteState(x_hat=np.array(payload, dtype=float), P=np.array(local.P_post, dtype=float))
    covs = prev.innovation_covs + (local.innovation_covariance(),)
    thresholds = tuple(float(d) for d in thresholds)
    if len(thresholds) != len(covs):
        raise ValueError(f"expected {len(covs)} silence thresholds, got {len(thresholds)}")
    n = model.rank_C
    eta = eta_factors(thresholds, n, samples=eta_samples, seed=seed)
    P = silence_covariance(local.P_post, covs, eta.etas, model.A)
    return RemoteState(
        x_hat=model.A @ prev.x_hat, P=P, tau_plus=len(covs), thresholds=thresholds, innovation_covs=covs
    )


def silence_sums(P_hat, P_bar, A, tau_max):
    """``S[t] = sum_{i=0}^{t-1} A^i (P_hat - P_bar) (A^i)'`` for t = 0..tau_max."""
    dP = symmetrize(P_hat - P_bar)
    S = np.zeros((tau_max + 1,) + dP.shape)
    Ai = np.eye(A.shape[0])
    for t in range(1, tau_max + 1):
        S[t] = symmetrize(S[t - 1] + Ai @ dP @ Ai.T)
        Ai = A @ Ai
    return S


def steady_remote_covariance(tau_plus, delta, steady, A, n):
    """Remote MSE matrix at steady state with non-increasing silence thresholds:
    ``P_bar + beta(tau_plus, delta) sum_{i<tau_plus} A^i (P_hat - P_bar) (A^i)'``."""
    if tau_plus == 0:
        return np.array(steady.P_bar)
    S = silence_sums(steady.P_hat, steady.P_bar, A, tau_plus)[tau_plus]
    return symmetrize(steady.P_bar + beta(tau_plus, delta, n) * S)


def steady_remote_update(prev, gamma, payload, delta, steady, A, n):
    """Steady-state remote update with the closed-form MSE matrix."""
    if (payload is None) == (gamma == 1):
        raise ValueError("payload must be given exactly when gamma == 1")
    if gamma == 1:
        return RemoteState(x_hat=np.array(payload, dtype=float), P=np.array(steady.P_bar))
    thresholds = prev.thresholds + (float(delta),)
    if not _nonincreasing(thresholds):
        raise ValueError("steady-state closed form needs non-increasing thresholds over the silence")
    tau_plus = prev.tau_plus + 1
    return RemoteState(
        x_hat=A @ prev.x_hat,
        P=steady_remote_covariance(tau_plus, delta, steady, A, n),
        tau_plus=tau_plus,
        thresholds=thresholds,
    )


def mse_upper_bound(tau, delta_k, local_cov_pairs, A, n=None):
    """Upper bound on ``tr(P_k)`` during a silence of length ``tau``.

    ``local_cov_pairs`` lists ``(P_pred, P_post)`` for the silence steps,
    oldest first; the bound is ``tr(P_post_k) + tau n beta(tau, delta_k)
    lambda_max`` where ``lambda_max`` is the largest eigenvalue over the
    blocks ``A^i (P_pred - P_post)_{k-i} (A^i)'``.
    """
    if tau < 1:
        raise ValueError("tau must be >= 1")
    pairs = list(local_cov_pairs)[-tau:]
    if len(pairs) != tau:
        raise ValueError(f"need {tau} covariance pairs, got {len(pairs)}")
    if n is None:
        n = A.shape[0]
    lam = 0.0
    Ai = np.eye(A.shape[0])
    for P_pred, P_post in reversed(pairs):
        block = symmetrize(Ai @ (np.asarray(P_pred) - np.asarray(P_post)) @ Ai.T)
        lam = max(lam, float(np.linalg.eigvalsh(block)[-1]))
        Ai = A @ Ai
    return float(np.trace(pairs[-1][1])) + tau * n * beta(tau, delta_k, n) * lam


@dataclass(frozen=True)
class MomentBoundResult:
    lhs: float
    lhs_se: float
    rhs: float
    rhs_se: float
    holds: bool
    acceptance_joint: float
    acceptance_last: float

    @property
    def combined_se(self):
        return math.hypot(self.lhs_se, self.rhs_se)

    @property
    def gap(self):
        return self.rhs - self.lhs


def moment_bound_check(thresholds, n, samples=1_000_000, seed=0, min_acceptance=1e-6):
    """Compare ``E[sum ||Xi_i||^2 | every cumulative constraint]`` with
    ``E[sum ||Xi_i||^2 | last constraint only]`` by rejection sampling.

    Both sides use the same draws; ``holds`` is ``lhs <= rhs + 3 se``.
    """
    thresholds = tuple(float(d) for d in thresholds)
    if len(thresholds) < 1:
        raise ValueError("need at least one block")
    if samples < 100_000:
        raise ValueError("samples must be >= 1e5")
    rng = seed if isinstance(seed, np.random.Generator) else derive_rng(seed, "moment_bound_check")
    thr = np.asarray(thresholds)
    sums_joint, sums_last = [], []
    drawn = 0
    while drawn < samples:
        size = min(250_000, samples - drawn)
        cum = np.cumsum(rng.chisquare(n, size=(size, thr.size)), axis=1)
        total = cum[:, -1]
        last = total <= thr[-1]
        joint = last & np.all(cum <= thr, axis=1)
        sums_joint.append(total[joint])
        sums_last.append(total[last])
        drawn += size
    sj, sl = np.concatenate(sums_joint), np.concatenate(sums_last)
    rate_j, rate_l = sj.size / samples, sl.size / samples
    if rate_j < min_acceptance or sj.size < 2:
        raise AcceptanceRateError(f"joint acceptance rate {rate_j:.2e} too small", rate=rate_j)

    def mean_se(a):
        return float(a.mean()), float(a.std(ddof=1) / math.sqrt(a.size))

    lhs, lhs_se = mean_se(sj)
    rhs, rhs_se = mean_se(sl)
    holds = lhs <= rhs + 3.0 * math.hypot(lhs_se, rhs_se)
    return MomentBoundResult(lhs, lhs_se, rhs, rhs_se, bool(holds), rate_j, rate_l)
