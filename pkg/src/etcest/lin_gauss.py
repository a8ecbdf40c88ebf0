"""Linear-Gaussian plant, local Kalman filter and steady-state Riccati solver.

The plant is

    x_{k+1} = A x_k + w_k,   w_k ~ N(0, Q)
    y_k     = C x_k + v_k,   v_k ~ N(0, R)

and the sensor runs the optimal (Kalman) filter on it.  Covariances are
symmetrized after every arithmetic step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.linalg


class ModelError(ValueError):
    """Raised for an inconsistent or invalid plant model."""


class RiccatiConvergenceError(RuntimeError):
    def __init__(self, message, residual, iterations):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


def symmetrize(P):
    return 0.5 * (P + P.T)


def psd_sqrt(P):
    """Factor ``L`` with ``L @ L.T == P`` that tolerates singular PSD input."""
    w, U = np.linalg.eigh(symmetrize(P))
    return U * np.sqrt(np.clip(w, 0.0, None))


def _is_psd(P, strict=False):
    w = np.linalg.eigvalsh(P)
    scale = max(1.0, float(np.max(np.abs(w))))
    if strict:
        return bool(w.min() > 0.0)
    return bool(w.min() >= -1e-10 * scale)


def observability_matrix(A, C):
    n = A.shape[0]
    blocks = [C]
    for _ in range(n - 1):
        blocks.append(blocks[-1] @ A)
    return np.vstack(blocks)


def numerical_rank(M, rtol=1e-8):
    s = np.linalg.svd(np.atleast_2d(M), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


@dataclass(frozen=True, eq=False)
class SystemModel:
    """Linear time-invariant plant with Gaussian noise.

    Constructed models are validated: ``Q``, ``R`` and ``P0`` symmetric
    (``R`` positive definite, the others PSD) and ``(A, C)`` observable.
    """

    A: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    x0_mean: np.ndarray
    P0: np.ndarray

    def __post_init__(self):
        for name in ("A", "C", "Q", "R", "P0"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        object.__setattr__(self, "x0_mean", np.asarray(self.x0_mean, dtype=float).reshape(-1))
        n, m = self.n, self.m
        shapes = {"A": (n, n), "C": (m, n), "Q": (n, n), "R": (m, m), "P0": (n, n)}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ModelError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.x0_mean.shape != (n,):
            raise ModelError(f"x0_mean has length {self.x0_mean.size}, expected {n}")
        for name in ("Q", "R", "P0"):
            M = getattr(self, name)
            if not np.allclose(M, M.T, atol=1e-12, rtol=1e-10):
                raise ModelError(f"{name} is not symmetric")
            if not _is_psd(M, strict=(name == "R")):
                raise ModelError(f"{name} is not positive {'definite' if name == 'R' else 'semidefinite'}")
        if numerical_rank(observability_matrix(self.A, self.C)) < n:
            raise ModelError("(A, C) is not observable")

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.C.shape[0]

    @cached_property
    def rank_C(self):
        return numerical_rank(self.C)

    @cached_property
    def _noise_factors(self):
        return psd_sqrt(self.Q), psd_sqrt(self.R)

    def to_dict(self):
        return {
            "A": self.A.tolist(),
            "C": self.C.tolist(),
            "Q": self.Q.tolist(),
            "R": self.R.tolist(),
            "x0_mean": self.x0_mean.tolist(),
            "P0": self.P0.tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        missing = [k for k in ("A", "C", "Q", "R", "x0_mean", "P0") if k not in data]
        if missing:
            raise ModelError(f"system model is missing field(s): {', '.join(missing)}")
        return cls(**{k: data[k] for k in ("A", "C", "Q", "R", "x0_mean", "P0")})

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, source):
        """Load from a JSON string or a path to a JSON file."""
        if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
            source = Path(source).read_text()
        return cls.from_dict(json.loads(source))


def example_system():
    """The two-state benchmark plant used throughout the test-suite."""
    return SystemModel(
        A=[[1.0, 1.0], [0.0, 1.0]],
        C=[[1.0, 1.0], [0.0, 1.3]],
        Q=5.0 * np.eye(2),
        R=2.0 * np.eye(2),
        x0_mean=[1.0, 1.0],
        P0=0.3 * np.eye(2),
    )


def simulate_step(x, model, rng):
    """Advance the plant one step and measure the new state.

    Randomness is consumed in a fixed order: ``n`` standard normals for the
    process noise, then ``m`` for the measurement noise.

    Returns
    -------
    x_next, y : ndarray
    """
    Lq, Lr = model._noise_factors
    w = Lq @ rng.standard_normal(model.n)
    v = Lr @ rng.standard_normal(model.m)
    x_next = model.A @ np.asarray(x, dtype=float) + w
    return x_next, model.C @ x_next + v


@dataclass(frozen=True, eq=False)
class LocalFilterState:
    """Sensor-side Kalman quantities at step ``time``.

    After :func:`kalman_predict` only the prior fields are fresh; the posterior
    fields still hold the previous step until :func:`kalman_update` runs.
    """

    x_pred: np.ndarray
    P_pred: np.ndarray
    x_post: np.ndarray
    P_post: np.ndarray
    gain: np.ndarray | None = None
    time: int = 0

    def innovation_covariance(self):
        """``P_pred - P_post``, the covariance of the estimate innovation."""
        return symmetrize(self.P_pred - self.P_post)


def initial_filter_state(model):
    """Filter state at k = 0, before any measurement has been processed."""
    return LocalFilterState(
        x_pred=model.x0_mean.copy(),
        P_pred=model.P0.copy(),
        x_post=model.x0_mean.copy(),
        P_post=model.P0.copy(),
        gain=None,
        time=0,
    )


def kalman_predict(state, model):
    A = model.A
    return replace(
        state,
        x_pred=A @ state.x_post,
        P_pred=symmetrize(A @ state.P_post @ A.T + model.Q),
        gain=None,
        time=state.time + 1,
    )


def _gain(P_pred, model):
    C = model.C
    S = symmetrize(C @ P_pred @ C.T + model.R)
    try:
        cho = scipy.linalg.cho_factor(S)
    except np.linalg.LinAlgError as exc:
        raise ModelError("innovation covariance is numerically singular") from exc
    return scipy.linalg.cho_solve(cho, C @ P_pred).T


def kalman_update(state, y, model):
    """Measurement update ``x_post = x_pred + K (y - C x_pred)``."""
    K = _gain(state.P_pred, model)
    C = model.C
    x_post = state.x_pred + K @ (np.asarray(y, dtype=float) - C @ state.x_pred)
    P_post = symmetrize(state.P_pred - K @ C @ state.P_pred)
    return replace(state, x_post=x_post, P_post=P_post, gain=K)


def riccati_map(P, model):
    """Prior covariance one step ahead: A (P - P C'(C P C' + R)^-1 C P) A' + Q."""
    A = model.A
    K = _gain(P, model)
    P_bar = symmetrize(P - K @ model.C @ P)
    return symmetrize(A @ P_bar @ A.T + model.Q)


@dataclass(frozen=True, eq=False)
class SteadyState:
    P_hat: np.ndarray
    P_bar: np.ndarray
    gain: np.ndarray
    iterations: int = 0
    residual: float = 0.0

    @property
    def innovation_covariance(self):
        return symmetrize(self.P_hat - self.P_bar)


def riccati_residual(P_hat, model):
    return float(np.max(np.abs(P_hat - riccati_map(P_hat, model))))


def solve_riccati(model, tol=1e-12, max_iter=100_000, P_init=None):
    """Fixed point of the Riccati map, iterated from ``P_init`` (default ``Q``).

    Stops once successive iterates differ by less than ``tol`` in max-abs norm.
    """
    P = symmetrize(np.array(model.Q if P_init is None else P_init, dtype=float))
    diff = np.inf
    for it in range(1, max_iter + 1):
        P_next = riccati_map(P, model)
        diff = float(np.max(np.abs(P_next - P)))
        P = P_next
        if diff < tol:
            break
    else:
        raise RiccatiConvergenceError(
            f"Riccati iteration did not converge in {max_iter} iterations (last step {diff:.3e})",
            residual=diff,
            iterations=max_iter,
        )
    K = _gain(P, model)
    P_bar = symmetrize(P - K @ model.C @ P)
    return SteadyState(P_hat=P, P_bar=P_bar, gain=K, iterations=it, residual=riccati_residual(P, model))
