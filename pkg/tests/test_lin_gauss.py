import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from etcest.lin_gauss import (
    ModelError,
    RiccatiConvergenceError,
    SystemModel,
    initial_filter_state,
    kalman_predict,
    kalman_update,
    psd_sqrt,
    riccati_map,
    riccati_residual,
    simulate_step,
    solve_riccati,
)
from etcest.lin_gauss import LocalFilterState

# scipy.linalg.solve_discrete_are(A.T, C.T, Q, R) on the benchmark plant
P_HAT_REF = np.array([[6.584828070806821, 0.211858303711431], [0.211858303711431, 5.876961018431096]])
P_BAR_REF = np.array([[2.038072481815042, -0.665102714719665], [-0.665102714719665, 0.876961018431102]])


def _model(**kw):
    base = dict(A=np.eye(2), C=np.eye(2), Q=np.eye(2), R=np.eye(2), x0_mean=np.zeros(2), P0=np.eye(2))
    base.update(kw)
    return SystemModel(**base)


# -- construction ---------------------------------------------------------------

def test_example_system_fields(model):
    assert model.n == 2 and model.m == 2
    np.testing.assert_array_equal(model.C, [[1.0, 1.0], [0.0, 1.3]])
    assert model.rank_C == 2


@pytest.mark.parametrize(
    "kw, msg",
    [
        ({"Q": [[1.0, 0.5], [0.0, 1.0]]}, "Q is not symmetric"),
        ({"R": np.diag([1.0, 0.0])}, "R is not positive definite"),
        ({"P0": np.diag([1.0, -1.0])}, "P0 is not positive semidefinite"),
        ({"A": [[1.0, 1.0], [0.0, 1.0]], "C": [[0.0, 1.0]], "R": [[1.0]]}, "not observable"),
        ({"C": np.eye(3)}, "C has shape"),
        ({"x0_mean": [0.0, 0.0, 0.0]}, "x0_mean has length"),
    ],
)
def test_invalid_models_rejected(kw, msg):
    with pytest.raises(ModelError, match=msg):
        _model(**kw)


def test_json_round_trip(tmp_path, model):
    text = model.to_json()
    back = SystemModel.from_json(text)
    for name in ("A", "C", "Q", "R", "x0_mean", "P0"):
        np.testing.assert_array_equal(getattr(back, name), getattr(model, name))
    path = tmp_path / "sys.json"
    model.to_json(path)
    assert json.loads(path.read_text())["C"] == [[1.0, 1.0], [0.0, 1.3]]
    np.testing.assert_array_equal(SystemModel.from_json(path).Q, model.Q)
    np.testing.assert_array_equal(SystemModel.from_json(str(path)).R, model.R)


def test_from_dict_names_missing_fields(model):
    data = model.to_dict()
    del data["R"], data["P0"]
    with pytest.raises(ModelError, match="R, P0"):
        SystemModel.from_dict(data)


# -- plant simulation -----------------------------------------------------------

def test_noise_free_propagation():
    # R must stay positive definite; with Q = 0 the state step is exact
    m = _model(A=[[1.0, 1.0], [0.0, 1.0]], Q=np.zeros((2, 2)), R=1e-12 * np.eye(2))
    x_next, y = simulate_step(np.array([1.0, 1.0]), m, np.random.default_rng(0))
    np.testing.assert_array_equal(x_next, [2.0, 1.0])
    np.testing.assert_allclose(y, [2.0, 1.0], atol=1e-4)


def test_simulate_step_deterministic(model):
    a = simulate_step([1.0, -1.0], model, np.random.default_rng(7))
    b = simulate_step([1.0, -1.0], model, np.random.default_rng(7))
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)


def test_simulate_step_draw_order(model):
    rng = np.random.default_rng(3)
    x, y = simulate_step(np.zeros(2), model, rng)
    z = np.random.default_rng(3).standard_normal(4)
    Lq, Lr = psd_sqrt(model.Q), psd_sqrt(model.R)
    np.testing.assert_allclose(x, Lq @ z[:2])
    np.testing.assert_allclose(y, model.C @ x + Lr @ z[2:])


def test_increment_covariance_identity():
    m = _model()
    rng = np.random.default_rng(11)
    N = 100_000
    x = np.zeros(2)
    inc = np.empty((N, 2))
    for k in range(N):
        x_next, _ = simulate_step(x, m, rng)
        inc[k] = x_next - x
        x = x_next
    cov = np.cov(inc.T)
    # sample variance has SE sqrt(2/N), sample covariance 1/sqrt(N)
    se = np.array([[np.sqrt(2 / N), np.sqrt(1 / N)], [np.sqrt(1 / N), np.sqrt(2 / N)]])
    assert np.all(np.abs(cov - np.eye(2)) < 3 * se)


# -- Kalman filter ----------------------------------------------------------------

def test_predict_from_zero(model):
    s = LocalFilterState(x_pred=np.zeros(2), P_pred=np.zeros((2, 2)), x_post=np.zeros(2), P_post=np.zeros((2, 2)))
    p = kalman_predict(s, model)
    np.testing.assert_array_equal(p.x_pred, [0.0, 0.0])
    np.testing.assert_array_equal(p.P_pred, model.Q)
    assert p.time == 1


def test_first_prediction_formula(model):
    p = kalman_predict(initial_filter_state(model), model)
    A = model.A
    np.testing.assert_allclose(p.P_pred, A @ (0.3 * np.eye(2)) @ A.T + 5 * np.eye(2), atol=1e-15)
    np.testing.assert_allclose(p.x_pred, A @ model.x0_mean)


def test_uninformative_measurement():
    m = _model(R=1e12 * np.eye(2))
    s = kalman_predict(initial_filter_state(m), m)
    u = kalman_update(s, np.array([100.0, -50.0]), m)
    np.testing.assert_allclose(u.x_post, u.x_pred, atol=1e-9)


def test_perfect_measurement():
    m = _model(R=1e-12 * np.eye(2))
    s = kalman_predict(initial_filter_state(m), m)
    y = np.array([3.0, -2.0])
    u = kalman_update(s, y, m)
    assert np.linalg.norm(u.x_post - y) < 1e-6


def test_update_gain_formula(model):
    s = kalman_predict(initial_filter_state(model), model)
    u = kalman_update(s, np.array([1.0, 2.0]), model)
    P, C, R = s.P_pred, model.C, model.R
    K = P @ C.T @ np.linalg.inv(C @ P @ C.T + R)
    np.testing.assert_allclose(u.gain, K, atol=1e-13)
    np.testing.assert_allclose(u.P_post, P - K @ C @ P, atol=1e-12)
    np.testing.assert_array_equal(u.P_post, u.P_post.T)


def _run_filter(model, steps, seed):
    rng = np.random.default_rng(seed)
    x = model.x0_mean + psd_sqrt(model.P0) @ rng.standard_normal(model.n)
    s = initial_filter_state(model)
    out = []
    for _ in range(steps):
        x, y = simulate_step(x, model, rng)
        s = kalman_predict(s, model)
        s = kalman_update(s, y, model)
        out.append(s)
    return out


def test_filter_converges_to_fixed_point(model):
    states = _run_filter(model, 50, 0)
    assert np.max(np.abs(states[-1].P_pred - P_HAT_REF)) < 1e-8


def test_update_reduces_trace(model):
    for s in _run_filter(model, 30, 1):
        assert np.trace(s.P_post) < np.trace(s.P_pred)


def test_covariances_do_not_depend_on_data(model):
    a, b = _run_filter(model, 20, 1), _run_filter(model, 20, 2)
    for s, t in zip(a, b):
        np.testing.assert_array_equal(s.P_pred, t.P_pred)
        np.testing.assert_array_equal(s.P_post, t.P_post)
        assert not np.allclose(s.x_post, t.x_post)


@pytest.mark.parametrize("C", [[[1.0, 1.0], [0.0, 1.3]], [[1.0, 0.0]]])
def test_innovation_covariance_rank_matches_C(C):
    C = np.asarray(C)
    m = SystemModel(A=[[1.0, 1.0], [0.0, 1.0]], C=C, Q=5 * np.eye(2), R=2 * np.eye(C.shape[0]), x0_mean=np.ones(2), P0=0.3 * np.eye(2))
    for s in _run_filter(m, 15, 0):
        w = np.linalg.eigvalsh(s.innovation_covariance())
        assert w.min() >= -1e-10 * w.max()
        assert int(np.sum(w > 1e-10 * w.max())) == m.rank_C


def test_filter_unbiased_and_calibrated(model):
    runs, steps = 10_000, 20
    rng = np.random.default_rng(5)
    states, s = [], initial_filter_state(model)
    for _ in range(steps):
        s = kalman_predict(s, model)
        # covariances are data independent; the update only needs the gain
        s = kalman_update(s, s.x_pred, model)
        states.append(s)
    Lq, Lr, L0 = psd_sqrt(model.Q), psd_sqrt(model.R), psd_sqrt(model.P0)
    x = model.x0_mean + rng.standard_normal((runs, 2)) @ L0.T
    xh = np.tile(model.x0_mean, (runs, 1))
    for s in states:
        x = x @ model.A.T + rng.standard_normal((runs, 2)) @ Lq.T
        y = x @ model.C.T + rng.standard_normal((runs, 2)) @ Lr.T
        xp = xh @ model.A.T
        xh = xp + (y - xp @ model.C.T) @ s.gain.T
    err = x - xh
    se = err.std(axis=0, ddof=1) / np.sqrt(runs)
    assert np.all(np.abs(err.mean(axis=0)) < 4 * se)
    emp = np.trace(np.cov(err.T))
    assert abs(emp - np.trace(states[-1].P_post)) < 0.1 * np.trace(states[-1].P_post)


# -- Riccati ----------------------------------------------------------------------

def test_riccati_reference_values(model, steady):
    np.testing.assert_allclose(steady.P_hat, P_HAT_REF, atol=1e-10)
    np.testing.assert_allclose(steady.P_bar, P_BAR_REF, atol=1e-10)
    assert riccati_residual(steady.P_hat, model) < 1e-8


def test_riccati_posterior_relation(model, steady):
    P, C, R = steady.P_hat, model.C, model.R
    np.testing.assert_allclose(steady.P_bar, P - P @ C.T @ np.linalg.solve(C @ P @ C.T + R, C @ P), atol=1e-12)
    assert np.linalg.eigvalsh(steady.innovation_covariance).min() >= 0


def test_riccati_independent_of_start(model, steady):
    other = solve_riccati(model, P_init=10 * np.eye(2))
    assert np.max(np.abs(other.P_hat - steady.P_hat)) < 1e-8


def test_riccati_zero_dynamics():
    m = SystemModel(A=[[0.0]], C=[[2.0]], Q=[[3.0]], R=[[1.0]], x0_mean=[0.0], P0=[[1.0]])
    np.testing.assert_allclose(solve_riccati(m).P_hat, [[3.0]])


def test_riccati_nonconvergence(model):
    with pytest.raises(RiccatiConvergenceError) as info:
        solve_riccati(model, max_iter=2)
    assert info.value.iterations == 2 and info.value.residual > 0


def test_riccati_trace_monotone(model):
    P = model.Q.copy()
    traces = [np.trace(P)]
    for _ in range(60):
        P = riccati_map(P, model)
        traces.append(np.trace(P))
    d = np.diff(traces)
    assert np.all(d >= -1e-12) or np.all(d <= 1e-12)
    assert abs(traces[-1] - np.trace(P_HAT_REF)) < 1e-8


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=9, max_size=9))
def test_psd_sqrt_reconstructs(entries):
    B = np.array(entries).reshape(3, 3)
    P = B @ B.T
    L = psd_sqrt(P)
    np.testing.assert_allclose(L @ L.T, P, atol=1e-9 * max(1.0, np.abs(P).max()))
