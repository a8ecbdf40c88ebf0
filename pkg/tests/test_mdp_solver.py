import itertools
import warnings

import numpy as np
import pytest

from etcest.etc_scheme import chi2_cdf
from etcest.mdp_solver import (
    DegeneracyError,
    FiniteMdp,
    MdpConfig,
    StationaryPolicy,
    ValueFn,
    ValueIterationError,
    average_cost,
    bellman_backup,
    build_mdp,
    extract_degenerate_policy,
    policy_evaluation,
    policy_transition,
    q_values,
    reachable_states,
    stationary_distribution,
    value_iteration,
)
from etcest.remote_estimator import beta, silence_sums

SMALL = dict(M=3, zeta=0.5, delta_max=5.0, alpha=0.95)


@pytest.fixture(scope="module")
def table_mdp(steady, model):
    return build_mdp(MdpConfig(kappa=5.0), steady, model.A)


@pytest.fixture(scope="module")
def small_mdp(steady, model):
    return build_mdp(MdpConfig(kappa=5.0, **SMALL), steady, model.A)


# -- configuration -----------------------------------------------------------------------

def test_default_lattice():
    cfg = MdpConfig()
    assert cfg.N == 100
    np.testing.assert_allclose(cfg.controls, 0.1 * np.arange(1, 101))
    assert cfg.controls[5] == 0.6  # rounded, no floating residue


@pytest.mark.parametrize(
    "kw", [{"alpha": 1.0}, {"zeta": 0.0}, {"delta_max": -1}, {"kappa": -1.0}, {"M": -1}, {"n": 0}, {"boundary": "wrap"}]
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        MdpConfig(**kw)


# -- kernel and costs ---------------------------------------------------------------------

def test_transitions_from_transmission_state(table_mdp):
    n = 2
    d = table_mdp.controls
    for d_idx in (0, 37, 99):
        for u_idx in (0, 8, 99):
            succ = {(tp, du): p for tp, du, p, _ in table_mdp.successors(0, d_idx, u_idx)}
            assert succ[(1, u_idx)] == pytest.approx(chi2_cdf(n, d[u_idx]), abs=1e-15)
            assert succ[(0, u_idx)] == pytest.approx(1 - chi2_cdf(n, d[u_idx]), abs=1e-15)
            assert len(succ) == 2


def test_silence_probability_later_states(table_mdp):
    d = table_mdp.controls
    for tp in (1, 3, 5):
        for d_idx, u_idx in ((9, 9), (9, 3), (50, 0)):
            expected = chi2_cdf((tp + 1) * 2, d[u_idx]) / chi2_cdf(tp * 2, d[d_idx])
            assert table_mdp.p_silence[tp, d_idx, u_idx] == pytest.approx(expected, rel=1e-12)


def test_increasing_control_inadmissible(table_mdp):
    # tau_plus = 2, delta = 1, u = 2
    d_idx, u_idx = 9, 19
    assert table_mdp.controls[d_idx] == 1.0 and table_mdp.controls[u_idx] == 2.0
    assert not table_mdp.admissible[2, d_idx, u_idx]
    assert table_mdp.successors(2, d_idx, u_idx) == []
    assert np.isinf(table_mdp.g[2, d_idx, u_idx])
    assert np.all(table_mdp.admissible[0])


def test_kernel_rows_sum_to_one(table_mdp):
    worst = 0.0
    for u in range(table_mdp.N):
        P = table_mdp.kernel(u)
        adm = table_mdp.admissible[:, :, u].reshape(-1)
        worst = max(worst, np.max(np.abs(P.sum(axis=1)[adm] - 1.0)))
        assert np.all(P.sum(axis=1)[~adm] == 0)
        # every successor carries the chosen control as its threshold coordinate
        cols = np.nonzero(P.sum(axis=0))[0]
        assert np.all(cols % table_mdp.N == u)
    assert worst <= 1e-10


def test_stage_costs(table_mdp, steady, model):
    M = table_mdp.M
    tr_bar = np.trace(steady.P_bar)
    S = silence_sums(steady.P_hat, steady.P_bar, model.A, M + 1)
    assert table_mdp.cost_transmit == pytest.approx(tr_bar + 5.0)
    for tp, u_idx in ((0, 4), (2, 30), (M - 1, 0)):
        u = table_mdp.controls[u_idx]
        expected = tr_bar + beta(tp + 1, u, 2) * np.trace(S[tp + 1])
        assert table_mdp.cost_silence[tp, u_idx] == pytest.approx(expected, rel=1e-12)
    finite = table_mdp.g[table_mdp.admissible]
    assert np.all(np.isfinite(finite))
    assert finite.max() <= max(table_mdp.cost_transmit, table_mdp.cost_silence.max()) + 1e-9


def test_boundary_variants(steady, model):
    t = build_mdp(MdpConfig(kappa=5.0, boundary="transmit", **SMALL), steady, model.A)
    s = build_mdp(MdpConfig(kappa=5.0, boundary="self_loop", **SMALL), steady, model.A)
    M = SMALL["M"]
    assert np.all(t.p_silence[M] == 0)
    assert s.next_tau[M] == M
    d = s.controls
    assert s.p_silence[M, 5, 2] == pytest.approx(chi2_cdf((M + 1) * 2, d[2]) / chi2_cdf(M * 2, d[5]))
    np.testing.assert_array_equal(t.p_silence[:M], s.p_silence[:M])


def test_with_kappa_matches_rebuild(small_mdp, steady, model):
    a = small_mdp.with_kappa(20.0)
    b = build_mdp(MdpConfig(kappa=20.0, **SMALL), steady, model.A)
    np.testing.assert_allclose(a.g, b.g)
    assert a.config.kappa == 20.0
    assert small_mdp.with_alpha(0.5).config.alpha == 0.5


# -- Bellman operator ---------------------------------------------------------------------

def test_myopic_backup(small_mdp):
    J0 = np.zeros(small_mdp.g.shape[:2])
    J1, pol = bellman_backup(J0, small_mdp, alpha=0.0)
    np.testing.assert_allclose(J1.values, small_mdp.g.min(axis=-1))
    np.testing.assert_array_equal(pol.action, np.argmin(small_mdp.g, axis=-1))


def test_backup_is_contraction(small_mdp):
    rng = np.random.default_rng(0)
    alpha = small_mdp.config.alpha
    shape = small_mdp.g.shape[:2]
    for _ in range(100):
        J1 = rng.uniform(0, 300, shape)
        J2 = J1 + rng.normal(0, rng.uniform(0.1, 50), shape)
        a, _ = bellman_backup(J1, small_mdp)
        b, _ = bellman_backup(J2, small_mdp)
        assert a.sup_distance(b) <= alpha * np.max(np.abs(J1 - J2)) * (1 + 1e-12)


def test_single_action_backup_is_linear():
    rng = np.random.default_rng(1)
    P = rng.dirichlet(np.ones(4), size=(4, 1))
    g = rng.uniform(0, 1, (4, 1))
    mdp = FiniteMdp(P=P, g=g, admissible=np.ones((4, 1), bool), alpha=0.8)
    J1, J2 = rng.normal(size=4), rng.normal(size=4)
    T = lambda J: bellman_backup(J, mdp)[0].values  # noqa: E731
    np.testing.assert_allclose(T(J1) - T(J2), 0.8 * P[:, 0] @ (J1 - J2), atol=1e-12)


def test_backup_never_selects_inadmissible(table_mdp):
    rng = np.random.default_rng(2)
    J = rng.uniform(0, 1e4, table_mdp.g.shape[:2])
    _, pol = bellman_backup(J, table_mdp)
    tp, d = np.meshgrid(range(table_mdp.M + 1), range(table_mdp.N), indexing="ij")
    assert np.all(table_mdp.admissible[tp, d, pol.action])


def test_ties_break_to_smallest_control():
    P = np.zeros((1, 3, 1))
    P[:, :, 0] = 1.0
    mdp = FiniteMdp(P=P, g=np.array([[2.0, 1.0, 1.0]]), admissible=np.ones((1, 3), bool), alpha=0.5)
    _, pol = bellman_backup(np.zeros(1), mdp)
    assert pol.action[0] == 1


def _two_state_mdp():
    P = np.array(
        [
            [[0.9, 0.1], [0.2, 0.8]],
            [[0.5, 0.5], [0.0, 1.0]],
        ]
    )
    g = np.array([[1.0, 2.0], [3.0, 0.5]])
    return FiniteMdp(P=P, g=g, admissible=np.ones((2, 2), bool), alpha=0.9)


def test_two_state_mdp_exact():
    mdp = _two_state_mdp()
    # exact optimum: best of the four deterministic policies by linear solve
    best = None
    for a in itertools.product(range(2), repeat=2):
        Pm = np.array([mdp.P[s, a[s]] for s in range(2)])
        gm = np.array([mdp.g[s, a[s]] for s in range(2)])
        J = np.linalg.solve(np.eye(2) - 0.9 * Pm, gm)
        best = J if best is None else np.minimum(best, J)
    res = value_iteration(mdp, tol=1e-10)
    np.testing.assert_allclose(res.J.values, best, atol=1e-9)
    assert res.bellman_residual < 1e-9


# -- value iteration -------------------------------------------------------------------------

def test_value_iteration_stopping_guarantee(small_mdp):
    res = value_iteration(small_mdp, tol=1e-6)
    exact = policy_evaluation(small_mdp, res.policy)
    assert np.max(np.abs(res.J.values - exact.values)) < 1e-6
    J, pol, iters = res
    assert iters == res.iterations and J is res.J


def test_value_iteration_nonconvergence(small_mdp):
    with pytest.raises(ValueIterationError) as info:
        value_iteration(small_mdp, max_iter=3)
    assert info.value.iterations == 3 and info.value.residual > 0


def test_gauss_seidel_same_fixed_point(small_mdp):
    a = value_iteration(small_mdp, tol=1e-8)
    b = value_iteration(small_mdp, tol=1e-8, in_place=True)
    np.testing.assert_allclose(a.J.values, b.J.values, atol=1e-7)
    np.testing.assert_array_equal(a.policy.action, b.policy.action)
    assert b.iterations <= a.iterations


def test_dense_cross_check(small_mdp):
    lattice = value_iteration(small_mdp, tol=1e-8)
    dense = value_iteration(small_mdp.to_finite(), tol=1e-8)
    np.testing.assert_allclose(dense.J.values, lattice.J.values.reshape(-1), atol=1e-7)
    np.testing.assert_array_equal(dense.policy.action, lattice.policy.action.reshape(-1))


def test_free_communication_transmits_maximally(steady, model):
    mdp = build_mdp(MdpConfig(kappa=0.0, **SMALL), steady, model.A)
    res = value_iteration(mdp, tol=1e-8)
    assert np.all(res.policy.action == 0)
    # no fixed admissible policy does better
    N = mdp.N
    for u in range(N):
        action = np.zeros((mdp.M + 1, N), dtype=int)
        action[0] = u
        action[1:] = np.minimum(u, np.arange(N))[None, :]
        Jp = policy_evaluation(mdp, StationaryPolicy(action, mdp.controls))
        assert np.all(res.J.values <= Jp.values + 1e-6)


def test_policy_transition_rejects_inadmissible(small_mdp):
    action = np.full((small_mdp.M + 1, small_mdp.N), small_mdp.N - 1)
    with pytest.raises(ValueError, match="inadmissible"):
        policy_transition(small_mdp, StationaryPolicy(action, small_mdp.controls))


def test_policy_json_round_trip(small_mdp):
    pol = value_iteration(small_mdp).policy
    back = StationaryPolicy.from_dict(pol.to_dict())
    np.testing.assert_array_equal(back.action, pol.action)
    np.testing.assert_array_equal(back.controls, pol.controls)
    with pytest.raises(ValueError):
        StationaryPolicy.from_dict({"action": [[0, 5]], "controls": [1.0, 2.0]})


# -- degenerate policy --------------------------------------------------------------------------

def test_degenerate_policy_benchmark(solve):
    mdp, res = solve(5.0)
    assert np.unique(res.policy.action[0]).size == 1
    chain = extract_degenerate_policy(res.policy, mdp)
    assert chain == (0.9, 0.6, 0.4, 0.3, 0.2, 0.1, 0.1)
    assert res.bellman_residual < 1e-6


def test_degeneracy_violation_detected(small_mdp):
    pol = value_iteration(small_mdp).policy
    action = pol.action.copy()
    action[0, 1] = (action[0, 0] + 1) % small_mdp.N
    with pytest.raises(DegeneracyError):
        extract_degenerate_policy(StationaryPolicy(action, pol.controls), small_mdp)


def test_degeneracy_violation_in_chain(small_mdp):
    # mu(0, .) constant but two reachable thresholds at tau_plus = 2
    N = small_mdp.N
    action = np.zeros((small_mdp.M + 1, N), dtype=int)
    action[0] = 5
    action[1] = np.minimum(np.arange(N), 3)
    action[1, 5] = 4
    action[2] = np.minimum(np.arange(N), 2)
    pol = StationaryPolicy(action, small_mdp.controls)
    # state (1, 5) is reached; its successor is (2, 4); a second chain via (1, 3) is not reachable
    assert extract_degenerate_policy(pol, small_mdp)[:3] == (3.0, 2.5, 1.5)
    action[0, :] = 5
    action[3] = np.minimum(np.arange(N), 1)
    pol2 = StationaryPolicy(action, small_mdp.controls)
    reach = reachable_states(small_mdp, pol2)
    assert all(d == 4 for tp, d in reach if tp == 2)


def test_policy_and_costs_monotone_in_kappa(solve):
    chains, J, lam = [], [], []
    for k in (5.0, 20.0, 35.0):
        mdp, res = solve(k)
        chain = extract_degenerate_policy(res.policy, mdp)
        assert all(a >= b for a, b in zip(chain, chain[1:]))
        chains.append(chain)
        J.append(res.J.values[0, 0])
        lam.append((1 - mdp.config.alpha) * res.J.values[0, 0])
    for lo, hi in zip(chains, chains[1:]):
        assert all(a <= b for a, b in zip(lo, hi))
    assert J == sorted(J) and lam == sorted(lam)


# -- average cost -----------------------------------------------------------------------------

def test_average_cost_single_state():
    mdp = FiniteMdp(P=np.ones((1, 1, 1)), g=np.array([[3.5]]), admissible=np.ones((1, 1), bool), alpha=0.9)
    res = average_cost(mdp, alphas=(0.9, 0.99, 0.999), vi_tol=1e-9)
    np.testing.assert_allclose(res.per_alpha, 3.5, atol=1e-9)
    assert res.lambda_hat == pytest.approx(3.5, abs=1e-9)
    assert res.spread == 0.0 and res.warnings == ()


def test_average_cost_small_lattice(small_mdp):
    res = average_cost(small_mdp, alphas=(0.9, 0.95, 0.99), warm_start=True)
    cold = average_cost(small_mdp, alphas=(0.9, 0.95, 0.99), warm_start=False)
    assert res.lambda_hat == pytest.approx(cold.lambda_hat, abs=1e-6)
    assert res.spread < 0.1
    # the average cost of the optimal chain is the stationary mean of its stage cost
    pol = value_iteration(small_mdp.with_alpha(0.99), tol=1e-8).policy
    P, g = policy_transition(small_mdp, pol)
    pi = stationary_distribution(small_mdp, pol).reshape(-1)
    np.testing.assert_allclose(pi @ P, pi, atol=1e-10)
    assert abs(pi @ g - res.lambda_hat) < 0.02 * res.lambda_hat


def test_average_cost_warnings_and_errors(small_mdp):
    with pytest.raises(ValueError):
        average_cost(small_mdp, alphas=())
    with pytest.raises(ValueError):
        average_cost(small_mdp, alphas=(0.9, 0.8))
    with pytest.raises(ValueError):
        average_cost(small_mdp, alphas=(0.9, 1.0))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = average_cost(small_mdp, alphas=(0.1, 0.2), tol=1e-6)
    assert res.warnings and any("varies" in str(w.message) for w in caught)


def test_q_values_shape(small_mdp):
    q = q_values(ValueFn(np.zeros(small_mdp.g.shape[:2])), small_mdp)
    assert q.shape == small_mdp.g.shape
    assert np.all(np.isinf(q[~small_mdp.admissible]))
