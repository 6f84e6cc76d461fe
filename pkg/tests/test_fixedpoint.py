import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import direct_optimum, random_params, scalar_params
from garchlq.errors import DivergenceError, PreconditionError, UsageError
from garchlq.fixedpoint import (BoundConstants, LQConfig, backward_costate_step, costate_residuals,
                                forward_state_step, inner_fixed_point, measure_damping, proposition1_bound,
                                solve_two_step, theorem1_certificate, tree_value)
from garchlq.mgarch import MarketState, ModelParams, PriceFunction, build_tree, dollar_covariance
from garchlq.presets import desk, theory


def state(s, sigma, q=None, t=1):
    s = np.atleast_1d(np.asarray(s, float))
    sigma = np.atleast_2d(np.asarray(sigma, float))
    p = dollar_covariance(s, sigma)
    st_ = MarketState.from_prices(t, s, sigma)
    return st_ if q is None else MarketState(t, s, sigma, p, float(q))


def test_config_validation():
    with pytest.raises(UsageError):
        LQConfig(1.0, 0.01, 1.0, 3, [0.0])
    with pytest.raises(UsageError):
        LQConfig(0.9, 0.0, 1.0, 3, [0.0])
    with pytest.raises(UsageError):
        LQConfig(0.9, 0.01, -1.0, 3, [0.0])


# --- single-state steps ----------------------------------------------------------------------


def test_forward_step_examples():
    cfg = LQConfig(0.9, 0.01, 1.0, 1, [0.0])
    st1 = state([1.0], [[0.04]], q=1.0)
    assert forward_state_step([0.3], [0.0], st1, cfg)[0] == 0.3
    assert forward_state_step([0.0], [0.01], st1, cfg)[0] == pytest.approx(-1.0, abs=1e-12)


def test_forward_step_dense_elementwise():
    cfg = LQConfig(0.9, 0.02, 1.0, 1, [0.0, 0.0])
    st2 = state([2.0, 5.0], [[0.04, 0.01], [0.01, 0.09]], q=3.0)
    x, lam = np.array([1.0, -2.0]), np.array([0.3, -0.7])
    got = forward_state_step(x, lam, st2, cfg)
    for i in range(2):
        assert got[i] == pytest.approx(x[i] - lam[i] / (0.02 * 3.0 * st2.s[i]), rel=1e-14)


def test_backward_step_examples():
    cfg = LQConfig(0.9, 0.01, 1.0, 1, [0.0])
    st1 = state([1.0], [[0.04]], q=1.0)
    assert backward_costate_step([0.0], [0.0], st1, cfg, mu=[0.01])[0] == pytest.approx(-0.002, abs=1e-15)
    # delta = 0 at the aim portfolio gives a zero costate
    cfg0 = LQConfig(0.0, 0.01, 2.0, 1, [0.0, 0.0])
    st2 = state([2.0, 5.0], [[0.04, 0.01], [0.01, 0.09]])
    mu = np.array([0.01, 0.02])
    aim = np.linalg.solve(st2.p, st2.s * mu) / 2.0
    assert np.abs(backward_costate_step([5.0, 5.0], aim, st2, cfg0, mu)).max() < 1e-14


def test_backward_step_dense_solve():
    cfg = LQConfig(0.95, 0.005, 3.0, 1, [0.0, 0.0])
    st2 = state([2.0, 5.0], [[0.04, 0.01], [0.01, 0.09]], q=2.0)
    mu, e, x = np.array([0.01, 0.02]), np.array([0.1, -0.2]), np.array([1.0, 0.5])
    Pt = 3.0 / (0.005 * 2.0) * st2.p
    Mx = np.eye(2) + Pt @ np.linalg.inv(np.diag(st2.s))
    rhs = 0.95 * e - st2.s * mu + 3.0 * st2.p @ x
    np.testing.assert_allclose(backward_costate_step(e, x, st2, cfg, mu), np.linalg.solve(Mx, rhs), rtol=1e-12)


# --- damping -----------------------------------------------------------------------------------


def test_measure_damping_examples():
    st1 = state([1.0], [[1.0]], q=1.0)
    assert measure_damping(st1, LQConfig(0.9, 0.1, 1.0, 1, [0.0])) == pytest.approx(0.9 / 11, rel=1e-14)
    assert measure_damping(st1, LQConfig(0.0, 0.1, 1.0, 1, [0.0])) == 0.0


def test_measure_damping_svd_oracle():
    st2 = state([2.0, 5.0], [[0.04, 0.01], [0.01, 0.09]], q=2.5)
    cfg = LQConfig(0.97, 0.003, 1.5, 1, [0.0, 0.0])
    Mx = np.eye(2) + (1.5 / (0.003 * 2.5)) * st2.p @ np.diag(1 / st2.s)
    expect = 0.97 * np.linalg.svd(np.linalg.inv(Mx), compute_uv=False).max()
    assert measure_damping(st2, cfg) == pytest.approx(expect, rel=1e-12)


def test_measure_damping_permutation_invariant(rng):
    p = random_params(rng, 3)
    tree = build_tree(p, PriceFunction(), 3, 2, seed=0)
    cfg = LQConfig(0.99, 0.01, 5.0, 3, np.zeros(3))
    perm = [2, 0, 1]
    pp = ModelParams(mu=p.mu[perm], A=p.A[np.ix_(perm, perm)], B=p.B[np.ix_(perm, perm)],
                     C=p.C[np.ix_(perm, perm)], sigma0=p.sigma0[np.ix_(perm, perm)], s0=p.s0[perm])
    tree2 = build_tree(pp, PriceFunction(), 3, 2, seed=0)
    a = max(measure_damping(tree.state(d, i), cfg) for d in range(1, 4) for i in range(2 ** d))
    for d in range(1, 4):
        for i in range(2 ** d):
            s1 = tree.state(d, i)
            s2 = MarketState(d, s1.s[perm], s1.sigma[np.ix_(perm, perm)], s1.p[np.ix_(perm, perm)], s1.q)
            assert measure_damping(s2, cfg) == pytest.approx(measure_damping(s1, cfg), rel=1e-12)
    assert measure_damping(tree, cfg) == pytest.approx(a, rel=1e-14)


def test_positive_definite_sum_lemma():
    """|(A+B)^-1| <= min(|A^-1|, |B^-1|) for SPD A, B (the bounding step behind the damping estimate)."""
    r = np.random.default_rng(0)
    for _ in range(1000):
        n = int(r.integers(1, 6))
        X, Y = r.normal(size=(n, n)), r.normal(size=(n, n))
        A = X @ X.T + 1e-3 * np.eye(n)
        B = Y @ Y.T + 1e-3 * np.eye(n)
        lhs = np.linalg.norm(np.linalg.inv(A + B), 2)
        assert lhs <= min(np.linalg.norm(np.linalg.inv(A), 2), np.linalg.norm(np.linalg.inv(B), 2)) * (1 + 1e-10)


# --- small-epsilon damping bound and its constants -----------------------------------------------


def test_proposition1_bound_examples():
    consts = BoundConstants(chi=1, h_inf=1, s_floor=1, c=1, gamma=1, kappa=2.0, omega=1.0)
    assert proposition1_bound(consts, 0.1) == pytest.approx(0.2 / 0.96, rel=1e-14)
    for eps in (1e-4, 1e-6, 1e-8):
        assert proposition1_bound(consts, eps) / eps == pytest.approx(2.0, rel=1e-6)
    with pytest.raises(PreconditionError):
        proposition1_bound(consts, 0.5)


def test_bound_constants_from_primitives():
    pr = theory()
    consts = BoundConstants.from_model(pr.params, pr.h, pr.chi, pr.gamma)
    assert consts.check()
    assert consts.kappa == pytest.approx(pr.chi * 2.0 / (pr.gamma * 0.25 * pr.params.c_lower), rel=1e-14)
    assert consts.omega == pytest.approx(pr.chi * 2.0 / 0.5, rel=1e-14)
    with pytest.raises(PreconditionError):
        BoundConstants.from_model(pr.params, PriceFunction(), pr.chi, pr.gamma)


def test_proposition1_sweep_on_clamped_paths():
    from garchlq.mgarch import simulate_path
    pr = theory()
    consts = BoundConstants.from_model(pr.params, pr.h, pr.chi, pr.gamma)
    for seed in range(10):
        path = simulate_path(pr.params, pr.h, 50, seed, pr.chi)
        for eps in (1e-3, 1e-2, 1e-1):
            if eps * consts.kappa < 1:
                m = measure_damping(path, LQConfig(0.5, eps, pr.gamma, 50, np.zeros(2))) / 0.5
                assert m <= proposition1_bound(consts, eps)


# --- inner fixed point -------------------------------------------------------------------------


def small_tree(M=2, T=3, n=2, seed=0, **kw):
    pr = desk(n, clamped=True, chi=10.0)
    tree = build_tree(pr.params, pr.h, T, M, seed, pr.chi)
    cfg = LQConfig(kw.get("delta", 0.99), kw.get("epsilon", 0.01), pr.gamma, T, np.zeros(n))
    return tree, cfg


def test_inner_zero_problem():
    p = scalar_params(0.5, 0.3, 0.1, mu=0.0)
    tree = build_tree(p, PriceFunction(), 3, 2, seed=0)
    cfg = LQConfig(0.9, 0.01, 1.0, 3, [0.0])
    xs = [np.zeros((2 ** t, 1)) for t in range(4)]
    traj = inner_fixed_point(tree, xs, cfg)
    assert traj.inner_iterations == 1
    assert all(np.array_equal(l, np.zeros_like(l)) for l in traj.lam)


def test_inner_without_backward_coupling_takes_one_iteration():
    tree, cfg = small_tree(delta=0.0)
    xs = [np.full((2 ** t, 2), 0.3) for t in range(4)]
    assert inner_fixed_point(tree, xs, cfg).inner_iterations == 1


def test_inner_hand_unrolled():
    p = scalar_params(0.5, 0.3, 0.1, mu=0.01, sigma0=0.02, s0=1.0)
    tree = build_tree(p, PriceFunction(), 2, 1, seed=0)
    cfg = LQConfig(0.9, 0.01, 2.0, 2, [0.4])
    x0, x1 = 0.4, 0.7
    traj = inner_fixed_point(tree, [np.array([[x0]]), np.array([[x1]]), np.array([[0.9]])], cfg)
    s = [tree.s[t][0, 0] for t in range(3)]
    P = [tree.p[t][0, 0, 0] for t in range(3)]
    q = [tree.q[t][0] for t in range(3)]
    damp = lambda t: 1 + 2.0 / (0.01 * q[t]) * P[t] / s[t]
    lam2 = (-s[2] * 0.01 + 2.0 * P[2] * x1) / damp(2)
    lam1 = (0.9 * lam2 - s[1] * 0.01 + 2.0 * P[1] * x0) / damp(1)
    assert traj.lam[2][0, 0] == pytest.approx(lam2, rel=1e-12)
    assert traj.lam[1][0, 0] == pytest.approx(lam1, rel=1e-12)
    assert traj.lam[3][0, 0] == 0.0


# --- two-step solver -------------------------------------------------------------------------------


def test_two_step_stationary_start():
    a, b = 0.5, 0.3
    C = np.array([[0.1, 0.0], [0.03, 0.08]])
    A = a * np.eye(2)
    sig = np.linalg.solve(np.eye(4) - np.kron(A, A), (C @ C.T).ravel()).reshape(2, 2)
    mu = np.array([0.01, 0.02])
    p = ModelParams(mu=mu, A=A, B=b * np.eye(2), C=C, sigma0=sig, s0=[1.0, 1.0])
    gamma = 2.0
    # with M = 1 the shocks vanish, sigma0 is the stationary point, and the cap pins prices at s0
    tree = build_tree(p, PriceFunction.clamped(0.1, 1.0), 3, 1, seed=0)
    st1 = tree.state(1, 0)
    aim = np.linalg.solve(st1.p, st1.s * mu) / gamma
    cfg = LQConfig(0.0, 0.01, gamma, 3, aim)
    traj, diag = solve_two_step(tree, cfg)
    for t in range(1, 4):
        np.testing.assert_allclose(traj.x[t][0], aim, rtol=1e-12)
        assert np.abs(traj.lam[t]).max() < 1e-14


def kkt_oracle(tree, cfg):
    """Dense solve of the deterministic (M=1) forward-backward system for n=1.

    Unknowns ``(x_1..x_T, lam_1..lam_T)``; rows are the forward equations
    ``eps q_t s_t (x_t - x_{t-1}) + lam_t = 0`` and the costate equations
    ``lam_t - delta lam_{t+1} - gamma p_t x_t = -s_t mu``.
    """
    T = tree.T
    mu = tree.params.mu[0]
    s = [tree.s[t][0, 0] for t in range(T + 1)]
    p = [tree.p[t][0, 0, 0] for t in range(T + 1)]
    q = [tree.q[t][0] for t in range(T + 1)]
    K = np.zeros((2 * T, 2 * T))
    rhs = np.zeros(2 * T)
    for t in range(1, T + 1):
        i = t - 1
        c = cfg.epsilon * q[t] * s[t]
        K[i, i] = c
        if t > 1:
            K[i, i - 1] = -c
        else:
            rhs[i] = c * cfg.x0[0]
        K[i, T + i] = 1.0
        r = T + i
        K[r, T + i] = 1.0
        if t < T:
            K[r, T + i + 1] = -cfg.delta
        K[r, i] = -cfg.gamma * p[t]
        rhs[r] = -s[t] * mu
    sol = np.linalg.solve(K, rhs)
    return sol[:T], sol[T:]


@pytest.mark.parametrize("T,rel", [(2, 1e-12), (4, 1e-9)])
def test_two_step_matches_dense_kkt(T, rel):
    pr = theory(1)
    tree = build_tree(pr.params, pr.h, T, 1, seed=0, chi=pr.chi)
    cfg = LQConfig(0.99, 0.01, pr.gamma, T, [0.1])
    traj, diag = solve_two_step(tree, cfg, tol=1e-14, max_outer=500)
    xs, lams = kkt_oracle(tree, cfg)
    for t in range(1, T + 1):
        assert traj.x[t][0, 0] == pytest.approx(xs[t - 1], rel=rel, abs=1e-14)
        assert traj.lam[t][0, 0] == pytest.approx(lams[t - 1], rel=100 * rel, abs=1e-14)


def test_two_step_attains_direct_optimum():
    pr = theory(1)
    tree = build_tree(pr.params, pr.h, 3, 2, seed=3, chi=pr.chi)
    cfg = LQConfig(0.99, 0.01, pr.gamma, 3, [0.0])
    traj, _ = solve_two_step(tree, cfg, tol=1e-14, max_outer=500)
    V, *_ = tree_value(tree, traj.x, cfg)
    V_opt, xs = direct_optimum(tree, cfg)
    assert V >= V_opt - 1e-8
    assert abs(V - V_opt) < 1e-8


def test_fixed_point_residuals_and_uniqueness():
    tree, cfg = small_tree(T=4)
    traj, diag = solve_two_step(tree, cfg, tol=1e-12)
    assert diag.converged
    r_fwd, r_back = costate_residuals(tree, traj, cfg)
    assert r_fwd < 1e-12 and r_back < 1e-9
    r = np.random.default_rng(1)
    init = [r.normal(size=l.shape) * 0.1 for l in traj.lam]
    init[-1][:] = 0.0
    traj2, _ = solve_two_step(tree, cfg, tol=1e-12, lam_init=init)
    for t in range(1, 5):
        assert np.abs(traj2.lam[t] - traj.lam[t]).max() < 10 * 1e-12 * max(1.0, np.abs(traj.lam[t]).max())


def test_two_step_rejects_failed_damping_condition():
    # the damping matrix is not symmetric, so widely different prices with strong
    # correlation push its inverse norm past one
    v, rho = np.array([7.25, 0.40]), -0.996
    sig = np.outer(v, v) * np.array([[1, rho], [rho, 1]])
    C = np.linalg.cholesky(0.5 * sig)
    p = ModelParams(mu=[0.0, 0.0], A=0.5 * np.eye(2), B=0.1 * np.eye(2), C=C, sigma0=sig, s0=[0.037, 18.4])
    tree = build_tree(p, PriceFunction.clamped(1e-3, 1e3), 2, 1, seed=0)
    q1 = float(tree.q[1][0])
    cfg = LQConfig(0.99, 0.01, 15.0 * 0.01 * q1, 2, np.zeros(2))
    assert measure_damping(tree, cfg) >= 1.0
    with pytest.raises(PreconditionError):
        solve_two_step(tree, cfg)
    solve_two_step(tree, cfg, require_damping=False, max_outer=5, stop_on_tol=False)


def test_two_step_horizon_mismatch():
    tree, cfg = small_tree(T=2)
    with pytest.raises(UsageError):
        solve_two_step(tree, cfg.replace(T=3))


def test_two_step_divergence_carries_trace():
    # a measured damping below one does not by itself guarantee convergence of the outer loop
    pr = desk(2)
    tree = build_tree(pr.params, pr.h, 6, 2, seed=0)
    cfg = LQConfig(0.99, 1e-3, pr.gamma * 100, 6, np.zeros(2))
    with pytest.raises(DivergenceError) as info:
        solve_two_step(tree, cfg, max_outer=300)
    assert len(info.value.trace) > 10
    assert info.value.delta_eps == pytest.approx(measure_damping(tree, cfg))
    assert info.value.delta_eps < 1.0


def test_stop_reason_reported():
    tree, cfg = small_tree(T=3)
    _, d1 = solve_two_step(tree, cfg, tol=1e-8)
    assert d1.stop_reason in ("tol", "exact") and d1.converged
    _, d2 = solve_two_step(tree, cfg, tol=0.0, max_outer=2)
    assert d2.stop_reason == "k_max" and d2.outer_iterations == 2


# --- convergence certificate -------------------------------------------------------------------


def test_certificate_single_period():
    tree, cfg = small_tree(T=1)
    rep = theorem1_certificate(tree, cfg)
    assert all(e == 0.0 for e in rep.errors[1:])
    assert rep.passed


def test_certificate_desk_tree():
    tree, cfg = small_tree(T=5, seed=0)
    rep = theorem1_certificate(tree, cfg)
    assert rep.passed, (rep.offending_k, rep.offending_value)
    assert max(rep.relative_errors()[5:]) < 1e-10
    consts = BoundConstants.from_model(tree.params, tree.h, tree.chi, cfg.gamma, rep.delta_eps)
    assert consts.check() and rep.omega == consts.omega


def test_certificate_reports_offending_k():
    tree, cfg = small_tree(T=5, seed=0)
    rep = theorem1_certificate(tree, cfg, rel_tol=1e-30)
    assert not rep.passed and rep.offending_k is not None and rep.offending_k >= 5
