import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nlcs import classical as cl
from nlcs.classical import SolverConfig, SolverState, TransformD
from nlcs.sampling import init_gaussian, measurements_for_rate
from nlcs.training import psnr
from oracles import brute_nlm, dct_sparse_block


def random_state(rng, blk=8, m=32):
    phi = rng.normal(size=(m, blk * blk)) / blk
    b = rng.normal(size=m)
    s = SolverState(*(rng.normal(size=(blk, blk)) for _ in range(5)), lam=rng.normal(size=m))
    return s, phi, b


# -- NLM weights ------------------------------------------------------------


def test_nlm_constant_image_uniform_over_window():
    W = cl.nlm_weights(np.full((8, 8), 0.3), h=0.1, search_radius=2).toarray()
    for i in range(64):
        row = W[i][W[i] > 0]
        np.testing.assert_allclose(row, 1.0 / row.size, atol=1e-15)
    # interior pixel sees the full 5x5 window, corner a 3x3 quarter
    assert np.count_nonzero(W[3 * 8 + 3]) == 25
    assert np.count_nonzero(W[0]) == 9


def test_nlm_small_h_concentrates_on_self():
    u = np.random.default_rng(0).random((8, 8))
    W = cl.nlm_weights(u, h=1e-4).toarray()
    assert np.all(np.diag(W) > 0.999)


def test_nlm_matches_brute_force_random():
    rng = np.random.default_rng(1)
    for _ in range(5):
        u = rng.random((8, 8))
        h, sr = rng.uniform(0.05, 2), int(rng.integers(1, 6))
        got = cl.nlm_weights(u, h, sr, 1).toarray()
        assert np.max(np.abs(got - brute_nlm(u, h, sr, 1))) < 1e-12


def test_nlm_rejects_nonpositive_h():
    with pytest.raises(ValueError):
        cl.nlm_weights(np.zeros((4, 4)), h=0)


@settings(max_examples=20, deadline=None)
@given(st.integers(3, 10), st.integers(1, 4), st.floats(0.01, 5), st.integers(0, 2**31 - 1))
def test_nlm_row_stochastic_and_window_support(size, sr, h, seed):
    u = np.random.default_rng(seed).random((size, size))
    W = cl.nlm_weights(u, h, sr).toarray()
    np.testing.assert_allclose(W.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(W >= 0)
    yi, xi = np.divmod(np.arange(size * size), size)
    outside = (np.abs(yi[:, None] - yi[None]) > sr) | (np.abs(xi[:, None] - xi[None]) > sr)
    assert not W[outside].any()


# -- soft threshold / omega -------------------------------------------------


def test_soft_threshold_examples():
    assert cl.soft_threshold(2.0, 0.5) == 1.5
    assert cl.soft_threshold(-3.0, 1.0) == -2.0
    np.testing.assert_array_equal(cl.soft_threshold(np.array([-0.4, 0.0, 0.5]), 0.5), 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 3))
def test_soft_threshold_properties(seed, tau):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=20) * 3, rng.normal(size=20) * 3
    sa = cl.soft_threshold(a, tau)
    assert np.linalg.norm(sa - cl.soft_threshold(b, tau)) <= np.linalg.norm(a - b) + 1e-12
    np.testing.assert_array_equal(cl.soft_threshold(-a, tau), -sa)
    assert np.all(np.abs(sa) <= np.abs(a))
    assert not sa[np.abs(a) <= tau].any()


def test_transform_orthonormal():
    D = TransformD(8).matrix()
    np.testing.assert_allclose(D.T @ D, np.eye(64), atol=1e-10)
    u = np.random.default_rng(2).normal(size=(8, 8))
    np.testing.assert_allclose(TransformD(8).adjoint(TransformD(8).forward(u)), u, atol=1e-12)


def test_update_omega_zero_state():
    s = SolverState.initial(np.zeros((4, 64)), np.zeros(4))
    assert not cl.update_omega(s, TransformD(8), SolverConfig()).any()


def test_update_omega_large_beta_vanishing_threshold():
    rng = np.random.default_rng(3)
    s, _, _ = random_state(rng)
    D = TransformD(8)
    out = cl.update_omega(s, D, SolverConfig(beta=1e9))
    np.testing.assert_allclose(out, D.forward(s.u) - s.v / 1e9, atol=2e-9)


def test_update_omega_composition_exact():
    rng = np.random.default_rng(4)
    s, _, _ = random_state(rng)
    cfg = SolverConfig(beta=2.5)
    D = TransformD(8)
    ref = cl.soft_threshold(D.forward(s.u) - s.v / 2.5, 1 / 2.5)
    np.testing.assert_array_equal(cl.update_omega(s, D, cfg), ref)


def test_threshold_rule_switch():
    assert SolverConfig(beta=4).tau == 0.25
    assert SolverConfig(beta=4, threshold="beta").tau == 4


def test_omega_update_minimizes_lagrangian():
    rng = np.random.default_rng(5)
    s, phi, b = random_state(rng)
    cfg, D = SolverConfig(beta=1.7, alpha=0.0), TransformD(8)
    s.omega = cl.update_omega(s, D, cfg)
    base = cl.augmented_lagrangian(s, D, phi, b, None, cfg)
    for _ in range(50):
        t = s.copy()
        t.omega = s.omega + 1e-3 * rng.normal(size=s.omega.shape)
        assert cl.augmented_lagrangian(t, D, phi, b, None, cfg) >= base - 1e-12


# -- u step -----------------------------------------------------------------


def test_update_u_zero_step_is_identity():
    rng = np.random.default_rng(6)
    s, phi, b = random_state(rng)
    out = cl.update_u(s, s.omega, TransformD(8), phi, b, SolverConfig(step=1e-300))
    np.testing.assert_array_equal(out, s.u)


def test_update_u_fixed_point():
    # with every multiplier and split variable consistent, d vanishes
    rng = np.random.default_rng(7)
    D = TransformD(8)
    u = rng.normal(size=(8, 8))
    phi = rng.normal(size=(32, 64)) / 8
    s = SolverState(omega=D.forward(u), u=u, x=u.copy(), v=np.zeros((8, 8)),
                    gamma=np.zeros((8, 8)), lam=np.zeros(32))
    out = cl.update_u(s, s.omega, D, phi, phi @ u.ravel(), SolverConfig())
    np.testing.assert_allclose(out, u, atol=1e-14)


def test_u_direction_is_gradient_of_lagrangian():
    rng = np.random.default_rng(8)
    s, phi, b = random_state(rng)
    cfg, D = SolverConfig(beta=1.3, theta=0.7, mu=2.1), TransformD(8)
    d = cl.u_direction(s, s.omega, D, phi, b, cfg)
    fd = np.zeros_like(s.u)
    eps = 1e-5
    for i in range(s.u.size):
        t1, t2 = s.copy(), s.copy()
        t1.u.flat[i] += eps
        t2.u.flat[i] -= eps
        fd.flat[i] = (cl.augmented_lagrangian(t1, D, phi, b, None, cfg)
                      - cl.augmented_lagrangian(t2, D, phi, b, None, cfg)) / (2 * eps)
    rel = np.abs(d - fd) / np.maximum(np.maximum(np.abs(d), np.abs(fd)), 1e-8)
    assert rel.max() < 1e-6


# -- x step -----------------------------------------------------------------


def test_update_x_alpha_zero():
    rng = np.random.default_rng(9)
    u, g = rng.normal(size=(2, 6, 6))
    cfg = SolverConfig(alpha=0.0, beta=2.0)
    np.testing.assert_array_equal(cl.update_x(u, g, None, cfg), u - g / 2.0)


def test_update_x_identity_weights():
    rng = np.random.default_rng(10)
    u, g = rng.normal(size=(2, 6, 6))
    import scipy.sparse as sp
    out = cl.update_x(u, g, sp.identity(36, format="csr"), SolverConfig(alpha=0.7))
    np.testing.assert_allclose(out, u - g, atol=1e-15)


def test_update_x_constant_image():
    rng = np.random.default_rng(11)
    W = cl.nlm_weights(rng.random((6, 6)), h=0.3)
    out = cl.update_x(np.full((6, 6), 0.4), np.zeros((6, 6)), W, SolverConfig(alpha=2.0))
    np.testing.assert_allclose(out, 0.4, atol=1e-15)


def test_update_x_stationary_point_of_its_quadratic():
    rng = np.random.default_rng(12)
    u, g = rng.normal(size=(2, 8, 8))
    cfg = SolverConfig(alpha=0.6, theta=1.4, beta=1.2)
    W = cl.nlm_weights(rng.random((8, 8)), h=0.5)
    r = u - g / cfg.beta
    wr = (W @ r.ravel()).reshape(r.shape)

    def q(x):
        return 0.5 * cfg.theta * np.sum((x - r) ** 2) + cfg.alpha * np.sum((x - wr) ** 2)

    x = cl.update_x(u, g, W, cfg)
    for _ in range(100):
        assert q(x + 1e-3 * rng.normal(size=x.shape)) >= q(x)


# -- multipliers ------------------------------------------------------------


def test_multipliers_unchanged_when_feasible():
    rng = np.random.default_rng(13)
    D = TransformD(8)
    u = rng.normal(size=(8, 8))
    phi = rng.normal(size=(16, 64))
    s = SolverState(omega=D.forward(u), u=u, x=u.copy(), v=rng.normal(size=(8, 8)),
                    gamma=rng.normal(size=(8, 8)), lam=rng.normal(size=16))
    v, g, lam = cl.update_multipliers(s, D, phi, phi @ u.ravel(), SolverConfig())
    np.testing.assert_allclose(v, s.v, atol=1e-13)
    np.testing.assert_array_equal(g, s.gamma)
    np.testing.assert_allclose(lam, s.lam, atol=1e-13)


def test_multipliers_random_match_definition():
    rng = np.random.default_rng(14)
    s, phi, b = random_state(rng)
    cfg, D = SolverConfig(beta=1.5, theta=0.5, mu=3.0), TransformD(8)
    v, g, lam = cl.update_multipliers(s, D, phi, b, cfg)
    np.testing.assert_array_equal(v, s.v - 1.5 * (D.forward(s.u) - s.omega))
    np.testing.assert_array_equal(g, s.gamma - 0.5 * (s.u - s.x))
    np.testing.assert_array_equal(lam, s.lam - 3.0 * (phi @ s.u.ravel() - b))


# -- config -----------------------------------------------------------------


@pytest.mark.parametrize("kw", [{"beta": 0}, {"h": -1}, {"step": 0}, {"tol": 0},
                                {"search_radius": 0}, {"patch_radius": 0},
                                {"alpha": -0.1}, {"threshold": "half"}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SolverConfig(**kw)


# -- solve ------------------------------------------------------------------


def test_solve_recovers_dct_sparse_block():
    rng = np.random.default_rng(15)
    u = dct_sparse_block(rng)
    phi = init_gaussian(measurements_for_rate(0.5, 64), 64, seed=1).phi
    rep = cl.solve(phi @ u.ravel(), phi, SolverConfig(alpha=0.0))
    peak = max(np.ptp(u), 1e-12)
    assert psnr(u / peak, rep.u / peak) >= 40


def test_solve_identity_sampling():
    b = np.random.default_rng(16).random(64)
    rep = cl.solve(b, np.eye(64), SolverConfig(alpha=0.0, tol=1e-10, outer_iters=5000))
    assert rep.outer_iterations < 5000
    assert np.max(np.abs(rep.u.ravel() - b)) < 1e-6


def test_solve_reports_objective_and_residuals():
    rng = np.random.default_rng(17)
    u = dct_sparse_block(rng)
    phi = init_gaussian(32, 64, seed=2).phi
    rep = cl.solve(phi @ u.ravel(), phi, SolverConfig(alpha=0.05))
    assert len(rep.objective) == rep.outer_iterations + 1 == len(rep.residuals)
    first, last = rep.residuals[0], rep.residuals[-1]
    for key in ("measurement", "transform", "split"):
        assert last[key] < first[key]


def test_solve_detects_divergence():
    rng = np.random.default_rng(18)
    phi = init_gaussian(32, 64, seed=3).phi
    with pytest.raises(cl.SolverDivergence) as info:
        cl.solve(phi @ rng.random(64), phi, SolverConfig(alpha=0.0, step=3.0))
    assert len(info.value.objective) >= 2


def test_solve_rejects_inconsistent_b():
    with pytest.raises(ValueError):
        cl.solve(np.ones(5), np.ones((4, 16)))
