import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from saddlekit.bench.problems import analytic_dimer_problem
from saddlekit.covariance import Dense
from saddlekit.dimer import (
    DimerParams,
    DimerState,
    adapt_dimer_length,
    dimer_residual,
    dimer_rotate,
    dimer_translate,
    handoff,
    handoff_ratio,
    householder_basis,
    hvp_estimate,
    hvp_from_members,
    run_dimer_batch,
)
from saddlekit.errors import ContractError
from saddlekit.potentials import AnalyticDoubleWell, ConstantField, QuadraticDemo, StochasticForceOracle
from saddlekit.potentials.analytic import DEFAULT_A, DEFAULT_K

SADDLE = np.array([0.0, DEFAULT_A])
H_SADDLE = np.diag([-4.0, 15.0])


def oracle_for(pot, S, m=1.0, seed=0):
    return StochasticForceOracle(pot, ConstantField(Dense(np.asarray(S, dtype=float))), m, seed)


def random_spd(rng, d, cond=50.0):
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return Q @ np.diag(np.exp(rng.uniform(0, math.log(cond), d))) @ Q.T


unit_vectors = st.integers(2, 12).flatmap(
    lambda d: st.lists(st.floats(-1, 1, allow_nan=False), min_size=d, max_size=d)
).filter(lambda v: np.linalg.norm(v) > 1e-3)


# --- state and params -------------------------------------------------------


def test_params_validation():
    with pytest.raises(ContractError):
        DimerParams(theta_max=2.0)
    with pytest.raises(ContractError):
        DimerParams(alpha=0.0)
    with pytest.raises(ContractError):
        DimerParams(variant="cg")
    with pytest.raises(ContractError):
        DimerParams(h=1.0, h_max=0.5)
    assert DimerParams().rho_beta == pytest.approx(0.018 / 0.035)


def test_state_normalizes_direction():
    s = DimerState([0.0, 0.0], [3.0, 4.0], 0.1)
    assert np.linalg.norm(s.v) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ContractError):
        DimerState([0.0], [0.0], 0.1)
    with pytest.raises(ContractError):
        DimerState([0.0], [1.0], 0.0)


@given(unit_vectors)
@settings(max_examples=60, deadline=None)
def test_householder_basis_orthonormal_complement(v):
    v = np.asarray(v) / np.linalg.norm(v)
    B = householder_basis(v)
    assert B.shape == (v.size, v.size - 1)
    np.testing.assert_allclose(B.T @ B, np.eye(v.size - 1), atol=1e-12)
    np.testing.assert_allclose(B.T @ v, 0.0, atol=1e-12)


# --- HVP --------------------------------------------------------------------


def test_hvp_on_double_well_has_quartic_bias():
    pot = AnalyticDoubleWell()
    h = 0.055
    Hv, S = hvp_estimate(oracle_for(pot, np.zeros((2, 2)), m=0.0), SADDLE, [1.0, 0.0], h, (0, 0))
    expected = -4.0 + 4.0 * h * h * (1.0 + DEFAULT_K * DEFAULT_A**2)
    assert Hv[0] == pytest.approx(expected, abs=1e-12)
    assert Hv[0] == pytest.approx(-3.975, abs=5e-4)
    assert Hv[1] == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("h", [1e-3, 0.1, 2.0])
def test_hvp_exact_on_quadratic(h):
    rng = np.random.default_rng(0)
    A = rng.standard_normal((4, 4))
    pot = QuadraticDemo(A + A.T)
    v = rng.standard_normal(4)
    v /= np.linalg.norm(v)
    x = rng.standard_normal(4)
    Hv, _ = hvp_estimate(oracle_for(pot, np.zeros((4, 4)), m=0.0), x, v, h, (0, 0))
    np.testing.assert_allclose(Hv, pot.H @ v, atol=1e-10)


def test_hvp_covariance_isotropic_and_cross_term():
    pot = QuadraticDemo(H_SADDLE)
    s2, h = 0.3, 0.05
    orc = oracle_for(pot, s2 * np.eye(2))
    _, S = hvp_estimate(orc, [0.1, 0.2], [1.0, 0.0], h, (0, 0))
    np.testing.assert_allclose(S.S, s2 * np.eye(2) / (2 * h * h), rtol=1e-12)
    C = 0.1 * np.eye(2)
    _, Sc = hvp_estimate(orc, [0.1, 0.2], [1.0, 0.0], h, (0, 0), cross=C)
    np.testing.assert_allclose(Sc.S, (s2 - 0.1) * np.eye(2) / (2 * h * h), rtol=1e-12)
    with pytest.raises(ContractError):
        hvp_estimate(orc, [0.0, 0.0], [1.0, 0.0], 0.0, (0, 0))


def test_hvp_variance_law_monte_carlo():
    pot = QuadraticDemo(H_SADDLE)
    s2, h = 0.2, 0.05
    orc = oracle_for(pot, s2 * np.eye(2))
    samples = np.array([hvp_estimate(orc, [0.1, 0.2], [0.6, 0.8], h, (0, k))[0] for k in range(10_000)])
    emp = np.cov(samples.T)
    pred = s2 * np.eye(2) / (2 * h * h)
    assert np.linalg.norm(emp - pred) / np.linalg.norm(pred) < 0.10
    np.testing.assert_allclose(samples.mean(axis=0), H_SADDLE @ [0.6, 0.8], atol=4 * math.sqrt(pred[0, 0] / 1e4))


def test_member_route_matches_force_route():
    # M members with independent endpoint errors: the member covariance of the
    # paired differences estimates the force-route formula.
    rng = np.random.default_rng(3)
    d, M, h = 3, 4000, 0.1
    Sp, Sm = random_spd(rng, d, 5.0), random_spd(rng, d, 5.0)
    Lp, Lm = np.linalg.cholesky(Sp), np.linalg.cholesky(Sm)
    base_p, base_m = rng.standard_normal(d), rng.standard_normal(d)
    Fp = base_p + rng.standard_normal((M, d)) @ Lp.T
    Fm = base_m + rng.standard_normal((M, d)) @ Lm.T
    mean, S = hvp_from_members(Fp, Fm, h)
    pred = (Sp + Sm) / (4 * h * h)
    assert np.linalg.norm(S.S - pred) / np.linalg.norm(pred) < 0.10
    np.testing.assert_allclose(mean, -(Fp.mean(0) - Fm.mean(0)) / (2 * h), atol=1e-12)
    with pytest.raises(ContractError):
        hvp_from_members(Fp[:1], Fm[:1], h)


# --- dimer length -----------------------------------------------------------


def test_adapt_length_examples():
    p = DimerParams(eta_H=1.0)
    st_ = DimerState([0.0, 0.0], [1.0, 0.0], 0.05)
    Hv = np.array([-4.0, 2.0])
    assert adapt_dimer_length(st_, Hv, np.zeros((2, 2)), p) == (0.05, False)
    # tangent noise 16 vs signal 4: ratio 4, one doubling gives 1
    S = np.diag([0.0, 16.0])
    assert adapt_dimer_length(st_, Hv, S, p) == (pytest.approx(0.1), False)
    # ratio 64: needs 3 doublings but h_max = 0.2 allows 2
    p2 = DimerParams(eta_H=1.0, h_max=0.2)
    h, fb = adapt_dimer_length(st_, Hv, 16 * S, p2)
    assert h == pytest.approx(0.2) and fb


def test_adapt_length_h_minus_two_law():
    pot = QuadraticDemo(H_SADDLE)
    orc = oracle_for(pot, 0.05 * np.eye(2))
    x, v = np.array([0.0, 0.0]), np.array([0.8, 0.6])
    P = np.eye(2) - np.outer(v, v)
    noise = []
    for h in (0.05, 0.1):
        _, S = hvp_estimate(orc, x, v, h, (0, 0))
        noise.append(np.trace(P @ S.S @ P))
    assert noise[0] / noise[1] == pytest.approx(4.0, rel=1e-12)


# --- rotation ---------------------------------------------------------------


def test_rotate_eigenvector_fixed():
    p = DimerParams()
    st_ = DimerState([0.0, 0.0], [1.0, 0.0], 0.05)
    v = dimer_rotate(st_, H_SADDLE @ st_.v, np.zeros((2, 2)), p)
    np.testing.assert_allclose(v, [1.0, 0.0], atol=1e-15)


@pytest.mark.parametrize("variant", ["std", "ua"])
def test_rotate_converges_to_lowest_mode(variant):
    p = DimerParams(variant=variant)
    v = np.array([1.0, 1.0]) / math.sqrt(2)
    for _ in range(200):
        v = dimer_rotate(DimerState([0.0, 0.0], v, 0.05), H_SADDLE @ v, np.zeros((2, 2)), p)
    assert math.acos(min(1.0, abs(v[0]))) < 1e-6


def test_rotate_isotropic_reduction():
    rng = np.random.default_rng(1)
    d, s2 = 5, 0.7
    v = rng.standard_normal(d)
    v /= np.linalg.norm(v)
    Hv = rng.standard_normal(d)
    st_ = DimerState(np.zeros(d), v, 0.05)
    pu = DimerParams(variant="ua", normalize_trace=False, theta_max=1.5)
    beta_eff = pu.beta / (s2 + pu.lam_H)
    ps = DimerParams(variant="std", beta=beta_eff, theta_max=1.5)
    np.testing.assert_allclose(
        dimer_rotate(st_, Hv, s2 * np.eye(d), pu), dimer_rotate(st_, Hv, np.zeros((d, d)), ps), atol=1e-14
    )


def test_rotate_fallback_uses_projector():
    rng = np.random.default_rng(2)
    v = np.array([0.6, 0.8, 0.0])
    Hv = rng.standard_normal(3)
    S = random_spd(rng, 3)
    st_ = DimerState(np.zeros(3), v, 0.05)
    a = dimer_rotate(st_, Hv, S, DimerParams(variant="ua"), fallback=True)
    b = dimer_rotate(st_, Hv, S, DimerParams(variant="std"))
    np.testing.assert_allclose(a, b, atol=1e-15)


@given(
    st.integers(2, 8),
    st.integers(0, 2**31 - 1),
    st.floats(0.01, 1.5),
    st.floats(1e-3, 50.0),
    st.sampled_from(["std", "ua"]),
)
@settings(max_examples=80, deadline=None)
def test_rotation_unit_norm_and_trust_angle(d, seed, theta_max, beta, variant):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(d)
    v /= np.linalg.norm(v)
    Hv = 10 * rng.standard_normal(d)
    S = random_spd(rng, d, 1e3)
    p = DimerParams(beta=beta, theta_max=theta_max, variant=variant)
    vn = dimer_rotate(DimerState(np.zeros(d), v, 0.05), Hv, S, p)
    assert abs(np.linalg.norm(vn) - 1.0) <= 1e-12
    angle = math.acos(min(1.0, float(v @ vn)))
    assert angle <= theta_max + 1e-12


# --- translation ------------------------------------------------------------


@pytest.mark.parametrize("variant", ["std", "ua"])
def test_translate_zero_force_zero_step(variant):
    st_ = DimerState([0.3, -0.2], [1.0, 0.0], 0.05)
    x = dimer_translate(st_, np.zeros(2), 0.4 * np.eye(2) + 0.1, DimerParams(variant=variant))
    np.testing.assert_array_equal(x, st_.x)


def test_translate_zero_covariance_reduces_to_reflected_gradient():
    rng = np.random.default_rng(4)
    d = 4
    v = rng.standard_normal(d)
    v /= np.linalg.norm(v)
    F = 0.01 * rng.standard_normal(d)
    st_ = DimerState(np.zeros(d), v, 0.05)
    p = DimerParams(variant="ua", normalize_trace=False, trust_radius=10.0)
    step = dimer_translate(st_, F, np.zeros((d, d)), p)
    classical = F - 2 * v * (v @ F)
    np.testing.assert_allclose(step, p.alpha * classical / p.lam, rtol=1e-12)


def test_translate_trust_radius_cap():
    st_ = DimerState([0.0, 0.0], [1.0, 0.0], 0.05)
    p = DimerParams(variant="std")
    x = dimer_translate(st_, np.array([100.0, 100.0]), np.zeros((2, 2)), p)
    assert np.linalg.norm(x) == pytest.approx(p.trust_radius, rel=1e-12)


def test_translate_quadratic_converges_to_saddle():
    pot = QuadraticDemo(H_SADDLE)
    p = DimerParams(variant="std", trust_radius=1.0)
    x = np.array([0.1, 0.1])
    for _ in range(400):
        x = dimer_translate(DimerState(x, [1.0, 0.0], 0.05), -pot.gradient(x), np.zeros((2, 2)), p)
    assert np.linalg.norm(x) < 1e-8


def test_zero_set_preservation():
    rng = np.random.default_rng(5)
    for _ in range(100):
        d = int(rng.integers(2, 9))
        G = random_spd(rng, d, 100.0)
        v = rng.standard_normal(d)
        v /= np.linalg.norm(v)
        g = rng.standard_normal(d)
        out = G @ (-g + 2 * v * (v @ g))
        lmin = np.linalg.eigvalsh(G)[0]
        assert np.linalg.norm(out) >= lmin * np.linalg.norm(g) * (1 - 1e-12)
        assert np.linalg.norm(G @ (-0 * g)) == 0.0


# --- residual ---------------------------------------------------------------


def test_residual_at_saddle():
    assert dimer_residual(SADDLE, [1.0, 0.0], AnalyticDoubleWell()) <= 1e-8


def test_residual_sign_symmetry_and_minimum():
    pot = AnalyticDoubleWell()
    x, v = np.array([0.2, 0.4]), np.array([0.6, -0.8])
    assert dimer_residual(x, v, pot) == pytest.approx(dimer_residual(x, -v, pot), rel=1e-12)
    xm = pot.minima[0]
    w, V = np.linalg.eigh(pot.hessian(xm))
    assert dimer_residual(xm, V[:, 1], pot) <= 1e-12


# --- handoff ----------------------------------------------------------------


def test_handoff_zero_residual_accepts_and_trust_rule():
    pot = QuadraticDemo(H_SADDLE)
    images = np.array([[-0.05, 0.0], [0.0, 0.0], [0.05, 0.0]])
    orc = oracle_for(pot, 0.01 * np.eye(2), m=0.0)
    ok, state, trust = handoff(images, 1, orc, DimerParams(eta_hand=1e-6), neb_trust_radius=0.028)
    assert ok
    assert trust == pytest.approx(0.028)
    np.testing.assert_allclose(state.x, [0.0, 0.0])
    assert abs(state.v[0]) == pytest.approx(1.0)
    _, _, trust2 = handoff(images, 1, orc, DimerParams(), neb_trust_radius=0.5)
    assert trust2 == pytest.approx(0.1)
    with pytest.raises(ContractError):
        handoff(images, 0, orc, DimerParams(), neb_trust_radius=0.028)


def test_handoff_probe_trace_matches_dense():
    rng = np.random.default_rng(6)
    d = 6
    G, S = random_spd(rng, d, 20.0), random_spd(rng, d, 20.0)
    g, tau = rng.standard_normal(d), rng.standard_normal(d)
    dense = handoff_ratio(g, tau, G, S)
    probed = handoff_ratio(g, tau, G, S, probes=256, seed=0)
    assert abs(probed / dense - 1.0) < 0.15


# --- full pipeline ----------------------------------------------------------


def test_deterministic_pipeline_reaches_saddle():
    prob = analytic_dimer_problem(noise_multiplier=0.0)
    out = {}
    for variant in ("std", "ua"):
        res = run_dimer_batch(prob, DimerParams(variant=variant), [0], 260)
        out[variant] = res
        assert res.distance[0, -1] <= 1e-4
        assert res.oracle_calls == 3 * 260
    np.testing.assert_allclose(out["std"].final_x, out["ua"].final_x, atol=1e-12)


def test_batch_seeds_are_independent_of_batch_composition():
    prob = analytic_dimer_problem()
    p = DimerParams()
    both = run_dimer_batch(prob, p, [3, 7], 30)
    single = run_dimer_batch(prob, p, [7], 30)
    np.testing.assert_array_equal(both.final_x[1], single.final_x[0])


def test_adaptive_length_in_batch_grows_h():
    prob = analytic_dimer_problem(noise_multiplier=3.0)
    res = run_dimer_batch(prob, DimerParams(eta_H=0.5), [0, 1], 5)
    assert np.all(res.h_trace >= DimerParams().h)
    assert np.all(res.h_trace <= DimerParams().h_max)
