import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import linalg

from oracles import condition_gaussian, enumerate_inference, gaussian_logpdf, joint_linear_gaussian
from simulate import nondividend_private_panel, regime_private_panel
from reqreturn.bayes_var import NiwPrior, niw_posterior
from reqreturn.exceptions import ConsistencyError, DataError, MissingCovariatesError, NumericalError
from reqreturn.private_valuation import (
    PrivateDesign,
    PrivatePanel,
    PrivateRsModel,
    StateSpaceModel,
    bayes_private_posterior,
    build_private_prior,
    em_private,
    em_step,
    expected_complete_loglik,
    implied_required_return,
    initial_state_space,
    kalman_filter,
    kalman_forecast,
    kalman_smoother,
    private_inference,
    rs_private_em,
    rs_private_ml,
    smoothed_market_value,
)
from reqreturn.private_valuation import em as em_mod


# panel --------------------------------------------------------------------------


def test_panel_growth_and_dividend_ratio():
    B = np.array([[10.0, 5.0], [11.0, 5.5], [12.1, 5.0]])
    d = np.array([[0.5, 0.0], [0.0, 0.0]])
    panel = PrivatePanel(["a", "b"], [0, 1, 2], B, d)
    np.testing.assert_allclose(panel.growth_rates, [[0.1, 0.1], [0.1, -5.0 / 55.0]], rtol=1e-14)
    np.testing.assert_allclose(panel.dividend_to_book, [[0.05, 0.0], [0.0, 0.0]])
    assert panel.dividend_payer_count == 1
    assert panel.check_growth()


def test_panel_rejects_bad_inputs():
    with pytest.raises(DataError):
        PrivatePanel(["a"], [0, 1], [[1.0], [0.0]])
    with pytest.raises(DataError):
        PrivatePanel(["a"], [0, 1], [[1.0], [2.0]], [[-1.0]])
    with pytest.raises(DataError, match="first"):
        PrivatePanel(["a", "b"], [0, 1], [[1.0, 1.0], [2.0, 2.0]], [[0.0, 1.0]])


def test_payers_first_reorders_stably():
    B = np.ones((2, 3))
    d = np.array([[0.0, 1.0, 2.0]])
    panel = PrivatePanel.payers_first(["a", "b", "c"], [0, 1], B, d)
    assert panel.company_ids == ("b", "c", "a")
    assert panel.dividend_payer_count == 2


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_growth_consistency_random(seed):
    rng = np.random.default_rng(seed)
    B = np.exp(rng.normal(size=(6, 3)))
    panel = PrivatePanel(list("abc"), list(range(6)), B)
    np.testing.assert_allclose((1 + panel.growth_rates) * B[:-1], B[1:], rtol=1e-12)


# regime-weighted ML -------------------------------------------------------------


def hand_panel():
    # b = (0.03, 0.01, 0.02), Delta = (0.01, 0.02, 0.03)
    b = np.array([0.03, 0.01, 0.02])
    delta = np.array([0.01, 0.02, 0.03])
    B = np.concatenate([[1.0], np.cumprod(1 + b)])
    return PrivatePanel(["c"], [0, 1, 2, 3], B[:, None], (delta * B[:-1])[:, None])


def test_rs_private_ml_hand_instance():
    r, A, Pi, sigma, _ = rs_private_ml(hand_panel().design(), np.ones(3))
    assert r[0] == pytest.approx(0.5, abs=1e-10)
    assert A[0, 0] == pytest.approx(0.03, abs=1e-12)
    assert sigma[0, 0] == pytest.approx(5e-5, rel=1e-9)
    # scalar conditional form at the fixed point
    b, delta = np.array([0.03, 0.01, 0.02]), np.array([0.01, 0.02, 0.03])
    assert -np.sum(delta * (b - A[0, 0])) / np.sum(delta**2) == pytest.approx(r[0], abs=1e-10)


def test_rs_private_ml_non_payers():
    rng = np.random.default_rng(0)
    T = 60
    b = rng.normal(0.02, 0.05, size=T)
    B = np.concatenate([[1.0], np.cumprod(1 + b)])
    design = PrivatePanel(["a"], list(range(T + 1)), B[:, None]).design()
    r, A, Pi, sigma, _ = rs_private_ml(design, np.ones(T))
    assert r.shape == (0,) and Pi.shape == (0, 1)
    assert A[0, 0] == pytest.approx(b.mean(), abs=1e-14)
    assert sigma[0, 0] == pytest.approx(np.var(b), rel=1e-12)


def test_rs_private_ml_single_regime_recovery():
    panel, _ = regime_private_panel(1000, [0.5], [0.02], [0.005], np.ones((1, 1)), seed=11)
    r, A, _, _, sweeps = rs_private_ml(panel.design(), np.ones(1000))
    assert abs(r[0] - 0.5) < 0.05 and abs(A[0, 0] - 0.02) < 0.05
    assert sweeps < 200


def test_rs_private_ml_weighted_objective_is_maximized():
    rng = np.random.default_rng(4)
    T = 80
    b = rng.normal(0.02, 0.03, size=(T, 2))
    B = np.concatenate([np.ones((1, 2)), np.cumprod(1 + b, axis=0)])
    d = np.zeros((T, 2))
    d[:, 0] = rng.uniform(0.0, 0.05, size=T) * B[:-1, 0]
    x = rng.normal(size=(T + 1, 1))
    panel = PrivatePanel(["a", "b"], list(range(T + 1)), B, d, covariates=x[1:])
    design = panel.design(1)
    w = rng.uniform(0.1, 1.0, size=design.n_periods)
    params = rs_private_ml(design, w)[:4]
    base = em_mod_weighted(design, w, params)
    for _ in range(30):
        bumped = [p + 1e-3 * rng.normal(size=np.shape(p)) for p in params[:3]] + [params[3]]
        assert em_mod_weighted(design, w, bumped) <= base + 1e-8


def em_mod_weighted(design, w, params):
    from reqreturn.private_valuation.regime import weighted_objective

    return weighted_objective(design, w, params)


# regime EM ----------------------------------------------------------------------


def test_rs_private_em_single_regime_equals_ml():
    panel, _ = regime_private_panel(200, [0.5], [0.02], [0.01], np.ones((1, 1)), seed=3)
    res = rs_private_em(panel, 1)
    r, A, Pi, sigma, _ = rs_private_ml(panel.design(), np.ones(200))
    np.testing.assert_allclose(res.model.book_to_price[0], r, atol=1e-9)
    np.testing.assert_allclose(res.model.A0k[0], A, atol=1e-9)
    np.testing.assert_allclose(res.model.covariances[0], sigma, atol=1e-12)


def test_rs_private_em_two_regime_recovery():
    P = np.array([[0.95, 0.05], [0.1, 0.9]])
    panel, _ = regime_private_panel(2000, [0.4, 0.6], [0.03, 0.01], [0.01, 0.01], P, seed=1)
    res = rs_private_em(panel, 2)
    assert res.converged
    np.testing.assert_allclose(res.model.book_to_price[:, 0], [0.4, 0.6], atol=0.08)
    np.testing.assert_allclose(np.diag(res.model.transition), np.diag(P), atol=0.05)
    assert np.diff(res.trace).min() > -1e-8


def independent_log_densities(model, design):
    N, T = model.n_regimes, design.n_periods
    out = np.empty((N, T))
    for j in range(N):
        for t in range(T):
            u = design.growth[:, t] - model.A0k[j] @ design.psi[:, t]
            u[: design.n_payers] += model.book_to_price[j] * design.dividend_to_book[: design.n_payers, t]
            out[j, t] = gaussian_logpdf(u, np.zeros_like(u), model.covariances[j])
    return out


@pytest.mark.parametrize("seed", range(5))
def test_rs_private_em_short_sample_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    delta = rng.uniform(0.01, 0.05, size=3)
    b = 0.02 - 0.5 * delta + 1e-3 * rng.normal(size=3)
    B = np.concatenate([[1.0], np.cumprod(1 + b)])
    panel = PrivatePanel(["c"], [0, 1, 2, 3], B[:, None], (delta * B[:-1])[:, None])
    model = PrivateRsModel(
        rng.uniform(0.3, 0.8, size=(2, 1)),
        rng.normal(0.02, 0.01, size=(2, 1, 1)),
        np.zeros((2, 0, 1)),
        rng.uniform(0.001, 0.01, size=(2, 1, 1)),
        np.array([[0.8, 0.2], [0.3, 0.7]]),
        np.array([0.5, 0.5]),
    )
    for m in (model, rs_private_em(panel, 2, init=model, max_iter=5).model):
        inf = private_inference(m, panel.design())
        dens = np.exp(independent_log_densities(m, panel.design()))
        ref = enumerate_inference(dens, m.transition, m.initial_probs)
        assert inf.log_likelihood == pytest.approx(ref["log_likelihood"], abs=1e-10)
        np.testing.assert_allclose(inf.smoothed, ref["smoothed"], atol=1e-12)


def test_private_rs_model_round_trip_and_validation():
    model = PrivateRsModel(
        np.array([[0.5]]), np.array([[[0.02]]]), np.zeros((1, 0, 1)), np.array([[[1e-4]]]), np.ones((1, 1)), [1.0]
    )
    again = PrivateRsModel.from_dict(model.to_dict())
    np.testing.assert_array_equal(again.book_to_price, model.book_to_price)
    np.testing.assert_allclose(model.price_to_book, [[2.0]])
    with pytest.raises(NumericalError):
        PrivateRsModel(np.array([[-0.5]]), model.A0k, model.Pix, model.covariances, np.ones((1, 1)), [1.0])


# Bayesian variant ---------------------------------------------------------------


def test_bayes_private_scalar_instance():
    # b = (1, 2, 3), Delta = (1, 1, 1), no exogenous regressors
    b = np.array([1.0, 2.0, 3.0])
    B = np.concatenate([[1.0], np.cumprod(1 + b)])
    panel = PrivatePanel(["c"], [0, 1, 2, 3], B[:, None], B[:-1, None], exogenous=np.zeros((3, 0)))
    prior = NiwPrior.from_shrinkage([[0.0]], [1.0], 3.0, [[1.0]])
    post = bayes_private_posterior(panel, prior)
    assert post.location[0, 0] == pytest.approx(1.5, abs=1e-15)
    assert post.scale[0, 0] == pytest.approx(6.0, abs=1e-14)
    assert post.dof == 7.0
    assert post.point_sigma[0, 0] == pytest.approx(1.2, abs=1e-14)
    # the same numbers through the prior builder
    design = panel.design()
    built = build_private_prior(design, lambda1=1.0, nu0=3.0, V0=[[1.0]])
    post2 = bayes_private_posterior(design, built)
    assert post2.location[0, 0] == pytest.approx(1.5, abs=1e-15)


def test_bayes_private_diffuse_is_ols():
    rng = np.random.default_rng(2)
    T = 50
    b = rng.normal(0.02, 0.05, size=(T, 2))
    B = np.concatenate([np.ones((1, 2)), np.cumprod(1 + b, axis=0)])
    d = np.zeros((T, 2))
    d[:, 0] = rng.uniform(0.01, 0.05, size=T) * B[:-1, 0]
    x = rng.normal(size=(T, 1))
    design = PrivatePanel(["a", "b"], list(range(T + 1)), B, d, covariates=x).design(1)
    post = bayes_private_posterior(design, diffuse=True)
    y = np.vstack([design.growth, design.x])
    W = np.vstack([design.dividend_to_book[:1], design.X])
    ols = y @ W.T @ np.linalg.inv(W @ W.T)
    keep = [0, 2, 3]
    np.testing.assert_allclose(post.location[:, keep], ols, atol=1e-10)
    np.testing.assert_allclose(post.location[:, 1], 0.0, atol=1e-12)


def test_bayes_private_prior_pattern():
    rng = np.random.default_rng(5)
    T = 40
    B = np.concatenate([np.ones((1, 2)), np.cumprod(1 + rng.normal(0.02, 0.05, size=(T, 2)), axis=0)])
    d = np.zeros((T, 2))
    d[:, 0] = 0.02 * B[:-1, 0]
    x = rng.normal(size=(T, 2))
    design = PrivatePanel(["a", "b"], list(range(T + 1)), B, d, covariates=x).design(2)
    prior = build_private_prior(
        design, r_prior=[0.5], A0k_prior=[[0.01], [0.02]], delta=[0.9, 0.8], sigma2=[1.0, 2.0], lambda2=0.04
    )
    loc = prior.location
    assert loc.shape == (4, 2 + 1 + 4)
    assert loc[0, 0] == -0.5 and loc[1, 1] == 0.0
    np.testing.assert_array_equal(loc[:2, 2], [0.01, 0.02])
    assert loc[2, 3] == 0.9 and loc[3, 4] == 0.8
    assert np.count_nonzero(loc) == 5
    lam0 = 1.0 / np.diag(prior.precision)
    np.testing.assert_allclose(lam0[:3], 25.0)
    np.testing.assert_allclose(lam0[3:], [0.04, 0.02, 0.01, 0.005])


def test_bayes_private_no_data_returns_prior():
    empty = PrivateDesign(
        growth=np.zeros((1, 0)),
        log_growth=np.zeros((1, 0)),
        dividend_to_book=np.zeros((1, 0)),
        psi=np.zeros((1, 0)),
        x=np.zeros((0, 0)),
        X=np.zeros((1, 0)),
        books=np.ones((1, 1)),
        n_payers=1,
    )
    prior = NiwPrior.from_shrinkage([[-0.4, 0.02]], [2.0, 3.0], 4.0, [[0.1]])
    post = bayes_private_posterior(empty, prior)
    np.testing.assert_allclose(post.location, prior.location, rtol=1e-14, atol=0)
    assert post.dof == prior.dof + 2
    np.testing.assert_allclose(post.scale, prior.scale, rtol=1e-14, atol=1e-16)


# state-space model --------------------------------------------------------------


def random_spd(rng, n, scale=1.0):
    a = rng.normal(size=(n, n))
    return scale * (a @ a.T + 0.3 * np.eye(n))


def random_state_space(rng, n, q, ell, mode, T, p=0):
    """Random model and a matching design; dimensions small enough for the joint oracle."""
    l = 1
    T_full = T + p
    B = np.exp(np.cumsum(np.vstack([np.zeros((1, n)), rng.normal(0.02, 0.05, size=(T_full, n))]), axis=0))
    d = None
    if mode == "dividend":
        d = rng.uniform(0.01, 0.05, size=(T_full, n)) * B[:-1]
    x = rng.normal(size=(T_full, ell)) if ell else None
    panel = PrivatePanel([f"c{i}" for i in range(n)], list(range(T_full + 1)), B, d, covariates=x)
    design = panel.design(p)
    k = l + ell * p
    model = StateSpaceModel(
        mode,
        rng.normal(0, 0.4, size=(n, n * q)),
        rng.normal(0, 0.3, size=(n, k)),
        rng.normal(0, 0.3, size=(ell, k)),
        rng.normal(0.02, 0.01, size=(n, l)),
        random_spd(rng, n + ell, 0.1),
        random_spd(rng, n, 0.2),
        rng.normal(1.0, 0.2, size=n),
        random_spd(rng, n, 0.3),
        p,
    )
    return model, panel, design


def independent_system(model, design):
    """Measurement map built element by element."""
    n, ell = model.n_companies, model.n_covariates
    qbar = max(model.state_lag, 2)
    s = n * qbar
    Hs, cs = [], []
    for t in range(design.n_periods):
        H = np.zeros((n + ell, s))
        c = np.zeros(n + ell)
        for i in range(n):
            drift = float(model.A0k[i] @ design.psi[:, t])
            if model.mode == "dividend":
                H[i, i] = -(1 + design.growth[i, t])
                H[i, n + i] = 1 + drift
            else:
                H[i, i] = -1.0
                H[i, n + i] = 1.0
                c[i] = drift
        c[n:] = model.Pix @ design.X[:, t]
        Hs.append(H)
        cs.append(c)
    A = np.zeros((s, s))
    A[:n, : n * model.state_lag] = model.Phi
    for b in range(1, qbar):
        A[b * n : (b + 1) * n, (b - 1) * n : b * n] = np.eye(n)
    Q = np.zeros((s, s))
    Q[:n, :n] = model.Sigma_ww
    offsets = [np.concatenate([model.Pim @ design.X[:, t], np.zeros(s - n)]) for t in range(design.n_periods)]
    z0 = np.tile(model.mu0, qbar)
    P0 = linalg.block_diag(*([model.Sigma0] * qbar))
    y = np.vstack([design.dividend_to_book if model.mode == "dividend" else design.log_growth, design.x]).T
    return z0, P0, A, Q, Hs, cs, offsets, y


def joint_reference(model, design):
    z0, P0, A, Q, Hs, cs, offsets, y = independent_system(model, design)
    mean, cov = joint_linear_gaussian(z0, P0, A, Q, Hs, cs, model.Sigma_xi, offsets)
    return mean, cov, y, len(z0)


def conditional(mean, cov, y, s, T, upto):
    d = y.shape[1]
    base = s * (T + 1)
    obs = np.concatenate([base + t * d + np.arange(d) for t in range(upto)]) if upto else np.array([], dtype=int)
    if upto == 0:
        return mean[:base], cov[:base, :base]
    _, m, C = condition_gaussian(mean, cov, obs, y[:upto].ravel())
    return m[:base], C[:base, :base]


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 100_000),
    n=st.integers(1, 2),
    q=st.integers(1, 2),
    T=st.integers(1, 4),
    ell=st.integers(0, 1),
    mode=st.sampled_from(["dividend", "non-dividend"]),
)
def test_kalman_matches_joint_gaussian(seed, n, q, T, ell, mode):
    rng = np.random.default_rng(seed)
    model, panel, design = random_state_space(rng, n, q, ell, mode, T)
    traj = kalman_smoother(kalman_filter(model, panel), model)
    mean, cov, y, s = joint_reference(model, design)
    blk = lambda t: slice(t * s, (t + 1) * s)  # noqa: E731
    for t in range(T + 1):
        m, C = conditional(mean, cov, y, s, T, t)
        np.testing.assert_allclose(traj.filtered_mean[t], m[blk(t)], atol=1e-9)
        np.testing.assert_allclose(traj.filtered_cov[t], C[blk(t), blk(t)], atol=1e-9)
        if t:
            m_pred, C_pred = conditional(mean, cov, y, s, T, t - 1)
            np.testing.assert_allclose(traj.predicted_mean[t - 1], m_pred[blk(t)], atol=1e-9)
            np.testing.assert_allclose(traj.predicted_cov[t - 1], C_pred[blk(t), blk(t)], atol=1e-9)
            gap = traj.predicted_cov[t - 1] - traj.filtered_cov[t]
            assert np.linalg.eigvalsh(gap)[0] >= -1e-10
    m, C = conditional(mean, cov, y, s, T, T)
    for t in range(T + 1):
        np.testing.assert_allclose(traj.smoothed_mean[t], m[blk(t)], atol=1e-9)
        np.testing.assert_allclose(traj.smoothed_cov[t], C[blk(t), blk(t)], atol=1e-9)
        assert np.abs(traj.smoothed_cov[t] - traj.smoothed_cov[t].T).max() <= 1e-10
        if t:
            np.testing.assert_allclose(traj.cross_cov[t - 1], C[blk(t - 1), blk(t)], atol=1e-9)
            ref = C[blk(t - 1), blk(t)] + np.outer(m[blk(t - 1)], m[blk(t)])
            np.testing.assert_allclose(traj.cross_moment(t), ref, atol=1e-9)
            np.testing.assert_allclose(
                traj.cross_moment(t),
                traj.smoother_gains[t - 1] @ traj.smoothed_cov[t] + np.outer(m[blk(t - 1)], m[blk(t)]),
                atol=1e-9,
            )
    for t in range(T + 1):
        np.testing.assert_allclose(
            traj.second_moment(t), C[blk(t), blk(t)] + np.outer(m[blk(t)], m[blk(t)]), atol=1e-9
        )
    # observed-data likelihood from the joint marginal of y
    base = s * (T + 1)
    ll = gaussian_logpdf(y.ravel(), mean[base:], cov[base:, base:])
    assert traj.log_likelihood == pytest.approx(ll, abs=1e-9)
    np.testing.assert_array_equal(traj.smoothed_mean[T], traj.filtered_mean[T])
    np.testing.assert_array_equal(traj.smoothed_cov[T], traj.filtered_cov[T])


def test_system_matrices_structure():
    rng = np.random.default_rng(1)
    model, _, _ = random_state_space(rng, 2, 3, 1, "dividend", 3)
    A = model.companion
    np.testing.assert_array_equal(A[:2], model.Phi)
    np.testing.assert_array_equal(A[2:4, :2], np.eye(2))
    np.testing.assert_array_equal(A[4:6, 2:4], np.eye(2))
    assert np.count_nonzero(A[2:]) == 4
    S = model.Sigma_eta
    np.testing.assert_array_equal(S[:2, :2], model.Sigma_ww)
    assert np.count_nonzero(S[2:]) == 0 and np.count_nonzero(S[:, 2:]) == 0
    np.testing.assert_array_equal(model.J_m, np.eye(2, 6))


def scalar_nondividend(A0k=0.01, phi=1.0, sww=0.0, sxi=1e-12, mu0=0.0, s0=1.0, Pim=0.0):
    return StateSpaceModel(
        "non-dividend", [[phi]], [[Pim]], np.zeros((0, 1)), [[A0k]], [[sxi]], [[sww]], [mu0], [[s0]]
    )


def test_noiseless_inversion():
    rng = np.random.default_rng(0)
    T = 30
    bt = rng.normal(0.02, 0.05, size=T)
    B = np.concatenate([[1.0], np.exp(np.cumsum(bt))])
    panel = PrivatePanel(["c"], list(range(T + 1)), B[:, None])
    A0k = 0.01
    model = StateSpaceModel(
        "non-dividend", [[0.9]], [[0.0]], np.zeros((0, 1)), [[A0k]], [[1e-14]], [[0.01]], [0.0], [[1e-16]]
    )
    traj = kalman_filter(model, panel)
    m = np.zeros(T + 1)
    for t in range(1, T + 1):
        m[t] = m[t - 1] + A0k - math.log1p(panel.growth_rates[t - 1, 0])
    np.testing.assert_allclose(traj.filtered_mean[:, 0], m, atol=1e-8)


def test_rigid_state_precision_weighted_mean():
    # flat books and Phi = 1, Sigma_ww = 0: Delta_t = A0k m + u_t with m constant
    T = 4
    delta = np.array([0.02, 0.05, 0.01, 0.03])
    panel = PrivatePanel(["c"], list(range(T + 1)), np.ones((T + 1, 1)), delta[:, None])
    m0, s0, sxi, h = 1.2, 0.5, 0.3, 0.04
    model = StateSpaceModel("dividend", [[1.0]], [[0.0]], np.zeros((0, 1)), [[h]], [[sxi]], [[0.0]], [m0], [[s0]])
    traj = kalman_smoother(kalman_filter(model, panel), model)
    for t in range(T + 1):
        prec = 1 / s0 + t * h * h / sxi
        mean = (m0 / s0 + h * delta[:t].sum() / sxi) / prec
        assert traj.filtered_mean[t, 0] == pytest.approx(mean, abs=1e-12)
        assert traj.filtered_cov[t][0, 0] == pytest.approx(1 / prec, abs=1e-12)
    np.testing.assert_allclose(traj.smoothed_mean[:, 0], traj.filtered_mean[T, 0], atol=1e-12)


def scalar_forecast_model(a, sw, s0):
    return StateSpaceModel(
        "non-dividend", [[a]], [[0.0]], np.zeros((0, 1)), [[0.0]], [[0.1]], [[sw]], [0.0], [[s0]]
    )


def test_forecast_empty_and_missing_inputs():
    panel, _ = nondividend_private_panel(10, seed=0)
    model = scalar_forecast_model(0.5, 0.1, 1.0)
    traj = kalman_filter(model, panel)
    out = kalman_forecast(model, traj, 0)
    assert all(v.shape[0] == 0 for v in out.values())
    with pytest.raises(MissingCovariatesError):
        kalman_forecast(model, traj, 2)
    with pytest.raises(MissingCovariatesError):
        kalman_forecast(model, traj, 2, future_X=[[1.0]])


def test_forecast_memoryless_state():
    panel, _ = nondividend_private_panel(10, seed=0)
    model = scalar_forecast_model(0.0, 0.1, 1.0)
    traj = kalman_smoother(kalman_filter(model, panel), model)
    out = kalman_forecast(model, traj, 1, future_X=[[1.0]])
    assert out["z_mean"][0, 0] == 0.0
    assert out["z_cov"][0, 0, 0] == pytest.approx(0.1, abs=1e-15)


def test_forecast_scalar_two_step_variance():
    a, sw = 0.7, 0.2
    panel, _ = nondividend_private_panel(5, seed=1)
    model = scalar_forecast_model(a, sw, 1.0)
    traj = kalman_smoother(kalman_filter(model, panel), model)
    s0 = traj.smoothed_cov[-1][0, 0]
    out = kalman_forecast(model, traj, 2, future_X=np.ones((2, 1)))
    assert out["z_cov"][1, 0, 0] == pytest.approx(a * a * (a * a * s0 + sw) + sw, rel=1e-13)
    steps = np.diff(out["z_cov"], axis=0)
    assert np.linalg.eigvalsh(steps[0])[0] >= -1e-12


def test_state_space_round_trip():
    rng = np.random.default_rng(3)
    model, _, _ = random_state_space(rng, 2, 2, 1, "non-dividend", 3)
    again = StateSpaceModel.from_dict(model.to_dict())
    for key, val in model.to_dict().items():
        assert again.to_dict()[key] == val


# valuation outputs --------------------------------------------------------------


def test_smoothed_market_value_examples():
    panel, _ = nondividend_private_panel(3, seed=0)
    model = scalar_forecast_model(0.5, 0.1, 1.0)
    traj = kalman_smoother(kalman_filter(model, panel), model)
    from dataclasses import replace

    flat = replace(traj, smoothed_mean=np.zeros_like(traj.smoothed_mean))
    B = panel.book_values
    np.testing.assert_allclose(smoothed_market_value(flat, B, "non-dividend"), B)
    ones = replace(traj, smoothed_mean=np.ones_like(traj.smoothed_mean))
    np.testing.assert_allclose(smoothed_market_value(ones, B, "dividend"), B)
    pb = replace(traj, smoothed_mean=np.full_like(traj.smoothed_mean, 2.5))
    assert smoothed_market_value(pb, np.full_like(B, 40.0), "dividend")[0, 0] == pytest.approx(100.0)
    assert np.all(smoothed_market_value(traj, B, "non-dividend") > 0)


def test_implied_required_return_examples():
    assert implied_required_return(4.0, 0.02, 0.03) == pytest.approx(0.035, abs=1e-15)
    assert implied_required_return(2.0, 0.0, 0.01) == 0.01
    ks = [implied_required_return(m, 0.02, 0.01) for m in (1.0, 10.0, 100.0, 1e6)]
    assert all(a > b for a, b in zip(ks, ks[1:])) and ks[-1] > 0.01
    with pytest.raises(DataError):
        implied_required_return(0.0, 0.01, 0.01)


@settings(max_examples=200, deadline=None)
@given(
    m=st.floats(1e-3, 1e3),
    delta=st.floats(0.0, 10.0),
    b=st.floats(-0.99, 5.0),
)
def test_floor_property(m, delta, b):
    assert implied_required_return(m, delta, b) >= b


# EM -----------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(6))
def test_em_monotone_random_starts(seed):
    rng = np.random.default_rng(seed)
    mode = ["dividend", "non-dividend"][seed % 2]
    model, panel, design = random_state_space(rng, 1 + seed % 2, 1 + (seed // 2) % 2, seed % 2, mode, 25)
    traj = kalman_smoother(kalman_filter(model, design), model)
    ll = [traj.log_likelihood]
    for _ in range(8):
        new = em_step(model, design, traj)
        q_old = expected_complete_loglik(model, design, traj)
        q_new = expected_complete_loglik(new, design, traj)
        assert q_new >= q_old - 1e-6
        model = new
        traj = kalman_smoother(kalman_filter(model, design), model)
        ll.append(traj.log_likelihood)
    assert np.diff(ll).min() >= -1e-6


def test_em_private_reports_trace_and_rejects_payers():
    panel, _ = nondividend_private_panel(40, seed=2)
    design = panel.design()
    m0 = initial_state_space(design, "non-dividend")
    res = em_private(m0, design, max_iter=20)
    assert len(res.trace) == res.n_iter + 1
    assert np.diff(res.trace).min() >= -1e-6
    payer, _ = regime_private_panel(20, [0.5], [0.02], [0.01], np.ones((1, 1)))
    with pytest.raises(DataError):
        em_private(m0, payer)


def test_em_private_raises_on_likelihood_decrease(monkeypatch):
    panel, _ = nondividend_private_panel(40, seed=2)
    design = panel.design()
    m0 = initial_state_space(design, "non-dividend")

    def bad_step(model, design, traj, **kw):
        return model.with_params(Phi=np.array([[-0.99]]), Sigma_ww=np.array([[10.0]]))

    monkeypatch.setattr(em_mod, "em_step", bad_step)
    with pytest.raises(ConsistencyError):
        em_private(m0, design, max_iter=3)


def test_fully_observed_pix_is_ols():
    rng = np.random.default_rng(7)
    T = 30
    B = np.concatenate([[1.0], np.exp(np.cumsum(rng.normal(0.02, 0.05, size=T)))])
    x = rng.normal(size=(T, 1))
    design = PrivatePanel(["c"], list(range(T + 1)), B[:, None], covariates=x).design(1)
    Sxi = np.diag([0.01, 0.5])
    model = StateSpaceModel(
        "non-dividend", [[0.5]], [[0.0, 0.0]], [[0.1, 0.1]], [[0.02]], Sxi, [[0.0]], [0.0], [[0.0]], 1
    )
    traj = kalman_smoother(kalman_filter(model, design), model)
    assert np.abs(traj.smoothed_cov).max() < 1e-12
    Pix = em_mod.m_step_Pix(model, design, em_mod._Stats(traj))
    X = design.X
    ols = design.x @ X.T @ np.linalg.inv(X @ X.T)
    np.testing.assert_allclose(Pix, ols, atol=1e-8)


def test_nondividend_recovery_short():
    panel, _ = nondividend_private_panel(600, seed=4)
    design = panel.design()
    res = em_private(initial_state_space(design, "non-dividend"), design, max_iter=60)
    assert abs(res.model.A0k[0, 0] - 0.03) < 0.05
    assert np.diff(res.trace).min() >= -1e-6


# grid verification of each closed-form M-step -----------------------------------


def oracle_q(model, design, post_mean, post_cov):
    """Expected complete-data log density from the joint-Gaussian posterior of (z_0..z_T)."""
    z0, P0, A, Q, Hs, cs, offsets, y = independent_system(model, design)
    s = len(z0)
    n, q = model.n_companies, model.state_lag
    T = design.n_periods

    def expect(resid_const, L, cov):
        # E[r' cov^{-1} r] with r = resid_const + L Z, Z ~ N(post_mean, post_cov)
        mu = resid_const + L @ post_mean
        inv = np.linalg.inv(cov)
        sign, logdet = np.linalg.slogdet(cov)
        if sign <= 0:
            return -np.inf
        quad = mu @ inv @ mu + np.trace(inv @ L @ post_cov @ L.T)
        return -0.5 * (len(mu) * math.log(2 * math.pi) + logdet + quad)

    total = 0.0
    dim = s * (T + 1)
    for t in range(T):
        L = np.zeros((len(cs[t]), dim))
        L[:, (t + 1) * s : (t + 2) * s] = -Hs[t]
        total += expect(y[t] - cs[t], L, model.Sigma_xi)
        L = np.zeros((n, dim))
        L[:, (t + 1) * s : (t + 1) * s + n] = np.eye(n)
        L[:, t * s : t * s + n * q] -= model.Phi
        total += expect(-model.Pim @ design.X[:, t], L, model.Sigma_ww)
    for b in range(q):
        L = np.zeros((n, dim))
        L[:, b * n : (b + 1) * n] = np.eye(n)
        total += expect(-model.mu0, L, model.Sigma0)
    return total


BLOCKS = ["A0k", "Pix", "Pim", "Phi", "Sigma_xi", "Sigma_ww", "initial"]


@pytest.mark.parametrize("mode", ["dividend", "non-dividend"])
@pytest.mark.parametrize("seed", range(3))
def test_m_step_grid_oracle(mode, seed):
    rng = np.random.default_rng(100 + seed)
    n = 2 if seed == 2 else 1
    model, _, design = random_state_space(rng, n, 1 + seed % 2, 1, mode, 2)
    traj = kalman_smoother(kalman_filter(model, design), model)
    mean, cov, y, s = joint_reference(model, design)
    pm, pc = conditional(mean, cov, y, s, design.n_periods, design.n_periods)
    stats = em_mod._Stats(traj)
    current = model
    for name in BLOCKS:
        if name == "A0k":
            current = current.with_params(A0k=em_mod.m_step_A0k(current, design, stats))
            fields = ["A0k"]
        elif name == "Pix":
            current = current.with_params(Pix=em_mod.m_step_Pix(current, design, stats))
            fields = ["Pix"]
        elif name == "Pim":
            current = current.with_params(Pim=em_mod.m_step_Pim(current, design, stats))
            fields = ["Pim"]
        elif name == "Phi":
            current = current.with_params(Phi=em_mod.m_step_Phi(current, design, stats))
            fields = ["Phi"]
        elif name == "Sigma_xi":
            current = current.with_params(Sigma_xi=em_mod.m_step_Sigma_xi(current, design, stats))
            fields = ["Sigma_xi"]
        elif name == "Sigma_ww":
            current = current.with_params(Sigma_ww=em_mod.m_step_Sigma_ww(current, design, stats))
            fields = ["Sigma_ww"]
        else:
            mu0, S0 = em_mod.m_step_initial(current, stats)
            current = current.with_params(mu0=mu0, Sigma0=S0)
            fields = ["mu0", "Sigma0"]
        best = oracle_q(current, design, pm, pc)
        # the package's own expected log density agrees with the oracle
        assert expected_complete_loglik(current, design, traj) == pytest.approx(best, abs=1e-8)
        for field in fields:
            base = np.asarray(getattr(current, field))
            if base.size == 0:
                continue
            for step in (1e-4, 1e-3, 1e-2, 1e-1):
                for _ in range(6):
                    direction = rng.normal(size=base.shape)
                    if field.startswith("Sigma"):
                        direction = direction + direction.T
                    trial = base + step * max(1.0, np.abs(base).max()) * direction
                    if field.startswith("Sigma") and np.linalg.eigvalsh(trial)[0] <= 0:
                        continue
                    try:
                        value = oracle_q(current.with_params(**{field: trial}), design, pm, pc)
                    except NumericalError:
                        continue
                    assert value <= best + 1e-8, (name, field, step)


# estimators ---------------------------------------------------------------------


def test_estimators_api():
    from reqreturn.private_valuation import PrivateRegimeSwitching, PrivateStateSpace

    P = np.array([[0.95, 0.05], [0.1, 0.9]])
    panel, _ = regime_private_panel(300, [0.4, 0.6], [0.03, 0.01], [0.01, 0.01], P, seed=1)
    est = PrivateRegimeSwitching(n_regimes=2).fit(panel)
    probs = est.transform(panel)
    assert probs.shape == (300, 2)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)
    assert est.score(panel) == pytest.approx(est.information_["log_likelihood"])
    assert est.get_params()["n_regimes"] == 2
    flat, _ = nondividend_private_panel(50, seed=0)
    ss = PrivateStateSpace(max_iter=5).fit(flat)
    assert ss.model_.mode == "non-dividend"
    V = ss.predict(flat)
    assert V.shape == (51, 1) and np.all(V > 0)
    np.testing.assert_allclose(V, ss.transform(flat) * flat.book_values)
    assert ss.forecast(2, future_X=np.ones((2, 1)))["y_mean"].shape == (2, 1)
    assert ss.get_params()["state_lag"] == 1
