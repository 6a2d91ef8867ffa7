"""EM estimation of the private-company state-space model.

The E-step is a filter and smoother pass.  The M-step applies the closed-form
conditional maximizers of the expected complete-data log density in a fixed
order (``A0k``, ``Pix``, ``Pim``, ``Phi``, ``Sigma_xi``, ``Sigma_ww``, and the
initial-state moments), each using the blocks updated before it.  Every step
is exact given the others, so the observed-data likelihood cannot decrease.
"""

import math
from dataclasses import dataclass, field
from typing import List

import numpy as np
from scipy import linalg

from .._validation import check_positive_int, symmetrize
from ..exceptions import ConsistencyError, DataError, RankDeficiencyError, SingularCovarianceError
from .kalman import (
    MODES,
    KalmanTrajectory,
    StateSpaceModel,
    _as_design,
    filter_arrays,
    kalman_smoother,
)
from .panel import PrivateDesign

_LOG_2PI = math.log(2.0 * math.pi)


class _Stats:
    """Smoothed first and second moments arranged per period t = 1..T."""

    def __init__(self, traj: KalmanTrajectory):
        zs, Ps = traj.smoothed_mean, traj.smoothed_cov
        self.zs, self.Ps = zs, Ps
        self.z_now, self.z_prev = zs[1:], zs[:-1]
        self.P_now, self.P_prev = Ps[1:], Ps[:-1]
        # Sigma(z_{t-1}, z_t | T)
        self.C = traj.cross_cov
        self.Ezz_now = self.P_now + np.einsum("ta,tb->tab", self.z_now, self.z_now)
        self.Ezz_prev = self.P_prev + np.einsum("ta,tb->tab", self.z_prev, self.z_prev)
        # E[z_t z_{t-1}']
        self.Ez_now_prev = np.swapaxes(self.C, 1, 2) + np.einsum("ta,tb->tab", self.z_now, self.z_prev)


def _solve(G, rhs, what):
    G = symmetrize(G)
    try:
        factor = linalg.cho_factor(G, lower=True)
    except linalg.LinAlgError as exc:
        raise RankDeficiencyError(f"{what} is singular") from exc
    d = np.diag(factor[0])
    if d.min() <= 1e-10 * max(d.max(), 1e-300):
        raise RankDeficiencyError(f"{what} is singular")
    return linalg.cho_solve(factor, rhs)


def _omega(model):
    n = model.n_companies
    omega = symmetrize(linalg.inv(model.Sigma_xi))
    return omega[:n, :n], omega[:n, n:], omega[n:, :n], omega[n:, n:]


def _measurement_residuals(model: StateSpaceModel, design: PrivateDesign, stats: _Stats):
    """Smoothed ``u_{t|T}`` (T, n), observed ``v_t`` (T, ell) and ``Psi_u,t`` (T, n, s)."""
    n = model.n_companies
    Psis, phis = model.system(design)
    y = model.observations(design)
    resid = y - np.einsum("tds,ts->td", Psis, stats.z_now) - phis
    return resid[:, :n], resid[:, n:], Psis[:, :n]


def m_step_A0k(model: StateSpaceModel, design: PrivateDesign, stats: _Stats):
    """Conditional maximizer of ``A0k`` given ``Sigma_xi`` and ``Pix``."""
    n, l = model.n_companies, model.exo_dim
    Ouu, Ouv, _, _ = _omega(model)
    psi = design.X[:l].T
    v = (design.x - model.Pix @ design.X).T
    if model.mode == "non-dividend":
        m_now, m_prev = stats.z_now[:, :n], stats.z_now[:, n : 2 * n]
        e = design.log_growth.T + m_now - m_prev
        if v.shape[1]:
            e = e + linalg.solve(Ouu, Ouv @ v.T, assume_a="pos").T
        A = _solve(psi.T @ psi, psi.T @ e, "exogenous Gram matrix").T
        return A
    E = stats.Ezz_now
    M11 = E[:, n : 2 * n, n : 2 * n]
    M10 = E[:, n : 2 * n, :n]
    m_prev = stats.z_now[:, n : 2 * n]
    Delta = design.dividend_to_book.T
    growth = design.growth.T
    G = np.zeros((n * l, n * l))
    g = np.zeros(n * l)
    ones = np.ones(n)
    for t in range(design.n_periods):
        G += np.kron(np.outer(psi[t], psi[t]), Ouu * M11[t])
        c = m_prev[t] * (Ouu @ Delta[t] + Ouv @ v[t]) + (Ouu * M10[t]) @ (1.0 + growth[t]) - (Ouu * M11[t]) @ ones
        g += np.kron(psi[t], c)
    a = _solve(G, g, "A0k normal matrix")
    return a.reshape((n, l), order="F")


def m_step_Pix(model: StateSpaceModel, design: PrivateDesign, stats: _Stats):
    """Conditional maximizer of ``Pix`` given ``A0k`` and ``Sigma_xi``."""
    if model.n_covariates == 0:
        return model.Pix.copy()
    _, _, Ovu, Ovv = _omega(model)
    u, _, _ = _measurement_residuals(model, design, stats)
    target = design.x + linalg.solve(Ovv, Ovu @ u.T, assume_a="pos")
    X = design.X
    return _solve(X @ X.T, X @ target.T, "covariate Gram matrix").T


def m_step_Pim(model: StateSpaceModel, design: PrivateDesign, stats: _Stats):
    """Conditional maximizer of ``Pim`` given ``Phi``."""
    n = model.n_companies
    resid = stats.z_now[:, :n] - stats.z_prev @ model.Phi_bar.T
    X = design.X
    return _solve(X @ X.T, X @ resid, "state regressor Gram matrix").T


def m_step_Phi(model: StateSpaceModel, design: PrivateDesign, stats: _Stats):
    """Conditional maximizer of ``Phi`` (first ``q`` blocks) given ``Pim``."""
    n, nq = model.n_companies, model.Phi.shape[1]
    lhs = stats.Ez_now_prev[:, :n, :nq].sum(axis=0) - model.Pim @ design.X @ stats.z_prev[:, :nq]
    G = stats.Ezz_prev[:, :nq, :nq].sum(axis=0)
    return _solve(G, lhs.T, "lagged state second-moment matrix").T


def m_step_Sigma_xi(model: StateSpaceModel, design: PrivateDesign, stats: _Stats, *, check=True):
    """``(1/T) sum E[xi_t xi_t' | F_T]`` with ``E[u u'] = u_{t|T} u_{t|T}' + Psi_u Sigma(z_t|T) Psi_u'``."""
    u, v, Psi_u = _measurement_residuals(model, design, stats)
    T = design.n_periods
    correction = np.einsum("tas,tsr,tbr->tab", Psi_u, stats.P_now, Psi_u)
    if check:
        lam = np.linalg.eigvalsh(symmetrize(correction))[:, 0]
        scale = max(1.0, float(np.abs(correction).max()))
        if np.any(lam < -1e-10 * scale):
            raise ConsistencyError("second-moment correction Psi Sigma(z|T) Psi' is not PSD")
    xi = np.hstack([u, v])
    S = xi.T @ xi
    n = u.shape[1]
    S[:n, :n] += correction.sum(axis=0)
    S = symmetrize(S / T)
    _require_spd(S, "Sigma_xi")
    return S


def m_step_Sigma_ww(model: StateSpaceModel, design: PrivateDesign, stats: _Stats):
    """``(1/T) sum E[w_t w_t' | F_T]`` for ``w_t = J_m z_t - Phi z_{t-1} - Pim X_{t-1}``."""
    n = model.n_companies
    J = model.J_m
    Phi = model.Phi_bar
    T = design.n_periods
    w = stats.z_now[:, :n] - stats.z_prev @ Phi.T - (model.Pim @ design.X).T
    S = w.T @ w
    S += np.einsum("ab,tbc,dc->ad", J, stats.P_now, J)
    S += np.einsum("ab,tbc,dc->ad", Phi, stats.P_prev, Phi)
    # Cov(z_t, z_{t-1} | T) = C_t'
    cross = np.einsum("ab,tcb,dc->ad", J, stats.C, Phi)
    S -= cross + cross.T
    S = symmetrize(S / T)
    _require_psd(S, "Sigma_ww")
    return S


def m_step_initial(model: StateSpaceModel, stats: _Stats):
    """Initial-state moments from ``z_{0|T}``, ``Sigma(z_0|T)`` over the first ``q`` blocks."""
    n, q = model.n_companies, model.state_lag
    z0, P0 = stats.zs[0], stats.Ps[0]
    blocks = [slice(b * n, (b + 1) * n) for b in range(q)]
    mu0 = np.mean([z0[b] for b in blocks], axis=0)
    S0 = np.zeros((n, n))
    for b in blocks:
        d = z0[b] - mu0
        S0 += P0[b, b] + np.outer(d, d)
    S0 = symmetrize(S0 / q)
    _require_psd(S0, "Sigma0")
    return mu0, S0


def _require_spd(S, name):
    lam = np.linalg.eigvalsh(S)[0]
    if lam <= 1e-14 * max(1.0, float(np.trace(S))):
        raise SingularCovarianceError(f"M-step update of {name} lost positive definiteness (min eigenvalue {lam:.3g})")


def _require_psd(S, name):
    lam = np.linalg.eigvalsh(S)[0]
    if lam < -1e-10 * max(1.0, float(np.abs(S).max())):
        raise SingularCovarianceError(f"M-step update of {name} is not positive semidefinite (min eigenvalue {lam:.3g})")


def em_step(
    model: StateSpaceModel,
    design: PrivateDesign,
    trajectory: KalmanTrajectory,
    *,
    fit_initial=True,
):
    """One M-step: sequential closed-form updates given a smoothed trajectory."""
    stats = _Stats(trajectory)
    model = model.with_params(A0k=m_step_A0k(model, design, stats))
    model = model.with_params(Pix=m_step_Pix(model, design, stats))
    model = model.with_params(Pim=m_step_Pim(model, design, stats))
    model = model.with_params(Phi=m_step_Phi(model, design, stats))
    model = model.with_params(Sigma_xi=m_step_Sigma_xi(model, design, stats))
    model = model.with_params(Sigma_ww=m_step_Sigma_ww(model, design, stats))
    if fit_initial:
        mu0, S0 = m_step_initial(model, stats)
        model = model.with_params(mu0=mu0, Sigma0=S0)
    return model


def expected_complete_loglik(model: StateSpaceModel, design: PrivateDesign, trajectory: KalmanTrajectory):
    """``E[ln f(y, z) | F_T]`` under the smoothed trajectory, as a function of ``model``.

    The initial-state term covers the first ``q`` blocks of ``z_0``; the
    remaining padded block never enters the likelihood.
    """
    stats = _Stats(trajectory)
    T = design.n_periods
    n, d = model.n_companies, model.obs_dim
    u, v, Psi_u = _measurement_residuals(model, design, stats)
    xi = np.hstack([u, v])
    Sxi = xi.T @ xi
    Sxi[:n, :n] += np.einsum("tas,tsr,tbr->ab", Psi_u, stats.P_now, Psi_u)

    def gauss(S_sum, cov, count, dim):
        sign, logdet = np.linalg.slogdet(cov)
        if sign <= 0:
            return -np.inf
        return -0.5 * (count * (dim * _LOG_2PI + logdet) + np.trace(linalg.solve(cov, S_sum, assume_a="pos")))

    J, Phi = model.J_m, model.Phi_bar
    w = stats.z_now[:, :n] - stats.z_prev @ Phi.T - (model.Pim @ design.X).T
    Sw = w.T @ w
    Sw += np.einsum("ab,tbc,dc->ad", J, stats.P_now, J) + np.einsum("ab,tbc,dc->ad", Phi, stats.P_prev, Phi)
    cross = np.einsum("ab,tcb,dc->ad", J, stats.C, Phi)
    Sw -= cross + cross.T
    q = model.state_lag
    S0 = np.zeros((n, n))
    for b in range(q):
        sl = slice(b * n, (b + 1) * n)
        dlt = stats.zs[0][sl] - model.mu0
        S0 += stats.Ps[0][sl, sl] + np.outer(dlt, dlt)
    return float(gauss(Sxi, model.Sigma_xi, T, d) + gauss(Sw, model.Sigma_ww, T, n) + gauss(S0, model.Sigma0, q, n))


def run_e_step(model: StateSpaceModel, design: PrivateDesign):
    Psis, phis = model.system(design)
    traj = filter_arrays(model, model.observations(design), Psis, phis, design.X)
    return kalman_smoother(traj, model)


def initial_state_space(design: PrivateDesign, mode, state_lag=1, *, pb_proxy=1.0, phi=0.5, lag_order=0):
    """Default EM starting point.

    ``mu0`` comes from a cross-sectional price-to-book proxy (``pb_proxy``,
    logged in non-dividend mode), ``Phi = phi * I`` on the first lag, ``Pim``
    places the implied intercept so the state starts at its stationary mean,
    ``A0k`` and ``Pix`` are OLS fits, and the covariances are scaled
    identities.
    """
    if mode not in MODES:
        raise DataError(f"mode must be one of {MODES}")
    q = check_positive_int(state_lag, "state_lag")
    n, l = design.n_companies, design.psi.shape[0]
    ell, k = design.x.shape[0], design.X.shape[0]
    level = math.log(pb_proxy) if mode == "non-dividend" else float(pb_proxy)
    if mode == "non-dividend" and not pb_proxy > 0:
        raise DataError("price-to-book proxy must be positive")
    mu0 = np.full(n, level)
    Phi = np.zeros((n, n * q))
    Phi[:, :n] = phi * np.eye(n)
    psi = design.psi
    if mode == "non-dividend":
        k_proxy = design.log_growth
    else:
        k_proxy = design.dividend_to_book / float(pb_proxy) + design.growth
    A0k = _solve(psi @ psi.T, psi @ k_proxy.T, "exogenous Gram matrix").T
    resid_u = k_proxy - A0k @ psi
    X = design.X
    if ell:
        Pix = _solve(X @ X.T, X @ design.x.T, "covariate Gram matrix").T
        resid_v = design.x - Pix @ X
    else:
        Pix = np.zeros((0, k))
        resid_v = np.zeros((0, design.n_periods))
    Pim = np.zeros((n, k))
    mean_psi = psi.mean(axis=1)
    if l and abs(mean_psi[0]) > 0:
        Pim[:, 0] = (1.0 - phi) * mu0 / mean_psi[0]
    s_u = max(float(np.mean(resid_u * resid_u)), 1e-8)
    if mode == "dividend":
        s_u *= float(pb_proxy) ** 2
    Sxi = np.zeros((n + ell, n + ell))
    Sxi[:n, :n] = s_u * np.eye(n)
    if ell:
        Sxi[n:, n:] = symmetrize(resid_v @ resid_v.T / design.n_periods) + 1e-10 * np.eye(ell)
    Sww = s_u * np.eye(n)
    S0 = max(1.0, level * level) * np.eye(n)
    return StateSpaceModel(mode, Phi, Pim, Pix, A0k, Sxi, Sww, mu0, S0, lag_order)


@dataclass
class PrivateEmResult:
    model: StateSpaceModel
    trajectory: KalmanTrajectory
    trace: List[float]
    n_iter: int
    converged: bool
    information: dict = field(default_factory=dict)


def em_private(
    model: StateSpaceModel,
    panel,
    mode=None,
    *,
    tol=1e-9,
    max_iter=500,
    monotone_tol=1e-6,
    fit_initial=True,
):
    """Kalman-filter EM for the private valuation state-space model.

    Parameters
    ----------
    model : StateSpaceModel
        Starting values (see :func:`initial_state_space`).
    panel : PrivatePanel or PrivateDesign
    mode : str, optional
        Must agree with ``model.mode`` when given.
    tol : float
        Stop when the log-likelihood gain falls below ``tol * max(1, |ll|)``.
    monotone_tol : float
        Any decrease larger than this raises :class:`ConsistencyError`.

    Returns
    -------
    PrivateEmResult
    """
    if mode is not None and mode != model.mode:
        raise DataError(f"mode {mode!r} disagrees with the starting model ({model.mode!r})")
    design = _as_design(panel, model.lag_order)
    if model.mode == "non-dividend" and design.n_payers > 0:
        raise DataError("non-dividend mode requires a panel without dividend payers")
    if design.n_companies != model.n_companies or design.x.shape[0] != model.n_covariates:
        raise DataError("panel dimensions do not match the model")
    traj = run_e_step(model, design)
    trace = [traj.log_likelihood]
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        model = em_step(model, design, traj, fit_initial=fit_initial)
        traj = run_e_step(model, design)
        trace.append(traj.log_likelihood)
        delta = trace[-1] - trace[-2]
        if delta < -monotone_tol:
            raise ConsistencyError(f"log-likelihood decreased by {-delta:.3g} at EM iteration {n_iter}")
        if abs(delta) < tol * max(1.0, abs(trace[-1])):
            converged = True
            break
    k = model.n_parameters()
    ll = trace[-1]
    T = design.n_periods
    info = {"log_likelihood": ll, "n_parameters": k, "aic": -2 * ll + 2 * k, "bic": -2 * ll + k * math.log(T)}
    return PrivateEmResult(model, traj, trace, n_iter, converged, info)
