"""Constant price-to-book private valuation model with Markov regimes.

Within regime ``j`` the system is

    b_t = A0k(j) psi_t - R(j) Delta_t + u_t
    x_t = Pix(j) X_{t-1} + v_t,        (u_t', v_t')' ~ N(0, Sigma(j))

where ``R(j) = diag(r(j), 0)`` holds the book-to-price ratios of the ``n_d``
dividend payers.  The regime machinery (filter, smoother, transition MLE) is
shared with :mod:`reqreturn.ms_var` by writing the system as a single VAR in
the regressor ``W_t = (Delta_t', X_{t-1}')'``.
"""

import math
from dataclasses import dataclass, replace
from typing import List, Optional

import numpy as np
from scipy import linalg

from .._validation import as_matrix, check_positive_int, check_spd, symmetrize
from ..bayes_var import NiwPrior, niw_posterior, ols_ar_sigma
from ..exceptions import (
    ConsistencyError,
    DataError,
    DegeneracyError,
    EmptyRegimeError,
    NumericalError,
    RankDeficiencyError,
    SingularCovarianceError,
)
from ..ms_var import (
    MsVarModel,
    RegimeInference,
    estimate_transition,
    filter_probabilities,
    kim_smoother,
    kmeans_weights,
    log_regime_densities,
    pairwise_probabilities,
)
from .panel import PrivateDesign, PrivatePanel


def _design(panel_or_design, p=0):
    if isinstance(panel_or_design, PrivatePanel):
        return panel_or_design.design(p)
    if isinstance(panel_or_design, PrivateDesign):
        return panel_or_design
    raise DataError("expected a PrivatePanel or PrivateDesign")


def stacked_arrays(design: PrivateDesign):
    """``y_t = (b_t', x_t')'`` and ``W_t = (Delta_t', X_{t-1}')'``, column-wise."""
    return np.vstack([design.growth, design.x]), np.vstack([design.dividend_to_book, design.X])


def omega_blocks(sigma, n):
    """Partitions ``(Omega_uu, Omega_uv, Omega_vu, Omega_vv)`` of ``Sigma^{-1}``."""
    omega = symmetrize(linalg.inv(sigma))
    return omega[:n, :n], omega[:n, n:], omega[n:, :n], omega[n:, n:]


@dataclass(frozen=True)
class PrivateRsModel:
    """Regime-dependent parameters of the constant price-to-book model.

    Attributes
    ----------
    book_to_price : ndarray, shape (N, n_d)
    A0k : ndarray, shape (N, n, l)
    Pix : ndarray, shape (N, ell, l + ell * p)
    covariances : ndarray, shape (N, n + ell, n + ell)
    transition, initial_probs : regime chain
    """

    book_to_price: np.ndarray
    A0k: np.ndarray
    Pix: np.ndarray
    covariances: np.ndarray
    transition: np.ndarray
    initial_probs: np.ndarray
    lag_order: int = 0

    def __post_init__(self):
        r = np.asarray(self.book_to_price, dtype=float)
        A = np.asarray(self.A0k, dtype=float)
        Pi = np.asarray(self.Pix, dtype=float)
        cov = np.asarray(self.covariances, dtype=float)
        if A.ndim != 3:
            raise DataError("A0k must be (N, n, l)")
        N, n, _ = A.shape
        r = r.reshape(N, -1)
        if Pi.size == 0:
            Pi = np.zeros((N, 0, A.shape[2]))
        elif Pi.ndim != 3:
            raise DataError("Pix must be (N, ell, l + ell p)")
        dim = n + Pi.shape[1]
        if cov.shape != (N, dim, dim):
            raise DataError(f"covariances must have shape {(N, dim, dim)}")
        if r.shape[1] > n:
            raise DataError("more book-to-price ratios than companies")
        if np.any(r <= 0):
            raise NumericalError("book-to-price ratios must be strictly positive")
        cov = np.stack([check_spd(c, f"covariance of regime {j + 1}") for j, c in enumerate(cov)])
        for name, arr in (("book_to_price", r), ("A0k", A), ("Pix", Pi), ("covariances", cov)):
            object.__setattr__(self, name, arr)
        msvar = self.as_msvar()
        object.__setattr__(self, "transition", msvar.transition)
        object.__setattr__(self, "initial_probs", msvar.initial_probs)

    @property
    def n_regimes(self):
        return self.A0k.shape[0]

    @property
    def n_companies(self):
        return self.A0k.shape[1]

    @property
    def n_payers(self):
        return self.book_to_price.shape[1]

    @property
    def n_covariates(self):
        return self.Pix.shape[1]

    @property
    def price_to_book(self):
        return 1.0 / self.book_to_price

    def R(self, regime):
        """``diag(r(j), 0)`` embedding, (n x n)."""
        d = np.zeros(self.n_companies)
        d[: self.n_payers] = self.book_to_price[regime]
        return np.diag(d)

    def omega(self, regime):
        return omega_blocks(self.covariances[regime], self.n_companies)

    def stacked_coefficients(self, regime):
        """Coefficient of ``W_t`` in ``y_t = C(j) W_t + xi_t``."""
        n, ell = self.n_companies, self.n_covariates
        k = self.Pix.shape[2]
        l = self.A0k.shape[2]
        C = np.zeros((n + ell, n + k))
        C[:n, :n] = -self.R(regime)
        C[:n, n : n + l] = self.A0k[regime]
        C[n:, n:] = self.Pix[regime]
        return C

    def as_msvar(self):
        coef = np.stack([self.stacked_coefficients(j) for j in range(self.n_regimes)])
        return MsVarModel(coef, self.covariances, self.transition, self.initial_probs)

    def permuted(self, order):
        order = np.asarray(order)
        return replace(
            self,
            book_to_price=self.book_to_price[order],
            A0k=self.A0k[order],
            Pix=self.Pix[order],
            covariances=self.covariances[order],
            transition=self.transition[np.ix_(order, order)],
            initial_probs=self.initial_probs[order],
        )

    def n_parameters(self):
        N = self.n_regimes
        d = self.covariances.shape[1]
        per = self.book_to_price.shape[1] + self.A0k[0].size + self.Pix[0].size + d * (d + 1) // 2
        return N * per + N * (N - 1) + (N - 1)

    def to_dict(self):
        return {
            "n_regimes": self.n_regimes,
            "lag_order": self.lag_order,
            "book_to_price": self.book_to_price.tolist(),
            "price_to_book": self.price_to_book.tolist(),
            "A0k": self.A0k.tolist(),
            "Pix": self.Pix.tolist(),
            "covariances": self.covariances.tolist(),
            "transition": self.transition.tolist(),
            "initial_probs": self.initial_probs.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        N = int(doc["n_regimes"])
        A = np.array(doc["A0k"], dtype=float)
        Pi = np.array(doc["Pix"], dtype=float)
        if Pi.size == 0:
            Pi = np.zeros((N, 0, A.shape[2]))
        return cls(
            np.array(doc["book_to_price"], dtype=float).reshape(N, -1),
            A,
            Pi,
            np.array(doc["covariances"], dtype=float),
            np.array(doc["transition"], dtype=float),
            np.array(doc["initial_probs"], dtype=float),
            int(doc.get("lag_order", 0)),
        )


def private_log_densities(model: PrivateRsModel, design: PrivateDesign):
    """Log conditional densities ``ln eta_{tj}`` of ``y_t = (b_t', x_t')'``, (N x T)."""
    y, W = stacked_arrays(design)
    return log_regime_densities(model.as_msvar(), y, W)


def private_inference(model: PrivateRsModel, design: PrivateDesign):
    log_eta = private_log_densities(model, design)
    filt, pred, ll = filter_probabilities(log_eta, model.transition, model.initial_probs)
    inf = RegimeInference(filt, pred, ll, log_eta)
    return replace(inf, smoothed=kim_smoother(inf, model.transition))


# regime-weighted ML -------------------------------------------------------------


def _wsolve(G, rhs, what, mass):
    G = symmetrize(G)
    try:
        factor = linalg.cho_factor(G, lower=True)
    except linalg.LinAlgError as exc:
        raise RankDeficiencyError(f"{what} is singular (effective sample size {mass:.6g})") from exc
    d = np.diag(factor[0])
    if d.min() <= 1e-10 * max(d.max(), 1e-300):
        raise RankDeficiencyError(f"{what} is singular (effective sample size {mass:.6g})")
    return linalg.cho_solve(factor, rhs)


def _residuals(design, r, A, Pi):
    n, n_d = design.n_companies, design.n_payers
    u = design.growth - A @ design.psi
    if n_d:
        u[:n_d] += r[:, None] * design.dividend_to_book[:n_d]
    v = design.x - Pi @ design.X
    return u, v


def rs_private_ml(design, weights, params=None, *, max_sweeps=200, tol=1e-12):
    """Regime-weighted ML of ``(r, A0k, Pix, Sigma)`` by zig-zag sweeps.

    Each sweep applies the closed-form conditional maximizers for ``r``,
    ``A0k``, ``Pix`` and then ``Sigma``, so the weighted likelihood never
    decreases.  The ``r`` step solves the full normal equations, including
    the coupling of payers with non-payers through ``Omega_uu``.

    Parameters
    ----------
    design : PrivateDesign or PrivatePanel
    weights : array-like, shape (T,)
        Smoothed probabilities of the regime (ones for a single regime).
    params : tuple, optional
        Starting ``(r, A0k, Pix, Sigma)``; defaults to ``r = 0``, OLS
        coefficients and identity covariance.

    Returns
    -------
    (r, A0k, Pix, Sigma, n_sweeps)
    """
    design = _design(design)
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.shape[0] != design.n_periods or np.any(w < 0):
        raise DataError("weights must be non-negative with one entry per period")
    mass = float(w.sum())
    if mass <= 1e-8:
        raise EmptyRegimeError(f"regime has no smoothed mass ({mass:.3g})")
    n, n_d = design.n_companies, design.n_payers
    ell, k = design.x.shape[0], design.X.shape[0]
    psi, X, D = design.psi, design.X, design.dividend_to_book[:n_d]
    if params is None:
        r = np.zeros(n_d)
        A = np.zeros((n, psi.shape[0]))
        Pi = np.zeros((ell, k))
        sigma = np.eye(n + ell)
    else:
        r, A, Pi, sigma = (np.array(a, dtype=float) for a in params)
        r = r.reshape(n_d)
        Pi = Pi.reshape(ell, k)
    G_psi = (psi * w) @ psi.T
    G_X = (X * w) @ X.T
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        old = np.concatenate([r, A.ravel(), Pi.ravel(), sigma.ravel()])
        Ouu, Ouv, Ovu, Ovv = omega_blocks(sigma, n)
        if n_d:
            # u = e + J_d' diag(D) r with e = b - A psi
            _, v = _residuals(design, np.zeros(n_d), A, Pi)
            e = design.growth - A @ psi
            Od = Ouu[:n_d, :n_d]
            G = Od * ((D * w) @ D.T)
            rhs = -np.sum(w * D * (Ouu[:n_d] @ e + Ouv[:n_d] @ v), axis=1)
            r = _wsolve(G, rhs, "book-to-price normal matrix", mass)
        u, v = _residuals(design, r, A, Pi)
        e = u + A @ psi
        if ell:
            e = e + linalg.solve(Ouu, Ouv @ v, assume_a="pos")
        A = _wsolve(G_psi, (psi * w) @ e.T, "regime-weighted exogenous Gram matrix", mass).T
        if ell:
            u, _ = _residuals(design, r, A, Pi)
            target = design.x + linalg.solve(Ovv, Ovu @ u, assume_a="pos")
            Pi = _wsolve(G_X, (X * w) @ target.T, "regime-weighted covariate Gram matrix", mass).T
        u, v = _residuals(design, r, A, Pi)
        xi = np.vstack([u, v])
        sigma = symmetrize((xi * w) @ xi.T / mass)
        lam = np.linalg.eigvalsh(sigma)[0]
        if lam <= 1e-14 * max(1.0, float(np.trace(sigma))):
            raise SingularCovarianceError("regime covariance became singular")
        new = np.concatenate([r, A.ravel(), Pi.ravel(), sigma.ravel()])
        if np.max(np.abs(new - old)) <= tol * max(1.0, float(np.max(np.abs(new)))):
            break
    return r, A, Pi, sigma, sweeps


def weighted_objective(design, weights, params):
    """Regime-weighted Gaussian log-likelihood of ``(r, A0k, Pix, Sigma)``."""
    r, A, Pi, sigma = params
    u, v = _residuals(design, np.asarray(r, dtype=float), A, Pi)
    xi = np.vstack([u, v])
    sign, logdet = np.linalg.slogdet(sigma)
    if sign <= 0:
        return -np.inf
    quad = np.sum(xi * linalg.solve(sigma, xi, assume_a="pos"), axis=0)
    d = xi.shape[0]
    w = np.asarray(weights, dtype=float)
    return float(np.sum(w * -0.5 * (d * math.log(2 * math.pi) + logdet + quad)))


# EM ------------------------------------------------------------------------------


@dataclass
class PrivateRsResult:
    model: PrivateRsModel
    inference: RegimeInference
    trace: List[float]
    n_iter: int
    converged: bool
    information: dict


def _m_step(design, inference, model):
    N = model.n_regimes
    smoothed = inference.smoothed
    if N > 1:
        P = estimate_transition(pairwise_probabilities(inference, model.transition), smoothed)
    else:
        P = np.ones((1, 1))
    rho = smoothed[:, 0] / smoothed[:, 0].sum()
    rs, As, Pis, covs = [], [], [], []
    for j in range(N):
        params = (model.book_to_price[j], model.A0k[j], model.Pix[j], model.covariances[j])
        r, A, Pi, sigma, _ = rs_private_ml(design, smoothed[j], params)
        rs.append(r)
        As.append(A)
        Pis.append(Pi)
        covs.append(sigma)
    return PrivateRsModel(np.array(rs), np.array(As), np.array(Pis), np.array(covs), P, rho, model.lag_order)


def _initial_model(design, weights, lag_order, stay=0.9):
    N = weights.shape[0]
    rs, As, Pis, covs = [], [], [], []
    for j in range(N):
        r, A, Pi, sigma, _ = rs_private_ml(design, weights[j])
        rs.append(r)
        As.append(A)
        Pis.append(Pi)
        covs.append(sigma)
    if N == 1:
        P = np.ones((1, 1))
    else:
        P = np.full((N, N), (1.0 - stay) / (N - 1))
        np.fill_diagonal(P, stay)
    return PrivateRsModel(np.array(rs), np.array(As), np.array(Pis), np.array(covs), P, np.full(N, 1.0 / N), lag_order)


def rs_private_em(
    panel,
    n_regimes,
    lag_order=0,
    *,
    init=None,
    tol=1e-8,
    max_iter=500,
    monotone_tol=1e-8,
    n_restarts=5,
    seed=0,
    sort_regimes=True,
):
    """EM for the regime-switching private valuation model.

    ``init`` is ``None`` (k-means split of the stacked OLS residuals),
    ``"random"``, an (N x T) weight array or a :class:`PrivateRsModel`.
    Regimes are ordered by descending mean of ``A0k(j) psi`` over the sample.
    """
    design = _design(panel, lag_order)
    N = check_positive_int(n_regimes, "n_regimes")
    y, W = stacked_arrays(design)
    T = design.n_periods
    if design.n_payers < design.n_companies:
        # structural zeros for non-payers are not regressors
        W_fit = np.vstack([design.dividend_to_book[: design.n_payers], design.X])
    else:
        W_fit = W
    if T <= W_fit.shape[0]:
        raise DataError(f"T={T} must exceed the regressor dimension {W_fit.shape[0]}")
    rng = np.random.default_rng(seed)
    last_error = None
    for attempt in range(n_restarts + 1):
        try:
            if isinstance(init, PrivateRsModel) and attempt == 0:
                model = init
            else:
                if isinstance(init, str) and init == "random" or isinstance(init, PrivateRsModel):
                    Wt = rng.dirichlet(np.ones(N), size=T).T
                elif init is not None and not isinstance(init, str):
                    Wt = np.asarray(init, dtype=float)
                    if Wt.shape != (N, T):
                        raise DataError(f"initial weights must have shape ({N}, {T})")
                else:
                    Wt = kmeans_weights(y, W_fit, N)
                if attempt > 0:
                    Wt = 0.5 * Wt + 0.5 * rng.dirichlet(np.ones(N), size=T).T
                model = _initial_model(design, Wt, lag_order)
            inf = private_inference(model, design)
            trace = [inf.log_likelihood]
            converged = False
            n_iter = 0
            for n_iter in range(1, max_iter + 1):
                model = _m_step(design, inf, model)
                inf = private_inference(model, design)
                trace.append(inf.log_likelihood)
                delta = trace[-1] - trace[-2]
                if delta < -monotone_tol:
                    raise ConsistencyError(f"log-likelihood decreased by {-delta:.3g} at EM iteration {n_iter}")
                if abs(delta) < tol:
                    converged = True
                    break
        except (EmptyRegimeError, SingularCovarianceError, RankDeficiencyError, DegeneracyError) as exc:
            last_error = exc
            continue
        except NumericalError as exc:
            if isinstance(exc, ConsistencyError):
                raise
            last_error = exc
            continue
        if sort_regimes and N > 1:
            level = np.einsum("jnl,lt->jn", model.A0k, design.psi).mean(axis=1) / T
            order = np.argsort(-level, kind="stable")
            if np.any(order != np.arange(N)):
                model = model.permuted(order)
                inf = private_inference(model, design)
        k = model.n_parameters()
        ll = inf.log_likelihood
        info = {"log_likelihood": ll, "n_parameters": k, "aic": -2 * ll + 2 * k, "bic": -2 * ll + k * math.log(T)}
        return PrivateRsResult(model, inf, trace, n_iter, converged, info)
    raise type(last_error)(f"EM failed after {n_restarts} restarts: {last_error}") from last_error


# Bayesian variant ------------------------------------------------------------------


def build_private_prior(
    design: PrivateDesign,
    *,
    r_prior=None,
    A0k_prior=None,
    delta=None,
    lambda1=25.0,
    lambda2=0.04,
    nu0=None,
    V0=None,
    sigma2=None,
    diffuse=False,
):
    """NIW prior for ``y_t = Pi Y_{t-1} + xi_t`` with ``Y_{t-1} = (Delta_t', psi_t', x_{t-1}', ...)'``.

    The location carries ``-diag(r_prior, 0)`` on the dividend block (the
    growth equation subtracts ``R Delta_t``), ``A0k_prior`` on the exogenous
    block and ``diag(delta)`` on the own first lag of ``x``.  ``Lambda0`` is
    ``lambda1`` on the first ``n + l`` slots and ``lambda2 / (s^2 sigma_i^2)``
    on lag ``s`` of covariate ``i``.  Dividend slots of non-payers carry no
    data; under ``diffuse`` they keep unit precision around zero so that the
    rest of the posterior is exactly OLS.
    """
    n, n_d = design.n_companies, design.n_payers
    l, ell = design.psi.shape[0], design.x.shape[0]
    k = n + design.X.shape[0]
    p = (design.X.shape[0] - l) // ell if ell else 0
    dim = n + ell
    loc = np.zeros((dim, k))
    if r_prior is not None:
        r_prior = np.asarray(r_prior, dtype=float).reshape(-1)
        if r_prior.shape[0] != n_d:
            raise DataError(f"r_prior must have {n_d} entries")
        loc[np.arange(n_d), np.arange(n_d)] = -r_prior
    if A0k_prior is not None:
        A0 = as_matrix(A0k_prior, "A0k_prior")
        if A0.shape != (n, l):
            raise DataError(f"A0k_prior must be {n}x{l}")
        loc[:n, n : n + l] = A0
    if delta is not None and p > 0:
        delta = np.asarray(delta, dtype=float).reshape(-1)
        if delta.shape[0] != ell:
            raise DataError(f"delta must have {ell} entries")
        loc[n + np.arange(ell), n + l + np.arange(ell)] = delta
    if sigma2 is None:
        sigma2 = np.array([ols_ar_sigma(design.x[i], p) for i in range(ell)]) if p > 0 else np.ones(ell)
    sigma2 = np.asarray(sigma2, dtype=float).reshape(-1)
    nu0 = dim + 2.0 if nu0 is None else float(nu0)
    if V0 is None:
        y, _ = stacked_arrays(design)
        V0 = np.diag([max(float(np.var(row, ddof=1)) if row.size > 1 else 1.0, 1e-12) for row in y])
    V0 = as_matrix(V0, "V0")
    if diffuse:
        precision = np.zeros((k, k))
        idx = np.arange(n_d, n)
        precision[idx, idx] = 1.0
        loc[:, idx] = 0.0
        return NiwPrior(loc, precision, nu0, V0, {"diffuse": True})
    shrink = np.empty(k)
    shrink[: n + l] = lambda1
    for s in range(1, p + 1):
        shrink[n + l + ell * (s - 1) : n + l + ell * s] = lambda2 / (s**2 * sigma2)
    hyper = {"lambda1": float(lambda1), "lambda2": float(lambda2), "nu0": nu0}
    return NiwPrior.from_shrinkage(loc, shrink, nu0, V0, hyper)


def bayes_private_posterior(panel, prior: Optional[NiwPrior] = None, lag_order=0, **prior_kwargs):
    """NIW posterior of the stacked private regression; delegates to ``niw_posterior``."""
    design = _design(panel, lag_order)
    if prior is None:
        prior = build_private_prior(design, **prior_kwargs)
    y, W = stacked_arrays(design)
    return niw_posterior(prior, y, W)
