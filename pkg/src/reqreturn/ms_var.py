"""Markov-switching VAR(p) estimation by maximum likelihood.

Layout conventions: observations ``y`` are (dim x T), regressors ``Ylag`` are
(k x T) with ``k = l + dim * p``, and regime probability matrices are (N x T).
Column ``t`` always refers to the same period across these arrays.
"""

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
from scipy import linalg, stats
from sklearn.base import BaseEstimator

from ._validation import (
    as_matrix,
    as_vector,
    check_positive_int,
    check_probability_vector,
    check_row_stochastic,
    check_spd,
    symmetrize,
)
from .exceptions import (
    ConsistencyError,
    DataError,
    DegeneracyError,
    EmptyRegimeError,
    NonErgodicError,
    NumericalError,
    RankDeficiencyError,
    SingularCovarianceError,
)

COVARIANCE_MODES = ("per-regime", "shared", "scalar-AR0")
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MsVarModel:
    """Parameters of an N-regime MS-VAR(p).

    Attributes
    ----------
    coefficients : ndarray, shape (N, dim, l + dim * p)
        ``Pi(j)`` for each regime; the first ``l`` columns multiply the
        exogenous block, then lag 1, lag 2, ...
    covariances : ndarray, shape (N, dim, dim)
    transition : ndarray, shape (N, N)
        Row-stochastic, ``transition[i, j] = P(s_t = j | s_{t-1} = i)``.
    initial_probs : ndarray, shape (N,)
    """

    coefficients: np.ndarray
    covariances: np.ndarray
    transition: np.ndarray
    initial_probs: np.ndarray
    lag_order: int = 0
    covariance_mode: str = "per-regime"
    exo_mean: Optional[np.ndarray] = None

    def __post_init__(self):
        coef = np.asarray(self.coefficients, dtype=float)
        if coef.ndim == 2:
            coef = coef[None]
        cov = np.asarray(self.covariances, dtype=float)
        if cov.ndim == 2:
            cov = np.broadcast_to(cov, (coef.shape[0],) + cov.shape).copy()
        if coef.ndim != 3 or cov.shape != (coef.shape[0], coef.shape[1], coef.shape[1]):
            raise DataError(f"coefficients {coef.shape} and covariances {cov.shape} are inconsistent")
        if not np.all(np.isfinite(coef)):
            raise DataError("coefficients contain non-finite values")
        N, dim, k = coef.shape
        p = check_positive_int(self.lag_order, "lag_order", minimum=0)
        if k - dim * p < 0:
            raise DataError("coefficient width is smaller than dim * lag_order")
        if self.covariance_mode not in COVARIANCE_MODES:
            raise DataError(f"covariance_mode must be one of {COVARIANCE_MODES}")
        if self.covariance_mode == "scalar-AR0" and (dim != 1 or p != 0):
            raise DataError("scalar-AR0 mode requires a single series and lag order 0")
        cov = np.stack([check_spd(c, f"covariance of regime {j + 1}", sym_tol=1e-12) for j, c in enumerate(cov)])
        if self.covariance_mode != "per-regime" and N > 1 and np.any(cov != cov[0]):
            raise DataError("shared covariance mode requires identical covariances")
        P = check_row_stochastic(self.transition, "transition")
        if P.shape != (N, N):
            raise DataError(f"transition must be {N}x{N}")
        rho = check_probability_vector(self.initial_probs, "initial_probs")
        if rho.shape != (N,):
            raise DataError(f"initial_probs must have length {N}")
        object.__setattr__(self, "coefficients", coef)
        object.__setattr__(self, "covariances", cov)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "initial_probs", rho)
        object.__setattr__(self, "lag_order", p)
        if self.exo_mean is not None:
            exo_mean = as_vector(self.exo_mean, "exo_mean")
            if exo_mean.shape[0] != self.exo_dim:
                raise DataError("exo_mean length must equal the exogenous dimension")
            object.__setattr__(self, "exo_mean", exo_mean)

    @property
    def n_regimes(self):
        return self.coefficients.shape[0]

    @property
    def dim(self):
        return self.coefficients.shape[1]

    @property
    def n_regressors(self):
        return self.coefficients.shape[2]

    @property
    def exo_dim(self):
        return self.n_regressors - self.dim * self.lag_order

    def lag_matrices(self, regime):
        """Autoregressive blocks ``A_1..A_p`` of one regime."""
        coef = self.coefficients[regime]
        l, d = self.exo_dim, self.dim
        return [coef[:, l + s * d : l + (s + 1) * d] for s in range(self.lag_order)]

    def regime_levels(self, psi=None):
        """Regime-implied unconditional mean of ``y`` for each regime.

        For regime ``j`` this is ``(I - sum_s A_s(j))^{-1} A_0(j) psi``, which
        for the AR(0) case is the intercept itself.  ``psi`` defaults to the
        stored exogenous sample mean, or a vector of ones.
        """
        if psi is None:
            psi = self.exo_mean if self.exo_mean is not None else np.ones(self.exo_dim)
        psi = as_vector(psi, "psi")
        levels = np.empty((self.n_regimes, self.dim))
        for j in range(self.n_regimes):
            drift = self.coefficients[j][:, : self.exo_dim] @ psi
            A = np.eye(self.dim) - sum(self.lag_matrices(j), np.zeros((self.dim, self.dim)))
            try:
                levels[j] = np.linalg.solve(A, drift)
            except np.linalg.LinAlgError:
                levels[j] = np.nan
        return levels

    def n_parameters(self):
        """Free parameter count used for information criteria."""
        N, d, k = self.coefficients.shape
        n_cov = d * (d + 1) // 2
        n_cov *= N if self.covariance_mode == "per-regime" else 1
        return N * d * k + n_cov + N * (N - 1) + (N - 1)

    def permuted(self, order):
        """Relabel regimes so that new regime ``i`` is old regime ``order[i]``."""
        order = np.asarray(order)
        return replace(
            self,
            coefficients=self.coefficients[order],
            covariances=self.covariances[order],
            transition=self.transition[np.ix_(order, order)],
            initial_probs=self.initial_probs[order],
        )

    def to_dict(self):
        return {
            "n_regimes": self.n_regimes,
            "dim": self.dim,
            "lag_order": self.lag_order,
            "exo_dim": self.exo_dim,
            "covariance_mode": self.covariance_mode,
            "coefficients": self.coefficients.tolist(),
            "covariances": self.covariances.tolist(),
            "transition": self.transition.tolist(),
            "initial_probs": self.initial_probs.tolist(),
            "exo_mean": None if self.exo_mean is None else self.exo_mean.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(
            coefficients=np.array(doc["coefficients"], dtype=float),
            covariances=np.array(doc["covariances"], dtype=float),
            transition=np.array(doc["transition"], dtype=float),
            initial_probs=np.array(doc["initial_probs"], dtype=float),
            lag_order=int(doc["lag_order"]),
            covariance_mode=doc["covariance_mode"],
            exo_mean=None if doc.get("exo_mean") is None else np.array(doc["exo_mean"], dtype=float),
        )


@dataclass(frozen=True)
class RegimeInference:
    """Filtered, predicted and (optionally) smoothed regime probabilities.

    All probability matrices are (N x T).  ``log_densities[j, t]`` is the log
    of the regime-``j`` conditional density of observation ``t``.
    """

    filtered: np.ndarray
    predicted: np.ndarray
    log_likelihood: float
    log_densities: np.ndarray
    smoothed: Optional[np.ndarray] = None

    @property
    def densities(self):
        return np.exp(self.log_densities)

    @property
    def n_regimes(self):
        return self.filtered.shape[0]

    @property
    def n_periods(self):
        return self.filtered.shape[1]


def log_regime_densities(model: MsVarModel, y, Ylag, covariances_t=None):
    """Log Gaussian densities ``ln eta_{tj}``, shape (N, T).

    Parameters
    ----------
    covariances_t : array-like, optional
        Externally supplied time-varying covariances, either (T, dim, dim)
        shared by all regimes or (N, T, dim, dim).  Overrides the model's
        constant per-regime covariances.
    """
    y = as_matrix(y, "y")
    Ylag = as_matrix(Ylag, "Ylag")
    if y.shape[0] != model.dim or Ylag.shape[0] != model.n_regressors or y.shape[1] != Ylag.shape[1]:
        raise DataError(
            f"observation shapes y {y.shape}, Ylag {Ylag.shape} do not match model "
            f"(dim {model.dim}, regressors {model.n_regressors})"
        )
    N, T, d = model.n_regimes, y.shape[1], model.dim
    out = np.empty((N, T))
    if covariances_t is not None:
        cov_t = np.asarray(covariances_t, dtype=float)
        if cov_t.ndim == 3:
            cov_t = np.broadcast_to(cov_t, (N,) + cov_t.shape)
        if cov_t.shape != (N, T, d, d):
            raise DataError(f"covariances_t must have shape (T, dim, dim) or (N, T, dim, dim), got {cov_t.shape}")
    for j in range(N):
        resid = y - model.coefficients[j] @ Ylag
        if covariances_t is None:
            try:
                chol = linalg.cholesky(model.covariances[j], lower=True)
            except linalg.LinAlgError as exc:
                raise SingularCovarianceError(f"covariance of regime {j + 1} is not positive definite") from exc
            z = linalg.solve_triangular(chol, resid, lower=True)
            logdet = 2.0 * np.sum(np.log(np.diag(chol)))
            out[j] = -0.5 * (d * _LOG_2PI + logdet + np.sum(z * z, axis=0))
        else:
            try:
                chol = np.linalg.cholesky(symmetrize(cov_t[j]))
            except np.linalg.LinAlgError as exc:
                raise SingularCovarianceError(f"time-varying covariance of regime {j + 1} is singular") from exc
            z = np.linalg.solve(chol, resid.T[:, :, None])[:, :, 0]
            logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
            out[j] = -0.5 * (d * _LOG_2PI + logdet + np.sum(z * z, axis=1))
    return out


def regime_density(model: MsVarModel, y_t, Y_lag, regime):
    """Gaussian density of one observation under one regime."""
    y_t = as_vector(y_t, "y_t").reshape(-1, 1)
    Y_lag = as_vector(Y_lag, "Y_lag").reshape(-1, 1)
    if not 0 <= regime < model.n_regimes:
        raise DataError(f"regime index {regime} out of range")
    return float(np.exp(log_regime_densities(model, y_t, Y_lag)[regime, 0]))


def filter_probabilities(log_densities, transition, initial_probs):
    """Forward recursion on log densities; returns (filtered, predicted, loglik).

    Densities are rescaled per period by their maximum before exponentiation
    and the scale is added back to the log-likelihood, so long samples do not
    underflow.
    """
    log_eta = np.asarray(log_densities, dtype=float)
    P = np.asarray(transition, dtype=float)
    N, T = log_eta.shape
    shift = np.max(log_eta, axis=0)
    if not np.all(np.isfinite(shift)):
        t = int(np.argmax(~np.isfinite(shift)))
        raise DegeneracyError(f"all regime densities vanish at period {t}")
    eta = np.exp(log_eta - shift)
    filtered = np.empty((N, T))
    predicted = np.empty((N, T))
    PT = P.T.copy()
    pred = np.asarray(initial_probs, dtype=float).copy()
    loglik = 0.0
    for t in range(T):
        predicted[:, t] = pred
        w = pred * eta[:, t]
        s = w.sum()
        if not s > 0.0:
            raise DegeneracyError(f"filter normalizer is zero at period {t}")
        f = w / s
        filtered[:, t] = f
        loglik += math.log(s)
        pred = PT @ f
    loglik += float(shift.sum())
    return filtered, predicted, loglik


def hamilton_filter(model: MsVarModel, y, Ylag, covariances_t=None):
    """Filtered and one-step-predicted regime probabilities plus log-likelihood."""
    log_eta = log_regime_densities(model, y, Ylag, covariances_t)
    if log_eta.shape[1] < 1:
        raise DataError("at least one observation is required")
    filtered, predicted, loglik = filter_probabilities(log_eta, model.transition, model.initial_probs)
    return RegimeInference(filtered=filtered, predicted=predicted, log_likelihood=loglik, log_densities=log_eta)


def _smoothing_ratio(smoothed, predicted):
    """``smoothed / predicted`` with 0/0 := 0; nonzero/0 is a degeneracy."""
    bad = (predicted <= 0.0) & (smoothed > 0.0)
    if np.any(bad):
        idx = np.argwhere(bad)[0]
        raise DegeneracyError(f"zero predicted probability with positive smoothed mass at {tuple(idx)}")
    ratio = np.zeros_like(smoothed)
    np.divide(smoothed, predicted, out=ratio, where=predicted > 0.0)
    return ratio


def kim_smoother(inference: RegimeInference, transition):
    """Backward recursion for full-sample regime probabilities, shape (N, T).

    ``z_{t|T} = z_{t|t} * (P @ (z_{t+1|T} / z_{t+1|t}))`` with ``P`` row
    stochastic (``P[i, j]`` is the probability of moving from i to j).
    """
    P = np.asarray(transition, dtype=float)
    filt, pred = inference.filtered, inference.predicted
    N, T = filt.shape
    smoothed = np.empty((N, T))
    smoothed[:, T - 1] = filt[:, T - 1]
    for t in range(T - 2, -1, -1):
        ratio = _smoothing_ratio(smoothed[:, t + 1], pred[:, t + 1])
        smoothed[:, t] = filt[:, t] * (P @ ratio)
    return smoothed


def smooth(inference: RegimeInference, transition):
    """Return a copy of ``inference`` with the smoothed probabilities filled in."""
    return replace(inference, smoothed=kim_smoother(inference, transition))


def infer(model: MsVarModel, y, Ylag, covariances_t=None):
    """Filter and smoother in one call."""
    return smooth(hamilton_filter(model, y, Ylag, covariances_t), model.transition)


def pairwise_probabilities(inference: RegimeInference, transition):
    """Joint smoothed probabilities of consecutive regimes.

    Returns
    -------
    ndarray, shape (T - 1, N, N)
        Entry ``[t - 1, i, j] = P(s_{t-1} = i, s_t = j | F_T)`` for column
        ``t = 1..T-1``.
    """
    if inference.smoothed is None:
        raise DataError("smoothed probabilities are required")
    P = np.asarray(transition, dtype=float)
    ratio = _smoothing_ratio(inference.smoothed[:, 1:], inference.predicted[:, 1:])
    return P[None, :, :] * inference.filtered[:, :-1].T[:, :, None] * ratio.T[:, None, :]


def joint_regime_prob(inference: RegimeInference, transition, t, i, j):
    """``P(s_{t-1} = i, s_t = j | F_T)`` for a single column index ``t >= 1``."""
    if inference.smoothed is None:
        raise DataError("smoothed probabilities are required")
    if not 1 <= t < inference.n_periods:
        raise DataError(f"t must lie in [1, {inference.n_periods - 1}], got {t}")
    pred = inference.predicted[j, t]
    num = transition[i][j] * inference.smoothed[j, t] * inference.filtered[i, t - 1]
    if pred <= 0.0:
        if num > 0.0:
            raise DegeneracyError(f"zero predicted probability for regime {j + 1} at period {t}")
        return 0.0
    return float(num / pred)


def estimate_transition(joint, smoothed, *, min_mass=1e-12):
    """Transition-matrix MLE from pairwise and smoothed probabilities."""
    joint = np.asarray(joint, dtype=float)
    smoothed = np.asarray(smoothed, dtype=float)
    N = smoothed.shape[0]
    if N == 1:
        return np.ones((1, 1))
    if joint.shape[0] < 1:
        raise DataError("at least two periods are needed to estimate transitions")
    counts = joint.sum(axis=0)
    mass = smoothed[:, :-1].sum(axis=1)
    empty = np.flatnonzero(mass <= min_mass)
    if empty.size:
        raise EmptyRegimeError(f"regime {empty[0] + 1} has no smoothed mass before the last period")
    P = counts / mass[:, None]
    return P / P.sum(axis=1, keepdims=True)


def _solve_gram(G, rhs, what):
    G = symmetrize(G)
    try:
        factor = linalg.cho_factor(G, lower=True)
    except linalg.LinAlgError as exc:
        raise RankDeficiencyError(what) from exc
    diag = np.diag(factor[0])
    if diag.min() <= 1e-10 * max(diag.max(), 1e-300):
        raise RankDeficiencyError(what)
    return linalg.cho_solve(factor, rhs)


def weighted_regression(y, Ylag, weights=None):
    """Regime-weighted least squares ``Pi = y_w Y_w' (Y_w Y_w')^{-1}``.

    Columns of ``y`` and ``Ylag`` are scaled by the square roots of the
    weights; with unit weights this is ordinary least squares.
    """
    y = as_matrix(y, "y")
    Ylag = as_matrix(Ylag, "Ylag")
    w = np.ones(y.shape[1]) if weights is None else as_vector(weights, "weights")
    if np.any(w < 0):
        raise DataError("weights must be non-negative")
    root = np.sqrt(w)
    ys, Ys = y * root, Ylag * root
    G = Ys @ Ys.T
    rhs = Ys @ ys.T
    coef = _solve_gram(
        G, rhs, f"regime-weighted Gram matrix is singular (effective sample size {w.sum():.6g})"
    )
    return coef.T


def weighted_covariance(residuals, weights, mode="per-regime", *, min_mass=1e-12):
    """Residual covariance per regime, or pooled over regimes.

    Parameters
    ----------
    residuals : ndarray, shape (N, dim, T)
        Residuals of every observation under each regime's coefficients.
    weights : ndarray, shape (N, T)
        Smoothed regime probabilities.
    mode : {"per-regime", "shared", "scalar-AR0"}
        Per-regime estimates divide by each regime's total weight; pooled
        estimates divide the sum over regimes by T.

    Returns
    -------
    ndarray, shape (N, dim, dim)
    """
    res = np.asarray(residuals, dtype=float)
    w = np.asarray(weights, dtype=float)
    if res.ndim == 2:
        res = res[None]
    if w.ndim == 1:
        w = w[None]
    N, d, T = res.shape
    outer = np.einsum("jat,jt,jbt->jab", res, w, res)
    if mode == "per-regime":
        mass = w.sum(axis=1)
        empty = np.flatnonzero(mass <= min_mass)
        if empty.size:
            raise EmptyRegimeError(f"regime {empty[0] + 1} has zero smoothed mass")
        cov = outer / mass[:, None, None]
    elif mode in ("shared", "scalar-AR0"):
        if T < 1:
            raise DataError("at least one observation is required")
        pooled = outer.sum(axis=0) / T
        cov = np.broadcast_to(pooled, (N, d, d)).copy()
    else:
        raise DataError(f"unknown covariance mode {mode!r}")
    return symmetrize(cov)


def m_step(y, Ylag, inference: RegimeInference, transition, covariance_mode="per-regime", lag_order=0, exo_mean=None):
    """Closed-form maximization given the E-step at ``transition``."""
    smoothed = inference.smoothed
    N = smoothed.shape[0]
    if N > 1:
        mass = smoothed.sum(axis=1)
        empty = np.flatnonzero(mass <= 1e-8)
        if empty.size:
            raise EmptyRegimeError(f"regime {empty[0] + 1} collapsed (smoothed mass {mass[empty[0]]:.3g})")
    joint = pairwise_probabilities(inference, transition) if N > 1 else None
    P = estimate_transition(joint, smoothed) if N > 1 else np.ones((1, 1))
    rho = smoothed[:, 0] / smoothed[:, 0].sum()
    coefs = np.stack([weighted_regression(y, Ylag, smoothed[j]) for j in range(N)])
    resid = y[None] - np.einsum("jdk,kt->jdt", coefs, Ylag)
    covs = weighted_covariance(resid, smoothed, covariance_mode)
    for j in range(N):
        if np.linalg.eigvalsh(covs[j])[0] <= 1e-14 * max(1.0, np.trace(covs[j])):
            raise SingularCovarianceError(f"covariance of regime {j + 1} became singular")
    return MsVarModel(
        coefficients=coefs,
        covariances=covs,
        transition=P,
        initial_probs=rho,
        lag_order=lag_order,
        covariance_mode=covariance_mode,
        exo_mean=exo_mean,
    )


def model_from_weights(y, Ylag, weights, covariance_mode="per-regime", lag_order=0, stay=0.9, exo_mean=None):
    """Initial model from soft regime assignments (N x T)."""
    weights = np.asarray(weights, dtype=float)
    N = weights.shape[0]
    coefs = np.stack([weighted_regression(y, Ylag, weights[j]) for j in range(N)])
    resid = y[None] - np.einsum("jdk,kt->jdt", coefs, Ylag)
    covs = weighted_covariance(resid, weights, covariance_mode)
    floor = 1e-8 * max(1.0, float(np.max(np.var(y, axis=1))))
    covs = covs + floor * np.eye(y.shape[0])[None]
    if N == 1:
        P = np.ones((1, 1))
    else:
        P = np.full((N, N), (1.0 - stay) / (N - 1))
        np.fill_diagonal(P, stay)
    return MsVarModel(
        coefficients=coefs,
        covariances=covs,
        transition=P,
        initial_probs=np.full(N, 1.0 / N),
        lag_order=lag_order,
        covariance_mode=covariance_mode,
        exo_mean=exo_mean,
    )


def kmeans_weights(y, Ylag, n_regimes, *, n_iter=50, hard=0.8):
    """Soft initial assignments from a 1-D k-means split of OLS residuals.

    Residuals are projected on their first principal direction, clustered by
    Lloyd iterations started at quantiles, and the hard labels are softened
    (``hard`` on the assigned regime) so that every regime sees all data.
    """
    N, T = n_regimes, y.shape[1]
    if N == 1:
        return np.ones((1, T))
    coef = weighted_regression(y, Ylag)
    resid = y - coef @ Ylag
    if resid.shape[0] > 1:
        _, _, vt = np.linalg.svd(resid.T, full_matrices=False)
        score = resid.T @ vt[0]
        score *= np.sign(vt[0][0]) if vt[0][0] != 0 else 1.0
    else:
        score = resid[0]
    centers = np.quantile(score, (np.arange(N) + 0.5) / N)
    labels = np.zeros(T, dtype=int)
    for _ in range(n_iter):
        labels = np.argmin(np.abs(score[:, None] - centers[None, :]), axis=1)
        new = np.array([score[labels == j].mean() if np.any(labels == j) else centers[j] for j in range(N)])
        if np.allclose(new, centers):
            break
        centers = new
    W = np.full((N, T), (1.0 - hard) / (N - 1))
    W[labels, np.arange(T)] = hard
    return W


@dataclass
class EmResult:
    model: MsVarModel
    inference: RegimeInference
    trace: List[float]
    n_iter: int
    converged: bool
    n_restarts_used: int = 0
    information: dict = field(default_factory=dict)


def _run_em(y, Ylag, model, *, tol, max_iter, monotone_tol, covariance_mode, lag_order, exo_mean):
    trace = []
    inf = infer(model, y, Ylag)
    trace.append(inf.log_likelihood)
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        model = m_step(y, Ylag, inf, model.transition, covariance_mode, lag_order, exo_mean)
        inf = infer(model, y, Ylag)
        trace.append(inf.log_likelihood)
        delta = trace[-1] - trace[-2]
        if delta < -monotone_tol:
            raise ConsistencyError(
                f"log-likelihood decreased by {-delta:.3g} at EM iteration {n_iter}"
            )
        if model.n_regimes == 1 or abs(delta) < tol:
            converged = True
            break
    return model, inf, trace, n_iter, converged


def em_fit(
    y,
    Ylag,
    n_regimes,
    covariance_mode="per-regime",
    *,
    lag_order=0,
    init=None,
    tol=1e-8,
    max_iter=500,
    n_restarts=5,
    monotone_tol=1e-8,
    seed=0,
    sort_regimes=True,
):
    """Zig-zag EM for the MS-VAR: filter, smoother, closed-form M-step.

    Parameters
    ----------
    y, Ylag : ndarray
        (dim x T) observations and (k x T) regressors.
    init : None, "random", ndarray or MsVarModel
        ``None`` uses the k-means split of OLS residuals; ``"random"`` draws
        Dirichlet soft assignments from ``seed``; an (N x T) array is used as
        soft assignments; a model is used as the starting point.
    n_restarts : int
        Number of perturbed restarts attempted when a regime collapses.

    Returns
    -------
    EmResult
    """
    y = as_matrix(y, "y")
    Ylag = as_matrix(Ylag, "Ylag")
    N = check_positive_int(n_regimes, "n_regimes")
    if covariance_mode not in COVARIANCE_MODES:
        raise DataError(f"covariance_mode must be one of {COVARIANCE_MODES}")
    if y.shape[1] != Ylag.shape[1]:
        raise DataError("y and Ylag must have the same number of columns")
    if y.shape[1] <= Ylag.shape[0]:
        raise DataError(f"T={y.shape[1]} must exceed the regressor dimension {Ylag.shape[0]}")
    exo_dim = Ylag.shape[0] - y.shape[0] * lag_order
    exo_mean = Ylag[:exo_dim].mean(axis=1) if exo_dim > 0 else None
    rng = np.random.default_rng(seed)
    T = y.shape[1]

    def starting_model(attempt):
        if isinstance(init, MsVarModel):
            if attempt == 0:
                return init
            W = rng.dirichlet(np.ones(N), size=T).T
            return model_from_weights(y, Ylag, W, covariance_mode, lag_order, exo_mean=exo_mean)
        if isinstance(init, str) and init == "random":
            W = rng.dirichlet(np.ones(N), size=T).T
        elif init is not None:
            W = np.asarray(init, dtype=float)
            if W.shape != (N, T):
                raise DataError(f"initial weights must have shape ({N}, {T})")
        else:
            W = kmeans_weights(y, Ylag, N)
        if attempt > 0:
            W = 0.5 * W + 0.5 * rng.dirichlet(np.ones(N), size=T).T
        return model_from_weights(y, Ylag, W, covariance_mode, lag_order, exo_mean=exo_mean)

    last_error = None
    for attempt in range(n_restarts + 1):
        try:
            model = starting_model(attempt)
            model, inf, trace, n_iter, converged = _run_em(
                y,
                Ylag,
                model,
                tol=tol,
                max_iter=max_iter,
                monotone_tol=monotone_tol,
                covariance_mode=covariance_mode,
                lag_order=lag_order,
                exo_mean=exo_mean,
            )
        except (EmptyRegimeError, SingularCovarianceError, RankDeficiencyError, DegeneracyError) as exc:
            last_error = exc
            continue
        if sort_regimes and N > 1:
            order = np.argsort(-model.regime_levels()[:, 0], kind="stable")
            if np.any(order != np.arange(N)):
                model = model.permuted(order)
                inf = infer(model, y, Ylag)
        k = model.n_parameters()
        ll = inf.log_likelihood
        info = {"log_likelihood": ll, "n_parameters": k, "aic": -2 * ll + 2 * k, "bic": -2 * ll + k * math.log(T)}
        return EmResult(model, inf, trace, n_iter, converged, attempt, info)
    raise type(last_error)(f"EM failed after {n_restarts} restarts: {last_error}") from last_error


# diagnostics -----------------------------------------------------------------


def persistence_times(transition):
    """Expected sojourn ``1 / (1 - p_jj)``; ``inf`` for absorbing regimes."""
    P = check_row_stochastic(transition)
    stay = np.diag(P)
    with np.errstate(divide="ignore"):
        return np.where(stay < 1.0, 1.0 / (1.0 - stay), np.inf)


def is_ergodic(transition, tol=1e-10):
    """Unit eigenvalue simple and all other eigenvalues strictly inside the unit circle."""
    eig = np.linalg.eigvals(np.asarray(transition, dtype=float))
    unit = np.abs(eig - 1.0) < tol
    return int(unit.sum()) == 1 and bool(np.all(np.abs(eig[~unit]) < 1.0 - tol))


def ergodic_distribution(transition, *, strict=True):
    """Stationary distribution solving ``pi' P = pi'`` with ``sum(pi) = 1``."""
    P = check_row_stochastic(transition)
    N = P.shape[0]
    if strict and not is_ergodic(P):
        raise NonErgodicError("transition matrix is not ergodic")
    A = np.vstack([(np.eye(N) - P).T, np.ones((1, N))])
    b = np.zeros(N + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(A, b, rcond=None)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def long_run_expectation(levels, ergodic):
    """Probability-weighted regime levels ``sum_j pi_j k(j)``."""
    levels = np.asarray(levels, dtype=float)
    ergodic = as_vector(ergodic, "ergodic")
    return np.tensordot(ergodic, levels, axes=(0, 0))


@dataclass(frozen=True)
class RegimeDiagnostics:
    persistence: np.ndarray
    ergodic: Optional[np.ndarray]
    long_run_k: Optional[object]
    levels: np.ndarray
    issues: tuple = ()

    def to_dict(self):
        def clean(a):
            if a is None:
                return None
            return [None if not np.isfinite(v) else float(v) for v in np.ravel(a)]

        return {
            "persistence": clean(self.persistence),
            "ergodic": clean(self.ergodic),
            "long_run_k": clean(self.long_run_k),
            "levels": np.asarray(self.levels).tolist(),
            "issues": list(self.issues),
        }


def regime_diagnostics(model: MsVarModel, *, strict=False, levels=None):
    """Persistence times, ergodic probabilities and the long-run level.

    Non-ergodic chains do not raise unless ``strict``; the unavailable pieces
    are returned as ``None`` and listed in ``issues``.
    """
    P = model.transition
    tau = persistence_times(P)
    issues = []
    absorbing = np.flatnonzero(~np.isfinite(tau))
    if absorbing.size:
        issues.append(f"persistence undefined for absorbing regimes {[int(j) + 1 for j in absorbing]}")
    k_levels = model.regime_levels() if levels is None else np.asarray(levels, dtype=float)
    if k_levels.ndim == 1:
        k_levels = k_levels[:, None]
    if is_ergodic(P):
        pi = ergodic_distribution(P)
        lr = long_run_expectation(k_levels, pi)
        lr = float(lr[0]) if lr.shape == (1,) else lr
    else:
        if strict:
            raise NonErgodicError("transition matrix is not ergodic; ergodic probabilities are unavailable")
        issues.append("transition matrix is not ergodic; ergodic probabilities and long-run level unavailable")
        pi, lr = None, None
    return RegimeDiagnostics(tau, pi, lr, k_levels, tuple(issues))


# scalar AR(0) -------------------------------------------------------------------


def _check_prob(prob):
    if not 0.0 < prob < 1.0:
        raise DataError(f"probability must lie strictly in (0, 1), got {prob}")


def student_t_quantile(prob, dof):
    """Inverse CDF of Student's t."""
    _check_prob(prob)
    if dof < 1:
        raise DataError("degrees of freedom must be >= 1")
    if prob == 0.5:
        return 0.0
    return float(stats.t.ppf(prob, dof))


def chi2_quantile(prob, dof):
    """Inverse CDF of the chi-square distribution."""
    _check_prob(prob)
    if dof < 1:
        raise DataError("degrees of freedom must be >= 1")
    return float(stats.chi2.ppf(prob, dof))


@dataclass(frozen=True)
class ScalarArEstimate:
    a0_hat: float
    sigma_hat: float
    T: int
    alpha: float
    ci_a0: tuple
    ci_sigma2: tuple
    pred_interval_log: tuple
    pred_interval_simple: tuple

    @property
    def point_simple(self):
        """Point estimate converted to a simple rate, ``exp(a0) - 1``."""
        return math.expm1(self.a0_hat)

    def to_dict(self):
        return {
            "a0_hat": self.a0_hat,
            "sigma_hat": self.sigma_hat,
            "T": self.T,
            "alpha": self.alpha,
            "ci_a0": list(self.ci_a0),
            "ci_sigma2": list(self.ci_sigma2),
            "pred_interval_log": list(self.pred_interval_log),
            "pred_interval_simple": list(self.pred_interval_simple),
            "point_simple": self.point_simple,
        }


def scalar_ar0_from_moments(a0_hat, sigma_hat, T, alpha=0.05):
    """Confidence and prediction bands from the AR(0) sufficient statistics."""
    T = check_positive_int(T, "T", minimum=2)
    if sigma_hat < 0:
        raise DataError("sigma_hat must be non-negative")
    _check_prob(alpha)
    t_q = student_t_quantile(1.0 - alpha / 2.0, T - 1)
    half = t_q * sigma_hat / math.sqrt(T - 1)
    ci_a0 = (a0_hat - half, a0_hat + half)
    s2 = sigma_hat**2
    ci_sigma2 = (
        T * s2 / chi2_quantile(1.0 - alpha / 2.0, T - 1),
        T * s2 / chi2_quantile(alpha / 2.0, T - 1),
    )
    pred_half = t_q * math.sqrt(T / (T - 1)) * sigma_hat
    pred_log = (a0_hat - pred_half, a0_hat + pred_half)
    pred_simple = (math.expm1(pred_log[0]), math.expm1(pred_log[1]))
    return ScalarArEstimate(float(a0_hat), float(sigma_hat), T, float(alpha), ci_a0, ci_sigma2, pred_log, pred_simple)


def scalar_ar0_estimate(series, alpha=0.05):
    """ML fit of ``k_t = a0 + e_t`` with t and chi-square bands (divisor T)."""
    k = as_vector(series, "series")
    if k.shape[0] < 2:
        raise DataError("at least two observations are required")
    # compensated sums keep constant series exactly constant
    a0 = math.fsum(k) / k.shape[0]
    sigma = math.sqrt(math.fsum((k - a0) ** 2) / k.shape[0])
    return scalar_ar0_from_moments(a0, sigma, k.shape[0], alpha)


# estimator --------------------------------------------------------------------


class MarkovSwitchingVAR(BaseEstimator):
    """Markov-switching VAR(p) fitted by EM.

    Inputs are time-major: ``X`` is (T, dim) and ``exog`` (T, l) defaults to
    a constant column.  The first ``lag_order`` rows are presample values.

    Parameters
    ----------
    n_regimes : int
    lag_order : int
    covariance_mode : {"per-regime", "shared", "scalar-AR0"}
    tol, max_iter, n_restarts : EM controls
    random_state : int
    """

    def __init__(
        self,
        n_regimes=2,
        lag_order=0,
        covariance_mode="per-regime",
        tol=1e-8,
        max_iter=500,
        n_restarts=5,
        random_state=0,
        init=None,
    ):
        self.n_regimes = n_regimes
        self.lag_order = lag_order
        self.covariance_mode = covariance_mode
        self.tol = tol
        self.max_iter = max_iter
        self.n_restarts = n_restarts
        self.random_state = random_state
        self.init = init

    def _design(self, X, exog):
        from .market_data import lagged_design

        X = as_matrix(X, "X")
        if exog is None:
            exog = np.ones((X.shape[0], 1))
        exog = as_matrix(exog, "exog")
        if exog.shape[0] != X.shape[0]:
            raise DataError("exog must have the same number of rows as X")
        return lagged_design(X.T, exog.T, self.lag_order)

    def fit(self, X, y=None, exog=None):
        ybar, Ylag = self._design(X, exog)
        result = em_fit(
            ybar,
            Ylag,
            self.n_regimes,
            self.covariance_mode,
            lag_order=self.lag_order,
            init=self.init,
            tol=self.tol,
            max_iter=self.max_iter,
            n_restarts=self.n_restarts,
            seed=self.random_state,
        )
        self.model_ = result.model
        self.inference_ = result.inference
        self.trace_ = result.trace
        self.n_iter_ = result.n_iter
        self.converged_ = result.converged
        self.information_ = result.information
        self.diagnostics_ = regime_diagnostics(result.model)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise DataError("estimator is not fitted")

    def transform(self, X, exog=None, smoothed=True):
        """Regime probabilities, (T - p, N) time-major."""
        self._check_fitted()
        ybar, Ylag = self._design(X, exog)
        inf = infer(self.model_, ybar, Ylag)
        return (inf.smoothed if smoothed else inf.filtered).T

    predict_proba = transform

    def predict(self, X, exog=None):
        """Most probable regime per period under the smoothed probabilities."""
        return np.argmax(self.transform(X, exog), axis=1)

    def score(self, X, y=None, exog=None):
        self._check_fitted()
        ybar, Ylag = self._design(X, exog)
        return hamilton_filter(self.model_, ybar, Ylag).log_likelihood
