"""Closed-form mean-variance selection over equities and an own-liability position."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg

from ._validation import as_matrix, as_vector, check_probability_vector, symmetrize
from .exceptions import DataError, SingularCovarianceError


@dataclass(frozen=True)
class PredictiveMoments:
    """One-period-ahead moments of ``exp(J y_1)``.

    ``total_covariance`` adds the between-regime spread of the conditional
    means (law of total variance); it is a diagnostic only and is never used
    by the solver.
    """

    mean: np.ndarray
    covariance: np.ndarray
    source: str
    selector: np.ndarray
    per_regime_mean: Optional[np.ndarray] = None
    per_regime_covariance: Optional[np.ndarray] = None
    total_covariance: Optional[np.ndarray] = None

    def to_dict(self):
        doc = {
            "mean": self.mean.tolist(),
            "covariance": self.covariance.tolist(),
            "source": self.source,
        }
        if self.total_covariance is not None:
            doc["total_covariance"] = self.total_covariance.tolist()
        return doc


@dataclass(frozen=True)
class PortfolioSolution:
    equity_weights: np.ndarray
    own_liability_weight: float
    risk_aversion: float
    liability_rate: float
    objective_value: float
    residuals: dict = field(default_factory=dict)
    moments: Optional[PredictiveMoments] = None

    def to_dict(self):
        doc = {
            "equity_weights": self.equity_weights.tolist(),
            "own_liability_weight": self.own_liability_weight,
            "risk_aversion": self.risk_aversion,
            "liability_rate": self.liability_rate,
            "objective_value": self.objective_value,
            "residuals": dict(self.residuals),
        }
        if self.moments is not None:
            doc["moments"] = self.moments.to_dict()
        return doc


def selector(n_assets, dim):
    """``J = [I_n : 0]`` picking the equity block out of ``y``."""
    if not 1 <= n_assets <= dim:
        raise DataError(f"n_assets must lie in [1, {dim}]")
    return np.eye(n_assets, dim)


def lognormal_moments(mean_log, cov_log):
    """Mean and covariance of ``exp(z)`` for ``z ~ N(mean_log, cov_log)``."""
    m = as_vector(mean_log, "mean_log")
    S = symmetrize(as_matrix(cov_log, "cov_log"))
    mu = np.exp(m + 0.5 * np.diag(S))
    cov = np.outer(mu, mu) * np.expm1(S)
    return mu, symmetrize(cov)


def rs_moments(model, Y0, probs, n_assets=None):
    """Regime-mixed lognormal moments for the MS-VAR one-step forecast.

    Parameters
    ----------
    model : MsVarModel
    Y0 : array-like, shape (k,)
        Regressor vector ``(psi_1, y_0, ..., y_{1-p})``.
    probs : array-like, shape (N,)
        Regime probabilities for period 1 (typically the filter prediction).
    n_assets : int, optional
        Number of equity series at the top of ``y``; defaults to all.
    """
    Y0 = as_vector(Y0, "Y0")
    probs = check_probability_vector(probs, "probs", tol=1e-10)
    if probs.shape[0] != model.n_regimes:
        raise DataError("one probability per regime is required")
    if Y0.shape[0] != model.n_regressors:
        raise DataError(f"Y0 must have length {model.n_regressors}")
    J = selector(model.dim if n_assets is None else n_assets, model.dim)
    means, covs = [], []
    for j in range(model.n_regimes):
        mu_j, cov_j = lognormal_moments(J @ model.coefficients[j] @ Y0, J @ model.covariances[j] @ J.T)
        means.append(mu_j)
        covs.append(cov_j)
    means, covs = np.array(means), np.array(covs)
    mu = probs @ means
    cov = symmetrize(np.tensordot(probs, covs, axes=(0, 0)))
    spread = means - mu
    total = cov + np.einsum("j,ja,jb->ab", probs, spread, spread)
    return PredictiveMoments(mu, cov, "rs", J, means, covs, symmetrize(total))


def bayes_moments(posterior, Y0, n_assets=None):
    """Lognormal moments under the posterior predictive plug-in ``(Pi*, E Sigma)``."""
    Y0 = as_vector(Y0, "Y0")
    if posterior.point_sigma is None:
        raise DataError("posterior mean of Sigma is undefined (nu* <= dim + 1)")
    if Y0.shape[0] != posterior.n_regressors:
        raise DataError(f"Y0 must have length {posterior.n_regressors}")
    J = selector(posterior.dim if n_assets is None else n_assets, posterior.dim)
    mu, cov = lognormal_moments(J @ posterior.location @ Y0, J @ posterior.point_sigma @ J.T)
    return PredictiveMoments(mu, cov, "bayes", J)


def objective(x, x_i, mu, cov, k_liability, c):
    return float(x @ mu - x_i * k_liability - 0.5 * c * x @ cov @ x)


def solve_mean_variance(moments: PredictiveMoments, k_liability, c):
    """Unconstrained optimum ``x* = Sigma^{-1}(mu + k 1) / c``, ``x_i = 1 - 1'x*``."""
    if not c > 0:
        raise DataError("risk aversion c must be positive")
    mu = as_vector(moments.mean, "mean")
    cov = symmetrize(as_matrix(moments.covariance, "covariance"))
    rhs = (mu + k_liability) / c
    try:
        factor = linalg.cho_factor(cov, lower=True)
    except linalg.LinAlgError as exc:
        raise SingularCovarianceError("predictive covariance is singular") from exc
    d = np.diag(factor[0])
    if d.min() <= 1e-12 * max(d.max(), 1e-300):
        raise SingularCovarianceError("predictive covariance is numerically singular")
    x = linalg.cho_solve(factor, rhs)
    x_i = 1.0 - x.sum()
    residuals = {
        "budget": float(abs(x.sum() + x_i - 1.0)),
        "stationarity": float(np.max(np.abs(c * cov @ x - mu - k_liability))),
    }
    return PortfolioSolution(
        x,
        float(x_i),
        float(c),
        float(k_liability),
        objective(x, x_i, mu, cov, k_liability, c),
        residuals,
        moments,
    )
