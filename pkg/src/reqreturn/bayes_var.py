"""Conjugate normal-inverse-Wishart analysis of a single-regime VAR(p).

The prior is ``Sigma ~ IW(nu0, V0)`` and, given ``Sigma``, ``Pi`` is matrix
normal with mean ``Pi0``, row covariance ``Sigma`` and column covariance
``Lambda0``.  The package stores the column *precision* ``Lambda0^{-1}``,
which makes the diffuse limit (zero precision) and sequential updating
exact.
"""

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg
from sklearn.base import BaseEstimator

from ._validation import as_matrix, as_vector, check_positive_int, check_spd, symmetrize
from .exceptions import ConditioningError, DataError, RankDeficiencyError, SingularCovarianceError


@dataclass(frozen=True)
class NiwPrior:
    """Normal-inverse-Wishart prior.

    Attributes
    ----------
    location : ndarray, shape (dim, k)
        Prior mean ``Pi0``.
    precision : ndarray, shape (k, k)
        ``Lambda0^{-1}``; all zeros encodes the diffuse prior.
    dof : float
        ``nu0 > dim - 1``.
    scale : ndarray, shape (dim, dim)
        ``V0``, symmetric positive definite.
    hyper : dict
        Hyperparameters that produced the prior, for reporting.
    """

    location: np.ndarray
    precision: np.ndarray
    dof: float
    scale: np.ndarray
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        loc = as_matrix(self.location, "location")
        prec = as_matrix(self.precision, "precision")
        if prec.shape != (loc.shape[1], loc.shape[1]):
            raise DataError(f"precision must be {loc.shape[1]}x{loc.shape[1]}, got {prec.shape}")
        prec = symmetrize(prec)
        if prec.size and np.linalg.eigvalsh(prec)[0] < -1e-12 * max(1.0, np.abs(prec).max()):
            raise DataError("prior precision must be positive semi-definite")
        scale = check_spd(self.scale, "V0")
        if scale.shape != (loc.shape[0], loc.shape[0]):
            raise DataError("V0 dimension does not match the location matrix")
        if not self.dof > loc.shape[0] - 1:
            raise DataError(f"nu0 must exceed dim - 1 = {loc.shape[0] - 1}")
        object.__setattr__(self, "location", loc)
        object.__setattr__(self, "precision", prec)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "dof", float(self.dof))

    @classmethod
    def from_shrinkage(cls, location, shrink_diag, dof, scale, hyper=None):
        """Prior with diagonal ``Lambda0 = diag(shrink_diag)``, entries > 0."""
        shrink = as_vector(shrink_diag, "shrink_diag")
        if np.any(shrink <= 0):
            raise DataError("Lambda0 diagonal entries must be strictly positive and finite")
        return cls(location, np.diag(1.0 / shrink), dof, scale, dict(hyper or {}))

    @classmethod
    def diffuse(cls, dim, n_regressors, dof, scale, location=None):
        """Flat prior on ``Pi`` (``Lambda0^{-1} = 0``)."""
        loc = np.zeros((dim, n_regressors)) if location is None else location
        return cls(loc, np.zeros((n_regressors, n_regressors)), dof, scale, {"diffuse": True})

    @property
    def is_diffuse(self):
        return not np.any(self.precision)

    @property
    def dim(self):
        return self.location.shape[0]

    @property
    def n_regressors(self):
        return self.location.shape[1]

    @property
    def shrink_diag(self):
        """Diagonal of ``Lambda0`` (``inf`` on diffuse entries)."""
        d = np.diag(self.precision)
        with np.errstate(divide="ignore"):
            return np.where(d > 0, 1.0 / d, np.inf)

    def prior_mean_sigma(self):
        """``E(Sigma) = V0 / (nu0 - dim - 1)``; ``None`` when it does not exist."""
        denom = self.dof - self.dim - 1
        return self.scale / denom if denom > 0 else None


@dataclass(frozen=True)
class NiwPosterior:
    """Posterior ``(Pi*, Lambda*^{-1}, nu*, V*)`` and ``E(Sigma | data)``."""

    location: np.ndarray
    precision_scale_inverse: np.ndarray
    dof: float
    scale: np.ndarray
    point_sigma: Optional[np.ndarray]
    n_obs: int = 0

    @property
    def dim(self):
        return self.location.shape[0]

    @property
    def n_regressors(self):
        return self.location.shape[1]

    @property
    def precision_scale(self):
        """``Lambda*`` (column covariance of ``Pi`` given ``Sigma``)."""
        return linalg.cho_solve(linalg.cho_factor(self.precision_scale_inverse), np.eye(self.n_regressors))

    def as_prior(self):
        """Re-express the posterior as a prior for further updating.

        The degrees of freedom are reduced by ``k`` so that a subsequent
        update, which adds ``k + T``, counts the regressor dimension once.
        """
        return NiwPrior(
            self.location,
            self.precision_scale_inverse,
            self.dof - self.n_regressors,
            self.scale,
            {"chained": True},
        )

    def to_dict(self):
        return {
            "location": self.location.tolist(),
            "precision_scale_inverse": self.precision_scale_inverse.tolist(),
            "dof": self.dof,
            "scale": self.scale.tolist(),
            "point_sigma": None if self.point_sigma is None else self.point_sigma.tolist(),
            "n_obs": self.n_obs,
        }

    @classmethod
    def from_dict(cls, doc):
        ps = doc.get("point_sigma")
        return cls(
            np.array(doc["location"], dtype=float),
            np.array(doc["precision_scale_inverse"], dtype=float),
            float(doc["dof"]),
            np.array(doc["scale"], dtype=float),
            None if ps is None else np.array(ps, dtype=float),
            int(doc.get("n_obs", 0)),
        )


def niw_posterior(prior: NiwPrior, y, Ylag):
    """Closed-form NIW update.

    Parameters
    ----------
    y : array-like, shape (dim, T)
    Ylag : array-like, shape (k, T)
        ``T = 0`` is allowed and returns the prior quantities.
    """
    y = np.asarray(y, dtype=float).reshape(prior.dim, -1)
    Ylag = np.asarray(Ylag, dtype=float).reshape(prior.n_regressors, -1)
    if y.shape[1] != Ylag.shape[1]:
        raise DataError("y and Ylag must have the same number of columns")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(Ylag))):
        raise DataError("observations contain non-finite values")
    T = y.shape[1]
    P0, Pi0 = prior.precision, prior.location
    prec = symmetrize(P0 + Ylag @ Ylag.T)
    rhs = Pi0 @ P0 + y @ Ylag.T
    try:
        factor = linalg.cho_factor(prec, lower=True)
    except linalg.LinAlgError as exc:
        raise RankDeficiencyError(
            f"posterior precision Lambda0^-1 + YY' is singular (T={T}, k={prior.n_regressors})"
        ) from exc
    loc = linalg.cho_solve(factor, rhs.T).T
    V = prior.scale - loc @ prec @ loc.T + Pi0 @ P0 @ Pi0.T + y @ y.T
    V = symmetrize(V)
    scale_ref = max(1.0, float(np.abs(V).max()))
    lam_min = float(np.linalg.eigvalsh(V)[0])
    if lam_min < -1e-10 * scale_ref:
        raise ConditioningError(f"posterior scale V* lost positive definiteness (min eigenvalue {lam_min:.3g})")
    if lam_min <= 0:
        raise ConditioningError("posterior scale V* is numerically singular")
    dof = prior.dof + prior.n_regressors + T
    denom = dof - prior.dim - 1
    sigma = V / denom if denom > 0 else None
    return NiwPosterior(loc, prec, float(dof), V, sigma, T)


def ols_ar_sigma(series, p=0, *, return_info=False):
    """OLS residual variance of a univariate AR(p) with intercept.

    The effective sample is ``T - p`` observations and the divisor is
    ``T - p - (p + 1)``.  A singular design (e.g. a constant series with
    ``p >= 1``) falls back to the intercept-only fit and warns.
    """
    x = as_vector(series, "series")
    p = check_positive_int(p, "p", minimum=0)
    n_eff = x.shape[0] - p
    dof = n_eff - (p + 1)
    if dof <= 0:
        raise DataError(f"series of length {x.shape[0]} is too short for an AR({p}) variance")
    target = x[p:]
    X = np.column_stack([np.ones(n_eff)] + [x[p - s : p - s + n_eff] for s in range(1, p + 1)])
    fallback = False
    if p == 0:
        rank = 1
        resid = target - target.mean()
    else:
        coef, _, rank, _ = np.linalg.lstsq(X, target, rcond=None)
    if rank < X.shape[1]:
        fallback = True
        warnings.warn("singular AR design; using the intercept-only variance", RuntimeWarning, stacklevel=2)
        resid = target - target.mean()
    elif p > 0:
        resid = target - X @ coef
    s2 = float(resid @ resid / dof)
    if return_info:
        return s2, {"fallback": fallback, "dof": dof}
    return s2


def build_minnesota_prior(dim, lag_order, exo_dim=1, *, delta=None, lambda1=25.0, lambda2=0.04, nu0=None, V0=None, sigma2=None):
    """Minnesota-style NIW prior.

    ``Lambda0`` is diagonal with ``lambda1`` on the exogenous slots and
    ``lambda2 / (s^2 sigma_i^2)`` on the slot of variable ``i`` in lag block
    ``s``.  ``Pi0`` carries ``delta_i`` on each variable's own first lag.
    """
    dim = check_positive_int(dim, "dim")
    p = check_positive_int(lag_order, "lag_order", minimum=0)
    l = check_positive_int(exo_dim, "exo_dim", minimum=0)
    if lambda1 <= 0 or lambda2 <= 0:
        raise DataError("lambda1 and lambda2 must be positive")
    delta = np.zeros(dim) if delta is None else as_vector(delta, "delta")
    sigma2 = np.ones(dim) if sigma2 is None else as_vector(sigma2, "sigma2")
    nu0 = dim + 2.0 if nu0 is None else float(nu0)
    if delta.shape[0] != dim or sigma2.shape[0] != dim:
        raise DataError("delta and sigma2 must have one entry per variable")
    if p > 0 and np.any(sigma2 <= 0):
        raise DataError("per-variable variance scales must be positive")
    V0 = np.diag(sigma2) if V0 is None else as_matrix(V0, "V0")
    if V0.shape != (dim, dim):
        raise DataError(f"V0 must be {dim}x{dim}")
    k = l + dim * p
    shrink = np.empty(k)
    shrink[:l] = lambda1
    for s in range(1, p + 1):
        shrink[l + dim * (s - 1) : l + dim * s] = lambda2 / (s**2 * sigma2)
    loc = np.zeros((dim, k))
    if p > 0:
        loc[np.arange(dim), l + np.arange(dim)] = delta
    hyper = {
        "lambda1": float(lambda1),
        "lambda2": float(lambda2),
        "nu0": nu0,
        "delta": delta.tolist(),
        "sigma2": sigma2.tolist(),
    }
    return NiwPrior.from_shrinkage(loc, shrink, nu0, V0, hyper)


# sampling ----------------------------------------------------------------------


def _psd_factor(cov, name):
    """Square-root factor ``F`` with ``F F' = cov``; tolerates PSD input."""
    cov = symmetrize(np.asarray(cov, dtype=float))
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(cov)
        if w[0] < -1e-10 * max(1.0, abs(w[-1])):
            raise SingularCovarianceError(f"{name} is not positive semi-definite")
        return v * np.sqrt(np.clip(w, 0.0, None))


def _as_rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def inverse_wishart_draw(dof, scale, seed=None, size=None):
    """Inverse-Wishart draw(s) by the Bartlett decomposition.

    If ``V = U U'`` and ``A`` is the Bartlett factor of ``W(dof, I)``, then
    ``(U A^{-T})(U A^{-T})'`` is ``IW(dof, V)``.
    """
    scale = check_spd(scale, "scale")
    d = scale.shape[0]
    if not dof > d - 1:
        raise DataError(f"dof must exceed {d - 1}")
    rng = _as_rng(seed)
    n = 1 if size is None else int(size)
    U = np.linalg.cholesky(scale)
    A = np.zeros((n, d, d))
    idx = np.arange(d)
    A[:, idx, idx] = np.sqrt(rng.chisquare(dof - idx, size=(n, d)))
    low = np.tril_indices(d, -1)
    A[:, low[0], low[1]] = rng.standard_normal((n, len(low[0])))
    # B = U A^{-T}  <=>  B A' = U  <=>  A B' = U'
    Bt = np.linalg.solve(A, np.broadcast_to(U.T, (n, d, d)))
    draws = symmetrize(np.swapaxes(Bt, 1, 2) @ Bt)
    return draws[0] if size is None else draws


def matrix_normal_draw(mean, row_cov, col_cov, seed=None, size=None):
    """Matrix-normal draw(s) ``M + F_r Z F_c'`` with unit-normal ``Z``."""
    mean = as_matrix(mean, "mean")
    Fr = _psd_factor(row_cov, "row covariance")
    Fc = _psd_factor(col_cov, "column covariance")
    if Fr.shape[0] != mean.shape[0] or Fc.shape[0] != mean.shape[1]:
        raise DataError("covariance dimensions do not match the mean")
    rng = _as_rng(seed)
    n = 1 if size is None else int(size)
    Z = rng.standard_normal((n,) + mean.shape)
    draws = mean + Fr @ Z @ Fc.T
    return draws[0] if size is None else draws


@dataclass(frozen=True)
class GibbsDraws:
    """Posterior draws ordered by draw index."""

    pi: np.ndarray
    sigma: np.ndarray
    seed: int

    def __len__(self):
        return self.pi.shape[0]

    def as_rows(self):
        """Flattened ``(draw_index, pi..., sigma...)`` rows (row-major flattening)."""
        n = len(self)
        return np.column_stack([np.arange(n), self.pi.reshape(n, -1), self.sigma.reshape(n, -1)])


def _draw_block(posterior, col_factor, child_seed, n):
    rng = np.random.default_rng(child_seed)
    sigmas = inverse_wishart_draw(posterior.dof, posterior.scale, rng, size=n)
    Z = rng.standard_normal((n,) + posterior.location.shape)
    row_f = np.linalg.cholesky(sigmas)
    pis = posterior.location + row_f @ Z @ col_factor.T
    return pis, sigmas


def gibbs_sample(posterior: NiwPosterior, n_draws, seed=0, *, block_size=4096, n_workers=1):
    """Draw ``Sigma ~ IW(nu*, V*)`` then ``Pi | Sigma`` matrix normal.

    Because the marginal of ``Sigma`` is available, each pair is an exact
    independent draw from the joint posterior.  Draws are produced in fixed
    blocks whose generators are spawned from ``seed`` by block index, so the
    output does not depend on ``n_workers``.
    """
    n_draws = check_positive_int(n_draws, "n_draws")
    n_blocks = -(-n_draws // block_size)
    children = np.random.SeedSequence(seed).spawn(n_blocks)
    sizes = [min(block_size, n_draws - b * block_size) for b in range(n_blocks)]
    col_factor = _psd_factor(posterior.precision_scale, "Lambda*")
    jobs = list(zip(children, sizes))
    if n_workers > 1 and n_blocks > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(lambda job: _draw_block(posterior, col_factor, *job), jobs))
    else:
        results = [_draw_block(posterior, col_factor, *job) for job in jobs]
    pis = np.concatenate([r[0] for r in results])
    sigmas = np.concatenate([r[1] for r in results])
    return GibbsDraws(pis, sigmas, int(seed))


# estimator ----------------------------------------------------------------------


class BayesianVAR(BaseEstimator):
    """Conjugate Bayesian VAR(p) with a Minnesota-style NIW prior.

    ``X`` is time-major (T, dim); the first ``lag_order`` rows are presample.
    ``V0`` is ``"ar-sample-variances"`` (diag of AR(p) OLS variances),
    ``"identity"`` or an explicit matrix.
    """

    def __init__(
        self,
        lag_order=1,
        lambda1=25.0,
        lambda2=0.04,
        nu0=None,
        delta=None,
        V0="ar-sample-variances",
        diffuse=False,
        random_state=0,
    ):
        self.lag_order = lag_order
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.nu0 = nu0
        self.delta = delta
        self.V0 = V0
        self.diffuse = diffuse
        self.random_state = random_state

    def _design(self, X, exog):
        from .market_data import lagged_design

        X = as_matrix(X, "X")
        exog = np.ones((X.shape[0], 1)) if exog is None else as_matrix(exog, "exog")
        return lagged_design(X.T, exog.T, self.lag_order)

    def build_prior(self, X, exo_dim=1):
        X = as_matrix(X, "X")
        dim = X.shape[1]
        sigma2 = np.array([ols_ar_sigma(X[:, i], self.lag_order) for i in range(dim)])
        if isinstance(self.V0, str):
            if self.V0 == "identity":
                V0 = np.eye(dim)
            elif self.V0 == "ar-sample-variances":
                V0 = np.diag(sigma2)
            else:
                raise DataError(f"unknown V0 option {self.V0!r}")
        else:
            V0 = as_matrix(self.V0, "V0")
        nu0 = dim + 2.0 if self.nu0 is None else self.nu0
        if self.diffuse:
            return NiwPrior.diffuse(dim, exo_dim + dim * self.lag_order, nu0, V0)
        return build_minnesota_prior(
            dim,
            self.lag_order,
            exo_dim,
            delta=self.delta,
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            nu0=nu0,
            V0=V0,
            sigma2=sigma2,
        )

    def fit(self, X, y=None, exog=None):
        ybar, Ylag = self._design(X, exog)
        exo_dim = 1 if exog is None else as_matrix(exog, "exog").shape[1]
        self.prior_ = self.build_prior(X, exo_dim)
        self.posterior_ = niw_posterior(self.prior_, ybar, Ylag)
        return self

    def predict(self, X, exog=None):
        """In-sample one-step posterior-mean fits, (T - p, dim)."""
        if not hasattr(self, "posterior_"):
            raise DataError("estimator is not fitted")
        _, Ylag = self._design(X, exog)
        return (self.posterior_.location @ Ylag).T

    def sample(self, n_draws, seed=None):
        seed = self.random_state if seed is None else seed
        return gibbs_sample(self.posterior_, n_draws, seed)
