"""Time-varying price-to-book state-space model: Kalman filter, smoother, forecast.

Measurement and transition:

    y_t = Psi_t z_t + phi_t + xi_t,      xi_t ~ N(0, Sigma_xi)
    z_t = A z_{t-1} + Pim* X_{t-1} + eta_t, eta_t = (w_t', 0, ...)'

The state stacks ``qbar = max(q, 2)`` lags of the (log) price-to-book ratio
because the measurement always involves ``m_t`` and ``m_{t-1}``; when
``q = 1`` the extra block carries a zero coefficient.  The covariate block of
``phi_t`` is ``Pix X_{t-1}`` so that ``v_t = x_t - Pix X_{t-1}`` is the
measurement error of ``x_t``.
"""

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import linalg

from .._validation import as_matrix, as_vector, check_positive_int, check_spd, symmetrize
from ..exceptions import DataError, MissingCovariatesError, SingularCovarianceError
from .panel import PrivateDesign, PrivatePanel

MODES = ("dividend", "non-dividend")
_LOG_2PI = math.log(2.0 * math.pi)


def _check_psd(a, name, tol=1e-10):
    a = symmetrize(as_matrix(a, name))
    if a.shape[0] != a.shape[1]:
        raise DataError(f"{name} must be square")
    if a.size and np.linalg.eigvalsh(a)[0] < -tol * max(1.0, float(np.abs(a).max())):
        raise SingularCovarianceError(f"{name} is not positive semidefinite")
    return a


@dataclass(frozen=True)
class StateSpaceModel:
    """Parameters of the private-company state-space model.

    Attributes
    ----------
    mode : {"dividend", "non-dividend"}
    Phi : ndarray, (n, n q)
    Pim : ndarray, (n, l + ell p)
    Pix : ndarray, (ell, l + ell p)
    A0k : ndarray, (n, l)
    Sigma_xi : ndarray, (n + ell, n + ell), SPD
    Sigma_ww : ndarray, (n, n), PSD
    mu0 : ndarray, (n,)
    Sigma0 : ndarray, (n, n), PSD
    """

    mode: str
    Phi: np.ndarray
    Pim: np.ndarray
    Pix: np.ndarray
    A0k: np.ndarray
    Sigma_xi: np.ndarray
    Sigma_ww: np.ndarray
    mu0: np.ndarray
    Sigma0: np.ndarray
    lag_order: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise DataError(f"mode must be one of {MODES}")
        Phi = as_matrix(self.Phi, "Phi")
        n = Phi.shape[0]
        if n == 0 or Phi.shape[1] % n or Phi.shape[1] == 0:
            raise DataError("Phi must be n x nq with q >= 1")
        A0k = as_matrix(self.A0k, "A0k")
        Pim = as_matrix(self.Pim, "Pim")
        Pix = np.asarray(self.Pix, dtype=float)
        Pix = Pix.reshape(-1, Pim.shape[1]) if Pix.size else np.zeros((0, Pim.shape[1]))
        if A0k.shape[0] != n or Pim.shape[0] != n:
            raise DataError("A0k and Pim must have n rows")
        if A0k.shape[1] > Pim.shape[1]:
            raise DataError("Pim must cover the exogenous block")
        ell = Pix.shape[0]
        Sxi = check_spd(self.Sigma_xi, "Sigma_xi")
        if Sxi.shape != (n + ell, n + ell):
            raise DataError(f"Sigma_xi must be {(n + ell, n + ell)}")
        Sww = _check_psd(self.Sigma_ww, "Sigma_ww")
        S0 = _check_psd(self.Sigma0, "Sigma0")
        mu0 = as_vector(self.mu0, "mu0")
        if Sww.shape != (n, n) or S0.shape != (n, n) or mu0.shape != (n,):
            raise DataError("Sigma_ww, Sigma0 and mu0 must match n")
        for name, arr in (
            ("Phi", Phi),
            ("A0k", A0k),
            ("Pim", Pim),
            ("Pix", Pix),
            ("Sigma_xi", Sxi),
            ("Sigma_ww", Sww),
            ("Sigma0", S0),
            ("mu0", mu0),
        ):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    # dimensions -------------------------------------------------------------
    @property
    def n_companies(self):
        return self.Phi.shape[0]

    @property
    def state_lag(self):
        return self.Phi.shape[1] // self.n_companies

    @property
    def n_blocks(self):
        return max(self.state_lag, 2)

    @property
    def state_dim(self):
        return self.n_companies * self.n_blocks

    @property
    def n_covariates(self):
        return self.Pix.shape[0]

    @property
    def exo_dim(self):
        return self.A0k.shape[1]

    @property
    def obs_dim(self):
        return self.n_companies + self.n_covariates

    # system matrices ----------------------------------------------------------
    @property
    def J_m(self):
        """``[I_n : 0 : ... : 0]`` extracting ``m_t`` from ``z_t``."""
        return np.eye(self.n_companies, self.state_dim)

    @property
    def Phi_bar(self):
        """``Phi`` padded with zero blocks to the state dimension."""
        out = np.zeros((self.n_companies, self.state_dim))
        out[:, : self.Phi.shape[1]] = self.Phi
        return out

    @property
    def companion(self):
        n, s = self.n_companies, self.state_dim
        A = np.zeros((s, s))
        A[:n] = self.Phi_bar
        A[n:, : s - n] = np.eye(s - n)
        return A

    @property
    def Sigma_eta(self):
        out = np.zeros((self.state_dim, self.state_dim))
        n = self.n_companies
        out[:n, :n] = self.Sigma_ww
        return out

    @property
    def Pim_star(self):
        out = np.zeros((self.state_dim, self.Pim.shape[1]))
        out[: self.n_companies] = self.Pim
        return out

    def measurement(self, psi_t, growth_t=None):
        """``(Psi_t, phi_t)`` without the covariate part of ``phi_t``."""
        n, s, d = self.n_companies, self.state_dim, self.obs_dim
        Psi = np.zeros((d, s))
        phi = np.zeros(d)
        drift = self.A0k @ psi_t
        if self.mode == "dividend":
            if growth_t is None:
                raise MissingCovariatesError("dividend mode needs the book-value growth rate b_t")
            Psi[:n, :n] = -np.diag(1.0 + growth_t)
            Psi[:n, n : 2 * n] = np.diag(1.0 + drift)
        else:
            Psi[:n, :n] = -np.eye(n)
            Psi[:n, n : 2 * n] = np.eye(n)
            phi[:n] = drift
        return Psi, phi

    def system(self, design: PrivateDesign):
        """Per-period ``Psi_t`` (T, d, s) and ``phi_t`` (T, d) for a design."""
        T = design.n_periods
        n, l = self.n_companies, self.exo_dim
        Psis = np.zeros((T, self.obs_dim, self.state_dim))
        phis = np.zeros((T, self.obs_dim))
        drift = (self.A0k @ design.X[:l]).T
        idx = np.arange(n)
        if self.mode == "dividend":
            Psis[:, idx, idx] = -(1.0 + design.growth.T)
            Psis[:, idx, n + idx] = 1.0 + drift
        else:
            Psis[:, idx, idx] = -1.0
            Psis[:, idx, n + idx] = 1.0
            phis[:, :n] = drift
        phis[:, n:] = (self.Pix @ design.X).T
        return Psis, phis

    def observations(self, design: PrivateDesign):
        """Observed ``y_t`` per mode, shape (T, n + ell)."""
        first = design.dividend_to_book if self.mode == "dividend" else design.log_growth
        return np.vstack([first, design.x]).T

    def initial_state(self):
        q = self.n_blocks
        return np.tile(self.mu0, q), linalg.block_diag(*([self.Sigma0] * q))

    def with_params(self, **changes):
        return replace(self, **changes)

    def n_parameters(self):
        n, d = self.n_companies, self.obs_dim
        return (
            self.A0k.size
            + self.Phi.size
            + self.Pix.size
            + self.Pim.size
            + d * (d + 1) // 2
            + n * (n + 1) // 2
            + n
            + n * (n + 1) // 2
        )

    def to_dict(self):
        return {
            "mode": self.mode,
            "state_lag": self.state_lag,
            "lag_order": self.lag_order,
            "Phi": self.Phi.tolist(),
            "Pim": self.Pim.tolist(),
            "Pix": self.Pix.tolist(),
            "A0k": self.A0k.tolist(),
            "Sigma_xi": self.Sigma_xi.tolist(),
            "Sigma_ww": self.Sigma_ww.tolist(),
            "mu0": self.mu0.tolist(),
            "Sigma0": self.Sigma0.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        arr = lambda key: np.array(doc[key], dtype=float)  # noqa: E731
        return cls(
            doc["mode"],
            arr("Phi"),
            arr("Pim"),
            arr("Pix"),
            arr("A0k"),
            arr("Sigma_xi"),
            arr("Sigma_ww"),
            arr("mu0"),
            arr("Sigma0"),
            int(doc.get("lag_order", 0)),
        )


@dataclass(frozen=True)
class KalmanTrajectory:
    """Filter (and optionally smoother) output.

    Index conventions: ``filtered_*`` and ``smoothed_*`` cover t = 0..T
    (row 0 is the initial state); ``predicted_*``, ``gains``, innovations and
    ``cross_cov`` cover t = 1..T at row ``t - 1``.  ``cross_cov[t - 1]`` is
    ``Sigma(z_{t-1}, z_t | T)`` and ``smoother_gains[t]`` is ``S_t`` for
    t = 0..T-1.
    """

    predicted_mean: np.ndarray
    predicted_cov: np.ndarray
    filtered_mean: np.ndarray
    filtered_cov: np.ndarray
    gains: np.ndarray
    innovations: np.ndarray
    innovation_cov: np.ndarray
    log_likelihood: float
    smoothed_mean: Optional[np.ndarray] = None
    smoothed_cov: Optional[np.ndarray] = None
    smoother_gains: Optional[np.ndarray] = None
    cross_cov: Optional[np.ndarray] = None

    @property
    def n_periods(self):
        return self.predicted_mean.shape[0]

    @property
    def is_smoothed(self):
        return self.smoothed_mean is not None

    def _need_smoother(self):
        if not self.is_smoothed:
            raise DataError("trajectory has not been smoothed")

    def second_moment(self, t):
        """``z_{t,t|T} = E[z_t z_t' | F_T]``."""
        self._need_smoother()
        m = self.smoothed_mean[t]
        return self.smoothed_cov[t] + np.outer(m, m)

    def cross_moment(self, t):
        """``z_{t-1,t|T} = E[z_{t-1} z_t' | F_T] = S_{t-1} Sigma(z_t|T) + z_{t-1|T} z_{t|T}'``, t >= 1."""
        self._need_smoother()
        if not 1 <= t <= self.n_periods:
            raise DataError(f"t must lie in [1, {self.n_periods}]")
        return self.cross_cov[t - 1] + np.outer(self.smoothed_mean[t - 1], self.smoothed_mean[t])


def _as_design(panel, p):
    if isinstance(panel, PrivatePanel):
        return panel.design(p)
    if isinstance(panel, PrivateDesign):
        return panel
    raise DataError("expected a PrivatePanel or PrivateDesign")


def _batched_gains(Pp, APf):
    """Smoother gains ``S_t' = Pp_{t+1}^{-1} A Pf_t`` for a stack; pseudo-inverse where singular."""
    lam = np.linalg.eigvalsh(Pp)
    top = np.maximum(lam[:, -1], 1e-300)
    bad = lam[:, 0] <= 1e-12 * top
    out = np.empty_like(APf)
    good = ~bad
    if np.any(good):
        out[good] = np.linalg.solve(Pp[good], APf[good])
    for t in np.flatnonzero(bad):
        out[t] = linalg.pinvh(Pp[t]) @ APf[t]
    return np.swapaxes(out, 1, 2)


def filter_arrays(model: StateSpaceModel, y, Psis, phis, X):
    """Kalman filter on explicit arrays.

    Parameters
    ----------
    y : (T, d) observations
    Psis : (T, d, s) and phis : (T, d) measurement maps
    X : (k, T) regressors ``X_{t-1}`` for the state equation
    """
    T, d = y.shape
    s = model.state_dim
    A = model.companion
    AT = A.T.copy()
    Q = model.Sigma_eta
    R = model.Sigma_xi
    offsets = (model.Pim_star @ X).T
    z, P = model.initial_state()
    zp = np.empty((T, s))
    Pp = np.empty((T, s, s))
    zf = np.empty((T + 1, s))
    Pf = np.empty((T + 1, s, s))
    K_all = np.empty((T, s, d))
    innov = np.empty((T, d))
    F_all = np.empty((T, d, d))
    zf[0], Pf[0] = z, P
    I = np.eye(s)
    chol = np.linalg.cholesky
    inv = np.linalg.inv
    logdet = 0.0
    quad = 0.0
    for t in range(T):
        z_pred = A @ z + offsets[t]
        P_pred = A @ P @ AT + Q
        P_pred = 0.5 * (P_pred + P_pred.T)
        H = Psis[t]
        e = y[t] - H @ z_pred - phis[t]
        PH = P_pred @ H.T
        F = H @ PH + R
        F = 0.5 * (F + F.T)
        try:
            cF = chol(F)
        except np.linalg.LinAlgError as exc:
            raise SingularCovarianceError(f"innovation covariance is singular at period {t + 1}") from exc
        Finv = inv(F)
        K = PH @ Finv
        z = z_pred + K @ e
        IKH = I - K @ H
        P = IKH @ P_pred @ IKH.T + K @ R @ K.T
        P = 0.5 * (P + P.T)
        logdet += 2.0 * np.log(np.diagonal(cF)).sum()
        quad += e @ Finv @ e
        zp[t], Pp[t], zf[t + 1], Pf[t + 1] = z_pred, P_pred, z, P
        K_all[t], innov[t], F_all[t] = K, e, F
    loglik = -0.5 * (T * d * _LOG_2PI + logdet + quad)
    return KalmanTrajectory(zp, Pp, zf, Pf, K_all, innov, F_all, float(loglik))


def kalman_filter(model: StateSpaceModel, panel, lag_order=None):
    """Filter pass for a panel (or prepared design)."""
    design = _as_design(panel, model.lag_order if lag_order is None else lag_order)
    if design.n_companies != model.n_companies or design.x.shape[0] != model.n_covariates:
        raise DataError("panel dimensions do not match the model")
    if model.mode == "non-dividend" and design.n_payers > 0:
        raise DataError("non-dividend mode requires a panel without dividend payers")
    Psis, phis = model.system(design)
    return filter_arrays(model, model.observations(design), Psis, phis, design.X)


def kalman_smoother(trajectory: KalmanTrajectory, model: StateSpaceModel):
    """Backward pass: smoothed means, covariances, gains and cross covariances."""
    T = trajectory.n_periods
    A = model.companion
    zf, Pf = trajectory.filtered_mean, trajectory.filtered_cov
    zp, Pp = trajectory.predicted_mean, trajectory.predicted_cov
    s = zf.shape[1]
    zs = np.empty_like(zf)
    Ps = np.empty_like(Pf)
    zs[T], Ps[T] = zf[T], Pf[T]
    S_all = _batched_gains(Pp, A @ Pf[:-1])
    for t in range(T - 1, -1, -1):
        S = S_all[t]
        zs[t] = zf[t] + S @ (zs[t + 1] - zp[t])
        Pt = Pf[t] - S @ (Pp[t] - Ps[t + 1]) @ S.T
        Ps[t] = 0.5 * (Pt + Pt.T)
    cross = S_all @ Ps[1:]
    return replace(trajectory, smoothed_mean=zs, smoothed_cov=Ps, smoother_gains=S_all, cross_cov=cross)


def kalman_forecast(model: StateSpaceModel, trajectory: KalmanTrajectory, horizon, future_X=None, future_growth=None):
    """Forecast ``h`` steps past the sample end.

    Parameters
    ----------
    future_X : array-like, shape (h, l + ell p)
        Regressors ``X_{T+j-1}`` for j = 1..h (user supplied, never extrapolated).
    future_growth : array-like, shape (h, n)
        Book-value growth rates, required in dividend mode.

    Returns
    -------
    dict with ``y_mean`` (h, d), ``y_cov`` (h, d, d), ``z_mean`` (h, s), ``z_cov`` (h, s, s)
    """
    h = check_positive_int(horizon, "horizon", minimum=0)
    d, s = model.obs_dim, model.state_dim
    out = {
        "y_mean": np.zeros((h, d)),
        "y_cov": np.zeros((h, d, d)),
        "z_mean": np.zeros((h, s)),
        "z_cov": np.zeros((h, s, s)),
    }
    if h == 0:
        return out
    k = model.Pim.shape[1]
    if future_X is None:
        raise MissingCovariatesError(f"forecasting {h} steps needs {h} rows of future regressors")
    Xf = np.asarray(future_X, dtype=float).reshape(-1, k) if k else np.zeros((h, 0))
    if Xf.shape[0] < h or not np.all(np.isfinite(Xf[:h])):
        raise MissingCovariatesError(f"forecasting {h} steps needs {h} rows of future regressors")
    if model.mode == "dividend":
        if future_growth is None:
            raise MissingCovariatesError("dividend-mode forecasts need future book-value growth rates")
        Gf = np.asarray(future_growth, dtype=float).reshape(-1, model.n_companies)
        if Gf.shape[0] < h or not np.all(np.isfinite(Gf[:h])):
            raise MissingCovariatesError("dividend-mode forecasts need future book-value growth rates")
    if trajectory.is_smoothed:
        z, P = trajectory.smoothed_mean[-1], trajectory.smoothed_cov[-1]
    else:
        z, P = trajectory.filtered_mean[-1], trajectory.filtered_cov[-1]
    A, Q = model.companion, model.Sigma_eta
    l = model.exo_dim
    for j in range(h):
        z = A @ z + model.Pim_star @ Xf[j]
        P = symmetrize(A @ P @ A.T + Q)
        Psi, phi = model.measurement(Xf[j, :l], Gf[j] if model.mode == "dividend" else None)
        phi[model.n_companies :] = model.Pix @ Xf[j]
        out["z_mean"][j], out["z_cov"][j] = z, P
        out["y_mean"][j] = Psi @ z + phi
        out["y_cov"][j] = symmetrize(Psi @ P @ Psi.T + model.Sigma_xi)
    return out


def smoothed_price_to_book(trajectory: KalmanTrajectory, model: StateSpaceModel):
    """``m_{t|T}`` for t = 0..T, shape (T+1, n); exponentiated in non-dividend mode."""
    if not trajectory.is_smoothed:
        raise DataError("trajectory has not been smoothed")
    m = trajectory.smoothed_mean[:, : model.n_companies]
    return np.exp(m) if model.mode == "non-dividend" else m.copy()


def smoothed_market_value(trajectory: KalmanTrajectory, book_values, mode):
    """``V_{t|T} = m_{t|T} * B_t`` element-wise, (T+1) x n.

    ``book_values`` is (T+1) x n aligned with the smoothed states.
    """
    if mode not in MODES:
        raise DataError(f"mode must be one of {MODES}")
    if not trajectory.is_smoothed:
        raise DataError("trajectory has not been smoothed")
    B = as_matrix(book_values, "book_values")
    n = B.shape[1]
    m = trajectory.smoothed_mean[:, :n]
    if m.shape != B.shape:
        raise DataError(f"book values {B.shape} do not align with smoothed states {m.shape}")
    if mode == "non-dividend":
        m = np.exp(m)
    return m * B


def implied_required_return(m, delta, b):
    """``k_t = Delta_t / m + b_t`` for a positive price-to-book ratio ``m``."""
    m = np.asarray(m, dtype=float)
    if np.any(~(m > 0)):
        raise DataError("price-to-book ratio must be positive")
    out = np.asarray(delta, dtype=float) / m + np.asarray(b, dtype=float)
    return float(out) if out.ndim == 0 else out
