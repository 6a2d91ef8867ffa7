"""scikit-learn style wrappers around the private valuation estimators."""

import numpy as np
from sklearn.base import BaseEstimator

from ..exceptions import DataError
from .em import em_private, initial_state_space
from .kalman import kalman_filter, kalman_forecast, kalman_smoother, smoothed_market_value, smoothed_price_to_book
from .panel import PrivatePanel
from .regime import private_inference, rs_private_em


def _check_panel(panel):
    if not isinstance(panel, PrivatePanel):
        raise DataError("expected a PrivatePanel")
    return panel


class PrivateRegimeSwitching(BaseEstimator):
    """Constant price-to-book model with Markov regimes, fitted by EM.

    ``fit`` takes a :class:`PrivatePanel`.  ``transform`` returns smoothed
    regime probabilities (T - p, N).
    """

    def __init__(self, n_regimes=2, lag_order=0, tol=1e-8, max_iter=500, n_restarts=5, random_state=0, init=None):
        self.n_regimes = n_regimes
        self.lag_order = lag_order
        self.tol = tol
        self.max_iter = max_iter
        self.n_restarts = n_restarts
        self.random_state = random_state
        self.init = init

    def fit(self, X, y=None):
        panel = _check_panel(X)
        res = rs_private_em(
            panel,
            self.n_regimes,
            self.lag_order,
            init=self.init,
            tol=self.tol,
            max_iter=self.max_iter,
            n_restarts=self.n_restarts,
            seed=self.random_state,
        )
        self.model_ = res.model
        self.inference_ = res.inference
        self.trace_ = res.trace
        self.n_iter_ = res.n_iter
        self.converged_ = res.converged
        self.information_ = res.information
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise DataError("estimator is not fitted")

    def transform(self, X):
        self._check_fitted()
        inf = private_inference(self.model_, _check_panel(X).design(self.lag_order))
        return inf.smoothed.T

    predict_proba = transform

    def predict(self, X):
        return np.argmax(self.transform(X), axis=1)

    def score(self, X, y=None):
        self._check_fitted()
        return private_inference(self.model_, _check_panel(X).design(self.lag_order)).log_likelihood

    @property
    def price_to_book_(self):
        self._check_fitted()
        return self.model_.price_to_book


class PrivateStateSpace(BaseEstimator):
    """Time-varying price-to-book state-space model fitted by Kalman-filter EM.

    Parameters
    ----------
    mode : {"dividend", "non-dividend"} or None
        ``None`` picks non-dividend mode when the panel has no payers.
    state_lag : int
        Lags ``q`` of the price-to-book ratio in the state equation.
    lag_order : int
        Covariate lags ``p``.
    pb_proxy, phi_init : float
        Starting price-to-book level and autoregressive coefficient.
    """

    def __init__(
        self,
        mode=None,
        state_lag=1,
        lag_order=0,
        pb_proxy=1.0,
        phi_init=0.5,
        tol=1e-9,
        max_iter=500,
        fit_initial=True,
    ):
        self.mode = mode
        self.state_lag = state_lag
        self.lag_order = lag_order
        self.pb_proxy = pb_proxy
        self.phi_init = phi_init
        self.tol = tol
        self.max_iter = max_iter
        self.fit_initial = fit_initial

    def fit(self, X, y=None):
        panel = _check_panel(X)
        mode = self.mode or ("dividend" if panel.dividend_payer_count else "non-dividend")
        design = panel.design(self.lag_order)
        start = initial_state_space(
            design, mode, self.state_lag, pb_proxy=self.pb_proxy, phi=self.phi_init, lag_order=self.lag_order
        )
        res = em_private(start, design, tol=self.tol, max_iter=self.max_iter, fit_initial=self.fit_initial)
        self.model_ = res.model
        self.trajectory_ = res.trajectory
        self.trace_ = res.trace
        self.n_iter_ = res.n_iter
        self.converged_ = res.converged
        self.information_ = res.information
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise DataError("estimator is not fitted")

    def _smooth(self, panel):
        self._check_fitted()
        return kalman_smoother(kalman_filter(self.model_, panel), self.model_)

    def transform(self, X):
        """Smoothed price-to-book ratios ``m_{t|T}``, (T - p + 1, n)."""
        return smoothed_price_to_book(self._smooth(_check_panel(X)), self.model_)

    def predict(self, X):
        """Smoothed market values ``V_{t|T}``, (T - p + 1, n)."""
        panel = _check_panel(X)
        books = panel.book_values[self.lag_order :]
        return smoothed_market_value(self._smooth(panel), books, self.model_.mode)

    def score(self, X, y=None):
        self._check_fitted()
        return kalman_filter(self.model_, _check_panel(X)).log_likelihood

    def forecast(self, horizon, future_X=None, future_growth=None):
        """Forecast past the end of the fitted sample (see :func:`kalman_forecast`)."""
        self._check_fitted()
        return kalman_forecast(self.model_, self.trajectory_, horizon, future_X, future_growth)
