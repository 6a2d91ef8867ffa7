"""Price/dividend panels, log required returns and liability valuation.

Matrices that enter the estimators follow the (variables x time) layout used
throughout the package: column ``t`` of ``ybar`` is the observation vector at
time ``t``.  Panels themselves are stored time-major, one row per period, as
they come out of the CSV files.
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from ._validation import as_matrix, as_vector
from .exceptions import DataError


def compute_log_returns(prices, dividends):
    """Log required rates of return ``ln((P_t + d_t) / P_{t-1})``.

    Parameters
    ----------
    prices : array-like, shape (T+1, n)
        Prices at periods 0..T.
    dividends : array-like, shape (T, n)
        Dividends paid at periods 1..T (zero for non-payers).

    Returns
    -------
    ndarray, shape (T, n)
    """
    prices = as_matrix(prices, "prices")
    dividends = as_matrix(dividends, "dividends")
    if dividends.shape != (prices.shape[0] - 1, prices.shape[1]):
        raise DataError(
            f"dividends shape {dividends.shape} does not match prices shape "
            f"{prices.shape} (expected ({prices.shape[0] - 1}, {prices.shape[1]}))"
        )
    bad = np.argwhere(prices <= 0)
    if bad.size:
        t, i = bad[0]
        raise DataError("price must be strictly positive", row=int(t), column=int(i))
    proceeds = prices[1:] + dividends
    bad = np.argwhere(proceeds <= 0)
    if bad.size:
        t, i = bad[0]
        raise DataError("price plus dividend must be positive", row=int(t) + 1, column=int(i))
    return np.log(proceeds / prices[:-1])


def weighted_market_rate(principals, market_rates):
    """Principal-weighted average of per-type market interest rates."""
    principals = as_vector(principals, "principals")
    market_rates = as_vector(market_rates, "market_rates")
    if principals.shape != market_rates.shape:
        raise DataError("principals and market_rates must have the same length")
    total = principals.sum()
    if total <= 0:
        raise DataError("total principal is zero; liability weights are undefined")
    return float(np.dot(market_rates, principals / total))


def liability_market_value(total_principal, interest_payment, market_rate):
    """Market value ``(I + L) / (1 + k)`` of a liability position.

    Works for a single liability type or for the balance-sheet total with the
    weighted market rate.  Broadcasts over arrays.
    """
    market_rate = np.asarray(market_rate, dtype=float)
    if np.any(market_rate <= -1):
        raise DataError("market rate must exceed -1")
    value = (np.asarray(interest_payment, dtype=float) + np.asarray(total_principal, dtype=float)) / (
        1.0 + market_rate
    )
    return float(value) if np.ndim(value) == 0 else value


def validate_dates(dates):
    """Check that period labels are strictly increasing and regularly spaced.

    Labels may be numbers, ISO dates or anything :func:`pandas.to_datetime`
    understands.  Month-aligned dates (e.g. quarter ends) are compared on the
    month grid so that unequal month lengths do not count as gaps.
    """
    labels = list(dates)
    if len(labels) < 2:
        return labels
    try:
        values = np.asarray(labels, dtype=float)
        steps = np.diff(values)
        if np.any(steps <= 0):
            raise DataError("dates must be strictly increasing")
        if not np.allclose(steps, steps[0]):
            raise DataError("dates are not regularly spaced")
        return labels
    except (TypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
    try:
        parsed = pd.to_datetime(pd.Series(labels, dtype=str), format="mixed")
    except (TypeError, ValueError):
        if len(set(labels)) != len(labels):
            raise DataError("duplicate date labels")
        return labels
    if not parsed.is_monotonic_increasing or parsed.duplicated().any():
        raise DataError("dates must be strictly increasing")
    months = (parsed.dt.year * 12 + parsed.dt.month).to_numpy()
    month_steps = np.diff(months)
    if np.all(month_steps == month_steps[0]) and month_steps[0] > 0:
        return labels
    day_steps = np.diff(parsed.to_numpy().astype("datetime64[D]").astype(np.int64))
    if np.all(day_steps == day_steps[0]):
        return labels
    raise DataError("dates are not regularly spaced (gap detected)")


@dataclass(frozen=True)
class ReturnPanel:
    """Aligned prices, dividends and derived log returns for ``n`` companies.

    ``prices`` has one more row than everything else: row 0 is the period
    before the first return.  ``covariates`` and ``exogenous`` are aligned with
    the returns (rows 1..T of ``dates``).
    """

    company_ids: Sequence[str]
    dates: Sequence
    prices: np.ndarray
    dividends: np.ndarray
    covariates: Optional[np.ndarray] = None
    exogenous: Optional[np.ndarray] = None
    covariate_names: Sequence[str] = ()
    exogenous_names: Sequence[str] = ("const",)
    log_returns: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        prices = as_matrix(self.prices, "prices")
        dividends = as_matrix(self.dividends, "dividends")
        if prices.shape[1] != len(self.company_ids):
            raise DataError("number of price columns does not match company_ids")
        if len(self.dates) != prices.shape[0]:
            raise DataError(f"expected {prices.shape[0]} dates, got {len(self.dates)}")
        if np.any(dividends < 0):
            t, i = np.argwhere(dividends < 0)[0]
            raise DataError("dividends must be non-negative", row=int(t) + 1, column=self.company_ids[i])
        validate_dates(self.dates)
        log_returns = compute_log_returns(prices, dividends)
        T = log_returns.shape[0]
        exogenous = self.exogenous
        if exogenous is None:
            exogenous = np.ones((T, 1))
        exogenous = as_matrix(exogenous, "exogenous")
        covariates = self.covariates
        if covariates is None:
            covariates = np.zeros((T, 0))
        covariates = as_matrix(covariates, "covariates")
        for name, arr in (("exogenous", exogenous), ("covariates", covariates)):
            if arr.shape[0] != T:
                raise DataError(f"{name} has {arr.shape[0]} rows, expected {T}")
        for arr in (prices, dividends, log_returns, exogenous, covariates):
            arr.setflags(write=False)
        object.__setattr__(self, "prices", prices)
        object.__setattr__(self, "dividends", dividends)
        object.__setattr__(self, "exogenous", exogenous)
        object.__setattr__(self, "covariates", covariates)
        object.__setattr__(self, "log_returns", log_returns)
        object.__setattr__(self, "company_ids", tuple(str(c) for c in self.company_ids))
        if len(self.exogenous_names) != exogenous.shape[1]:
            object.__setattr__(self, "exogenous_names", tuple(f"psi{i + 1}" for i in range(exogenous.shape[1])))
        if len(self.covariate_names) != covariates.shape[1]:
            object.__setattr__(self, "covariate_names", tuple(f"x{i + 1}" for i in range(covariates.shape[1])))

    @property
    def n_periods(self):
        """Number of return observations T."""
        return self.log_returns.shape[0]

    @property
    def n_companies(self):
        return self.prices.shape[1]

    @property
    def return_dates(self):
        return list(self.dates)[1:]

    def observations(self):
        """Stacked ``y_t = (k_t', x_t')'`` as a (T, n + l) time-major array."""
        return np.hstack([self.log_returns, self.covariates])

    def select(self, companies):
        """Sub-panel restricted to the given company ids (same covariates)."""
        idx = [self.company_ids.index(c) for c in companies]
        return ReturnPanel(
            company_ids=[self.company_ids[i] for i in idx],
            dates=self.dates,
            prices=self.prices[:, idx],
            dividends=self.dividends[:, idx],
            covariates=self.covariates,
            exogenous=self.exogenous,
            covariate_names=self.covariate_names,
            exogenous_names=self.exogenous_names,
        )


def lagged_design(y, exog, p):
    """Build ``(ybar, Ylags)`` from a (dim x T) series and (l x T) exogenous block.

    The first ``p`` columns of ``y`` are presample values; the result has
    ``T - p`` columns.  Column ``t`` of ``Ylags`` stacks ``psi_t`` and lags
    ``1..p`` of ``y``.
    """
    y = as_matrix(y, "y")
    exog = as_matrix(exog, "exog")
    if exog.shape[1] != y.shape[1]:
        raise DataError("exogenous block must have as many columns as y")
    if p < 0:
        raise DataError("lag order must be non-negative")
    T = y.shape[1] - p
    if T < 1:
        raise DataError(f"insufficient presample for lag order {p}: {y.shape[1]} observations")
    blocks = [exog[:, p:]]
    for s in range(1, p + 1):
        blocks.append(y[:, p - s : p - s + T])
    return y[:, p:].copy(), np.vstack(blocks)


def next_regressor(y, exog_next, p):
    """Regressor vector for the period after the last column of ``y``."""
    y = as_matrix(y, "y")
    exog_next = as_vector(exog_next, "exog_next")
    if y.shape[1] < p:
        raise DataError("not enough observations to form the lag vector")
    parts = [exog_next] + [y[:, -s] for s in range(1, p + 1)]
    return np.concatenate(parts)


def assemble_msvar_panel(panel: ReturnPanel, p=0, include_covariates=True):
    """Observation matrices for an MS-VAR(p) fit.

    Returns
    -------
    ybar : ndarray, shape (n + l, T - p)
    Ylags : ndarray, shape (l_exo + (n + l) p, T - p)
    """
    y = panel.observations() if include_covariates else np.asarray(panel.log_returns)
    return lagged_design(y.T, panel.exogenous.T, p)


@dataclass(frozen=True)
class LiabilitySchedule:
    """Principal outstanding and rates per liability type.

    Attributes
    ----------
    principals : ndarray, shape (periods, m)
        Principal remaining after each period's payment.
    interest_rates : ndarray, shape (periods, m)
        Per-period contractual rates, known one period ahead.
    market_rates : ndarray, shape (m,)
        Per-period market interest rates by liability type.
    payments : ndarray or None, shape (periods, m)
        Payments including interest.  Derived from the principal dynamics
        when omitted; row 0 is then NaN.
    """

    principals: np.ndarray
    interest_rates: np.ndarray
    market_rates: np.ndarray
    payments: Optional[np.ndarray] = None
    dates: Optional[Sequence] = None
    types: Optional[Sequence[str]] = None

    def __post_init__(self):
        L = as_matrix(self.principals, "principals")
        k = as_matrix(self.interest_rates, "interest_rates")
        km = as_vector(self.market_rates, "market_rates")
        if k.shape != L.shape or km.shape[0] != L.shape[1]:
            raise DataError("principals, interest_rates and market_rates are misaligned")
        if np.any(L.sum(axis=1) < 0):
            raise DataError("total principal must be non-negative")
        object.__setattr__(self, "principals", L)
        object.__setattr__(self, "interest_rates", k)
        object.__setattr__(self, "market_rates", km)
        if self.payments is not None:
            pay = np.asarray(self.payments, dtype=float)
            if pay.shape != L.shape:
                raise DataError("payments must have the same shape as principals")
            object.__setattr__(self, "payments", pay)
            self.check_dynamics()

    @property
    def n_types(self):
        return self.principals.shape[1]

    def total_principal(self):
        return self.principals.sum(axis=1)

    def weights(self):
        total = self.total_principal()
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(total[:, None] > 0, self.principals / total[:, None], np.nan)

    def weighted_interest_rate(self):
        """Book interest rate per period, weighted by principal."""
        return np.nansum(self.interest_rates * self.weights(), axis=1)

    def derived_payments(self):
        L, k = self.principals, self.interest_rates
        pay = np.full_like(L, np.nan)
        pay[1:] = (1.0 + k[:-1]) * L[:-1] - L[1:]
        return pay

    def effective_payments(self):
        return self.payments if self.payments is not None else self.derived_payments()

    def check_dynamics(self, rtol=1e-9):
        """Verify ``L_t = (1 + k_{t-1}) L_{t-1} - r_t`` for supplied payments."""
        L, k, pay = self.principals, self.interest_rates, self.payments
        implied = (1.0 + k[:-1]) * L[:-1] - pay[1:]
        ok = np.isnan(pay[1:]) | np.isclose(implied, L[1:], rtol=rtol, atol=rtol)
        if not np.all(ok):
            t, j = np.argwhere(~ok)[0]
            raise DataError("principal dynamics inconsistent with payments", row=int(t) + 1, column=int(j))

    def weighted_market_rates(self):
        """Market rate for each period's balance sheet, per-period weights."""
        return np.array([weighted_market_rate(row, self.market_rates) for row in self.principals])

    def market_values(self):
        """Total and per-type market values of the liabilities.

        Returns
        -------
        total : ndarray, shape (periods,)
        by_type : ndarray, shape (periods, m)
        """
        L, k = self.principals, self.interest_rates
        interest = k * L
        by_type = liability_market_value(L, interest, self.market_rates[None, :])
        total = liability_market_value(
            L.sum(axis=1), interest.sum(axis=1), self.weighted_market_rates()
        )
        return np.atleast_1d(total), np.atleast_2d(by_type)
