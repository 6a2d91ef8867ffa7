"""Book-value panel for private companies."""

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .._validation import as_matrix
from ..exceptions import DataError
from ..market_data import lagged_design, validate_dates


class PrivateDesign(NamedTuple):
    """Estimation arrays for lag order ``p``, all (rows x T') with ``T' = T - p``.

    ``books`` has ``T' + 1`` columns; column 0 is the book value at the start
    of the effective sample.
    """

    growth: np.ndarray
    log_growth: np.ndarray
    dividend_to_book: np.ndarray
    psi: np.ndarray
    x: np.ndarray
    X: np.ndarray
    books: np.ndarray
    n_payers: int

    @property
    def n_periods(self):
        return self.growth.shape[1]

    @property
    def n_companies(self):
        return self.growth.shape[0]


@dataclass(frozen=True)
class PrivatePanel:
    """Book values, dividends and covariates of ``n`` private companies.

    ``book_values`` is (T+1) x n; ``dividends``, ``covariates`` (x_t) and
    ``exogenous`` (psi_t) are aligned with periods 1..T.  Dividend payers must
    occupy the leading columns; use :meth:`payers_first` to reorder.
    """

    company_ids: Sequence[str]
    dates: Sequence
    book_values: np.ndarray
    dividends: Optional[np.ndarray] = None
    covariates: Optional[np.ndarray] = None
    exogenous: Optional[np.ndarray] = None
    covariate_names: Sequence[str] = ()
    growth_rates: np.ndarray = field(init=False, repr=False)
    dividend_to_book: np.ndarray = field(init=False, repr=False)
    dividend_payer_count: int = field(init=False)

    def __post_init__(self):
        B = as_matrix(self.book_values, "book_values")
        if B.shape[0] < 2:
            raise DataError("at least two book-value dates are required")
        T, n = B.shape[0] - 1, B.shape[1]
        if len(self.company_ids) != n:
            raise DataError("number of book-value columns does not match company_ids")
        if len(self.dates) != T + 1:
            raise DataError(f"expected {T + 1} dates, got {len(self.dates)}")
        validate_dates(self.dates)
        if np.any(B <= 0):
            t, i = np.argwhere(B <= 0)[0]
            raise DataError("book values must be positive", row=int(t), column=str(self.company_ids[i]))
        d = np.zeros((T, n)) if self.dividends is None else as_matrix(self.dividends, "dividends")
        if d.shape != (T, n):
            raise DataError(f"dividends must have shape {(T, n)}, got {d.shape}")
        if np.any(d < 0):
            t, i = np.argwhere(d < 0)[0]
            raise DataError("dividends must be non-negative", row=int(t) + 1, column=str(self.company_ids[i]))
        payer = np.any(d > 0, axis=0)
        n_d = int(payer.sum())
        if np.any(payer[n_d:]):
            raise DataError("dividend-paying companies must come first; use PrivatePanel.payers_first")
        x = np.zeros((T, 0)) if self.covariates is None else as_matrix(self.covariates, "covariates")
        psi = np.ones((T, 1)) if self.exogenous is None else as_matrix(self.exogenous, "exogenous")
        for name, arr in (("covariates", x), ("exogenous", psi)):
            if arr.shape[0] != T:
                raise DataError(f"{name} has {arr.shape[0]} rows, expected {T}")
        growth = B[1:] / B[:-1] - 1.0
        delta = d / B[:-1]
        for arr in (B, d, x, psi, growth, delta):
            arr.setflags(write=False)
        object.__setattr__(self, "book_values", B)
        object.__setattr__(self, "dividends", d)
        object.__setattr__(self, "covariates", x)
        object.__setattr__(self, "exogenous", psi)
        object.__setattr__(self, "company_ids", tuple(str(c) for c in self.company_ids))
        object.__setattr__(self, "growth_rates", growth)
        object.__setattr__(self, "dividend_to_book", delta)
        object.__setattr__(self, "dividend_payer_count", n_d)
        if len(self.covariate_names) != x.shape[1]:
            object.__setattr__(self, "covariate_names", tuple(f"x{i + 1}" for i in range(x.shape[1])))

    @classmethod
    def payers_first(cls, company_ids, dates, book_values, dividends=None, **kwargs):
        """Build a panel after moving dividend payers to the leading columns (stable order)."""
        B = np.asarray(book_values, dtype=float)
        if dividends is None:
            return cls(company_ids, dates, B, None, **kwargs)
        d = np.asarray(dividends, dtype=float)
        order = np.argsort(~np.any(d > 0, axis=0), kind="stable")
        ids = [list(company_ids)[i] for i in order]
        return cls(ids, dates, B[:, order], d[:, order], **kwargs)

    @property
    def n_periods(self):
        return self.growth_rates.shape[0]

    @property
    def n_companies(self):
        return self.book_values.shape[1]

    def check_growth(self, rtol=1e-12):
        """Verify ``(1 + b_t) B_{t-1} = B_t`` to relative tolerance ``rtol``."""
        B = self.book_values
        rel = np.abs((1.0 + self.growth_rates) * B[:-1] - B[1:]) / B[1:]
        if np.any(rel > rtol):
            t, i = np.argwhere(rel > rtol)[0]
            raise DataError("book-value growth is inconsistent", row=int(t) + 1, column=self.company_ids[i])
        return True

    def design(self, p=0):
        """Arrays for estimation with ``p`` lags of the covariates."""
        x = self.covariates.T
        psi = self.exogenous.T
        xbar, X = lagged_design(x, psi, p)
        if X.shape[1] == 0:
            raise DataError(f"lag order {p} leaves no observations")
        b = self.growth_rates.T[:, p:]
        if np.any(b <= -1.0):
            raise DataError("book-value growth rates must exceed -1")
        return PrivateDesign(
            growth=b.copy(),
            log_growth=np.log1p(b),
            dividend_to_book=self.dividend_to_book.T[:, p:].copy(),
            psi=psi[:, p:].copy(),
            x=xbar,
            X=X,
            books=self.book_values.T[:, p:].copy(),
            n_payers=self.dividend_payer_count,
        )
