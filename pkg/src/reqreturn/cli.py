"""Batch command-line front end.

Every command writes its outputs into ``--out`` together with a
``manifest.json`` that records the command, the configuration, the seed, the
configuration digest and a SHA-256 hash of each output file.  The digest is
computed from the parameters and the *contents* of the input files, so it
does not depend on where the inputs live.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical error.
"""

import argparse
import hashlib
import math
import os
import sys

import numpy as np

from . import __version__
from . import io as rio
from .bayes_var import BayesianVAR, gibbs_sample
from .exceptions import DataError, MissingCovariatesError, NumericalError
from .market_data import lagged_design, next_regressor
from .ms_var import MsVarModel, em_fit, hamilton_filter, regime_diagnostics, scalar_ar0_estimate
from .portfolio import bayes_moments, rs_moments, solve_mean_variance
from .private_valuation import (
    PrivateRsModel,
    StateSpaceModel,
    em_private,
    initial_state_space,
    kalman_filter,
    kalman_forecast,
    kalman_smoother,
    rs_private_em,
    smoothed_market_value,
    smoothed_price_to_book,
)

EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 1, 2, 3
REPORT_HEADER = ["company", "row", "parameter", "regime", "column", "value", "display"]
PATH_FLAGS = (
    "prices",
    "dividends",
    "books",
    "covariates",
    "exogenous",
    "liabilities",
    "market_rates",
    "prior",
    "model",
    "future",
    "future_growth",
    "request",
)


class UsageError(Exception):
    """Inconsistent command-line options."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# configuration -------------------------------------------------------------------


def run_config(args):
    """Configuration document: parameters plus content hashes of the inputs."""
    params, inputs = {}, {}
    for key, value in sorted(vars(args).items()):
        if key in ("handler", "out"):
            continue
        if key in PATH_FLAGS:
            if value is not None:
                if not os.path.exists(value):
                    raise DataError(f"{key.replace('_', ' ')} file not found: {value}")
                inputs[key] = rio.file_digest(value)
        else:
            params[key] = value
    return {"command": args.command, "parameters": params, "inputs": inputs, "version": __version__}


def config_digest(config):
    return hashlib.sha256(rio.dumps(config).encode("utf-8")).hexdigest()


class Run:
    """Output directory bookkeeping for one command."""

    def __init__(self, args):
        self.args = args
        self.config = run_config(args)
        self.digest = config_digest(self.config)
        self.out = args.out
        self.files = []
        os.makedirs(self.out, exist_ok=True)

    def path(self, name):
        self.files.append(name)
        return os.path.join(self.out, name)

    def json(self, name, doc):
        doc = dict(doc)
        doc["config_digest"] = self.digest
        rio.write_json(self.path(name), doc)

    def csv(self, name, header, rows):
        rio.write_csv(self.path(name), header, rows, self.digest)

    def finish(self):
        manifest = {
            "command": self.args.command,
            "config": self.config,
            "config_digest": self.digest,
            "seed": getattr(self.args, "seed", None),
            "outputs": {name: rio.file_digest(os.path.join(self.out, name)) for name in sorted(self.files)},
        }
        rio.write_json(os.path.join(self.out, "manifest.json"), manifest)


def _display_rate(value, periods):
    """Per-period log rate, or the annualized simple rate ``exp(m k) - 1``."""
    if value is None or not math.isfinite(value):
        return value
    return value if periods is None else math.expm1(periods * value)


def _constant_exog(exog):
    """The common row of a constant exogenous block, else ``None``."""
    if exog.shape[1] == 0:
        return exog[0] if exog.shape[0] else np.zeros(0)
    return exog[-1] if np.all(exog == exog[0]) else None


# ingest --------------------------------------------------------------------------


def cmd_ingest(args):
    if args.prices is None and args.books is None:
        raise UsageError("ingest needs --prices or --books")
    run = Run(args)
    summary = {}
    if args.prices is not None:
        panel = rio.load_return_panel(args.prices, args.dividends, args.covariates, args.exogenous)
        rows = []
        for t, date in enumerate(panel.return_dates):
            for i, c in enumerate(panel.company_ids):
                rows.append([date, c, panel.log_returns[t, i]])
        run.csv("returns.csv", ["date", "company", "log_return"], rows)
        summary["returns"] = {
            "companies": list(panel.company_ids),
            "n_periods": panel.n_periods,
            "first_date": panel.return_dates[0],
            "last_date": panel.return_dates[-1],
            "mean_log_return": panel.log_returns.mean(axis=0),
            "covariates": list(panel.covariate_names),
            "exogenous": list(panel.exogenous_names),
        }
    if args.books is not None:
        books_div = args.dividends if args.prices is None else None
        priv = rio.load_private_panel(args.books, books_div, args.covariates, args.exogenous)
        priv.check_growth(rtol=1e-9)
        rows = []
        for t, date in enumerate(list(priv.dates)[1:]):
            for i, c in enumerate(priv.company_ids):
                rows.append([date, c, priv.growth_rates[t, i], priv.dividend_to_book[t, i]])
        run.csv("growth.csv", ["date", "company", "growth", "dividend_to_book"], rows)
        summary["books"] = {
            "companies": list(priv.company_ids),
            "n_periods": priv.n_periods,
            "dividend_payers": priv.dividend_payer_count,
        }
    run.json("summary.json", summary)
    run.finish()


# fit-msvar -----------------------------------------------------------------------


def _msvar_series(panel, joint):
    """(label, companies, y (dim x T+... time-major), names) per fit."""
    x = panel.covariates
    if joint:
        y = np.hstack([panel.log_returns, x])
        return [("joint", list(panel.company_ids), y)]
    out = []
    for i, c in enumerate(panel.company_ids):
        out.append((c, [c], np.hstack([panel.log_returns[:, [i]], x])))
    return out


def _msvar_report_rows(label, companies, model, diag, est, periods):
    rows = []
    N = model.n_regimes
    levels = model.regime_levels()
    for i, c in enumerate(companies):
        for j in range(N):
            v = float(levels[j, i])
            rows.append([c, 2, "k", j + 1, "", v, _display_rate(v, periods)])
    P = model.transition
    for i in range(N):
        for j in range(N):
            rows.append([label, 3 + i if i < 3 else "", "P", i + 1, j + 1, P[i, j], P[i, j]])
    for j in range(N):
        tau = float(diag.persistence[j])
        rows.append([label, 6, "tau", j + 1, "", tau, tau])
    for j in range(N):
        pi = None if diag.ergodic is None else float(diag.ergodic[j])
        rows.append([label, 7, "pi", j + 1, "", pi, pi])
    lr = diag.long_run_k
    for i, c in enumerate(companies):
        v = None if lr is None else float(np.ravel(lr)[i])
        rows.append([c, 8, "k_inf", "", "", v, _display_rate(v, periods)])
    for i, c in enumerate(companies):
        for j in range(N):
            s = math.sqrt(model.covariances[j][i, i])
            rows.append([c, 9, "sigma", j + 1, "", s, s])
    for c, e in zip(companies, est):
        rows.append([c, 10, "k_hat", "", "", e.a0_hat, _display_rate(e.a0_hat, periods)])
        rows.append([c, 10, "k_hat_simple", "", "", e.point_simple, _display_rate(e.a0_hat, periods)])
        rows.append([c, 11, "k_lower", "", "", e.ci_a0[0], _display_rate(e.ci_a0[0], periods)])
        rows.append([c, 12, "k_upper", "", "", e.ci_a0[1], _display_rate(e.ci_a0[1], periods)])
        rows.append([c, 13, "sigma_1", "", "", e.sigma_hat, e.sigma_hat])
    return rows


def cmd_fit_msvar(args):
    if args.cov_mode not in ("per-regime", "shared"):
        raise UsageError("--cov-mode must be per-regime or shared")
    run = Run(args)
    panel = rio.load_return_panel(args.prices, args.dividends, args.covariates, args.exogenous)
    p = args.lags
    exog = panel.exogenous
    psi_next = _constant_exog(exog)
    fits, report, regimes = [], [], []
    n_series = None
    for label, companies, y in _msvar_series(panel, args.joint):
        ybar, Ylag = lagged_design(y.T, exog.T, p)
        res = em_fit(
            ybar,
            Ylag,
            args.regimes,
            args.cov_mode,
            lag_order=p,
            tol=args.tol,
            max_iter=args.max_iter,
            n_restarts=args.restarts,
            seed=args.seed,
        )
        model, inf = res.model, res.inference
        diag = regime_diagnostics(model)
        idx = [panel.company_ids.index(c) for c in companies]
        est = [scalar_ar0_estimate(panel.log_returns[:, i], args.alpha) for i in idx]
        nxt = None if psi_next is None else next_regressor(y.T, psi_next, p)
        fits.append(
            {
                "label": label,
                "companies": companies,
                "series": companies + list(panel.covariate_names),
                "model": model.to_dict(),
                "log_likelihood": inf.log_likelihood,
                "n_iter": res.n_iter,
                "converged": res.converged,
                "information": res.information,
                "diagnostics": diag.to_dict(),
                "scalar_ar0": {c: e.to_dict() for c, e in zip(companies, est)},
                "next_regressor": nxt,
                "next_regime_probs": model.transition.T @ inf.filtered[:, -1],
                "trace": res.trace,
            }
        )
        report.extend(_msvar_report_rows(label, companies, model, diag, est, args.annualize))
        probs = inf.smoothed if args.smoothed else inf.filtered
        dates = panel.return_dates[p:]
        for i, c in zip(idx, companies):
            for t, date in enumerate(dates):
                regimes.append([date, c, panel.log_returns[p + t, i]] + list(probs[:, t]))
        n_series = y.shape[1]
    run.json(
        "model.json",
        {
            "kind": "msvar",
            "lag_order": p,
            "n_regimes": args.regimes,
            "exogenous": list(panel.exogenous_names),
            "dim": n_series,
            "fits": fits,
        },
    )
    run.csv("report.csv", REPORT_HEADER, report)
    header = ["date", "company", "log_return"] + [f"regime_{j + 1}" for j in range(args.regimes)]
    run.csv("regimes.csv", header, regimes)
    run.finish()


def emit_figure_data(panel, inference, company, lag_order=0, smoothed=False):
    """Rows ``(date, company, log return, regime probabilities...)`` for one company."""
    probs = inference.smoothed if smoothed else inference.filtered
    if probs is None:
        raise DataError("inference has no smoothed probabilities")
    i = panel.company_ids.index(company)
    dates = panel.return_dates[lag_order:]
    return [[d, company, panel.log_returns[lag_order + t, i]] + list(probs[:, t]) for t, d in enumerate(dates)]


def load_msvar_fits(doc):
    """``(fit document, MsVarModel)`` pairs from a ``fit-msvar`` model file."""
    if doc.get("kind") != "msvar":
        raise DataError("model file was not written by fit-msvar")
    return [(fit, MsVarModel.from_dict(fit["model"])) for fit in doc["fits"]]


def msvar_design(panel, fit, lag_order):
    """Rebuild ``(y, Ylag)`` for a stored fit from the same input panel."""
    companies = fit["companies"]
    idx = [panel.company_ids.index(c) for c in companies]
    y = np.hstack([panel.log_returns[:, idx], panel.covariates])
    return lagged_design(y.T, panel.exogenous.T, lag_order)


# fit-bayes -----------------------------------------------------------------------


PRIOR_KEYS = {"lambda1", "lambda2", "nu0", "delta", "V0", "diffuse"}


def _bayes_estimator(args):
    opts = {}
    if args.prior is not None:
        opts = rio.read_json(args.prior, "prior")
        unknown = sorted(set(opts) - PRIOR_KEYS)
        if unknown:
            raise DataError(f"unknown prior key {unknown[0]!r}")
    return BayesianVAR(lag_order=args.lags, random_state=args.seed, **opts)


def cmd_fit_bayes(args):
    run = Run(args)
    panel = rio.load_return_panel(args.prices, args.dividends, args.covariates, args.exogenous)
    X = panel.observations()
    series = list(panel.company_ids) + list(panel.covariate_names)
    est = _bayes_estimator(args).fit(X, exog=panel.exogenous)
    post = est.posterior_
    psi_next = _constant_exog(panel.exogenous)
    nxt = None if psi_next is None else next_regressor(X.T, psi_next, args.lags)
    regressors = list(panel.exogenous_names) + [
        f"lag{s}_{name}" for s in range(1, args.lags + 1) for name in series
    ]
    run.json(
        "posterior.json",
        {
            "kind": "bayes",
            "lag_order": args.lags,
            "companies": list(panel.company_ids),
            "series": series,
            "regressors": regressors,
            "prior": {"hyper": est.prior_.hyper, "diffuse": bool(est.diffuse)},
            "posterior": post.to_dict(),
            "next_regressor": nxt,
        },
    )
    header = ["series"] + [f"Pi_{r}" for r in regressors] + [f"Sigma_{s}" for s in series]
    sigma = post.point_sigma if post.point_sigma is not None else np.full((len(series),) * 2, np.nan)
    rows = [[s] + list(post.location[i]) + list(sigma[i]) for i, s in enumerate(series)]
    run.csv("report.csv", header, rows)
    if args.draws:
        draws = gibbs_sample(post, args.draws, args.seed)
        names = [f"pi_{i + 1}_{j + 1}" for i in range(post.location.shape[0]) for j in range(post.location.shape[1])]
        names += [f"sigma_{i + 1}_{j + 1}" for i in range(len(series)) for j in range(len(series))]
        body = [[int(r[0])] + list(r[1:]) for r in draws.as_rows()]
        run.csv("draws.csv", ["draw_index"] + names, body)
    run.finish()


# private valuation ---------------------------------------------------------------


def _private_panel(args):
    return rio.load_private_panel(args.books, args.dividends, args.covariates, args.exogenous)


def cmd_fit_private_rs(args):
    run = Run(args)
    panel = _private_panel(args)
    res = rs_private_em(
        panel,
        args.regimes,
        args.lags,
        tol=args.tol,
        max_iter=args.max_iter,
        n_restarts=args.restarts,
        seed=args.seed,
    )
    model, inf = res.model, res.inference
    diag = regime_diagnostics(model.as_msvar(), levels=model.price_to_book)
    run.json(
        "model.json",
        {
            "kind": "private-rs",
            "lag_order": args.lags,
            "companies": list(panel.company_ids),
            "n_payers": panel.dividend_payer_count,
            "model": model.to_dict(),
            "log_likelihood": inf.log_likelihood,
            "n_iter": res.n_iter,
            "converged": res.converged,
            "information": res.information,
            "diagnostics": diag.to_dict(),
            "next_regime_probs": model.transition.T @ inf.filtered[:, -1],
            "trace": res.trace,
        },
    )
    N = model.n_regimes
    rows = []
    payers = panel.company_ids[: model.n_payers]
    for j in range(N):
        for i, c in enumerate(payers):
            rows.append([c, "", "r", j + 1, "", model.book_to_price[j, i], model.book_to_price[j, i]])
            rows.append([c, "", "m", j + 1, "", model.price_to_book[j, i], model.price_to_book[j, i]])
        for i, c in enumerate(panel.company_ids):
            for a in range(model.A0k.shape[2]):
                v = float(model.A0k[j, i, a])
                rows.append([c, "", "A0k", j + 1, a + 1, v, _display_rate(v, args.annualize)])
    for i in range(N):
        for j in range(N):
            rows.append(["all", "", "P", i + 1, j + 1, model.transition[i, j], model.transition[i, j]])
    for j in range(N):
        rows.append(["all", "", "tau", j + 1, "", diag.persistence[j], diag.persistence[j]])
        pi = None if diag.ergodic is None else diag.ergodic[j]
        rows.append(["all", "", "pi", j + 1, "", pi, pi])
    for j in range(N):
        for i, c in enumerate(panel.company_ids):
            s = math.sqrt(model.covariances[j][i, i])
            rows.append([c, "", "sigma", j + 1, "", s, s])
    run.csv("report.csv", REPORT_HEADER, rows)
    probs = inf.smoothed if args.smoothed else inf.filtered
    dates = list(panel.dates)[1 + args.lags :]
    body = [[d] + list(probs[:, t]) for t, d in enumerate(dates)]
    run.csv("regimes.csv", ["date"] + [f"regime_{j + 1}" for j in range(N)], body)
    run.finish()


def _split_panel(panel, mode):
    """Sub-panels and their modes; mixed panels in ``auto`` mode become two runs."""
    n, nd = panel.n_companies, panel.dividend_payer_count
    if mode != "auto":
        return [(mode, panel)]
    if nd == n:
        return [("dividend", panel)]
    if nd == 0:
        return [("non-dividend", panel)]
    parts = []
    for m, idx in (("dividend", range(nd)), ("non-dividend", range(nd, n))):
        idx = list(idx)
        parts.append(
            (
                m,
                type(panel)(
                    [panel.company_ids[i] for i in idx],
                    panel.dates,
                    panel.book_values[:, idx],
                    panel.dividends[:, idx],
                    panel.covariates,
                    panel.exogenous,
                    panel.covariate_names,
                ),
            )
        )
    return parts


def cmd_fit_private_kalman(args):
    run = Run(args)
    panel = _private_panel(args)
    fits, rows = [], []
    for mode, sub in _split_panel(panel, args.mode):
        design = sub.design(args.lags)
        start = initial_state_space(
            design, mode, args.state_lags, pb_proxy=args.pb_proxy, phi=args.phi_init, lag_order=args.lags
        )
        res = em_private(start, design, tol=args.tol, max_iter=args.max_iter)
        traj, model = res.trajectory, res.model
        m = smoothed_price_to_book(traj, model)
        V = smoothed_market_value(traj, sub.book_values[args.lags :], model.mode)
        fits.append(
            {
                "mode": mode,
                "companies": list(sub.company_ids),
                "model": model.to_dict(),
                "log_likelihood": traj.log_likelihood,
                "n_iter": res.n_iter,
                "converged": res.converged,
                "information": res.information,
                "trace": res.trace,
            }
        )
        dates = list(sub.dates)[args.lags :]
        for t, d in enumerate(dates):
            for i, c in enumerate(sub.company_ids):
                rows.append([d, c, m[t, i], V[t, i]])
    run.json(
        "model.json",
        {"kind": "private-kalman", "lag_order": args.lags, "state_lag": args.state_lags, "fits": fits},
    )
    run.csv("smoothed.csv", ["date", "company", "m_smoothed", "value_smoothed"], rows)
    run.finish()


def load_kalman_fits(doc):
    if doc.get("kind") != "private-kalman":
        raise DataError("model file was not written by fit-private-kalman")
    return [(fit, StateSpaceModel.from_dict(fit["model"])) for fit in doc["fits"]]


# diagnostics ---------------------------------------------------------------------


def cmd_diagnostics(args):
    run = Run(args)
    doc = rio.read_json(args.model, "model")
    kind = doc.get("kind")
    out = []
    if kind == "msvar":
        for fit, model in load_msvar_fits(doc):
            diag = regime_diagnostics(model)
            entry = {"label": fit["label"], "companies": fit["companies"], **diag.to_dict()}
            entry["eigenvalue_moduli"] = sorted(np.abs(np.linalg.eigvals(model.transition)).tolist(), reverse=True)
            entry["information"] = fit.get("information", {})
            out.append(entry)
    elif kind == "private-rs":
        model = PrivateRsModel.from_dict(doc["model"])
        diag = regime_diagnostics(model.as_msvar(), levels=model.price_to_book)
        entry = {"label": "private-rs", "companies": doc["companies"], **diag.to_dict()}
        entry["eigenvalue_moduli"] = sorted(np.abs(np.linalg.eigvals(model.transition)).tolist(), reverse=True)
        entry["information"] = doc.get("information", {})
        out.append(entry)
    else:
        raise DataError("diagnostics needs a fit-msvar or fit-private-rs model file")
    rows = []
    for e in out:
        for j, tau in enumerate(e["persistence"]):
            rows.append([e["label"], 6, "tau", j + 1, "", tau, tau])
        for j, pi in enumerate(e["ergodic"] or []):
            rows.append([e["label"], 7, "pi", j + 1, "", pi, pi])
        for i, v in enumerate(e["long_run_k"] or []):
            c = e["companies"][i] if i < len(e["companies"]) else f"series_{i + 1}"
            rows.append([c, 8, "k_inf", "", "", v, _display_rate(v, args.annualize)])
    run.json("diagnostics.json", {"kind": kind, "fits": out})
    run.csv("report.csv", REPORT_HEADER, rows)
    run.finish()


# forecast ------------------------------------------------------------------------


def _forecast_msvar(args, doc):
    if doc["lag_order"] != 0:
        raise UsageError("MS-VAR forecasts are available for lag order 0 only")
    panel = rio.load_return_panel(args.prices, args.dividends, args.covariates, args.exogenous)
    rows = []
    for fit, model in load_msvar_fits(doc):
        y, Ylag = msvar_design(panel, fit, 0)
        inf = hamilton_filter(model, y, Ylag)
        if args.future is not None:
            psi = rio.load_future_regressors(args.future, args.horizon)
            if psi.shape[0] < args.horizon:
                raise MissingCovariatesError(f"forecasting {args.horizon} steps needs {args.horizon} regressor rows")
        elif fit.get("next_regressor") is not None:
            psi = np.tile(np.asarray(fit["next_regressor"], dtype=float), (args.horizon, 1))
        else:
            raise MissingCovariatesError("non-constant exogenous regressors need --future")
        xi = inf.filtered[:, -1]
        series = fit["series"]
        for h in range(1, args.horizon + 1):
            xi = model.transition.T @ xi
            means = np.stack([model.coefficients[j] @ psi[h - 1] for j in range(model.n_regimes)])
            mean = xi @ means
            spread = means - mean
            cov = np.tensordot(xi, model.covariances, axes=(0, 0)) + np.einsum("j,ja,jb->ab", xi, spread, spread)
            for i, s in enumerate(series):
                rows.append([h, fit["label"], f"log_return:{s}" if s in fit["companies"] else f"x:{s}", mean[i], cov[i, i]])
            for j in range(model.n_regimes):
                rows.append([h, fit["label"], f"prob:regime_{j + 1}", xi[j], None])
    return rows


def _forecast_kalman(args, doc):
    panel = _private_panel(args)
    rows = []
    for fit, model in load_kalman_fits(doc):
        parts = _split_panel(panel, "auto") if len(doc["fits"]) > 1 else [(model.mode, panel)]
        sub_panel = next((p for _, p in parts if list(p.company_ids) == fit["companies"]), None)
        if sub_panel is None:
            raise DataError("books do not match the companies of the fitted model")
        traj = kalman_smoother(kalman_filter(model, sub_panel), model)
        k = model.Pim.shape[1]
        future_X = None
        if args.future is not None:
            future_X = rio.load_future_regressors(args.future, args.horizon)
        elif k == 1 and model.n_covariates == 0 and np.all(sub_panel.exogenous == 1.0):
            future_X = np.ones((args.horizon, 1))
        future_growth = None
        if args.future_growth is not None and model.mode == "dividend":
            g = rio.read_table(args.future_growth, "future growth")
            missing = [c for c in fit["companies"] if c not in g.columns]
            if missing:
                raise DataError("future growth has no column for company", column=missing[0])
            future_growth = rio.numeric(g[fit["companies"]], "future growth")[: args.horizon]
        fc = kalman_forecast(model, traj, args.horizon, future_X, future_growth)
        obs = [f"{'dividend_to_book' if model.mode == 'dividend' else 'log_growth'}:{c}" for c in fit["companies"]]
        obs += [f"x:{name}" for name in sub_panel.covariate_names]
        for h in range(args.horizon):
            for i, name in enumerate(obs):
                rows.append([h + 1, model.mode, name, fc["y_mean"][h, i], fc["y_cov"][h, i, i]])
            for i, c in enumerate(fit["companies"]):
                rows.append([h + 1, model.mode, f"m:{c}", fc["z_mean"][h, i], fc["z_cov"][h, i, i]])
    return rows


def cmd_forecast(args):
    run = Run(args)
    doc = rio.read_json(args.model, "model")
    kind = doc.get("kind")
    if kind == "msvar":
        if args.prices is None:
            raise UsageError("forecasting an MS-VAR model needs --prices")
        rows = _forecast_msvar(args, doc)
    elif kind == "private-kalman":
        if args.books is None:
            raise UsageError("forecasting a state-space model needs --books")
        rows = _forecast_kalman(args, doc)
    else:
        raise DataError("forecast needs a fit-msvar or fit-private-kalman model file")
    run.csv("forecast.csv", ["horizon", "fit", "variable", "mean", "variance"], rows)
    run.finish()


# portfolio -----------------------------------------------------------------------


def cmd_portfolio(args):
    run = Run(args)
    req = rio.read_json(args.request, "request")
    for key in ("c", "k_liability", "source"):
        if key not in req:
            raise DataError(f"portfolio request has no {key!r} field")
    doc = rio.read_json(args.model, "model")
    source = req["source"]
    if source == "rs":
        fits = load_msvar_fits(doc)
        company = req.get("company")
        chosen = [(f, m) for f, m in fits if company is None or company in f["companies"] or company == f["label"]]
        if len(chosen) != 1:
            raise DataError("request must name one fitted company (or the joint fit)")
        fit, model = chosen[0]
        if fit.get("next_regressor") is None:
            raise MissingCovariatesError("model has no next-period regressor")
        moments = rs_moments(model, fit["next_regressor"], fit["next_regime_probs"], len(fit["companies"]))
        assets = fit["companies"]
    elif source == "bayes":
        if doc.get("kind") != "bayes":
            raise DataError("source 'bayes' needs a fit-bayes posterior file")
        from .bayes_var import NiwPosterior

        if doc.get("next_regressor") is None:
            raise MissingCovariatesError("posterior has no next-period regressor")
        post = NiwPosterior.from_dict(doc["posterior"])
        moments = bayes_moments(post, doc["next_regressor"], len(doc["companies"]))
        assets = doc["companies"]
    else:
        raise DataError("request source must be 'rs' or 'bayes'")
    sol = solve_mean_variance(moments, float(req["k_liability"]), float(req["c"]))
    out = sol.to_dict()
    out.update({"assets": assets, "request": req})
    run.json("portfolio.json", out)
    run.finish()


# liability-value -----------------------------------------------------------------


def cmd_liability_value(args):
    if args.liabilities is None or args.market_rates is None:
        raise UsageError("liability-value needs --liabilities and --market-rates")
    run = Run(args)
    sched = rio.load_liabilities(args.liabilities, args.market_rates)
    sched.check_dynamics()
    total, by_type = sched.market_values()
    pay = sched.effective_payments()
    L = sched.total_principal()
    Ibar = sched.weighted_interest_rate()
    kbar = sched.weighted_market_rates()
    rows = []
    for t, d in enumerate(sched.dates):
        for j, typ in enumerate(sched.types):
            rows.append(
                [d, typ, sched.principals[t, j], sched.interest_rates[t, j], pay[t, j], sched.market_rates[j], by_type[t, j]]
            )
        rows.append([d, "total", L[t], Ibar[t], np.nansum(pay[t]), kbar[t], total[t]])
    header = ["date", "type", "principal", "interest_rate", "payment", "market_rate", "market_value"]
    run.csv("liability_values.csv", header, rows)
    run.finish()


# parser --------------------------------------------------------------------------


def _non_negative(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be non-negative")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _seed(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return v


def _alpha(text):
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError("alpha must lie in (0, 1)")
    return v


def build_parser():
    parser = _Parser(prog="reqreturn", description="Required rates of return on equity and liabilities.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="command")
    sub.required = True

    def command(name, handler, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(handler=handler)
        p.add_argument("--out", required=True, help="output directory")
        return p

    def market(p, required=True):
        p.add_argument("--prices", required=required, help="prices.csv")
        p.add_argument("--dividends", help="dividends.csv (absent means zero dividends)")
        p.add_argument("--covariates", help="covariates.csv")
        p.add_argument("--exogenous", help="exogenous.csv (default: a constant)")

    def books(p, required=True):
        p.add_argument("--books", required=required, help="books.csv")
        p.add_argument("--dividends", help="dividends.csv")
        p.add_argument("--covariates", help="covariates.csv")
        p.add_argument("--exogenous", help="exogenous.csv (default: a constant)")

    def em(p, max_iter=500, tol=1e-8):
        p.add_argument("--seed", type=_seed, default=0)
        p.add_argument("--max-iter", type=_positive, default=max_iter)
        p.add_argument("--tol", type=float, default=tol)

    def annualize(p):
        p.add_argument(
            "--annualize",
            nargs="?",
            type=_positive,
            const=4,
            default=None,
            metavar="PERIODS",
            help="display rates annualized over PERIODS per year (default 4)",
        )

    p = command("ingest", cmd_ingest, "Validate input files and write derived series.")
    p.add_argument("--prices")
    p.add_argument("--books")
    p.add_argument("--dividends")
    p.add_argument("--covariates")
    p.add_argument("--exogenous")

    p = command("fit-msvar", cmd_fit_msvar, "Fit the Markov-switching VAR by EM.")
    market(p)
    p.add_argument("--regimes", type=_positive, default=3)
    p.add_argument("--lags", type=_non_negative, default=0)
    p.add_argument("--cov-mode", default="per-regime", choices=["per-regime", "shared"])
    p.add_argument("--alpha", type=_alpha, default=0.05)
    p.add_argument("--restarts", type=_non_negative, default=5)
    p.add_argument("--joint", action="store_true", help="one model for all companies")
    p.add_argument("--smoothed", action="store_true", help="write smoothed instead of filtered probabilities")
    em(p)
    annualize(p)

    p = command("fit-bayes", cmd_fit_bayes, "Conjugate Bayesian VAR with a Minnesota-style prior.")
    market(p)
    p.add_argument("--lags", type=_non_negative, default=1)
    p.add_argument("--prior", help="JSON with lambda1, lambda2, nu0, delta, V0, diffuse")
    p.add_argument("--draws", type=_non_negative, default=0)
    p.add_argument("--seed", type=_seed, default=0)

    p = command("fit-private-rs", cmd_fit_private_rs, "Regime-switching constant price-to-book model.")
    books(p)
    p.add_argument("--regimes", type=_positive, default=2)
    p.add_argument("--lags", type=_non_negative, default=0)
    p.add_argument("--restarts", type=_non_negative, default=5)
    p.add_argument("--smoothed", action="store_true")
    em(p)
    annualize(p)

    p = command("fit-private-kalman", cmd_fit_private_kalman, "Time-varying price-to-book state-space model.")
    books(p)
    p.add_argument("--state-lags", type=_positive, default=1)
    p.add_argument("--lags", type=_non_negative, default=0)
    p.add_argument("--mode", default="auto", choices=["auto", "dividend", "non-dividend"])
    p.add_argument("--pb-proxy", type=float, default=1.0)
    p.add_argument("--phi-init", type=float, default=0.5)
    em(p, tol=1e-9)

    p = command("diagnostics", cmd_diagnostics, "Persistence times, ergodic probabilities, long-run levels.")
    p.add_argument("--model", required=True)
    annualize(p)

    p = command("forecast", cmd_forecast, "Multi-step forecasts from a fitted model.")
    p.add_argument("--model", required=True)
    p.add_argument("--horizon", type=_positive, default=1)
    p.add_argument("--prices")
    p.add_argument("--books")
    p.add_argument("--dividends")
    p.add_argument("--covariates")
    p.add_argument("--exogenous")
    p.add_argument("--future", help="CSV of future regressor rows, one per horizon")
    p.add_argument("--future-growth", help="CSV of future book-value growth (dividend mode)")

    p = command("portfolio", cmd_portfolio, "Mean-variance equity and liability weights.")
    p.add_argument("--model", required=True, help="fit-msvar model.json or fit-bayes posterior.json")
    p.add_argument("--request", required=True, help="JSON with company, c, k_liability, source")

    p = command("liability-value", cmd_liability_value, "Market value of liabilities.")
    p.add_argument("--liabilities", required=True)
    p.add_argument("--market-rates", required=True)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.handler(args)
    except UsageError as exc:
        print(f"reqreturn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"reqreturn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"reqreturn: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
