import json
import os
import shutil

import numpy as np
import pandas as pd
import pytest

from reqreturn import io as rio
from reqreturn.bayes_var import NiwPosterior
from reqreturn.cli import REPORT_HEADER, emit_figure_data, load_kalman_fits, load_msvar_fits, main, msvar_design
from reqreturn.ms_var import hamilton_filter
from reqreturn.private_valuation import PrivateRsModel, kalman_filter, private_inference

FIX = os.path.join(os.path.dirname(__file__), "fixtures")
PRICES = os.path.join(FIX, "three_regime", "prices.csv")
DIVS = os.path.join(FIX, "three_regime", "dividends.csv")
BOOKS = os.path.join(FIX, "private", "books.csv")
BDIVS = os.path.join(FIX, "private", "dividends.csv")
LIAB = os.path.join(FIX, "liabilities", "liabilities.csv")
MRATES = os.path.join(FIX, "liabilities", "market_rates.csv")


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def ms3(tmp_path_factory):
    out = tmp_path_factory.mktemp("ms3")
    assert run("fit-msvar", "--prices", PRICES, "--dividends", DIVS, "--regimes", 3, "--out", out) == 0
    return out


def load(out, name):
    return rio.read_json(os.path.join(out, name))


def test_report_schema_golden(ms3):
    report = rio.read_csv(os.path.join(ms3, "report.csv"))
    assert list(report.columns) == REPORT_HEADER
    for c in ("AAA", "BBB"):
        sub = report[report.company == c]
        counts = sub.groupby("parameter").size().to_dict()
        assert counts == {
            "P": 9,
            "k": 3,
            "k_hat": 1,
            "k_hat_simple": 1,
            "k_inf": 1,
            "k_lower": 1,
            "k_upper": 1,
            "pi": 3,
            "sigma": 3,
            "sigma_1": 1,
            "tau": 3,
        }
        rows = sub.groupby("parameter")["row"].first().to_dict()
        assert rows["k"] == 2 and rows["tau"] == 6 and rows["pi"] == 7 and rows["k_inf"] == 8
        assert rows["sigma"] == 9 and rows["k_hat"] == 10 and rows["k_lower"] == 11 and rows["k_upper"] == 12
        assert rows["sigma_1"] == 13
        assert sorted(sub[sub.parameter == "P"]["row"].unique()) == [3, 4, 5]
    with open(os.path.join(ms3, "report.csv")) as fh:
        assert fh.readline().startswith("# config_digest=")


def test_three_regime_recovery(ms3):
    with open(os.path.join(FIX, "three_regime", "truth.json")) as fh:
        truth = json.load(fh)
    report = rio.read_csv(os.path.join(ms3, "report.csv"))
    for c, states in zip(truth["companies"], truth["states"]):
        k = report[(report.company == c) & (report.parameter == "k")].sort_values("regime")["value"].to_numpy()
        np.testing.assert_allclose(k, truth["levels"], atol=0.02)
        P = report[(report.company == c) & (report.parameter == "P")]
        diag = P[P.regime == P.column].sort_values("regime")["value"].to_numpy()
        s = np.asarray(states)
        counts = np.zeros((3, 3))
        np.add.at(counts, (s[:-1], s[1:]), 1.0)
        empirical = np.diag(counts) / counts.sum(axis=1)
        np.testing.assert_allclose(diag, empirical, atol=0.05)


def test_single_regime_point_is_sample_mean(tmp_path):
    assert run("fit-msvar", "--prices", PRICES, "--dividends", DIVS, "--regimes", 1, "--out", tmp_path) == 0
    panel = rio.load_return_panel(PRICES, DIVS)
    report = rio.read_csv(os.path.join(tmp_path, "report.csv"))
    for i, c in enumerate(panel.company_ids):
        mean = panel.log_returns[:, i].mean()
        k_hat = report[(report.company == c) & (report.parameter == "k_hat")]["value"].item()
        k1 = report[(report.company == c) & (report.parameter == "k")]["value"].item()
        assert k_hat == pytest.approx(mean, abs=1e-15)
        assert k1 == pytest.approx(mean, abs=1e-12)
    regimes = rio.read_csv(os.path.join(tmp_path, "regimes.csv"))
    assert np.all(regimes["regime_1"] == 1.0)
    assert len(regimes) == panel.n_periods * panel.n_companies


def test_figure_data_matches_filter(ms3):
    panel = rio.load_return_panel(PRICES, DIVS)
    regimes = rio.read_csv(os.path.join(ms3, "regimes.csv"))
    for fit, model in load_msvar_fits(load(ms3, "model.json")):
        y, Ylag = msvar_design(panel, fit, 0)
        filt = hamilton_filter(model, y, Ylag).filtered
        sub = regimes[regimes.company == fit["label"]]
        assert len(sub) == panel.n_periods
        got = sub[[f"regime_{j + 1}" for j in range(3)]].to_numpy().T
        assert np.array_equal(got, filt)
        np.testing.assert_array_equal(sub["log_return"], panel.log_returns[:, panel.company_ids.index(fit["label"])])


def test_emit_figure_data_shapes():
    panel = rio.load_return_panel(PRICES, DIVS)

    class Inf:
        filtered = np.ones((1, panel.n_periods))
        smoothed = None

    rows = emit_figure_data(panel, Inf, "AAA")
    assert len(rows) == panel.n_periods and all(r[3] == 1.0 for r in rows)
    assert rows[0][0] == panel.return_dates[0]


def test_msvar_json_round_trip(ms3):
    panel = rio.load_return_panel(PRICES, DIVS)
    for fit, model in load_msvar_fits(load(ms3, "model.json")):
        y, Ylag = msvar_design(panel, fit, 0)
        assert abs(hamilton_filter(model, y, Ylag).log_likelihood - fit["log_likelihood"]) < 1e-10


def test_private_rs_round_trip_and_regimes(tmp_path):
    assert run("fit-private-rs", "--books", BOOKS, "--dividends", BDIVS, "--out", tmp_path) == 0
    doc = load(tmp_path, "model.json")
    model = PrivateRsModel.from_dict(doc["model"])
    panel = rio.load_private_panel(BOOKS, BDIVS)
    inf = private_inference(model, panel.design(0))
    assert abs(inf.log_likelihood - doc["log_likelihood"]) < 1e-10
    with open(os.path.join(FIX, "private", "truth.json")) as fh:
        truth = json.load(fh)
    np.testing.assert_allclose(np.ravel(model.book_to_price), truth["book_to_price"], atol=0.08)
    regimes = rio.read_csv(os.path.join(tmp_path, "regimes.csv"))
    assert len(regimes) == panel.n_periods
    np.testing.assert_allclose(regimes[["regime_1", "regime_2"]].sum(axis=1), 1.0)


def test_kalman_round_trip_and_smoothed(tmp_path):
    args = ("fit-private-kalman", "--books", BOOKS, "--dividends", BDIVS, "--max-iter", 30, "--out", tmp_path)
    assert run(*args) == 0
    doc = load(tmp_path, "model.json")
    fits = load_kalman_fits(doc)
    assert [f["mode"] for f, _ in fits] == ["dividend", "non-dividend"]
    panel = rio.load_private_panel(BOOKS, BDIVS)
    for fit, model in fits:
        idx = [panel.company_ids.index(c) for c in fit["companies"]]
        sub = type(panel)(
            fit["companies"], panel.dates, panel.book_values[:, idx], panel.dividends[:, idx]
        )
        assert abs(kalman_filter(model, sub).log_likelihood - fit["log_likelihood"]) < 1e-10
        assert all(b - a >= -1e-6 for a, b in zip(fit["trace"], fit["trace"][1:]))
    sm = rio.read_csv(os.path.join(tmp_path, "smoothed.csv"))
    assert list(sm.columns) == ["date", "company", "m_smoothed", "value_smoothed"]
    assert len(sm) == (panel.n_periods + 1) * panel.n_companies
    books = pd.read_csv(BOOKS).set_index("date")
    for c in panel.company_ids:
        part = sm[sm.company == c]
        np.testing.assert_allclose(part["value_smoothed"], part["m_smoothed"].to_numpy() * books[c].to_numpy())


def test_bayes_outputs(tmp_path):
    prior = tmp_path / "prior.json"
    prior.write_text(json.dumps({"lambda1": 10.0, "lambda2": 0.1}))
    args = ("fit-bayes", "--prices", PRICES, "--dividends", DIVS, "--prior", prior, "--draws", 200, "--seed", 3)
    assert run(*args, "--out", tmp_path / "o") == 0
    doc = load(tmp_path / "o", "posterior.json")
    post = NiwPosterior.from_dict(doc["posterior"])
    assert doc["prior"]["hyper"]["lambda1"] == 10.0
    report = rio.read_csv(tmp_path / "o" / "report.csv")
    assert list(report.columns) == ["series", "Pi_const", "Pi_lag1_AAA", "Pi_lag1_BBB", "Sigma_AAA", "Sigma_BBB"]
    np.testing.assert_array_equal(report.iloc[:, 1:4].to_numpy(), post.location)
    draws = rio.read_csv(tmp_path / "o" / "draws.csv")
    assert len(draws) == 200 and draws.shape[1] == 1 + 6 + 4
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"lambda": 1}))
    assert run("fit-bayes", "--prices", PRICES, "--prior", bad, "--out", tmp_path / "b") == 2


def test_portfolio_and_diagnostics(ms3, tmp_path):
    req = tmp_path / "req.json"
    req.write_text(json.dumps({"company": "AAA", "c": 50.0, "k_liability": 0.01, "source": "rs"}))
    assert run("portfolio", "--model", ms3 / "model.json", "--request", req, "--out", tmp_path / "p") == 0
    sol = load(tmp_path / "p", "portfolio.json")
    assert abs(sum(sol["equity_weights"]) + sol["own_liability_weight"] - 1.0) < 1e-12
    assert sol["residuals"]["stationarity"] < 1e-10
    req.write_text(json.dumps({"c": 50.0, "k_liability": 0.01, "source": "bayes"}))
    assert run("portfolio", "--model", ms3 / "model.json", "--request", req, "--out", tmp_path / "q") == 2
    assert run("diagnostics", "--model", ms3 / "model.json", "--out", tmp_path / "d") == 0
    diag = load(tmp_path / "d", "diagnostics.json")
    fit = load(ms3, "model.json")["fits"][0]
    P = np.array(fit["model"]["transition"])
    np.testing.assert_allclose(diag["fits"][0]["persistence"], 1.0 / (1.0 - np.diag(P)))
    pi = np.array(diag["fits"][0]["ergodic"])
    np.testing.assert_allclose(pi @ P, pi, atol=1e-12)


def test_forecast_outputs(ms3, tmp_path):
    args = ("forecast", "--model", ms3 / "model.json", "--prices", PRICES, "--dividends", DIVS, "--horizon", 4)
    assert run(*args, "--out", tmp_path / "f") == 0
    fc = rio.read_csv(tmp_path / "f" / "forecast.csv")
    probs = fc[fc.variable.str.startswith("prob:") & (fc.fit == "AAA")]
    np.testing.assert_allclose(probs.groupby("horizon")["mean"].sum(), 1.0)
    kal = tmp_path / "k"
    assert run("fit-private-kalman", "--books", BOOKS, "--dividends", BDIVS, "--max-iter", 5, "--out", kal) == 0
    fargs = ("forecast", "--model", kal / "model.json", "--books", BOOKS, "--dividends", BDIVS, "--horizon", 2)
    assert run(*fargs, "--out", tmp_path / "g") == 2
    growth = tmp_path / "growth.csv"
    growth.write_text("date,PAY\nh1,0.01\nh2,0.02\n")
    assert run(*fargs, "--future-growth", growth, "--out", tmp_path / "g") == 0
    fc = rio.read_csv(tmp_path / "g" / "forecast.csv")
    assert set(fc.horizon) == {1, 2}
    assert (fc["variance"] > 0).all()


def test_liability_values(tmp_path):
    assert run("liability-value", "--liabilities", LIAB, "--market-rates", MRATES, "--out", tmp_path) == 0
    lv = rio.read_csv(tmp_path / "liability_values.csv")
    sched = rio.load_liabilities(LIAB, MRATES)
    total, by_type = sched.market_values()
    np.testing.assert_allclose(lv[lv.type == "total"]["market_value"], total, rtol=1e-15)
    np.testing.assert_allclose(lv[lv.type == "deposits"]["market_value"], by_type[:, 0], rtol=1e-15)


def test_ingest(tmp_path):
    assert run("ingest", "--prices", PRICES, "--dividends", DIVS, "--out", tmp_path) == 0
    ret = rio.read_csv(tmp_path / "returns.csv")
    panel = rio.load_return_panel(PRICES, DIVS)
    np.testing.assert_array_equal(ret[ret.company == "BBB"]["log_return"], panel.log_returns[:, 1])
    assert run("ingest", "--books", BOOKS, "--dividends", BDIVS, "--out", tmp_path / "b") == 0
    assert load(tmp_path / "b", "summary.json")["books"]["dividend_payers"] == 1


COMMANDS = [
    ("fit-msvar", "--prices", PRICES, "--dividends", DIVS, "--regimes", 2, "--seed", 5),
    ("fit-msvar", "--prices", PRICES, "--regimes", 2, "--joint", "--cov-mode", "shared", "--smoothed", "--annualize"),
    ("fit-bayes", "--prices", PRICES, "--draws", 300, "--seed", 11),
    ("fit-private-rs", "--books", BOOKS, "--dividends", BDIVS, "--seed", 2),
    ("fit-private-kalman", "--books", BOOKS, "--dividends", BDIVS, "--max-iter", 10),
    ("liability-value", "--liabilities", LIAB, "--market-rates", MRATES),
    ("ingest", "--prices", PRICES, "--books", BOOKS),
]


def snapshot(out):
    return {name: (out / name).read_bytes() for name in sorted(os.listdir(out))}


@pytest.mark.parametrize("argv", COMMANDS, ids=[c[0] + str(i) for i, c in enumerate(COMMANDS)])
def test_byte_determinism(argv, tmp_path):
    assert run(*argv, "--out", tmp_path / "a") == 0
    assert run(*argv, "--out", tmp_path / "b") == 0
    a, b = snapshot(tmp_path / "a"), snapshot(tmp_path / "b")
    assert a == b
    manifest = json.loads(a["manifest.json"])
    digest = manifest["config_digest"]
    for name, data in a.items():
        if name != "manifest.json":
            assert digest.encode() in data
            assert manifest["outputs"][name] == rio.file_digest(tmp_path / "a" / name)


def test_digest_ignores_input_location(tmp_path):
    shutil.copy(PRICES, tmp_path / "elsewhere.csv")
    assert run("ingest", "--prices", PRICES, "--out", tmp_path / "a") == 0
    assert run("ingest", "--prices", tmp_path / "elsewhere.csv", "--out", tmp_path / "b") == 0
    assert snapshot(tmp_path / "a") == snapshot(tmp_path / "b")
    assert run("ingest", "--prices", PRICES, "--dividends", DIVS, "--out", tmp_path / "c") == 0
    da = load(tmp_path / "a", "manifest.json")["config_digest"]
    dc = load(tmp_path / "c", "manifest.json")["config_digest"]
    assert da != dc


def test_seed_changes_draws(tmp_path):
    base = ("fit-bayes", "--prices", PRICES, "--draws", 20)
    assert run(*base, "--seed", 1, "--out", tmp_path / "a") == 0
    assert run(*base, "--seed", 2, "--out", tmp_path / "b") == 0
    assert (tmp_path / "a" / "draws.csv").read_bytes() != (tmp_path / "b" / "draws.csv").read_bytes()


def test_exit_codes(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run("fit-msvar", "--regimes", 2, "--out", tmp_path)
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        run("no-such-command")
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        run("fit-msvar", "--prices", PRICES, "--regimes", 0, "--out", tmp_path)
    assert exc.value.code == 1
    assert run("ingest", "--out", tmp_path) == 1
    assert run("fit-msvar", "--prices", tmp_path / "missing.csv", "--out", tmp_path) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("date,A\n1,10\n2,abc\n3,11\n")
    assert run("fit-msvar", "--prices", bad, "--out", tmp_path) == 2
    assert "row '2'" in capsys.readouterr().err
    flat = tmp_path / "flat.csv"
    flat.write_text("date,A\n" + "".join(f"{t},{1.01 ** t!r}\n" for t in range(30)))
    assert run("fit-msvar", "--prices", flat, "--regimes", 2, "--out", tmp_path / "f") == 3
    assert "numerical error" in capsys.readouterr().err
