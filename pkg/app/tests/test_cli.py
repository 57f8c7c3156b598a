import numpy as np
import pandas as pd
import pytest

from app.cli import EXIT_IO, EXIT_NUMERIC, EXIT_OK, build_parser, build_run_config, main
from app.config import load_settings
from app.core.calibration import parse_fit_report
from app.core.file_io import read_quotes_csv
from app.core.fixtures import ONE_DAY_PARAMS, synthetic_quotes
from app.core.models import DeltaConvention, MarketContext
from app.core.pricing import bs_delta, delta_to_x, x_to_strike


@pytest.fixture
def bundle(tmp_path):
    directory = tmp_path / "fixtures"
    assert main(["fixtures", "--output", str(directory)]) == EXIT_OK
    return directory


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, out


def field(out: str, name: str) -> str:
    prefix = f"{name}: "
    return next(line[len(prefix):] for line in out.splitlines() if line.startswith(prefix))


def test_fixtures_written(bundle):
    names = sorted(p.name for p in bundle.iterdir())
    assert names == [
        "flat_quotes.csv",
        "high_chi_quotes.csv",
        "high_chi_stats.csv",
        "laplace_prices.csv",
        "one_day_quotes.csv",
    ]


def test_no_command_prints_help(capsys):
    code, out = run(capsys)
    assert code == EXIT_OK
    assert "fit" in out


class TestFit:
    def test_unconditional(self, capsys, bundle, tmp_path):
        report = tmp_path / "fit.txt"
        code, out = run(capsys, "fit", "--quotes", bundle / "one_day_quotes.csv", "--output", report)
        assert code == EXIT_OK
        assert field(out, "mode") == "unconditional"
        assert float(field(out, "g").split()[0]) == pytest.approx(0.1758, rel=1e-5)
        params = parse_fit_report(report.read_text())
        assert params.chi == pytest.approx(1.2, rel=1e-5)

    def test_flat_quotes_warn(self, capsys, bundle):
        code, out = run(capsys, "fit", "--quotes", bundle / "flat_quotes.csv")
        assert code == EXIT_OK
        assert any(line.startswith("WARN: degenerate") for line in out.splitlines())

    def test_conditional(self, capsys, bundle):
        code, out = run(
            capsys, "fit", "--quotes", bundle / "high_chi_quotes.csv",
            "--mode", "conditional", "--hist", bundle / "high_chi_stats.csv",
        )
        assert code == EXIT_OK
        assert field(out, "mode") == "conditional"
        assert float(field(out, "constraint_residual")) <= 1e-10

    def test_conditional_needs_stats(self, capsys, bundle):
        code, _ = run(capsys, "fit", "--quotes", bundle / "one_day_quotes.csv", "--mode", "conditional")
        assert code == EXIT_IO

    def test_missing_file(self, capsys, tmp_path):
        code = main(["fit", "--quotes", str(tmp_path / "absent.csv")])
        assert code == EXIT_IO
        assert "absent.csv" in capsys.readouterr().err

    def test_too_few_quotes(self, capsys, tmp_path):
        path = tmp_path / "short.csv"
        path.write_text("# T_days=1 convention=erf\nx,sigma\n-0.01,0.2\n0.0,0.18\n0.01,0.2\n")
        code, _ = run(capsys, "fit", "--quotes", path)
        assert code == EXIT_NUMERIC


def write_delta_quotes(path, p, convention: DeltaConvention) -> None:
    ctx = MarketContext(S0=1.0, r=0.0, T=p.T)
    rows = [f"# T_days=1 convention={convention.value}", "delta,sigma"]
    for q in synthetic_quotes(p):
        delta = bs_delta(ctx, x_to_strike(ctx, q.x), q.sigma, convention)
        rows.append(f"{delta!r},{q.sigma!r}")
    path.write_text("\n".join(rows) + "\n")


class TestQuoteConvention:
    @pytest.fixture(autouse=True)
    def clean_env(self, monkeypatch, tmp_path):
        monkeypatch.delenv("SMILE_DELTA_CONVENTION", raising=False)
        monkeypatch.chdir(tmp_path)

    def test_fit_uses_file_convention(self, capsys, tmp_path):
        quotes, report = tmp_path / "delta.csv", tmp_path / "fit.txt"
        write_delta_quotes(quotes, ONE_DAY_PARAMS, DeltaConvention.MARKET_NORM_CDF)
        code, _ = run(capsys, "fit", "--quotes", quotes, "--output", report)
        assert code == EXIT_OK
        params = parse_fit_report(report.read_text())
        for name in ("g", "chi", "n"):
            assert getattr(params, name) == pytest.approx(getattr(ONE_DAY_PARAMS, name), rel=1e-5), name

    def test_unset_convention_defers_to_file(self, tmp_path):
        path = tmp_path / "delta.csv"
        path.write_text("# T_days=30 convention=norm_cdf\ndelta,sigma\n0.25,0.12\n0.5,0.10\n0.75,0.11\n")
        args = build_parser().parse_args(["fit", "--quotes", str(path)])
        config = build_run_config(args, load_settings())
        assert config.convention is None
        loaded = read_quotes_csv(path, convention=config.convention)
        assert loaded.convention == DeltaConvention.MARKET_NORM_CDF
        T = 30.0 / 365.0
        expected = [
            delta_to_x(d, s, T, DeltaConvention.MARKET_NORM_CDF)
            for d, s in [(0.25, 0.12), (0.5, 0.10), (0.75, 0.11)]
        ]
        np.testing.assert_allclose([q.x for q in loaded.quotes], expected, atol=1e-15)

    def test_explicit_convention_wins(self, tmp_path):
        path = tmp_path / "delta.csv"
        args = build_parser().parse_args(["fit", "--quotes", str(path), "--convention", "paper_erf"])
        settings = load_settings(delta_convention=args.convention)
        assert build_run_config(args, settings).convention == DeltaConvention.ERF


class TestDensityAndVar:
    def test_density_warns_on_negative_values(self, capsys, tmp_path):
        output = tmp_path / "density.csv"
        code, out = run(
            capsys, "density", "--g", 0.1, "--chi", 3.0, "--n", 0.0020548, "--T-days", 30,
            "--output", output,
        )
        assert code == EXIT_OK
        assert any(line.startswith("WARN: implied density negative") for line in out.splitlines())
        frame = pd.read_csv(output)
        assert len(frame) == 512
        assert frame["negative_flag"].sum() > 0

    def test_density_grid_options(self, capsys, tmp_path):
        output = tmp_path / "density.csv"
        code, out = run(
            capsys, "density", "--g", 0.1758, "--chi", 1.2, "--n", 0.0003, "--T-days", 1,
            "--grid-points", 64, "--grid-width", 8, "--output", output,
        )
        assert code == EXIT_OK
        assert field(out, "points") == "64"
        assert "WARN" not in out

    def test_invalid_parameters(self, capsys, tmp_path):
        code, _ = run(
            capsys, "density", "--g", 0.1, "--chi", 0.5, "--n", 0.001, "--T-days", 30,
            "--output", tmp_path / "density.csv",
        )
        assert code == EXIT_NUMERIC

    def test_missing_parameters(self, capsys, tmp_path):
        code, _ = run(capsys, "density", "--g", 0.1, "--output", tmp_path / "density.csv")
        assert code == EXIT_IO

    def test_var_of_flat_smile(self, capsys):
        code, out = run(
            capsys, "var", "--g", 0.2, "--chi", 1.0, "--n", 0.16, "--T-days", 365, "--level", 0.01,
        )
        assert code == EXIT_OK
        assert float(field(out, "lambda_exact")) == pytest.approx(2.32635 * 0.2 + 0.02, abs=1e-5)

    def test_var_level_domain(self, capsys):
        code, _ = run(
            capsys, "var", "--g", 0.2, "--chi", 1.0, "--n", 0.16, "--T-days", 365, "--level", 0.7,
        )
        assert code == EXIT_IO

    def test_var_from_fit_report(self, capsys, bundle, tmp_path):
        report = tmp_path / "fit.txt"
        assert run(capsys, "fit", "--quotes", bundle / "one_day_quotes.csv", "-o", report)[0] == EXIT_OK
        code, out = run(capsys, "var", "--params-from", report)
        assert code == EXIT_OK
        assert float(field(out, "lambda_exact")) > 0

    def test_var_with_negative_density(self, capsys):
        code, _ = run(capsys, "var", "--g", 0.1, "--chi", 3.0, "--n", 0.0020548, "--T-days", 30)
        assert code == EXIT_NUMERIC


def test_hist_recovers_laplace_decay(capsys, bundle, tmp_path):
    output = tmp_path / "stats.csv"
    code, out = run(
        capsys, "hist", "--prices", bundle / "laplace_prices.csv", "--group-size", 20000, "--output", output,
    )
    assert code == EXIT_OK
    line = next(line for line in out.splitlines() if line.startswith("laplace_prices "))
    values = dict(item.split("=") for item in line.split()[1:])
    assert float(values["mu_H"]) == pytest.approx(100.0, rel=0.05)
    assert len(pd.read_csv(output)) == 1


def test_sweep(capsys, tmp_path):
    output = tmp_path / "sweep.csv"
    code, out = run(capsys, "sweep", "--samples", 2, "--output", output)
    assert code == EXIT_OK
    assert field(out, "points") == "16"
    frame = pd.read_csv(output)
    assert len(frame) == 16
    assert list(frame.columns) == ["g", "chi", "rho", "T_days", "mu_fit", "mu_pred", "rel_err"]


def test_compare(capsys, bundle, tmp_path):
    output = tmp_path / "compare.txt"
    code, out = run(
        capsys, "compare", "--quotes", bundle / "high_chi_quotes.csv",
        "--hist", bundle / "high_chi_stats.csv", "--output", output,
    )
    assert code == EXIT_OK
    assert float(field(out, "var_rel_diff")) >= 0.05
    assert any(line.startswith("WARN: unconditional implied density has") for line in out.splitlines())
    assert output.read_text() in out


def test_config_file(capsys, tmp_path):
    config = tmp_path / "smile.conf"
    config.write_text("var_level=0.05\n")
    code, out = run(capsys, "--config", config, "var", "--g", 0.2, "--chi", 1.0, "--n", 0.16, "--T-days", 365)
    assert code == EXIT_OK
    assert float(field(out, "level")) == 0.05


def test_config_unknown_key(capsys, tmp_path):
    config = tmp_path / "smile.conf"
    config.write_text("bogus=1\n")
    code, _ = run(capsys, "--config", config, "fixtures", "--output", tmp_path / "out")
    assert code == EXIT_IO


class TestByteDeterminism:
    def test_fixtures(self, tmp_path):
        first, second = tmp_path / "a", tmp_path / "b"
        assert main(["fixtures", "--output", str(first)]) == EXIT_OK
        assert main(["fixtures", "--output", str(second)]) == EXIT_OK
        for path in first.iterdir():
            assert path.read_bytes() == (second / path.name).read_bytes(), path.name

    @pytest.mark.parametrize(
        "argv",
        [
            ["density", "--g", "0.1758", "--chi", "1.2", "--n", "0.0003", "--T-days", "1"],
            ["sweep", "--samples", "2"],
        ],
        ids=["density", "sweep"],
    )
    def test_generated_outputs(self, capsys, tmp_path, argv):
        outputs = [tmp_path / "first.csv", tmp_path / "second.csv"]
        for output in outputs:
            assert run(capsys, *argv, "--output", output)[0] == EXIT_OK
        assert outputs[0].read_bytes() == outputs[1].read_bytes()

    def test_stats_and_fit_report(self, capsys, bundle, tmp_path):
        for name in ("first", "second"):
            code, _ = run(
                capsys, "hist", "--prices", bundle / "laplace_prices.csv",
                "--output", tmp_path / f"{name}.csv",
            )
            assert code == EXIT_OK
            code, _ = run(
                capsys, "fit", "--quotes", bundle / "one_day_quotes.csv",
                "--output", tmp_path / f"{name}.txt",
            )
            assert code == EXIT_OK
        assert (tmp_path / "first.csv").read_bytes() == (tmp_path / "second.csv").read_bytes()
        assert (tmp_path / "first.txt").read_bytes() == (tmp_path / "second.txt").read_bytes()
