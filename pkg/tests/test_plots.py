import numpy as np
import pytest
import yaml

from riccati_desk.cli import main as desk_main
from riccati_plots import FigureSpec, SchemaError, render
from riccati_plots.cli import main as plots_main

import matplotlib.pyplot as plt


def logistic_entry(asset, side):
    return {"asset": asset, "tier": 0, "side": side, "kind": "logistic",
            "lambda_base": 30.0, "a": 0.7, "b": 30.0,
            "sizes": {"gamma": {"alpha": 4.0, "beta": 0.04,
                                "bin_width": 25.0, "n_bins": 10}}}


def single_asset_doc(R=0.0, T=1.0):
    return {
        "schema_version": 1,
        "market": {"r": 1, "S0": [100.0], "Sbar": [100.0],
                   "R": [[R]], "V": [[1.2]]},
        "intensities": [logistic_entry(0, "bid"), logistic_entry(0, "ask")],
        "risk": {"rho": 1.0e-3, "Gamma": [[0.0]], "T": T, "cap": 600.0},
        "sweep": {"q": [-400.0, -200.0, 0.0, 200.0, 400.0],
                  "S": [[98.0], [99.0], [100.0], [101.0], [102.0]],
                  "z": [100.0]},
    }


def run_desk(tmp_path, doc, command, name):
    cfg = tmp_path / f"{name}.yaml"
    cfg.write_text(yaml.safe_dump(doc))
    out = tmp_path / name
    argv = (command if isinstance(command, list) else [command])
    assert desk_main(argv + ["--config", str(cfg), "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def artifacts(tmp_path_factory):
    """One shared set of CLI outputs for all figure kinds."""
    tmp_path = tmp_path_factory.mktemp("plots")
    out = {}
    out["quotes_r0"] = run_desk(tmp_path, single_asset_doc(R=0.0),
                                "quotes", "r0")
    out["quotes_r01"] = run_desk(tmp_path, single_asset_doc(R=0.1),
                                 "quotes", "r01")
    doc = single_asset_doc(R=0.0, T=0.2)
    doc["grid"] = {"dt": 2.0e-3, "dq": 25.0, "dS": 0.2, "S_span": 2.0}
    doc["sweep"] = {"S": [[100.0]], "z": [100.0]}
    out["compare"] = run_desk(tmp_path, doc, "compare-approx", "cmp")
    two = {
        "schema_version": 1,
        "market": {"r": 2, "S0": [100.0, 100.0], "Sbar": [100.0, 100.0],
                   "R": [[0.5, -0.5], [-0.5, 0.5]],
                   "V": [[1.0, 0.0], [0.0, 1.0]]},
        "intensities": [logistic_entry(a, s)
                        for a in (0, 1) for s in ("bid", "ask")],
        "risk": {"rho": 5.0e-3, "Gamma": [[0.0, 0.0], [0.0, 0.0]],
                 "eta": [[1.0e-4, 0.0], [0.0, 1.0e-4]], "T": 1.0,
                 "cap": 600.0},
        "simulation": {"dt": 1.0e-2, "n_paths": 2, "seed": 7},
    }
    out["paths"] = run_desk(tmp_path, two, ["simulate", "mm"], "sim")
    out["tmp"] = tmp_path
    return out


def spec_for(artifacts, kind, out_name):
    inputs = {
        "size-distribution": [artifacts["quotes_r0"] / "sizes.csv",
                              artifacts["quotes_r0"] / "intensity_scan.csv"],
        "quote-ladders": [artifacts["quotes_r0"] / "quotes.csv"],
        "quotes-vs-price": [artifacts["quotes_r0"] / "quotes.csv",
                            artifacts["quotes_r01"] / "quotes.csv"],
        "grid-vs-approx": [artifacts["compare"] / "compare.csv"],
        "two-asset-paths": [artifacts["paths"] / "paths_mm.csv"],
    }[kind]
    return FigureSpec(inputs=[str(p) for p in inputs], kind=kind,
                      output=str(artifacts["tmp"] / out_name))


def test_size_distribution_two_panels(artifacts):
    spec = spec_for(artifacts, "size-distribution", "fig1.png")
    fig = render(spec)
    assert len(fig.axes) == 2
    # one bar group and one probability curve per quoted book
    assert len(fig.axes[0].containers) == 2
    assert len(fig.axes[1].lines) == 2
    assert (artifacts["tmp"] / "fig1.png").stat().st_size > 0
    plt.close(fig)


def test_quote_ladders_one_series_per_book(artifacts):
    fig = render(spec_for(artifacts, "quote-ladders", "fig2.png"))
    assert len(fig.axes[0].lines) == 2  # bid and ask
    plt.close(fig)


def test_quotes_vs_price_overlays_scenarios(artifacts):
    fig = render(spec_for(artifacts, "quotes-vs-price", "fig3.png"))
    # two scenarios (with and without mean reversion) x bid/ask
    assert len(fig.axes[0].lines) == 4
    plt.close(fig)


def test_grid_vs_approx_two_series_per_side(artifacts):
    fig = render(spec_for(artifacts, "grid-vs-approx", "fig4.png"))
    labels = [ln.get_label() for ln in fig.axes[0].lines]
    for side in ("bid", "ask"):
        assert sum(lb.startswith(side) for lb in labels) == 2
    assert len(fig.axes[0].lines) == 4
    plt.close(fig)


def test_two_asset_paths_panels(artifacts):
    fig = render(spec_for(artifacts, "two-asset-paths", "fig5.png"))
    assert len(fig.axes) == 3
    # two price series per simulated path
    assert len(fig.axes[0].lines) == 4
    assert len(fig.axes[1].lines) == 2
    assert len(fig.axes[2].lines) == 4
    plt.close(fig)


def test_render_deterministic(artifacts):
    s1 = spec_for(artifacts, "grid-vs-approx", "det_a.png")
    s2 = spec_for(artifacts, "grid-vs-approx", "det_b.png")
    plt.close(render(s1))
    plt.close(render(s2))
    a = (artifacts["tmp"] / "det_a.png").read_bytes()
    b = (artifacts["tmp"] / "det_b.png").read_bytes()
    assert a == b


def test_cli_renders_and_reports(artifacts, capsys):
    out = str(artifacts["tmp"] / "cli_fig.png")
    rc = plots_main(["quote-ladders",
                     "--input", str(artifacts["quotes_r0"] / "quotes.csv"),
                     "--out", out])
    assert rc == 0
    assert "wrote" in capsys.readouterr().out


def test_empty_csv_rejected(tmp_path, capsys):
    path = tmp_path / "empty.csv"
    path.write_text("# config_sha256=x seed=0\nq,S,z,side,delta_grid,"
                    "delta_riccati,high_deviation\n")
    rc = plots_main(["grid-vs-approx", "--input", str(path),
                     "--out", str(tmp_path / "fig.png")])
    assert rc == 2
    assert "no data rows" in capsys.readouterr().err


def test_missing_columns_rejected(tmp_path, capsys):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n")
    rc = plots_main(["grid-vs-approx", "--input", str(path),
                     "--out", str(tmp_path / "fig.png")])
    assert rc == 2
    assert "missing columns" in capsys.readouterr().err


def test_missing_file_rejected(tmp_path, capsys):
    rc = plots_main(["quote-ladders", "--input", str(tmp_path / "nope.csv"),
                     "--out", str(tmp_path / "fig.png")])
    assert rc == 2
    assert "missing input file" in capsys.readouterr().err


def test_unknown_kind_rejected():
    with pytest.raises(SchemaError):
        FigureSpec(inputs=["x.csv"], kind="pie-chart", output="fig.png")
