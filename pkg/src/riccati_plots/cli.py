"""Render fixed figure layouts from the quoting-desk CSV artifacts.

Five figure kinds, each a fixed template over the CSV contract of the
``riccati-desk`` command line tool:

- ``size-distribution``: RFQ size law and fill probability vs shift
  (``sizes.csv`` + ``intensity_scan.csv``).
- ``quote-ladders``: quoted shifts vs inventory (``quotes.csv``).
- ``quotes-vs-price``: quoted shifts vs the first price coordinate,
  one ``quotes.csv`` per scenario overlaid.
- ``grid-vs-approx``: finite-difference vs Riccati shifts per side
  (``compare.csv``), two series per side.
- ``two-asset-paths``: simulated prices, cointegration factor, and
  inventories (``paths_mm.csv``).

Rendering is deterministic: Agg backend, fixed font and DPI, no
timestamp metadata. Exit codes: 0 success, 2 schema/input error.
"""

import argparse
import sys
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

DPI = 120

matplotlib.rcParams.update({
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "figure.dpi": DPI,
    "savefig.dpi": DPI,
})

KINDS = ("size-distribution", "quote-ladders", "quotes-vs-price",
         "grid-vs-approx", "two-asset-paths")


class SchemaError(ValueError):
    """Input CSV does not match the figure kind's schema."""


@dataclass
class FigureSpec:
    """One figure: input CSVs, layout kind, output image path."""

    inputs: list = field(default_factory=list)
    kind: str = ""
    output: str = "figure.png"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown figure kind {self.kind!r}; "
                              f"expected one of {', '.join(KINDS)}")
        if not self.inputs:
            raise SchemaError("at least one input CSV is required")


def _load(path, columns):
    """Read one artifact CSV, skipping the provenance comment line."""
    try:
        df = pd.read_csv(path, comment="#")
    except FileNotFoundError as exc:
        raise SchemaError(f"missing input file: {path}") from exc
    except pd.errors.EmptyDataError as exc:
        raise SchemaError(f"{path}: empty CSV") from exc
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise SchemaError(f"{path}: missing columns: {', '.join(missing)}")
    if df.empty:
        raise SchemaError(f"{path}: no data rows")
    return df


def _book_label(asset, tier, side):
    return f"asset {int(asset) + 1} {side}"


def _render_size_distribution(spec):
    if len(spec.inputs) < 2:
        raise SchemaError("size-distribution needs sizes.csv and "
                          "intensity_scan.csv")
    sizes = _load(spec.inputs[0], ["asset", "tier", "side", "z", "weight"])
    scan = _load(spec.inputs[1],
                 ["asset", "tier", "side", "shift", "fill_probability"])
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for (asset, tier, side), g in sizes.groupby(["asset", "tier", "side"]):
        ax1.bar(g["z"], g["weight"], width=0.8 * g["z"].diff().median(),
                alpha=0.5, label=_book_label(asset, tier, side))
    ax1.set_xlabel("RFQ size")
    ax1.set_ylabel("probability")
    ax1.set_title("size distribution")
    ax1.legend(fontsize=7)
    for (asset, tier, side), g in scan.groupby(["asset", "tier", "side"]):
        ax2.plot(g["shift"], g["fill_probability"],
                 label=_book_label(asset, tier, side))
    ax2.set_xlabel("shift")
    ax2.set_ylabel("fill probability")
    ax2.set_title("trade probability vs price of liquidity")
    ax2.legend(fontsize=7)
    return fig


def _quote_frame(path):
    df = _load(path, ["t", "q1", "z", "asset", "tier", "side", "shift",
                      "capped"])
    df = df[df["capped"] == 0].copy()
    if df.empty:
        raise SchemaError(f"{path}: all quotes capped; nothing to plot")
    df["shift"] = df["shift"].astype(float)
    return df


def _render_quote_ladders(spec):
    df = _quote_frame(spec.inputs[0])
    fig, ax = plt.subplots(figsize=(6, 4))
    for (asset, side), g in df.groupby(["asset", "side"]):
        qcol = f"q{int(asset) + 1}"
        if qcol not in g.columns:
            qcol = "q1"
        g = g.sort_values(qcol)
        ax.plot(g[qcol], g["shift"], marker=".",
                label=_book_label(asset, 0, side))
    ax.set_xlabel("inventory")
    ax.set_ylabel("shift")
    ax.set_title("quote ladders vs inventory")
    ax.legend(fontsize=7)
    return fig


def _render_quotes_vs_price(spec):
    fig, ax = plt.subplots(figsize=(6, 4))
    for path in spec.inputs:
        df = _quote_frame(path)
        if "S1" not in df.columns:
            raise SchemaError(f"{path}: missing columns: S1")
        for (asset, side), g in df.groupby(["asset", "side"]):
            g = g.sort_values("S1")
            ax.plot(g["S1"], g["shift"], marker=".",
                    label=f"{_book_label(asset, 0, side)} [{path}]")
    ax.set_xlabel("price")
    ax.set_ylabel("shift")
    ax.set_title("quotes vs price level")
    ax.legend(fontsize=6)
    return fig


def _render_grid_vs_approx(spec):
    df = _load(spec.inputs[0], ["q", "S", "z", "side", "delta_grid",
                                "delta_riccati"])
    fig, ax = plt.subplots(figsize=(6, 4))
    for side, g in df.groupby("side"):
        g = g.sort_values("q")
        ax.plot(g["q"], g["delta_grid"], label=f"{side} benchmark")
        ax.plot(g["q"], g["delta_riccati"], linestyle="--",
                label=f"{side} approximation")
    ax.set_xlabel("inventory")
    ax.set_ylabel("shift")
    ax.set_title("benchmark vs quadratic approximation")
    ax.legend(fontsize=7)
    return fig


def _render_two_asset_paths(spec):
    df = _load(spec.inputs[0], ["path", "t", "S1", "S2", "q1", "q2",
                                "coint"])
    fig, (ax1, ax2, ax3) = plt.subplots(3, 1, figsize=(7, 7), sharex=True)
    for k, g in df.groupby("path"):
        ax1.plot(g["t"], g["S1"], label=f"S1 path {int(k)}")
        ax1.plot(g["t"], g["S2"], label=f"S2 path {int(k)}")
        ax2.plot(g["t"], g["coint"], label=f"path {int(k)}")
        ax3.plot(g["t"], g["q1"], label=f"q1 path {int(k)}")
        ax3.plot(g["t"], g["q2"], label=f"q2 path {int(k)}")
    ax1.set_ylabel("price")
    ax1.set_title("two-asset simulation")
    ax2.set_ylabel("S1 - S2")
    ax3.set_ylabel("inventory")
    ax3.set_xlabel("t")
    for ax in (ax1, ax2, ax3):
        ax.legend(fontsize=6, ncol=2)
    return fig


_RENDERERS = {
    "size-distribution": _render_size_distribution,
    "quote-ladders": _render_quote_ladders,
    "quotes-vs-price": _render_quotes_vs_price,
    "grid-vs-approx": _render_grid_vs_approx,
    "two-asset-paths": _render_two_asset_paths,
}


def render(spec):
    """Render one figure and write it to ``spec.output``.

    Returns the matplotlib Figure (series remain inspectable). Raises
    SchemaError when the inputs do not match the kind.
    """
    fig = _RENDERERS[spec.kind](spec)
    fig.savefig(spec.output, dpi=DPI, metadata={"Software": "riccati-plots"})
    return fig


def build_parser():
    ap = argparse.ArgumentParser(
        prog="riccati-plots",
        description="Render one figure from riccati-desk CSV artifacts")
    ap.add_argument("kind", choices=KINDS)
    ap.add_argument("--input", action="append", required=True,
                    help="input CSV (repeat for multi-input kinds, in the "
                         "order the kind expects)")
    ap.add_argument("--out", required=True, help="output PNG path")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        spec = FigureSpec(inputs=args.input, kind=args.kind, output=args.out)
        fig = render(spec)
        plt.close(fig)
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
