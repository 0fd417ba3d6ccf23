"""Configuration-driven command-line entry point.

One declarative YAML scenario per invocation; commands solve the
Riccati paths, sweep quotes, compare the quadratic approximation
against the finite-difference benchmark, and run simulations, each
writing CSV artifacts with a leading comment line recording the config
hash and seed.

Exit codes: 0 success, 2 configuration error, 3 numerical blow-up,
4 grid divergence.
"""

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import bayesian_execution as be
from . import leqg as lq
from . import market_making as mm
from .riccati_core import BlowUpError, solve_dre

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Scenario document fails schema validation."""


# ---------------------------------------------------------------------------
# schema


def _expect(cfg, path, known):
    """Reject keys not in ``known``, reporting their dotted paths."""
    if not isinstance(cfg, dict):
        raise ConfigError(f"section {path or '<root>'} must be a mapping")
    bad = [f"{path}.{k}" if path else str(k) for k in cfg if k not in known]
    if bad:
        raise ConfigError("unknown config keys: " + ", ".join(sorted(bad)))


_INTENSITY_KEYS = {"asset", "tier", "side", "kind", "lambda_base", "a", "b",
                   "amplitude", "decay", "envelope", "sizes"}
_SIZES_KEYS = {"gamma", "z", "w"}
_GAMMA_KEYS = {"alpha", "beta", "bin_width", "n_bins"}

_SECTIONS = {
    "schema_version": None,
    "market": {"r", "S0", "Sbar", "R", "V"},
    "intensities": None,  # list, validated per entry
    "risk": {"rho", "Gamma", "eta", "T", "cap"},
    "solver": {"scheme", "dt"},
    "grid": {"dt", "dq", "dS", "S_span", "p_range", "p_step"},
    "simulation": {"dt", "n_paths", "seed"},
    "sweep": {"t", "q", "S", "z", "tiers", "sides"},
    "leqg": {"d", "r", "rho", "A", "B", "C", "R", "V", "Psi", "Upsilon",
             "Gamma", "x0", "y0", "z0", "T"},
    "exec": {"b0", "Pi0", "true_mu", "q0"},
    "output": {"directory"},
}


def load_config(path):
    """Parse and schema-validate a scenario document."""
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML: {exc}") from exc
    _expect(cfg, "", set(_SECTIONS))
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(
            f"schema_version must be {SCHEMA_VERSION}, got {cfg.get('schema_version')!r}")
    for name, keys in _SECTIONS.items():
        if keys is None or name not in cfg:
            continue
        _expect(cfg[name], name, keys)
    for i, entry in enumerate(cfg.get("intensities") or []):
        _expect(entry, f"intensities[{i}]", _INTENSITY_KEYS)
        sizes = entry.get("sizes")
        if sizes is None:
            raise ConfigError(f"intensities[{i}].sizes is required")
        _expect(sizes, f"intensities[{i}].sizes", _SIZES_KEYS)
        if "gamma" in sizes:
            _expect(sizes["gamma"], f"intensities[{i}].sizes.gamma", _GAMMA_KEYS)
    return cfg


def _require(cfg, *names):
    for name in names:
        if name not in cfg:
            raise ConfigError(f"config section {name!r} is required for this command")


def _mat(x):
    return np.atleast_2d(np.asarray(x, dtype=float))


def _size_distribution(sizes):
    if "gamma" in sizes:
        g = sizes["gamma"]
        try:
            return mm.discretize_gamma(g["alpha"], g["beta"],
                                       g["bin_width"], g["n_bins"])
        except KeyError as exc:
            raise ConfigError(f"sizes.gamma missing key {exc}") from exc
    try:
        return mm.SizeDistribution(sizes["z"], sizes["w"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad explicit size distribution: {exc}") from exc


def build_mm_config(cfg):
    """MMConfig from the market / intensities / risk sections."""
    _require(cfg, "market", "risk")
    mkt = cfg["market"]
    risk = cfg["risk"]
    try:
        market = mm.MultiOUMarket(mkt["r"], mkt["S0"], mkt["Sbar"],
                                  _mat(mkt["R"]), _mat(mkt["V"]))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad market section: {exc}") from exc
    intens, sizes = {}, {}
    for entry in cfg.get("intensities") or []:
        try:
            key = (int(entry["asset"]), int(entry.get("tier", 0)), entry["side"])
            if key[2] not in ("bid", "ask"):
                raise ConfigError(f"side must be bid or ask, got {key[2]!r}")
            kind = entry["kind"]
            kwargs = {k: entry[k] for k in
                      ("lambda_base", "a", "b", "amplitude", "decay", "envelope")
                      if k in entry}
            intens[key] = mm.IntensityModel(kind, **kwargs)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad intensity entry {entry!r}: {exc}") from exc
        sizes[key] = _size_distribution(entry["sizes"])
    try:
        return mm.MMConfig(market, intens, sizes, risk["rho"], _mat(risk["Gamma"]),
                           risk["T"], eta=None if risk.get("eta") is None
                           else _mat(risk["eta"]),
                           inventory_cap=risk.get("cap", 600.0))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad risk section: {exc}") from exc


def build_leqg_problem(cfg):
    _require(cfg, "leqg")
    s = cfg["leqg"]
    try:
        d, r = int(s["d"]), int(s["r"])
        return lq.LEQGProblem(
            d, r, float(s["rho"]), _mat(s["A"]),
            np.asarray(s.get("B", np.zeros((r, d))), dtype=float).reshape(r, d),
            _mat(s.get("C", np.zeros((d, d)))), _mat(s["R"]), _mat(s["V"]),
            _mat(s.get("Psi", np.zeros((d, d)))),
            np.asarray(s.get("Upsilon", np.zeros((d, r))), dtype=float).reshape(d, r),
            _mat(s.get("Gamma", np.zeros((r, r)))),
            x0=s.get("x0"), y0=s.get("y0"), z0=s.get("z0", 0.0)), float(s["T"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad leqg section: {exc}") from exc


# ---------------------------------------------------------------------------
# output helpers


def config_hash(cfg):
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _writer(cfg, out_dir, name, seed):
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    fh = open(path, "w", newline="")
    fh.write(f"# config_sha256={config_hash(cfg)} seed={seed}\n")
    return fh, csv.writer(fh, lineterminator="\n"), path


def _fmt(x):
    return repr(float(x))


def _out_dir(cfg, args):
    if args.out:
        return Path(args.out)
    return Path((cfg.get("output") or {}).get("directory", "."))


def _seed(cfg, args):
    if args.seed is not None:
        return int(args.seed)
    return int((cfg.get("simulation") or {}).get("seed", 0))


# ---------------------------------------------------------------------------
# commands


def cmd_solve_dre(cfg, args):
    config = build_mm_config(cfg)
    solver = cfg.get("solver") or {}
    dt = float(solver.get("dt", 1e-3))
    scheme = solver.get("scheme", "explicit-rk4")
    moments = mm.aggregate_moments(config)
    grid = np.linspace(0.0, config.T, max(2, int(round(config.T / dt))) + 1)
    sol = solve_dre(mm.build_mm_dre(config, moments), grid, scheme=scheme)
    n = sol.P.shape[1]
    fh, w, path = _writer(cfg, _out_dir(cfg, args), "dre.csv", _seed(cfg, args))
    with fh:
        w.writerow(["t"] + [f"P_{i}_{j}" for i in range(n) for j in range(n)])
        for t, P in zip(sol.grid, sol.P):
            w.writerow([_fmt(t)] + [_fmt(v) for v in P.ravel()])
    print(f"wrote {path}")
    print(f"max_residual={sol.max_residual:.6e}")
    return 0


def _sweep_axes(cfg, config):
    sweep = cfg.get("sweep") or {}
    r = config.market.r
    ts = [float(v) for v in sweep.get("t", [0.0])]
    qs = [np.full(r, float(v)) if np.isscalar(v)
          else np.asarray(v, dtype=float) for v in sweep.get("q", [])]
    Ss = [np.asarray(v, dtype=float) if not np.isscalar(v)
          else np.full(config.market.d, float(v)) for v in sweep.get("S", [])]
    zs = [float(v) for v in sweep.get("z", [])]
    tiers = [int(v) for v in sweep.get("tiers", [0])]
    sides = list(sweep.get("sides", ["bid", "ask"]))
    return ts, qs, Ss, zs, tiers, sides


def cmd_quotes(cfg, args):
    config = build_mm_config(cfg)
    solver = cfg.get("solver") or {}
    engine = mm.build_quote_engine(config, dt=float(solver.get("dt", 1e-3)),
                                   scheme=solver.get("scheme", "explicit-rk4"))
    ts, qs, Ss, zs, tiers, sides = _sweep_axes(cfg, config)
    out_dir = _out_dir(cfg, args)
    seed = _seed(cfg, args)
    r, d = config.market.r, config.market.d

    fh, w, path = _writer(cfg, out_dir, "quotes.csv", seed)
    with fh:
        w.writerow(["t"] + [f"q{i+1}" for i in range(r)]
                   + [f"S{i+1}" for i in range(d)]
                   + ["z", "asset", "tier", "side", "shift", "capped"])
        for t in ts:
            for q in qs:
                for S in Ss:
                    for z in zs:
                        for tier in tiers:
                            for side in sides:
                                for asset in range(r):
                                    if (asset, tier, side) not in config.intensities:
                                        continue
                                    try:
                                        shift = mm.approx_quotes(
                                            engine, t, q, S, z, asset, tier, side)
                                        row_shift, capped = _fmt(shift), 0
                                    except mm.InventoryCapError:
                                        row_shift, capped = "", 1
                                    w.writerow(
                                        [_fmt(t)] + [_fmt(v) for v in q]
                                        + [_fmt(v) for v in S]
                                        + [_fmt(z), asset, tier, side,
                                           row_shift, capped])
    print(f"wrote {path}")

    # side artifacts for the size-distribution figure: the size laws and the
    # fill probability Lambda(delta)/lambda_max over a shift scan
    fh, w, spath = _writer(cfg, out_dir, "sizes.csv", seed)
    with fh:
        w.writerow(["asset", "tier", "side", "z", "weight"])
        for (asset, tier, side), sd in sorted(config.sizes.items()):
            for z, wt in zip(sd.z, sd.w):
                w.writerow([asset, tier, side, _fmt(z), _fmt(wt)])
    fh, w, ipath = _writer(cfg, out_dir, "intensity_scan.csv", seed)
    with fh:
        w.writerow(["asset", "tier", "side", "shift", "fill_probability"])
        scan = np.linspace(-0.2, 0.6, 201)
        for (asset, tier, side), model in sorted(config.intensities.items()):
            lam = model.value(scan)
            ref = model.envelope or lam.max()
            for dlt, p in zip(scan, lam / ref):
                w.writerow([asset, tier, side, _fmt(dlt), _fmt(p)])
    print(f"wrote {spath}")
    print(f"wrote {ipath}")
    return 0


def cmd_compare_approx(cfg, args):
    config = build_mm_config(cfg)
    if config.market.r != 1 or config.market.d != 1:
        raise ConfigError("compare-approx needs a single-asset market")
    gridcfg = cfg.get("grid") or {}
    solver = cfg.get("solver") or {}
    gs = mm.hjb_grid_solve_1d(
        config, dt=float(gridcfg.get("dt", 1e-3)),
        dq=float(gridcfg.get("dq", 25.0)), dS=float(gridcfg.get("dS", 0.05)),
        S_span=gridcfg.get("S_span"),
        p_range=float(gridcfg.get("p_range", 40.0)),
        p_step=float(gridcfg.get("p_step", 1e-3)))
    engine = mm.build_quote_engine(config, dt=float(solver.get("dt", 1e-3)))
    _, _, Ss, zs, _, sides = _sweep_axes(cfg, config)
    if not Ss:
        Ss = [config.market.Sbar.copy()]
    if not zs:
        zs = [100.0]
    rows = []
    for z in zs:
        for side in sides:
            surf = gs.shift_surface(z, side)
            for S in Ss:
                si = int(np.argmin(np.abs(gs.S_vals - S[0])))
                for qi, q in enumerate(gs.q_vals):
                    dg = surf[qi, si]
                    if np.isnan(dg):
                        continue
                    da = mm.approx_quotes(engine, 0.0, [q], S, z, 0, 0, side)
                    rows.append([q, S[0], z, side, dg, da])
    devs = np.array([abs(r[4] - r[5]) for r in rows]) if rows else np.zeros(0)
    grid_vals = np.array([r[4] for r in rows]) if rows else np.zeros(0)
    dyn = float(grid_vals.max() - grid_vals.min()) if rows else 0.0
    thresh = 0.1 * dyn if dyn > 0 else np.inf
    fh, w, path = _writer(cfg, _out_dir(cfg, args), "compare.csv", _seed(cfg, args))
    with fh:
        w.writerow(["q", "S", "z", "side", "delta_grid", "delta_riccati",
                    "high_deviation"])
        for row, dev in zip(rows, devs):
            w.writerow([_fmt(row[0]), _fmt(row[1]), _fmt(row[2]), row[3],
                        _fmt(row[4]), _fmt(row[5]), int(dev > thresh)])
    print(f"wrote {path}")
    if rows:
        print(f"max_deviation={devs.max():.6e} dynamic_range={dyn:.6e}")
    return 0


def _simulate_mm(cfg, args):
    config = build_mm_config(cfg)
    sim = cfg.get("simulation") or {}
    solver = cfg.get("solver") or {}
    dt = float(sim.get("dt", 1e-3))
    n_paths = int(sim.get("n_paths", 1))
    seed = _seed(cfg, args)
    engine = mm.build_quote_engine(config, dt=float(solver.get("dt", 1e-3)))
    policy = mm.engine_policy(engine)
    hedge = None
    if config.eta is not None:
        hedge = lambda t, q, S: mm.hedge_speed(engine, t, q, S)
    records = mm.simulate_mm(config, policy, dt, seed, n_paths=n_paths,
                             hedge_policy=hedge)
    r, d = config.market.r, config.market.d
    fh, w, path = _writer(cfg, _out_dir(cfg, args), "paths_mm.csv", seed)
    with fh:
        header = (["path", "t"] + [f"S{i+1}" for i in range(d)]
                  + [f"q{i+1}" for i in range(r)] + ["X", "pnl"])
        if d >= 2:
            header.append("coint")
        w.writerow(header)
        for k, rec in enumerate(records):
            for i, t in enumerate(rec.t):
                row = ([k, _fmt(t)] + [_fmt(v) for v in rec.S[i]]
                       + [_fmt(v) for v in rec.q[i]]
                       + [_fmt(rec.X[i]), _fmt(rec.pnl[i])])
                if d >= 2:
                    row.append(_fmt(rec.S[i, 0] - rec.S[i, 1]))
                w.writerow(row)
    print(f"wrote {path}")
    if records:
        fills = sum(len(rec.fills) for rec in records)
        print(f"fills_per_day={fills / (n_paths * config.T):.3f}")
        print(f"mean_terminal_pnl={np.mean([rec.pnl[-1] for rec in records]):.6f}")
    return 0


def _simulate_exec(cfg, args):
    _require(cfg, "exec", "market", "risk")
    ex = cfg["exec"]
    mkt = cfg["market"]
    risk = cfg["risk"]
    sim = cfg.get("simulation") or {}
    if risk.get("eta") is None:
        raise ConfigError("risk.eta is required for execution")
    try:
        prior = be.DriftPrior(ex["b0"], _mat(ex["Pi0"]))
        post = be.DriftPosterior(prior, _mat(mkt["V"]), mkt["S0"])
        config = be.ExecConfig(mkt["r"], risk["rho"], _mat(risk["eta"]),
                               _mat(risk["Gamma"]), risk["T"])
        true_mu = np.asarray(ex["true_mu"], dtype=float)
        q0 = None if ex.get("q0") is None else np.asarray(ex["q0"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad exec configuration: {exc}") from exc
    dt = float(sim.get("dt", 1e-3))
    n_paths = int(sim.get("n_paths", 1))
    seed = _seed(cfg, args)
    engine = be.build_exec_engine(post, config)
    rec = be.simulate_execution(true_mu, post, config, dt, n_paths, seed,
                                engine=engine, q0=q0)
    r, d = config.r, post.d
    fh, w, path = _writer(cfg, _out_dir(cfg, args), "paths_exec.csv", seed)
    with fh:
        w.writerow(["path", "t"] + [f"S{i+1}" for i in range(d)]
                   + [f"b{i+1}" for i in range(d)]
                   + [f"q{i+1}" for i in range(r)] + ["X"])
        for k in range(n_paths):
            for i, t in enumerate(rec.t):
                w.writerow([k, _fmt(t)] + [_fmt(v) for v in rec.S[k, i]]
                           + [_fmt(v) for v in rec.b[k, i]]
                           + [_fmt(v) for v in rec.q[k, i]]
                           + [_fmt(rec.X[k, i])])
    print(f"wrote {path}")
    if n_paths:
        print(f"mean_shortfall={rec.shortfall.mean():.6f}")
    return 0


def _simulate_leqg(cfg, args):
    problem, T = build_leqg_problem(cfg)
    sim = cfg.get("simulation") or {}
    solver = cfg.get("solver") or {}
    dt = float(sim.get("dt", 1e-3))
    n_paths = int(sim.get("n_paths", 1))
    seed = _seed(cfg, args)
    from .riccati_core import assemble_from_blocks

    grid = np.linspace(0.0, T, max(2, int(round(T / float(solver.get("dt", 1e-3))))) + 1)
    sol = solve_dre(assemble_from_blocks(lq.to_block_spec(problem)), grid,
                    scheme=solver.get("scheme", "explicit-rk4"))
    vc = lq.value_coefficients(sol, problem.Sigma)
    policy = lq.make_optimal_policy(vc, problem)
    fh, w, path = _writer(cfg, _out_dir(cfg, args), "paths_leqg.csv", seed)
    if n_paths:
        ens = lq.simulate(problem, policy, T, dt, n_paths, seed)
    with fh:
        w.writerow(["path", "t"] + [f"x{i+1}" for i in range(problem.d)]
                   + [f"y{i+1}" for i in range(problem.r)] + ["z"])
        if n_paths:
            for k, (ts, traj) in enumerate(ens.stored):
                for i, t in enumerate(ts):
                    w.writerow([k, _fmt(t)] + [_fmt(v) for v in traj[i]])
    print(f"wrote {path}")
    if n_paths:
        mean, se = lq.mc_performance(ens, problem)
        analytic = lq.value_function(vc, problem, 0.0, problem.x0,
                                     problem.y0, problem.z0)
        print(f"mc_utility={mean:.10f} stderr={se:.3e} analytic={analytic:.10f}")
    return 0


def cmd_simulate(cfg, args):
    which = args.which
    if which == "mm":
        return _simulate_mm(cfg, args)
    if which == "exec":
        return _simulate_exec(cfg, args)
    if which == "leqg":
        return _simulate_leqg(cfg, args)
    raise ConfigError(f"unknown simulation target {which!r}")


# ---------------------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="riccati-desk",
                                 description="Riccati-based quoting desk tools")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("solve-dre", "quotes", "compare-approx"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--seed", type=int, default=None)
    p = sub.add_parser("simulate")
    p.add_argument("which", choices=["mm", "exec", "leqg"])
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "solve-dre":
            return cmd_solve_dre(cfg, args)
        if args.command == "quotes":
            return cmd_quotes(cfg, args)
        if args.command == "compare-approx":
            return cmd_compare_approx(cfg, args)
        return cmd_simulate(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except BlowUpError as exc:
        print(f"blow-up: {exc}", file=sys.stderr)
        return 3
    except mm.GridDivergenceError as exc:
        print(f"grid divergence: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
