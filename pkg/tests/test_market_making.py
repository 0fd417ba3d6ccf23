import numpy as np
import pytest
from scipy.integrate import solve_ivp

from riccati_desk import market_making as mm

from conftest import single_asset_config, table4_market_config

TABLE_WEIGHTS = np.array([6.2, 18.1, 22.5, 19.7, 14.1, 8.9, 5.2, 2.9,
                          1.6, 0.8]) / 100.0


def logistic_model():
    return mm.IntensityModel("logistic", lambda_base=30.0, a=0.7, b=30.0)


def exponential_model(amplitude=20.0, decay=25.0):
    return mm.IntensityModel("exponential", amplitude=amplitude, decay=decay,
                             envelope=50.0)


# ---------------------------------------------------------------------------
# size discretization


def test_reference_weights_reproduced():
    sd = mm.discretize_gamma(4.0, 0.04, 25.0, 10)
    assert np.array_equal(sd.z, 25.0 * np.arange(1, 11))
    assert np.max(np.abs(sd.w - TABLE_WEIGHTS)) <= 0.005


def test_discretized_mean_close_to_gamma_mean():
    sd = mm.discretize_gamma(4.0, 0.04, 25.0, 10)
    assert abs(sd.mean() - 100.0) <= 5.0


def test_single_bin_carries_all_mass():
    sd = mm.discretize_gamma(4.0, 0.04, 200.0, 1)
    assert sd.w.shape == (1,) and np.isclose(sd.w[0], 1.0)


def test_degenerate_discretization_rejected():
    with pytest.raises(ValueError):
        mm.discretize_gamma(4.0, 0.04, 1e9, 1)


# ---------------------------------------------------------------------------
# intensity models and Hamiltonians


def test_intensity_properties_hold():
    assert logistic_model().validate()
    assert exponential_model().validate()


def test_hamiltonian_exponential_matches_closed_form():
    model = exponential_model()
    for rz in (0.01, 0.1, 1.0):
        z = 100.0
        rho = rz / z
        for p in (-0.1, 0.0, 0.1):
            H, _ = mm.hamiltonian(model, rho, z, p)
            Hc = mm.hamiltonian_exp_closed_form(20.0, 25.0, rho, z, p)
            assert abs(H - Hc) <= 1e-8 * abs(Hc)


def test_closed_form_small_risk_limit():
    A, k, p = 20.0, 25.0, 0.05
    H = mm.hamiltonian_exp_closed_form(A, k, 1e-10, 100.0, p)  # rho z = 1e-8
    limit = (A / k) * np.exp(-1.0) * np.exp(-k * p)
    assert abs(H - limit) <= 1e-6 * limit


def test_closed_form_unit_amplitude_substitution():
    k, rho, z = 2.0, 1e-2, 50.0
    rz = rho * z
    H = mm.hamiltonian_exp_closed_form(k, k, rho, z, 0.0)
    assert np.isclose(H, (1.0 + rz / k) ** (-(1.0 + k / rz)))


def test_hamiltonian_logistic_signs():
    H, Hp = mm.hamiltonian(logistic_model(), 1e-3, 100.0, 0.0)
    assert H > 0 and Hp < 0


def test_hamiltonian_exponential_shift_property():
    model = exponential_model()
    rho, z, p, c = 1e-3, 100.0, -0.2, 0.15
    H0, _ = mm.hamiltonian(model, rho, z, p)
    H1, _ = mm.hamiltonian(model, rho, z, p + c)
    assert abs(H1 - np.exp(-model.decay * c) * H0) <= 1e-8 * abs(H0)


@pytest.mark.parametrize("model", [logistic_model(), exponential_model()])
def test_envelope_identity(model):
    rho = 1e-3
    for z in (25.0, 100.0, 250.0):
        for p in (-0.3, 0.0, 0.4):
            H, Hp, dstar = mm.hamiltonian(model, rho, z, p, return_argmax=True)
            lam = model.value(dstar)
            assert abs(rho * z * H - Hp - lam) <= 1e-8 * max(1.0, lam)


def test_quote_shift_matches_direct_argmax():
    model = logistic_model()
    rho, z = 1e-3, 100.0
    for p in (-0.2, 0.0, 0.3):
        dstar = mm.quote_shift(model, rho, z, p)
        grid = np.linspace(p - 3.0, p + 3.0, 1200001)
        vals = model.value(grid) / (rho * z) * (1 - np.exp(-rho * z * (grid - p)))
        assert abs(grid[np.argmax(vals)] - dstar) <= 1e-5


def test_quote_shift_monotone_in_p():
    model = logistic_model()
    ps = np.linspace(-0.5, 0.5, 101)
    shifts = [mm.quote_shift(model, 1e-3, 100.0, p) for p in ps]
    assert np.all(np.diff(shifts) > 0)


def test_quote_shift_exponential_additive():
    model = exponential_model()
    rho, z = 1e-3, 100.0
    extra = np.log1p(rho * z / model.decay) / (rho * z)
    for p in (-0.4, 0.0, 0.2):
        assert np.isclose(mm.quote_shift(model, rho, z, p) - p, extra,
                          atol=1e-9)


def test_taylor_alphas_exponential_pattern():
    model = mm.IntensityModel("exponential", amplitude=1.0, decay=1.0,
                              envelope=10.0)
    a0, a1, a2 = mm.taylor_alphas(model, 1e-3, 100.0)
    assert a0 > 0
    assert np.isclose(a1, -a0, rtol=1e-6)
    assert np.isclose(a2, a0, rtol=1e-5)


def test_taylor_alphas_logistic_signs():
    model = logistic_model()
    for z in 25.0 * np.arange(1, 11):
        a0, a1, a2 = mm.taylor_alphas(model, 1e-3, z)
        assert a0 > 0 and a1 < 0 and a2 > 0


def test_taylor_quadratic_accuracy():
    model = logistic_model()
    rho, z = 1e-3, 100.0
    a0, a1, a2 = mm.taylor_alphas(model, rho, z)
    for p in np.linspace(-0.01, 0.01, 9):
        H, _ = mm.hamiltonian(model, rho, z, p)
        approx = a0 + a1 * p + 0.5 * a2 * p * p
        assert abs(approx - H) <= 0.01 * abs(H)


# ---------------------------------------------------------------------------
# moments


def test_moments_zero_without_flow():
    cfg = single_asset_config()
    empty = mm.MMConfig(cfg.market, {}, {}, cfg.rho, cfg.Gamma, cfg.T)
    moments = mm.aggregate_moments(empty)
    for side in ("bid", "ask"):
        for (j, m) in mm.Moments._JM:
            assert np.all(moments.v(side, j, m) == 0)


def test_moments_one_point_measure():
    cfg = single_asset_config()
    model = logistic_model()
    one = mm.MMConfig(cfg.market,
                      {(0, 0, "bid"): model},
                      {(0, 0, "bid"): mm.SizeDistribution([100.0], [1.0])},
                      cfg.rho, cfg.Gamma, cfg.T)
    moments = mm.aggregate_moments(one)
    alphas = mm.taylor_alphas(model, cfg.rho, 100.0)
    for (j, m) in mm.Moments._JM:
        assert np.isclose(moments.v("bid", j, m)[0], 100.0 ** m * alphas[j])
        assert np.all(moments.v("ask", j, m) == 0)


def test_moments_flow_curvature_positive(table3_config):
    moments = mm.aggregate_moments(table3_config)
    assert np.all(np.diag(moments.V("bid", 2, 1)) > 0)
    assert np.all(np.diag(moments.V("ask", 2, 1)) > 0)


# ---------------------------------------------------------------------------
# value-coefficient system


def test_single_asset_dre_blocks(table3_config):
    cfg = table3_config
    moments = mm.aggregate_moments(cfg)
    co = mm.build_mm_dre(cfg, moments)
    rho, s2 = cfg.rho, float(cfg.market.Sigma[0, 0])
    v21 = float((moments.V("bid", 2, 1) + moments.V("ask", 2, 1))[0, 0])
    t = 0.0
    assert np.allclose(co.Q(t), 0.5 * np.array([[rho * s2, 0.0], [0.0, 0.0]]))
    assert np.allclose(co.Y(t), np.array([[0.0, 0.0], [rho * s2, 0.0]]))
    assert np.allclose(co.U(t), np.diag([-2.0 * v21, 2.0 * rho * s2]))
    assert np.array_equal(co.P_T, np.zeros((2, 2)))


def direct_abc_endpoint(cfg, moments, T):
    """Independent oracle: adaptive integration of the value-coefficient
    subsystem in its natural (A, B, C) coordinates."""
    mk = cfg.market
    r, d = mk.r, mk.d
    J, R, Sigma, rho = mk.J, mk.R, mk.Sigma, cfg.rho
    G = (2.0 * (moments.V("bid", 2, 1) + moments.V("ask", 2, 1))
         + cfg.eta_inv)
    na, nb = r * r, r * d

    def rhs(t, y):
        A = y[:na].reshape(r, r)
        B = y[na:na + nb].reshape(r, d)
        C = y[na + nb:].reshape(d, d)
        BJ = B + J
        dA = 0.5 * rho * BJ @ Sigma @ BJ.T - A @ G @ A
        dB = BJ @ R + 2.0 * rho * BJ @ Sigma @ C - A @ G @ B
        dC = R.T @ C + C @ R + 2.0 * rho * C @ Sigma @ C - 0.25 * B.T @ G @ B
        return np.concatenate([dA.ravel(), dB.ravel(), dC.ravel()])

    yT = np.concatenate([(-cfg.Gamma).ravel(), np.zeros(nb), np.zeros(d * d)])
    out = solve_ivp(rhs, (T, 0.0), yT, rtol=1e-11, atol=1e-13)
    y0 = out.y[:, -1]
    return (y0[:na].reshape(r, r), y0[na:na + nb].reshape(r, d),
            y0[na + nb:].reshape(d, d))


def test_dre_blocks_match_direct_integration(table4_config):
    cfg = table4_config
    moments = mm.aggregate_moments(cfg)
    grid = np.linspace(0.0, cfg.T, 7001)
    sol, A, B, C = mm.solve_abc(cfg, moments, grid)
    A0, B0, C0 = direct_abc_endpoint(cfg, moments, cfg.T)
    scale = max(1.0, np.max(np.abs(A0)))
    assert np.max(np.abs(A[0] - A0)) <= 1e-8 * scale
    assert np.max(np.abs(B[0] - B0)) <= 1e-8 * scale
    assert np.max(np.abs(C[0] - C0)) <= 1e-8 * scale
    assert np.allclose(A[-1], -cfg.Gamma)
    assert np.all(B[-1] == 0) and np.all(C[-1] == 0)


def test_linear_terms_vanish_without_flow_or_reversion():
    cfg = single_asset_config(R=0.0)
    empty = mm.MMConfig(cfg.market, {}, {}, cfg.rho, cfg.Gamma, cfg.T,
                        eta=np.array([[1e-3]]))
    moments = mm.aggregate_moments(empty)
    grid = np.linspace(0.0, empty.T, 1401)
    _, A, B, C = mm.solve_abc(empty, moments, grid)
    D, E, F = mm.solve_def(grid, A, B, C, empty, moments)
    assert np.max(np.abs(D)) == 0
    assert np.max(np.abs(E)) == 0
    assert np.max(np.abs(F)) == 0


def test_symmetric_desk_has_no_inventory_drift(table3_config):
    cfg = table3_config
    moments = mm.aggregate_moments(cfg)
    grid = np.linspace(0.0, cfg.T, 1401)
    _, A, B, C = mm.solve_abc(cfg, moments, grid)
    D, E, F = mm.solve_def(grid, A, B, C, cfg, moments)
    assert np.max(np.abs(D)) <= 1e-12
    assert np.max(np.abs(E)) <= 1e-12
    assert np.max(np.abs(B)) <= 1e-12 and np.max(np.abs(C)) <= 1e-12
    assert F[0] != 0.0 and F[-1] == 0.0


def _coeff_derivative(arrs, i, h):
    """Fourth-order interior stencil on stored coefficient paths."""
    return tuple((-a[i + 2] + 8 * a[i + 1] - 8 * a[i - 1] + a[i - 2])
                 / (12 * h) for a in arrs)


def test_value_surface_solves_approximate_equation(table4_config):
    # plug the quadratic surface into the approximate flow equation with
    # analytic gradients; the time derivative comes from the coefficient
    # paths, so the check is exact up to time-stencil truncation
    cfg = table4_config
    eng = mm.build_quote_engine(cfg, dt=1e-3)
    mk = cfg.market
    J, R, Sigma, Sbar = mk.J, mk.R, mk.Sigma, mk.Sbar
    h = eng.grid[1] - eng.grid[0]
    rng = np.random.default_rng(2)
    for i in (1000, 3500, 6000):
        t = eng.grid[i]
        q = rng.uniform(-200, 200, 2)
        S = rng.uniform(98, 102, 2)
        A, B, C, D, E, F = (eng.A[i], eng.B[i], eng.C[i],
                            eng.D[i], eng.E[i], eng.F[i])
        dA, dB, dC, dD, dE, dF = _coeff_derivative(
            (eng.A, eng.B, eng.C, eng.D, eng.E, eng.F), i, h)
        theta_dot = (q @ dA @ q + q @ dB @ S + S @ dC @ S
                     + dD @ q + dE @ S + dF)
        grad_S = B.T @ q + 2.0 * C @ S + E
        grad_q = 2.0 * A @ q + B @ S + D
        g = J.T @ q + grad_S
        res = (theta_dot + (Sbar - S) @ R.T @ g + np.trace(Sigma @ C)
               - 0.5 * cfg.rho * g @ Sigma @ g
               + 0.25 * grad_q @ cfg.eta_inv @ grad_q)
        for (asset, tier, side), model in cfg.intensities.items():
            szd = cfg.sizes[(asset, tier, side)]
            for z, w in zip(szd.z, szd.w):
                a0, a1, a2 = mm.taylor_alphas(model, cfg.rho, z)
                p = eng.shift_argument(t, q, S, z, asset, side)
                res += w * z * (a0 + a1 * p + 0.5 * a2 * p * p)
        scale = max(1.0, abs(eng.theta(t, q, S)))
        assert abs(res) <= 1e-7 * scale


def test_shift_argument_matches_theta_difference(table4_config):
    eng = mm.build_quote_engine(table4_config, dt=1e-2)
    q = np.array([120.0, -40.0])
    S = np.array([100.4, 99.8])
    t, z = 2.3, 75.0
    for asset in (0, 1):
        for side, sgn in (("bid", 1.0), ("ask", -1.0)):
            ei = np.eye(2)[asset]
            direct = (eng.theta(t, q, S) - eng.theta(t, q + sgn * z * ei, S)) / z
            assert np.isclose(eng.shift_argument(t, q, S, z, asset, side),
                              direct, atol=1e-8)


# ---------------------------------------------------------------------------
# quotes and hedging


def test_symmetric_quotes_at_flat_state(table3_config):
    eng = mm.build_quote_engine(table3_config, dt=1e-2)
    bid = mm.approx_quotes(eng, 1.0, [0.0], [100.0], 100.0, 0, 0, "bid")
    ask = mm.approx_quotes(eng, 1.0, [0.0], [100.0], 100.0, 0, 0, "ask")
    assert np.isclose(bid, ask, atol=1e-10)


def test_quote_cap_refused(table3_config):
    eng = mm.build_quote_engine(table3_config, dt=1e-2)
    with pytest.raises(mm.InventoryCapError):
        mm.approx_quotes(eng, 1.0, [550.0], [100.0], 100.0, 0, 0, "bid")


def test_exponential_engine_matches_closed_form():
    cfg = single_asset_config()
    model = exponential_model()
    cfg = mm.MMConfig(cfg.market,
                      {(0, 0, s): model for s in ("bid", "ask")},
                      {(0, 0, s): mm.discretize_gamma(4.0, 0.04, 25.0, 10)
                       for s in ("bid", "ask")},
                      cfg.rho, cfg.Gamma, cfg.T)
    eng = mm.build_quote_engine(cfg, dt=1e-2)
    t, q, S, z = 1.5, np.array([75.0]), np.array([100.3]), 100.0
    rz = cfg.rho * z
    for side, sgn in (("bid", 1.0), ("ask", -1.0)):
        got = mm.approx_quotes(eng, t, q, S, z, 0, 0, side)
        a, b, _, d, _, _ = eng.at(t)
        core = 2.0 * q @ a[:, 0] + (b @ S + d)[0]
        p = -sgn * core - z * a[0, 0]
        expect = p + np.log1p(rz / model.decay) / rz
        assert abs(got - expect) <= 1e-10


def test_hedge_speed_matches_gradient(table4_config):
    eng = mm.build_quote_engine(table4_config, dt=1e-2)
    t = 2.0
    q = np.array([80.0, -120.0])
    S = np.array([100.5, 99.5])
    v = mm.hedge_speed(eng, t, q, S)
    h = 1e-4
    grad = np.array([(eng.theta(t, q + h * e, S) - eng.theta(t, q - h * e, S))
                     / (2 * h) for e in np.eye(2)])
    expect = 0.5 * np.linalg.inv(eng.config.eta) @ grad
    assert np.max(np.abs(v - expect)) <= 1e-6 * max(1.0, np.max(np.abs(v)))
    # at the origin only the linear coefficient survives
    assert np.allclose(mm.hedge_speed(eng, t, np.zeros(2), np.zeros(2)),
                       0.5 * np.linalg.inv(eng.config.eta) @ eng.at(t)[3])


def test_hedge_speed_scales_with_cost():
    cfg1 = table4_market_config(eta_scale=1e-4)
    cfg2 = table4_market_config(eta_scale=2e-4)
    e1 = mm.build_quote_engine(cfg1, dt=1e-2)
    # same coefficient paths, doubled eta
    e2 = mm.QuoteEngine(e1.grid, e1.A, e1.B, e1.C, e1.D, e1.E, e1.F,
                        cfg2, e1.moments)
    q = np.array([50.0, 10.0])
    S = np.array([100.0, 100.0])
    assert np.allclose(mm.hedge_speed(e2, 1.0, q, S),
                       0.5 * mm.hedge_speed(e1, 1.0, q, S))


def test_hedge_requires_eta(table3_config):
    eng = mm.build_quote_engine(table3_config, dt=1e-1)
    with pytest.raises(ValueError):
        mm.hedge_speed(eng, 1.0, [0.0], [100.0])


# ---------------------------------------------------------------------------
# finite-difference benchmark (small instances; the production-size run
# is covered by the acceptance suite)


def test_grid_inert_desk_closed_form():
    # no quotes, no penalty, martingale price: the surface reduces to the
    # certainty equivalent of frozen inventory, -rho sigma^2 q^2 T / 2
    cfg = single_asset_config(R=0.0, T=1.0)
    cfg = mm.MMConfig(cfg.market, {}, {}, cfg.rho, cfg.Gamma, cfg.T)
    sol = mm.hjb_grid_solve_1d(cfg, dt=1e-2, dq=100.0, dS=0.2, S_span=4.0)
    sigma2 = float(cfg.market.Sigma[0, 0])
    expect = -0.5 * cfg.rho * sigma2 * sol.q_vals ** 2 * cfg.T
    assert np.max(np.abs(sol.theta0 - expect[:, None])) <= 1e-8
    assert np.max(np.abs(sol.theta0[np.argmin(np.abs(sol.q_vals))])) <= 1e-12


def test_grid_price_independent_without_reversion():
    cfg = single_asset_config(R=0.0, T=1.0)
    sol = mm.hjb_grid_solve_1d(cfg, dt=2e-3, dq=25.0, dS=0.1, S_span=4.0)
    spread = np.max(sol.theta0, axis=1) - np.min(sol.theta0, axis=1)
    assert np.max(spread) <= 1e-6 * max(1.0, np.max(np.abs(sol.theta0)))


def test_grid_self_convergence():
    cfg = single_asset_config(R=0.1, T=1.0)
    a = mm.hjb_grid_solve_1d(cfg, dt=4e-3, dq=25.0, dS=0.2, S_span=4.0)
    b = mm.hjb_grid_solve_1d(cfg, dt=2e-3, dq=25.0, dS=0.1, S_span=4.0)
    qi_a = np.argmin(np.abs(a.q_vals))
    qi_b = np.argmin(np.abs(b.q_vals))
    si_a = np.argmin(np.abs(a.S_vals - 100.0))
    si_b = np.argmin(np.abs(b.S_vals - 100.0))
    va, vb = a.theta0[qi_a, si_a], b.theta0[qi_b, si_b]
    assert abs(va - vb) <= 0.01 * max(1.0, abs(vb))


# ---------------------------------------------------------------------------
# event simulation


def test_simulation_inert_without_quotes():
    cfg = single_asset_config(R=0.1, T=1.0)
    quiet = mm.MMConfig(cfg.market, {}, {}, cfg.rho, cfg.Gamma, cfg.T)
    rec, = mm.simulate_mm(quiet, lambda *a: None, 1e-2, seed=1)
    assert np.all(rec.q == 0) and np.all(rec.X == 0)
    assert rec.fills == []
    assert np.std(rec.S) > 0  # prices still move


def test_simulation_deterministic(table3_config):
    eng = mm.build_quote_engine(table3_config, dt=1e-2)
    pol = mm.engine_policy(eng)
    r1, = mm.simulate_mm(table3_config, pol, 1e-3, seed=5)
    r2, = mm.simulate_mm(table3_config, pol, 1e-3, seed=5)
    assert np.array_equal(r1.S, r2.S)
    assert np.array_equal(r1.q, r2.q)
    assert np.array_equal(r1.X, r2.X)
    assert r1.fills == r2.fills


def test_simulation_respects_inventory_cap(table3_config):
    eng = mm.build_quote_engine(table3_config, dt=1e-2)
    pol = mm.engine_policy(eng)
    records = mm.simulate_mm(table3_config, pol, 1e-3, seed=9, n_paths=2)
    for rec in records:
        assert np.max(np.abs(rec.q)) <= table3_config.inventory_cap
