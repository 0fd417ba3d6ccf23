import numpy as np
import pytest

from riccati_desk import market_making as mm
from riccati_desk.riccati_core import DRECoefficients


def random_coefficients(rng, n=None, scale=0.5):
    """A random small constant-coefficient DRE instance."""
    if n is None:
        n = int(rng.integers(1, 5))
    q = rng.normal(0.0, scale, (n, n))
    u = rng.normal(0.0, scale, (n, n))
    Q = 0.5 * (q + q.T)
    U = 0.5 * (u + u.T)
    Y = rng.normal(0.0, scale, (n, n))
    pT = rng.normal(0.0, scale, (n, n))
    P_T = 0.5 * (pT + pT.T)
    return DRECoefficients(n, Q, Y, U, P_T)


def table4_market_config(rho=5e-3, T=7.0, eta_scale=1e-4, Gamma=None):
    """Two-asset cointegrated desk with logistic quotes on both assets."""
    R = np.array([[0.5, -0.5], [-0.5, 0.5]])
    market = mm.MultiOUMarket(2, [100.0, 100.0], [100.0, 100.0], R, np.eye(2))
    sizes = mm.discretize_gamma(4.0, 0.04, 25.0, 10)
    intens, szs = {}, {}
    for a in range(2):
        for side in ("bid", "ask"):
            intens[(a, 0, side)] = mm.IntensityModel(
                "logistic", lambda_base=30.0, a=0.7, b=30.0)
            szs[(a, 0, side)] = sizes
    if Gamma is None:
        Gamma = np.zeros((2, 2))
    return mm.MMConfig(market, intens, szs, rho, Gamma, T,
                       eta=eta_scale * np.eye(2))


def single_asset_config(R=0.0, rho=1e-3, T=7.0, Gamma=0.0, eta=None):
    """One-asset desk with the reference logistic intensity and gamma sizes."""
    market = mm.MultiOUMarket(1, [100.0], [100.0], [[R]], [[1.2]])
    sizes = mm.discretize_gamma(4.0, 0.04, 25.0, 10)
    intens = {(0, 0, s): mm.IntensityModel("logistic", lambda_base=30.0,
                                           a=0.7, b=30.0)
              for s in ("bid", "ask")}
    szs = {(0, 0, s): sizes for s in ("bid", "ask")}
    eta = None if eta is None else np.atleast_2d(eta)
    return mm.MMConfig(market, intens, szs, rho, [[Gamma]], T, eta=eta)


def table4_canonical_problem():
    """Control-problem form of the two-asset desk after the cross-term shift.

    State = prices, control = inventories: A = G^-1 (G the fill-flow
    coefficient), B = J = I, C = 0, R = -R_market, Sigma = I, Psi = 0,
    Upsilon = -J', Gamma = 0.
    """
    from riccati_desk.leqg import LEQGProblem

    cfg = table4_market_config()
    moments = mm.aggregate_moments(cfg)
    G = (2.0 * (moments.V("bid", 2, 1) + moments.V("ask", 2, 1))
         + cfg.eta_inv)
    return LEQGProblem(
        d=2, r=2, rho=cfg.rho,
        A=np.linalg.inv(G), B=np.eye(2), C=np.zeros((2, 2)),
        R=-np.asarray(cfg.market.R, dtype=float), V=np.eye(2),
        Psi=np.zeros((2, 2)), Upsilon=-np.eye(2), Gamma=np.zeros((2, 2)))


@pytest.fixture(scope="session")
def table4_config():
    return table4_market_config()


@pytest.fixture(scope="session")
def table3_config():
    return single_asset_config()
