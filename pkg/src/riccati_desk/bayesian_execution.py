"""Optimal execution with online Gaussian drift estimation.

Prices and signals follow a drifted Bachelier process whose drift is
unknown; the trader holds a Gaussian prior and updates the conditional
drift estimate from observed prices. Under the observation filtration
the dynamics become a multivariate OU process with a time-dependent
mean-reversion matrix, which plugs into the same quadratic
value-function machinery as the market-making problem with all fill
moments set to zero. The optimal trading speed is a linear feedback in
inventory and prices.
"""

import numpy as np

from .riccati_core import DRECoefficients, solve_dre
from .market_making import (MMConfig, MultiOUMarket, QuoteEngine,
                            aggregate_moments, hedge_speed, solve_def)

__all__ = [
    "DriftPrior", "DriftPosterior", "posterior_mean", "effective_dynamics",
    "build_exec_dre", "build_exec_engine", "trading_speed",
    "ExecPathRecord", "simulate_execution",
]


class DriftPrior:
    """Gaussian prior on the drift: mean b0, covariance Pi0 (PD)."""

    def __init__(self, b0, Pi0):
        self.b0 = np.atleast_1d(np.asarray(b0, dtype=float))
        self.Pi0 = np.atleast_2d(np.asarray(Pi0, dtype=float))
        if np.min(np.linalg.eigvalsh(0.5 * (self.Pi0 + self.Pi0.T))) <= 0:
            raise ValueError("prior covariance must be positive definite")


class DriftPosterior:
    """Conjugate Gaussian filter for the drift of dS = mu dt + V dW.

    Exposes the posterior covariance Pi(t) = (Pi0^-1 + t Sigma^-1)^-1,
    the posterior mean as a function of the observed price, and the
    induced OU representation dS = R(t)(Sbar - S) dt + V dW_hat with
    R(t) = -(Sigma Pi0^-1 + t I)^-1 and Sbar = S0 - Sigma Pi0^-1 b0.
    """

    def __init__(self, prior, V, S0):
        self.prior = prior
        self.V = np.atleast_2d(np.asarray(V, dtype=float))
        self.S0 = np.atleast_1d(np.asarray(S0, dtype=float))
        self.d = len(self.S0)
        self.Sigma = self.V @ self.V.T
        if abs(np.linalg.det(self.Sigma)) < 1e-300:
            raise np.linalg.LinAlgError("Sigma must be invertible")
        self.Sigma_inv = np.linalg.inv(self.Sigma)
        self.Pi0_inv = np.linalg.inv(prior.Pi0)
        self._M = self.Sigma @ self.Pi0_inv  # Sigma Pi0^-1, shared by R and Sbar

    def Pi(self, t):
        if t < 0:
            raise ValueError("time must be non-negative")
        return np.linalg.inv(self.Pi0_inv + t * self.Sigma_inv)

    def R(self, t):
        return -np.linalg.inv(self._M + t * np.eye(self.d))

    @property
    def Sbar(self):
        return self.S0 - self._M @ self.prior.b0


def posterior_mean(post, t, S_t):
    """b_t = Pi(t) (Sigma^-1 (S - S0) + Pi0^-1 b0)."""
    S_t = np.asarray(S_t, dtype=float)
    return post.Pi(t) @ (post.Sigma_inv @ (S_t - post.S0)
                         + post.Pi0_inv @ post.prior.b0)


def effective_dynamics(post):
    """The induced OU representation: (R(t) evaluator, Sbar)."""
    return post.R, post.Sbar


class ExecConfig:
    """Execution problem data: risk aversion, costs, penalty, horizon."""

    def __init__(self, r, rho, eta, Gamma, T):
        self.r = int(r)
        self.rho = float(rho)
        self.eta = np.atleast_2d(np.asarray(eta, dtype=float))
        self.Gamma = np.atleast_2d(np.asarray(Gamma, dtype=float))
        self.T = float(T)
        if np.min(np.linalg.eigvalsh(0.5 * (self.eta + self.eta.T))) <= 0:
            raise ValueError("eta must be positive definite")


def _as_mm_config(post, config):
    """Wrap the execution problem as a moments-free market-making config.

    The market's stored R is the t = 0 value; the time-dependent R(t) is
    threaded through explicitly wherever it matters.
    """
    market = MultiOUMarket(config.r, post.S0, post.Sbar, post.R(0.0), post.V)
    return MMConfig(market, {}, {}, config.rho, config.Gamma, config.T,
                    eta=config.eta, inventory_cap=np.inf)


def build_exec_dre(post, config):
    """Time-dependent DRE for P = [[A, B/2], [B'/2, C]] (inventory first).

    Q(t) = [[rho Sigma_r / 2, J R(t) / 2], [R(t)' J' / 2, 0]],
    Y(t) = [[0, 0], [rho Sigma J', R(t)]], U = [[-eta^-1, 0], [0, 2 rho Sigma]],
    terminal [[-Gamma, 0], [0, 0]].
    """
    r, d = config.r, post.d
    n = r + d
    J = np.eye(r, d)
    Sigma = post.Sigma
    rho = config.rho
    eta_inv = np.linalg.inv(config.eta)

    def Q(t):
        Rt = post.R(t)
        out = np.zeros((n, n))
        out[:r, :r] = 0.5 * rho * Sigma[:r, :r]
        out[:r, r:] = 0.5 * J @ Rt
        out[r:, :r] = out[:r, r:].T
        return out

    def Y(t):
        out = np.zeros((n, n))
        out[r:, :r] = rho * Sigma @ J.T
        out[r:, r:] = post.R(t)
        return out

    U = np.zeros((n, n))
    U[:r, :r] = -eta_inv
    U[r:, r:] = 2.0 * rho * Sigma
    P_T = np.zeros((n, n))
    P_T[:r, :r] = -config.Gamma
    return DRECoefficients(n, Q, Y, U, P_T)


def build_exec_engine(post, config, dt=1e-3, scheme="explicit-rk4"):
    """Solve the execution (A..F) system and wrap it as a QuoteEngine."""
    n = max(2, int(round(config.T / dt)))
    grid = np.linspace(0.0, config.T, n + 1)
    sol = solve_dre(build_exec_dre(post, config), grid, scheme=scheme)
    r = config.r
    A = sol.P[:, :r, :r]
    B = 2.0 * sol.P[:, :r, r:]
    C = sol.P[:, r:, r:]
    mm_cfg = _as_mm_config(post, config)
    moments = aggregate_moments(mm_cfg)
    D, E, F = solve_def(grid, A, B, C, mm_cfg, moments, R=post.R)
    return QuoteEngine(grid, A, B, C, D, E, F, mm_cfg, moments)


def trading_speed(engine, t, q, S):
    """Optimal speed v* = 1/2 eta^-1 (2 A(t) q + B(t) S + D(t))."""
    return hedge_speed(engine, t, q, S)


class ExecPathRecord:
    """Simulated execution paths: prices, drift estimates, inventory, cash.

    ``shortfall`` is terminal wealth minus the mark-to-market of the
    initial holdings at S0 (no execution-cost normalization).
    """

    def __init__(self, t, S, b, q, X, shortfall):
        self.t = t
        self.S = S
        self.b = b
        self.q = q
        self.X = X
        self.shortfall = shortfall


def simulate_execution(true_mu, post, config, dt, n_paths, seed,
                       engine=None, policy=None, q0=None, X0=0.0):
    """Simulate trading against a hidden true drift.

    Prices evolve as dS = true_mu dt + V dW; the strategy observes only
    prices, tracks the posterior drift estimate, and trades at the
    engine's feedback speed (or a supplied ``policy(t, q, S) -> v``).
    """
    true_mu = np.atleast_1d(np.asarray(true_mu, dtype=float))
    if engine is None and policy is None:
        engine = build_exec_engine(post, config, dt=max(dt, 1e-3))
    if policy is None:
        policy = lambda t, q, S: trading_speed(engine, t, q, S)
    r, d = config.r, post.d
    J = np.eye(r, d)
    q0 = np.zeros(r) if q0 is None else np.asarray(q0, dtype=float)
    n_steps = int(round(config.T / dt))
    ts = dt * np.arange(n_steps + 1)
    sq = np.sqrt(dt)

    S = np.empty((n_paths, n_steps + 1, d))
    b = np.empty((n_paths, n_steps + 1, d))
    q = np.empty((n_paths, n_steps + 1, r))
    X = np.empty((n_paths, n_steps + 1))
    rng = np.random.Generator(np.random.Philox(key=seed))
    for pth in range(n_paths):
        s = post.S0.copy()
        qv = q0.copy()
        x = float(X0)
        S[pth, 0], q[pth, 0], X[pth, 0] = s, qv, x
        b[pth, 0] = posterior_mean(post, 0.0, s)
        for i in range(n_steps):
            t = ts[i]
            v = np.asarray(policy(t, qv, s), dtype=float)
            x -= (v @ J @ s) * dt + (v @ config.eta @ v) * dt
            qv = qv + v * dt
            s = s + true_mu * dt + post.V @ (rng.standard_normal(d) * sq)
            S[pth, i + 1], q[pth, i + 1], X[pth, i + 1] = s, qv, x
            b[pth, i + 1] = posterior_mean(post, ts[i + 1], s)
    wealth_T = X[:, -1] + np.einsum("ni,ij,nj->n", q[:, -1], J, S[:, -1])
    wealth_0 = X0 + q0 @ J @ post.S0
    return ExecPathRecord(ts, S, b, q, X, wealth_T - wealth_0)
