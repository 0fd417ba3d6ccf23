"""Multi-asset RFQ market making with signals and hedging.

Prices and signals follow a multivariate OU process; clients request
quotes with Gamma-ish size distributions and fill with intensity
Lambda(shift). The exact dynamic-programming equation for the certainty
part theta(t, q, S) of the exponential-utility value function is
intractable beyond one asset, so the per-size Hamiltonians are Taylor
expanded to second order, which reduces theta to a quadratic ansatz
whose coefficients (A, B, C, D, E, F) solve a matrix Riccati equation
plus linear ODEs. This module provides the intensity/size models, the
Hamiltonian machinery, the Riccati assembly, quote and hedge
evaluation, a single-asset finite-difference benchmark of the exact
equation, and an event-level simulator.
"""

import logging
import warnings

import numpy as np
from scipy.linalg import expm
from scipy.stats import gamma as gamma_dist

from .riccati_core import DRECoefficients, solve_dre

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap(args[0]) if args and callable(args[0]) else wrap

logger = logging.getLogger(__name__)

__all__ = [
    "MultiOUMarket", "IntensityModel", "SizeDistribution", "MMConfig",
    "Moments", "QuoteEngine", "GridSolution",
    "InventoryCapError", "QuoteRangeError", "GridDivergenceError",
    "discretize_gamma", "hamiltonian", "hamiltonian_exp_closed_form",
    "quote_shift", "taylor_alphas", "aggregate_moments", "build_mm_dre",
    "solve_abc", "solve_def", "build_quote_engine", "approx_quotes",
    "hedge_speed", "hjb_grid_solve_1d", "simulate_mm",
]


class InventoryCapError(ValueError):
    """Requested trade would push inventory beyond the configured cap."""


class QuoteRangeError(ValueError):
    """Target fill rate is outside the range of the intensity function."""


class GridDivergenceError(RuntimeError):
    """Finite-difference solve diverged; carries the offending steps."""

    def __init__(self, step, dt, dq, dS):
        super().__init__(
            f"grid solve diverged at backward step {step} (dt={dt}, dq={dq}, dS={dS})")
        self.step, self.dt, self.dq, self.dS = step, dt, dq, dS


class MultiOUMarket:
    """Joint price/signal dynamics dS = R (Sbar - S) dt + V dW.

    The first ``r`` coordinates are tradable assets; the projection J
    (r x d, J_ij = 1 iff i = j) extracts their prices.
    """

    def __init__(self, r, S0, Sbar, R, V):
        self.S0 = np.atleast_1d(np.asarray(S0, dtype=float))
        self.d = len(self.S0)
        self.r = int(r)
        if not 0 < self.r <= self.d:
            raise ValueError("need 0 < r <= d")
        self.Sbar = np.atleast_1d(np.asarray(Sbar, dtype=float))
        self.R = np.atleast_2d(np.asarray(R, dtype=float))
        self.V = np.atleast_2d(np.asarray(V, dtype=float))
        if self.V.shape[0] != self.d or self.R.shape != (self.d, self.d):
            raise ValueError("R must be d x d and V d x j")
        self.J = np.eye(self.r, self.d)

    @property
    def Sigma(self):
        return self.V @ self.V.T

    @property
    def Sigma_r(self):
        return self.Sigma[: self.r, : self.r]


class IntensityModel:
    """Fill intensity Lambda(shift), either logistic or exponential.

    logistic: Lambda(delta) = lambda_base / (1 + exp(a + b delta))
    exponential: Lambda(delta) = amplitude * exp(-decay * delta)

    ``envelope`` is a finite bound on Lambda used by the thinning
    simulator; it is automatic for the logistic kind and must be given
    for the exponential kind (which is unbounded as delta -> -inf).
    """

    def __init__(self, kind, lambda_base=None, a=None, b=None,
                 amplitude=None, decay=None, envelope=None):
        self.kind = kind
        if kind == "logistic":
            self.lambda_base = float(lambda_base)
            self.a = float(a)
            self.b = float(b)
            self.envelope = self.lambda_base if envelope is None else float(envelope)
        elif kind == "exponential":
            self.amplitude = float(amplitude)
            self.decay = float(decay)
            self.envelope = None if envelope is None else float(envelope)
        else:
            raise ValueError(f"unknown intensity kind {kind!r}")

    def value(self, delta):
        delta = np.asarray(delta, dtype=float)
        if self.kind == "logistic":
            # exp overflow at deep out-of-the-money shifts -> intensity 0
            with np.errstate(over="ignore"):
                return self.lambda_base / (1.0 + np.exp(self.a + self.b * delta))
        return self.amplitude * np.exp(-self.decay * delta)

    def deriv(self, delta):
        delta = np.asarray(delta, dtype=float)
        if self.kind == "logistic":
            with np.errstate(over="ignore"):
                e = np.exp(self.a + self.b * delta)
                out = -self.lambda_base * self.b * e / (1.0 + e) ** 2
            return np.where(np.isfinite(e), out, 0.0)
        return -self.decay * self.value(delta)

    def deriv2(self, delta):
        delta = np.asarray(delta, dtype=float)
        if self.kind == "logistic":
            with np.errstate(over="ignore"):
                e = np.exp(self.a + self.b * delta)
                out = self.lambda_base * self.b ** 2 * e * (e - 1.0) / (1.0 + e) ** 3
            return np.where(np.isfinite(e), out, 0.0)
        return self.decay ** 2 * self.value(delta)

    def inverse(self, lam):
        """delta such that Lambda(delta) = lam."""
        lam = np.asarray(lam, dtype=float)
        if self.kind == "logistic":
            if np.any(lam <= 0) or np.any(lam >= self.lambda_base):
                raise QuoteRangeError("target rate outside (0, lambda_base)")
            return (np.log(self.lambda_base / lam - 1.0) - self.a) / self.b
        if np.any(lam <= 0):
            raise QuoteRangeError("target rate must be positive")
        return -np.log(lam / self.amplitude) / self.decay

    def validate(self, lo=-1.0, hi=1.0, step=1e-3):
        """Numerically check the qualitative intensity properties on a grid:
        Lambda decreasing, vanishing at +inf (proxied by Lambda(hi) small
        relative to Lambda(lo)), and Lambda Lambda'' / Lambda'^2 < 2."""
        g = np.arange(lo, hi + step / 2, step)
        lam, d1, d2 = self.value(g), self.deriv(g), self.deriv2(g)
        ok_dec = bool(np.all(d1 < 0))
        ratio = lam * d2 / d1 ** 2
        ok_curv = bool(np.max(ratio) < 2.0)
        ok_tail = bool(self.value(50.0) < 1e-6 * max(self.value(lo), 1e-300))
        return ok_dec and ok_curv and ok_tail


class SizeDistribution:
    """Discrete distribution of requested sizes: points (z, weight)."""

    def __init__(self, z, w):
        self.z = np.atleast_1d(np.asarray(z, dtype=float))
        self.w = np.atleast_1d(np.asarray(w, dtype=float))
        if np.any(self.w <= 0) or abs(self.w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be positive and sum to 1")
        if np.any(self.z <= 0):
            raise ValueError("sizes must be positive")

    def mean(self):
        return float(self.z @ self.w)


def discretize_gamma(alpha, beta, bin_width, n_bins):
    """Bin a Gamma(alpha, rate beta) size distribution.

    Bin centers are m * bin_width for m = 1..n_bins; each mass is the
    Gamma probability of [z - w/2, z + w/2), renormalized over the
    covered bins.
    """
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    centers = bin_width * np.arange(1, n_bins + 1, dtype=float)
    edges_lo = centers - bin_width / 2
    edges_hi = centers + bin_width / 2
    dist = gamma_dist(alpha, scale=1.0 / beta)
    mass = dist.cdf(edges_hi) - dist.cdf(edges_lo)
    total = mass.sum()
    if total <= 0:
        raise ValueError("discretization captured zero mass")
    return SizeDistribution(centers, mass / total)


def _golden_max(f, a, b, tol=1e-10):
    """Golden-section maximization of a unimodal f on [a, b].

    Works elementwise when a, b are arrays (f must broadcast).
    """
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a = np.asarray(a, dtype=float).copy()
    b = np.asarray(b, dtype=float).copy()
    span = np.max(b - a)
    while span > tol:
        x1 = b - invphi * (b - a)
        x2 = a + invphi * (b - a)
        take1 = f(x1) >= f(x2)
        b = np.where(take1, x2, b)
        a = np.where(take1, a, x1)
        span *= invphi
    x = 0.5 * (a + b)
    return x, f(x)


def hamiltonian(model, rho, z, p, return_argmax=False):
    """Optimized per-fill utility rate and its p-derivative.

    H(z, p) = sup_delta Lambda(delta)/(rho z) (1 - exp(-rho z (delta - p)))
    by golden-section search (tolerance 1e-10 in delta); the derivative
    uses the envelope identity H' = -Lambda(delta*) exp(-rho z (delta* - p)).
    """
    if z <= 0:
        raise ValueError("size must be positive")
    rz = rho * z

    def f(delta):
        with np.errstate(over="ignore"):
            return model.value(delta) / rz * (1.0 - np.exp(-rz * (delta - p)))

    lo = np.asarray(p, dtype=float) - 10.0
    hi = np.maximum(np.asarray(p, dtype=float), 0.0) + 10.0
    dstar, H = _golden_max(f, lo, hi)
    # where the intensity has underflowed the objective is flat zero and the
    # search point is meaningless but harmless; only a non-negligible H
    # pressed against the bracket signals a genuine failure
    hugging = (dstar - lo < 1e-6) | (hi - dstar < 1e-6)
    if np.any(hugging & (np.abs(H) > 1e-100)):
        raise ValueError("Hamiltonian maximizer not bracketed")
    Hp = -model.value(dstar) * np.exp(-rz * (dstar - p))
    if return_argmax:
        return H, Hp, dstar
    return H, Hp


def hamiltonian_exp_closed_form(amplitude, decay, rho, z, p):
    """Closed-form H for exponential intensity:
    (A/k) (1 + rho z / k)^(-(1 + k/(rho z))) exp(-k p)."""
    rz = rho * z
    k = decay
    return (amplitude / k) * (1.0 + rz / k) ** (-(1.0 + k / rz)) * np.exp(-k * p)


def quote_shift(model, rho, z, p):
    """Optimal shift delta* = Lambda^-1(rho z H - H').

    For exponential intensities this reduces to
    p + log(1 + rho z / k) / (rho z).
    """
    if model.kind == "exponential":
        rz = rho * z
        return np.asarray(p, dtype=float) + np.log1p(rz / model.decay) / rz
    H, Hp = hamiltonian(model, rho, z, p)
    return model.inverse(rho * z * H - Hp)


def taylor_alphas(model, rho, z, h=1e-4):
    """Second-order Taylor data of H at p = 0: (H, H', H'').

    Exponential intensities use the closed form (H'' = k^2 H); otherwise
    H'' is a central difference of the envelope derivative at step h.
    """
    if model.kind == "exponential":
        a0 = hamiltonian_exp_closed_form(model.amplitude, model.decay, rho, z, 0.0)
        return a0, -model.decay * a0, model.decay ** 2 * a0
    a0, a1 = hamiltonian(model, rho, z, 0.0)
    _, hp_plus = hamiltonian(model, rho, z, h)
    _, hp_minus = hamiltonian(model, rho, z, -h)
    return float(a0), float(a1), float((hp_plus - hp_minus) / (2 * h))


class MMConfig:
    """Market-making problem configuration.

    ``intensities`` and ``sizes`` are dicts keyed by (asset, tier, side)
    with side in {"bid", "ask"}; hedging-only instruments simply have no
    entries. ``eta`` absent means no externalisation (eta^-1 = 0 in the
    ODEs and hedge speeds are unavailable).
    """

    def __init__(self, market, intensities, sizes, rho, Gamma, T,
                 eta=None, inventory_cap=600.0):
        self.market = market
        self.intensities = dict(intensities)
        self.sizes = dict(sizes)
        self.rho = float(rho)
        self.Gamma = np.atleast_2d(np.asarray(Gamma, dtype=float))
        self.T = float(T)
        self.eta = None if eta is None else np.atleast_2d(np.asarray(eta, dtype=float))
        self.inventory_cap = float(inventory_cap)
        if self.T <= 0:
            raise ValueError("horizon must be positive")
        if self.eta is not None and np.min(np.linalg.eigvalsh(self.eta)) <= 0:
            raise ValueError("eta must be positive definite")
        if np.min(np.linalg.eigvalsh(self.Gamma)) < -1e-12:
            raise ValueError("Gamma must be positive semi-definite")

    @property
    def eta_inv(self):
        r = self.market.r
        return np.zeros((r, r)) if self.eta is None else np.linalg.inv(self.eta)

    def tiers(self, asset, side):
        return sorted(t for (i, t, s) in self.intensities if i == asset and s == side)


class Moments:
    """Size-and-intensity moments of the Taylor data, per side and asset.

    v(side, j, m)[i] = sum over tiers of sum_z w z^m alpha_j(z) for
    asset i; V(side, j, m) is the corresponding diagonal matrix.
    """

    _JM = [(0, 1), (1, 1), (1, 2), (2, 1), (2, 2), (2, 3)]

    def __init__(self, table, r):
        self._table = table
        self.r = r

    def v(self, side, j, m):
        return self._table[(side, j, m)]

    def V(self, side, j, m):
        return np.diag(self._table[(side, j, m)])


def aggregate_moments(config):
    """Compute the moment bundle needed by the value-coefficient ODEs."""
    r = config.market.r
    table = {(side, j, m): np.zeros(r)
             for side in ("bid", "ask") for (j, m) in Moments._JM}
    for (asset, tier, side), model in config.intensities.items():
        sizes = config.sizes.get((asset, tier, side))
        if sizes is None:
            raise KeyError(f"no size distribution for {(asset, tier, side)}")
        for z, w in zip(sizes.z, sizes.w):
            a0, a1, a2 = taylor_alphas(model, config.rho, z)
            alphas = (a0, a1, a2)
            for (j, m) in Moments._JM:
                table[(side, j, m)][asset] += w * z ** m * alphas[j]
    return Moments(table, r)


def _flow_matrix(config, moments):
    """2(V21_bid + V21_ask) + eta^-1, the quadratic fill-flow coefficient."""
    return (2.0 * (moments.V("bid", 2, 1) + moments.V("ask", 2, 1))
            + config.eta_inv)


def build_mm_dre(config, moments):
    """Assemble the constant-coefficient DRE for P = [[A, B/2], [B'/2, C]].

    Layout is inventory block first:
    Q = 1/2 [[rho Sigma_r, J R], [R' J', 0]], Y = [[0, 0], [rho Sigma J', R]],
    U = [[-G, 0], [0, 2 rho Sigma]] with G = 2(V21_b + V21_a) + eta^-1,
    terminal [[-Gamma, 0], [0, 0]].
    """
    mk = config.market
    r, d = mk.r, mk.d
    n = r + d
    G = _flow_matrix(config, moments)
    if np.min(np.linalg.eigvalsh(0.5 * (G + G.T))) < -1e-12:
        raise ValueError("fill-flow matrix 2(V21_b + V21_a) + eta^-1 is not PSD")
    Sigma = mk.Sigma
    Q = np.zeros((n, n))
    Q[:r, :r] = 0.5 * config.rho * mk.Sigma_r
    Q[:r, r:] = 0.5 * mk.J @ mk.R
    Q[r:, :r] = Q[:r, r:].T
    Y = np.zeros((n, n))
    Y[r:, :r] = config.rho * Sigma @ mk.J.T
    Y[r:, r:] = mk.R
    U = np.zeros((n, n))
    U[:r, :r] = -G
    U[r:, r:] = 2.0 * config.rho * Sigma
    P_T = np.zeros((n, n))
    P_T[:r, :r] = -config.Gamma
    return DRECoefficients(n, Q, Y, U, P_T)


def solve_abc(config, moments, grid, scheme="explicit-rk4"):
    """Solve the DRE and slice the (A, B, C) block paths."""
    sol = solve_dre(build_mm_dre(config, moments), grid, scheme=scheme)
    r = config.market.r
    A = sol.P[:, :r, :r]
    B = 2.0 * sol.P[:, :r, r:]
    C = sol.P[:, r:, r:]
    return sol, A, B, C


def _def_rhs(A, B, C, D, E, config, moments, R=None):
    mk = config.market
    rho = config.rho
    Sigma, Sbar, J = mk.Sigma, mk.Sbar, mk.J
    R = mk.R if R is None else R
    eta_inv = config.eta_inv
    v11 = moments.v("bid", 1, 1) - moments.v("ask", 1, 1)
    V22 = moments.V("bid", 2, 2) - moments.V("ask", 2, 2)
    V21 = moments.V("bid", 2, 1) + moments.V("ask", 2, 1)
    dA = np.diag(A)
    BJ = B + J
    Ddot = (-BJ @ R @ Sbar + rho * BJ @ Sigma @ E - A @ eta_inv @ D
            + 2.0 * A @ v11 - 2.0 * A @ V22 @ dA - 2.0 * A @ V21 @ D)
    Edot = (-2.0 * C @ R @ Sbar + R.T @ E + 2.0 * rho * C @ Sigma @ E
            - 0.5 * B.T @ eta_inv @ D + B.T @ v11 - B.T @ V22 @ dA
            - B.T @ V21 @ D)
    return Ddot, Edot


def _f_rhs(A, B, C, D, E, config, moments, R=None):
    mk = config.market
    rho = config.rho
    Sigma, Sbar = mk.Sigma, mk.Sbar
    R = mk.R if R is None else R
    eta_inv = config.eta_inv
    v01 = moments.v("bid", 0, 1) + moments.v("ask", 0, 1)
    v11 = moments.v("bid", 1, 1) - moments.v("ask", 1, 1)
    V12 = moments.V("bid", 1, 2) + moments.V("ask", 1, 2)
    V21 = moments.V("bid", 2, 1) + moments.V("ask", 2, 1)
    V22 = moments.V("bid", 2, 2) - moments.V("ask", 2, 2)
    V23 = moments.V("bid", 2, 3) + moments.V("ask", 2, 3)
    dA = np.diag(A)
    return (-Sbar @ R.T @ E - np.trace(Sigma @ C) + 0.5 * rho * E @ Sigma @ E
            - 0.25 * D @ eta_inv @ D - v01.sum() + np.trace(V12 @ A)
            + v11 @ D - 0.5 * dA @ V23 @ dA - dA @ V22 @ D
            - 0.5 * D @ V21 @ D)


def solve_def(grid, A_path, B_path, C_path, config, moments, R=None):
    """Backward integration of the linear (D, E) system, then F by quadrature.

    (A, B, C) are frozen per step with midpoint averaging for the RK4
    stages; terminal values are zero. ``R`` optionally overrides the
    market's (constant) mean-reversion matrix with a function of time.
    """
    grid = np.asarray(grid, dtype=float)
    N = len(grid)
    r, d = config.market.r, config.market.d
    Rf = (lambda t: config.market.R) if R is None else R
    D = np.zeros((N, r))
    E = np.zeros((N, d))
    for i in range(N - 2, -1, -1):
        h = grid[i + 1] - grid[i]
        t0, t1 = grid[i], grid[i + 1]
        th = 0.5 * (t0 + t1)
        abc1 = (A_path[i + 1], B_path[i + 1], C_path[i + 1])
        abc0 = (A_path[i], B_path[i], C_path[i])
        abch = tuple(0.5 * (x + y) for x, y in zip(abc0, abc1))
        d1, e1 = _def_rhs(*abc1, D[i + 1], E[i + 1], config, moments, Rf(t1))
        d2, e2 = _def_rhs(*abch, D[i + 1] - 0.5 * h * d1,
                          E[i + 1] - 0.5 * h * e1, config, moments, Rf(th))
        d3, e3 = _def_rhs(*abch, D[i + 1] - 0.5 * h * d2,
                          E[i + 1] - 0.5 * h * e2, config, moments, Rf(th))
        d4, e4 = _def_rhs(*abc0, D[i + 1] - h * d3,
                          E[i + 1] - h * e3, config, moments, Rf(t0))
        D[i] = D[i + 1] - (h / 6.0) * (d1 + 2 * d2 + 2 * d3 + d4)
        E[i] = E[i + 1] - (h / 6.0) * (e1 + 2 * e2 + 2 * e3 + e4)
    F = np.zeros(N)
    fdots = np.array([_f_rhs(A_path[i], B_path[i], C_path[i],
                             D[i], E[i], config, moments, Rf(grid[i]))
                      for i in range(N)])
    for i in range(N - 2, -1, -1):
        h = grid[i + 1] - grid[i]
        F[i] = F[i + 1] - 0.5 * h * (fdots[i] + fdots[i + 1])
    return D, E, F


def _interp_path(grid, arr, t):
    if t <= grid[0]:
        return arr[0]
    if t >= grid[-1]:
        return arr[-1]
    i = np.searchsorted(grid, t) - 1
    w = (t - grid[i]) / (grid[i + 1] - grid[i])
    return (1 - w) * arr[i] + w * arr[i + 1]


class QuoteEngine:
    """Quadratic value-coefficient paths plus the configuration.

    theta(t, q, S) = q'A q + q'B S + S'C S + D'q + E'S + F.
    """

    def __init__(self, grid, A, B, C, D, E, F, config, moments):
        self.grid = np.asarray(grid, dtype=float)
        self.A, self.B, self.C = A, B, C
        self.D, self.E, self.F = D, E, F
        self.config = config
        self.moments = moments

    def at(self, t):
        g = self.grid
        return tuple(_interp_path(g, arr, t)
                     for arr in (self.A, self.B, self.C, self.D, self.E, self.F))

    def theta(self, t, q, S):
        a, b, c, d, e, f = self.at(t)
        q = np.asarray(q, dtype=float)
        S = np.asarray(S, dtype=float)
        return (np.einsum("...i,ij,...j->...", q, a, q)
                + np.einsum("...i,ij,...j->...", q, b, S)
                + np.einsum("...i,ij,...j->...", S, c, S)
                + q @ d + S @ e + f)

    def shift_argument(self, t, q, S, z, asset, side):
        """p = (theta(t,q,S) - theta(t, q +/- z e_i, S)) / z in closed form."""
        a, b, _, d, _, _ = self.at(t)
        q = np.asarray(q, dtype=float)
        S = np.asarray(S, dtype=float)
        ei = np.zeros(self.config.market.r)
        ei[asset] = 1.0
        core = 2.0 * q @ a @ ei + (b @ S + d)[asset]
        if side == "bid":
            return -(core + z * a[asset, asset])
        return core - z * a[asset, asset]


def build_quote_engine(config, dt=1e-3, scheme="explicit-rk4", moments=None):
    """Solve the (A..F) system on a uniform grid and wrap it."""
    if moments is None:
        moments = aggregate_moments(config)
    n = max(2, int(round(config.T / dt)))
    grid = np.linspace(0.0, config.T, n + 1)
    _, A, B, C = solve_abc(config, moments, grid, scheme=scheme)
    D, E, F = solve_def(grid, A, B, C, config, moments)
    return QuoteEngine(grid, A, B, C, D, E, F, config, moments)


def approx_quotes(engine, t, q, S, z, asset, tier=0, side="bid"):
    """Quote shift from the quadratic value approximation.

    Exponential intensities use the additive closed form; other kinds go
    through the generic fill-rate inversion.
    """
    config = engine.config
    q = np.asarray(q, dtype=float)
    post = q[asset] + (z if side == "bid" else -z)
    if abs(post) > config.inventory_cap + 1e-9:
        raise InventoryCapError(
            f"post-trade inventory {post} beyond cap {config.inventory_cap}")
    p = engine.shift_argument(t, q, S, z, asset, side)
    model = config.intensities[(asset, tier, side)]
    if model.kind == "exponential":
        rz = config.rho * z
        return p + np.log1p(rz / model.decay) / rz
    return float(quote_shift(model, config.rho, z, p))


def hedge_speed(engine, t, q, S):
    """Externalisation speed 1/2 eta^-1 (2 A q + B S + D)."""
    config = engine.config
    if config.eta is None:
        raise ValueError("no execution-cost matrix eta configured")
    a, b, _, d, _, _ = engine.at(t)
    q = np.asarray(q, dtype=float)
    S = np.asarray(S, dtype=float)
    return 0.5 * np.linalg.inv(config.eta) @ (2.0 * a @ q + b @ S + d)


# ---------------------------------------------------------------------------
# single-asset finite-difference benchmark


@njit(cache=True)
def _hjb_kernel(theta, n_steps, dt, q_vals, dq, S_vals, dS, adv, sigma2,
                rho, eta_inv, cap, tab_b, tab_a, shifts_steps, z_sizes,
                p0, inv_dp, sub, diag, sup):
    n_q, n_S = theta.shape
    n_terms = tab_b.shape[0]
    n_p = tab_b.shape[1]
    # precompute the Thomas forward-elimination of the constant matrix
    cp = np.empty(n_S)
    den = np.empty(n_S)
    den[0] = diag[0]
    cp[0] = sup[0] / den[0]
    for i in range(1, n_S):
        den[i] = diag[i] - sub[i] * cp[i - 1]
        cp[i] = sup[i] / den[i]
    rhs = np.empty((n_q, n_S))
    work = np.empty(n_S)
    for step in range(n_steps):
        # explicit sources evaluated on the current (later-time) surface
        for qi in range(n_q):
            qv = q_vals[qi]
            for si in range(n_S):
                # one-sided gradients at the edges, central inside
                if si == 0:
                    ts = (theta[qi, 1] - theta[qi, 0]) / dS
                elif si == n_S - 1:
                    ts = (theta[qi, n_S - 1] - theta[qi, n_S - 2]) / dS
                else:
                    ts = (theta[qi, si + 1] - theta[qi, si - 1]) / (2.0 * dS)
                g = qv + ts
                src = adv[si] * qv - 0.5 * rho * sigma2 * g * g
                if eta_inv > 0.0:
                    if qi == 0:
                        tq = (theta[1, si] - theta[0, si]) / dq
                    elif qi == n_q - 1:
                        tq = (theta[n_q - 1, si] - theta[n_q - 2, si]) / dq
                    else:
                        tq = (theta[qi + 1, si] - theta[qi - 1, si]) / (2.0 * dq)
                    src += 0.25 * eta_inv * tq * tq
                rhs[qi, si] = theta[qi, si] + dt * src
        # fill-flow terms: quotes suppressed beyond the inventory cap
        for m in range(n_terms):
            zshift = shifts_steps[m]
            zval = z_sizes[m]
            for qi in range(n_q):
                if q_vals[qi] + zval <= cap + 1e-9 and qi + zshift < n_q:
                    for si in range(n_S):
                        p = (theta[qi, si] - theta[qi + zshift, si]) / zval
                        x = (p - p0) * inv_dp
                        if x < 0.0:
                            x = 0.0
                        elif x > n_p - 1.000001:
                            x = n_p - 1.000001
                        i0 = int(x)
                        fr = x - i0
                        rhs[qi, si] += dt * ((1.0 - fr) * tab_b[m, i0]
                                             + fr * tab_b[m, i0 + 1])
                if q_vals[qi] - zval >= -cap - 1e-9 and qi - zshift >= 0:
                    for si in range(n_S):
                        p = (theta[qi, si] - theta[qi - zshift, si]) / zval
                        x = (p - p0) * inv_dp
                        if x < 0.0:
                            x = 0.0
                        elif x > n_p - 1.000001:
                            x = n_p - 1.000001
                        i0 = int(x)
                        fr = x - i0
                        rhs[qi, si] += dt * ((1.0 - fr) * tab_a[m, i0]
                                             + fr * tab_a[m, i0 + 1])
        # implicit advection/diffusion: one banded solve per inventory row
        for qi in range(n_q):
            work[0] = rhs[qi, 0] / den[0]
            for i in range(1, n_S):
                work[i] = (rhs[qi, i] - sub[i] * work[i - 1]) / den[i]
            theta[qi, n_S - 1] = work[n_S - 1]
            for i in range(n_S - 2, -1, -1):
                theta[qi, i] = work[i] - cp[i] * theta[qi, i + 1]
        # divergence probe
        bad = False
        for si in range(n_S):
            v = theta[n_q // 2, si]
            if not np.isfinite(v) or abs(v) > 1e10:
                bad = True
                break
        if bad:
            return step + 1
    return 0


class GridSolution:
    """Finite-difference value surface theta(0, q, S) and quote maps."""

    def __init__(self, q_vals, S_vals, theta0, config, tier=0):
        self.q_vals = q_vals
        self.S_vals = S_vals
        self.theta0 = theta0
        self.config = config
        self.tier = tier

    def shift_surface(self, z, side):
        """Optimal shifts at t = 0 for size z on the (q, S) lattice.

        Entries where the post-trade inventory would breach the cap are
        NaN (quote refused).
        """
        cfg = self.config
        model = cfg.intensities[(0, self.tier, side)]
        n_q, n_S = self.theta0.shape
        out = np.full((n_q, n_S), np.nan)
        steps = int(round(z / (self.q_vals[1] - self.q_vals[0])))
        for qi in range(n_q):
            if side == "bid":
                if self.q_vals[qi] + z > cfg.inventory_cap + 1e-9 or qi + steps >= n_q:
                    continue
                p = (self.theta0[qi] - self.theta0[qi + steps]) / z
            else:
                if self.q_vals[qi] - z < -cfg.inventory_cap - 1e-9 or qi - steps < 0:
                    continue
                p = (self.theta0[qi] - self.theta0[qi - steps]) / z
            out[qi] = quote_shift(model, cfg.rho, z, p)
        return out


def _hamiltonian_tables(config, p_lo, p_hi, dp, tier_sides):
    """Tabulate w * z * H(z, p) on a uniform p-grid for each (tier, size, side)."""
    p_grid = np.arange(p_lo, p_hi + dp / 2, dp)
    tabs = {"bid": [], "ask": []}
    zs = {"bid": [], "ask": []}
    ws = {"bid": [], "ask": []}
    for (asset, tier, side) in tier_sides:
        model = config.intensities[(asset, tier, side)]
        sizes = config.sizes[(asset, tier, side)]
        for z, w in zip(sizes.z, sizes.w):
            H, _ = hamiltonian(model, config.rho, z, p_grid)
            tabs[side].append(w * z * H)
            zs[side].append(z)
            ws[side].append(w)
    return p_grid, tabs, zs


def hjb_grid_solve_1d(config, dt=1e-3, dq=25.0, dS=0.05, S_span=None,
                      p_range=40.0, p_step=1e-3):
    """Backward finite-difference solve of the exact single-asset equation.

    Semi-implicit in time: the price advection/diffusion is implicit
    (tridiagonal solves in S), the nonlinear price-gradient term and the
    per-size fill-flow sums are explicit on the previous surface.
    Terminal condition theta(T, q, S) = -q' Gamma q; boundary rows use
    one-sided gradients (zero second derivative); quotes are suppressed
    where the post-trade inventory would breach the cap.

    Returns a GridSolution with the t = 0 surface.
    """
    mk = config.market
    if mk.r != 1 or mk.d != 1:
        raise ValueError("grid benchmark supports a single asset without signals")
    cap = config.inventory_cap
    q_vals = np.arange(-cap, cap + dq / 2, dq)
    sigma2 = float(mk.Sigma[0, 0])
    if S_span is None:
        S_span = 6.0 * np.sqrt(sigma2 * config.T)
    Sbar = float(mk.Sbar[0])
    S_vals = np.arange(Sbar - S_span / 2, Sbar + S_span / 2 + dS / 2, dS)
    n_S = len(S_vals)
    R = float(mk.R[0, 0])
    adv = (Sbar - S_vals) * R

    tier_sides = [(a, t, s) for (a, t, s) in config.intensities if a == 0]
    p_grid, tabs, zs = _hamiltonian_tables(config, -p_range, p_range, p_step,
                                           tier_sides)
    tab_b = np.array(tabs["bid"]) if tabs["bid"] else np.zeros((0, len(p_grid)))
    tab_a = np.array(tabs["ask"]) if tabs["ask"] else np.zeros((0, len(p_grid)))
    if tab_b.shape[0] != tab_a.shape[0]:
        raise ValueError("bid and ask size grids must align for the benchmark")
    z_sizes = np.array(zs["bid"], dtype=float) if zs["bid"] else np.zeros(0)
    shifts_steps = np.round(z_sizes / dq).astype(np.int64)
    if np.any(np.abs(shifts_steps * dq - z_sizes) > 1e-9):
        raise ValueError("sizes must be multiples of the inventory step")

    # constant tridiagonal system (I - dt L), upwinded one-sided at edges
    sub = np.zeros(n_S)
    diag = np.ones(n_S)
    sup = np.zeros(n_S)
    lam = sigma2 / (2.0 * dS ** 2)
    for i in range(1, n_S - 1):
        sub[i] = dt * (adv[i] / (2.0 * dS) - lam)
        diag[i] = 1.0 + 2.0 * dt * lam
        sup[i] = -dt * (adv[i] / (2.0 * dS) + lam)
    diag[0] = 1.0 + dt * adv[0] / dS
    sup[0] = -dt * adv[0] / dS
    diag[-1] = 1.0 - dt * adv[-1] / dS
    sub[-1] = dt * adv[-1] / dS

    n_steps = int(round(config.T / dt))
    gam = float(config.Gamma[0, 0])
    theta = np.repeat((-gam * q_vals ** 2)[:, None], n_S, axis=1).astype(float)
    eta_inv = float(config.eta_inv[0, 0])
    failed = _hjb_kernel(theta, n_steps, dt, q_vals, dq, S_vals, dS, adv,
                         sigma2, config.rho, eta_inv, cap, tab_b, tab_a,
                         shifts_steps, z_sizes, p_grid[0], 1.0 / p_step,
                         sub, diag, sup)
    if failed:
        raise GridDivergenceError(failed, dt, dq, dS)
    return GridSolution(q_vals, S_vals, theta, config)


# ---------------------------------------------------------------------------
# event simulation


def _ou_step_factors(market, dt, n_quad=33):
    """Exact one-step OU transition: mean factor exp(-R dt) and a matrix
    square root of the integrated covariance int_0^dt e^{-Ru} Sigma e^{-R'u} du."""
    R, Sigma = market.R, market.Sigma
    F = expm(-R * dt)
    us = np.linspace(0.0, dt, n_quad)
    vals = np.array([expm(-R * u) @ Sigma @ expm(-R * u).T for u in us])
    from scipy.integrate import simpson

    C = simpson(vals, x=us, axis=0)
    w, v = np.linalg.eigh(0.5 * (C + C.T))
    L = v @ np.diag(np.sqrt(np.clip(w, 0.0, None)))
    return F, L


class MMPathRecord:
    """One simulated market-making path."""

    def __init__(self, t, S, q, X, fills, pnl):
        self.t = t
        self.S = S
        self.q = q
        self.X = X
        self.fills = fills
        self.pnl = pnl


def engine_policy(engine):
    """Quote policy backed by the quadratic approximation."""

    def policy(t, q, S, z, asset, tier, side):
        try:
            return approx_quotes(engine, t, q, S, z, asset, tier, side)
        except InventoryCapError:
            return None

    return policy


def simulate_mm(config, policy, dt, seed, n_paths=1, q0=None, X0=0.0,
                hedge_policy=None):
    """Event-level simulation of quoting, fills, and hedging.

    Prices step by the exact OU transition; RFQ arrivals are thinned
    per (asset, tier, side, size bucket) against the intensity envelope;
    the policy returns a shift or None to refuse the quote. Returns a
    list of MMPathRecord.
    """
    mk = config.market
    r, d = mk.r, mk.d
    q0 = np.zeros(r) if q0 is None else np.asarray(q0, dtype=float)
    n_steps = int(round(config.T / dt))
    ts = dt * np.arange(n_steps + 1)
    F, L = _ou_step_factors(mk, dt)
    j = L.shape[1]

    buckets = []
    for (asset, tier, side), model in config.intensities.items():
        env = model.envelope
        if env is None:
            raise ValueError("intensity model needs a finite envelope for thinning")
        sizes = config.sizes[(asset, tier, side)]
        for z, w in zip(sizes.z, sizes.w):
            if env * w * dt > 0.1:
                warnings.warn(
                    f"per-step fill probability {env * w * dt:.3f} > 0.1 "
                    f"for {(asset, tier, side)} size {z}")
            buckets.append((asset, tier, side, float(z), env * w, model))

    hedging = config.eta is not None
    eta = config.eta
    records = []
    rng = np.random.Generator(np.random.Philox(key=seed))
    for _ in range(n_paths):
        S = mk.S0.copy()
        q = q0.copy()
        X = float(X0)
        S_path = np.empty((n_steps + 1, d))
        q_path = np.empty((n_steps + 1, r))
        X_path = np.empty(n_steps + 1)
        S_path[0], q_path[0], X_path[0] = S, q, X
        fills = []
        for i in range(n_steps):
            t = ts[i]
            for (asset, tier, side, z, rate, model) in buckets:
                n_arr = rng.poisson(rate * dt)
                for _ in range(n_arr):
                    shift = policy(t, q, S, z, asset, tier, side)
                    if shift is None:
                        continue
                    if rng.random() > model.value(shift) / model.envelope:
                        continue
                    price = S[asset] - shift if side == "bid" else S[asset] + shift
                    if side == "bid":
                        q[asset] += z
                        X -= z * price
                    else:
                        q[asset] -= z
                        X += z * price
                    fills.append((t, asset, tier, side, z, shift))
            if hedging and hedge_policy is not None:
                v = np.asarray(hedge_policy(t, q, S), dtype=float)
                q = q + v * dt
                X -= (v @ mk.J @ S) * dt + (v @ eta @ v) * dt
            S = mk.Sbar + F @ (S - mk.Sbar) + L @ rng.standard_normal(j)
            S_path[i + 1], q_path[i + 1], X_path[i + 1] = S, q, X
        pnl = X_path + np.einsum("ni,ij,nj->n", q_path, mk.J, S_path)
        records.append(MMPathRecord(ts, S_path, q_path, X_path, fills, pnl))
    return records
