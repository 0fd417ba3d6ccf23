"""Exponential-utility linear feedback control.

An agent observes a linear-Gaussian state x, steers an integrator output
y with a control u, accumulates a quadratic running cost into z, and
maximizes the expected exponential utility of the terminal quantity
z_T - (x_T, y_T)' [[Psi, Upsilon/2], [Upsilon'/2, Gamma]] (x_T, y_T).
The value function is exponential-quadratic with coefficients read off a
backward matrix Riccati path; this module performs the change of
variables to and from the block Riccati form, evaluates the optimal
feedback, simulates the controlled system, and estimates performance by
Monte Carlo.
"""

import numpy as np

from .riccati_core import BlockSpec, as_matrix_function

__all__ = [
    "LEQGProblem", "ValueCoefficients",
    "to_block_spec", "from_block_spec", "value_coefficients",
    "optimal_control", "make_optimal_policy", "admissibility_constant",
    "Ensemble", "simulate", "mc_performance", "value_function",
]


class LEQGProblem:
    """Coefficients and initial data of the control problem.

    Parameters
    ----------
    A, B, C, R, V : array or callable t -> array
        Control cost (r x r, PD), cross cost (r x d), state cost
        (d x d, symmetric), state feedback (d x d), noise loading (d x j).
    rho : float
        Risk aversion, > 0.
    Psi, Upsilon, Gamma : arrays
        Terminal quadratic-penalty blocks.
    x0, y0, z0 : initial state, output, accumulator.
    """

    def __init__(self, d, r, rho, A, B, C, R, V, Psi, Upsilon, Gamma,
                 x0=None, y0=None, z0=0.0):
        self.d, self.r, self.rho = int(d), int(r), float(rho)
        self.A = as_matrix_function(A)
        self.B = as_matrix_function(B)
        self.C = as_matrix_function(C)
        self.R = as_matrix_function(R)
        self.V = as_matrix_function(V)
        self.Psi = np.atleast_2d(np.asarray(Psi, dtype=float))
        self.Upsilon = np.asarray(Upsilon, dtype=float).reshape(self.d, self.r)
        self.Gamma = np.atleast_2d(np.asarray(Gamma, dtype=float))
        self.x0 = np.zeros(self.d) if x0 is None else np.asarray(x0, dtype=float)
        self.y0 = np.zeros(self.r) if y0 is None else np.asarray(y0, dtype=float)
        self.z0 = float(z0)

    def Sigma(self, t):
        v = self.V(t)
        return v @ v.T

    def terminal_penalty(self, x, y):
        """(x,y)' [[Psi, Upsilon/2], [Upsilon'/2, Gamma]] (x,y), vectorized
        over leading axes of x (.., d) and y (.., r)."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        qx = np.einsum("...i,ij,...j->...", x, self.Psi, x)
        qc = np.einsum("...i,ij,...j->...", x, self.Upsilon, y)
        qy = np.einsum("...i,ij,...j->...", y, self.Gamma, y)
        return qx + qc + qy


def to_block_spec(p):
    """Change of variables from control-cost form to the block Riccati form.

    U22 = A^-1, Y21 = A^-1 B / 2, Q11 = C - B' A^-1 B / 4, Y11 = -R,
    U11 = 2 Sigma. These are the unique choices under which the
    quadratic value-function coefficients of the control problem solve
    the assembled block Riccati equation (match the Hamilton--Jacobi
    terms in xx, xy, and yy).
    """
    def U22(t, _p=p):
        a = _p.A(t)
        if np.min(np.linalg.eigvalsh(0.5 * (a + a.T))) <= 0:
            raise np.linalg.LinAlgError(f"control cost A({t}) is not PD")
        return np.linalg.inv(a)

    def Y21(t, _p=p):
        return 0.5 * np.linalg.solve(_p.A(t), _p.B(t))

    def Q11(t, _p=p):
        b = _p.B(t)
        return _p.C(t) - 0.25 * b.T @ np.linalg.solve(_p.A(t), b)

    def Y11(t, _p=p):
        return -_p.R(t)

    def U11(t, _p=p):
        return 2.0 * _p.Sigma(t)

    return BlockSpec(p.d, p.r, p.rho, Q11, Y11, Y21, U11, U22,
                     p.Psi, p.Upsilon, p.Gamma)


def from_block_spec(spec, x0=None, y0=None, z0=0.0):
    """Inverse change of variables; V is a symmetric PSD square root of Sigma."""
    def A(t, _s=spec):
        return np.linalg.inv(_s.U22(t))

    def B(t, _s=spec):
        return 2.0 * np.linalg.solve(_s.U22(t), _s.Y21(t))

    def C(t, _s=spec):
        y21 = _s.Y21(t)
        return _s.Q11(t) + y21.T @ np.linalg.solve(_s.U22(t), y21)

    def R(t, _s=spec):
        return -_s.Y11(t)

    def V(t, _s=spec):
        w, v = np.linalg.eigh(0.5 * _s.U11(t))
        return v @ np.diag(np.sqrt(np.clip(w, 0.0, None))) @ v.T

    return LEQGProblem(spec.d, spec.r, spec.rho, A, B, C, R, V,
                       spec.Psi, spec.Upsilon, spec.Gamma, x0=x0, y0=y0, z0=z0)


class ValueCoefficients:
    """Quadratic value-function coefficients along a time grid.

    The stored constant path follows the running convention
    M6(t) = -int_0^t Tr(Sigma M1) ds (so M6 vanishes at the grid start);
    ``theta`` re-anchors it at the horizon, where the value function's
    constant term must vanish to match the terminal penalty.
    """

    def __init__(self, grid, M1, M2, M3, M6):
        self.grid = np.asarray(grid, dtype=float)
        self.M1 = np.asarray(M1, dtype=float)
        self.M2 = np.asarray(M2, dtype=float)
        self.M3 = np.asarray(M3, dtype=float)
        self.M6 = np.asarray(M6, dtype=float)

    def _interp(self, arr, t):
        g = self.grid
        if t <= g[0]:
            return arr[0]
        if t >= g[-1]:
            return arr[-1]
        i = np.searchsorted(g, t) - 1
        w = (t - g[i]) / (g[i + 1] - g[i])
        return (1 - w) * arr[i] + w * arr[i + 1]

    def at(self, t):
        """(M1, M2, M3, M6) linearly interpolated at t."""
        return (self._interp(self.M1, t), self._interp(self.M2, t),
                self._interp(self.M3, t), self._interp(self.M6, t))

    def theta(self, t, x, y):
        """Quadratic value term with the constant anchored at the horizon."""
        m1, m2, m3, m6 = self.at(t)
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        quad = (np.einsum("...i,ij,...j->...", x, m1, x)
                + np.einsum("...i,ij,...j->...", x, m2, y)
                + np.einsum("...i,ij,...j->...", y, m3, y))
        return quad + (m6 - self.M6[-1])


def value_coefficients(sol, Sigma):
    """Read the value-function coefficients off a solved Riccati path.

    The path blocks are P = [[M1, M2/2], [M2'/2, M3]]; the constant path
    is the trapezoidal quadrature M6(t) = -int_{t0}^t Tr(Sigma M1) ds.
    """
    if sol.block is None:
        raise ValueError("solution lacks block structure (d, r)")
    d = sol.block.d
    Sigma = as_matrix_function(Sigma)
    M1 = sol.P[:, :d, :d]
    M2 = 2.0 * sol.P[:, :d, d:]
    M3 = sol.P[:, d:, d:]
    tr = np.array([np.trace(Sigma(t) @ m1) for t, m1 in zip(sol.grid, M1)])
    M6 = np.zeros(len(sol.grid))
    for i in range(1, len(sol.grid)):
        h = sol.grid[i] - sol.grid[i - 1]
        M6[i] = M6[i - 1] - 0.5 * h * (tr[i] + tr[i - 1])
    return ValueCoefficients(sol.grid, M1, M2, M3, M6)


def optimal_control(t, x, y, vc, p):
    """Optimal feedback u* = A^-1 (M2' x + 2 M3 y - B x) / 2.

    Vectorized over leading axes of x (.., d) and y (.., r).
    """
    m1, m2, m3, _ = vc.at(t)
    a_inv = np.linalg.inv(p.A(t))
    gain_x = 0.5 * a_inv @ (m2.T - p.B(t))
    gain_y = a_inv @ m3
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return x @ gain_x.T + y @ gain_y.T


def make_optimal_policy(vc, p):
    """Policy closure evaluating the optimal feedback."""
    return lambda t, x, y: optimal_control(t, x, y, vc, p)


def admissibility_constant(vc, p, grid, y0=None):
    """Path-independent linear-growth constant for the optimal feedback.

    With u = Gx(t) x + Gy(t) y and y an integrator of u, Gronwall gives
    ||u_s|| <= C (1 + sup_{tau<=s} ||x_tau||) with

        C = gx + gy * (||y0|| + T gx) * exp(gy T) * max(1, ...)

    built from the sup over the grid of the gain norms gx, gy.
    """
    y0 = p.y0 if y0 is None else np.asarray(y0, dtype=float)
    gx = gy = 0.0
    for t in grid:
        _, m2, m3, _ = vc.at(t)
        a_inv = np.linalg.inv(p.A(t))
        gx = max(gx, np.linalg.norm(0.5 * a_inv @ (m2.T - p.B(t)), 2))
        gy = max(gy, np.linalg.norm(a_inv @ m3, 2))
    T = grid[-1] - grid[0]
    y_bound = (np.linalg.norm(y0) + T * gx) * np.exp(gy * T)
    return gx + gy * max(y_bound, 1.0 + y_bound)


class Ensemble:
    """Terminal states of simulated controlled paths.

    Fields: x_T (n, d), y_T (n, r), z_T (n,), sup_x (n,) the running max
    of ||x||, sup_ratio (n,) the realized ||u|| / (1 + sup ||x||), plus
    full trajectories (t, x, y, z) for the first few stored paths.
    """

    def __init__(self, x_T, y_T, z_T, sup_x, sup_ratio, stored):
        self.x_T = x_T
        self.y_T = y_T
        self.z_T = z_T
        self.sup_x = sup_x
        self.sup_ratio = sup_ratio
        self.stored = stored

    @property
    def n_paths(self):
        return len(self.z_T)


def simulate(p, policy, T, dt, n_paths, seed, t0=0.0, n_store=8,
             chunk_size=20000):
    """Euler--Maruyama simulation of the controlled system.

    x steps by Euler--Maruyama; y and z accumulate with the left-endpoint
    rule at the same resolution. The policy is called with the left-point
    time and states (vectorized over paths). Noise is drawn from Philox
    streams jumped once per path chunk, so results are reproducible and
    independent of how work is scheduled; because the draws do not depend
    on the policy, runs with the same seed share noise (common random
    numbers across policies).
    """
    n_steps = int(round((T - t0) / dt))
    ts = t0 + dt * np.arange(n_steps + 1)
    j = np.atleast_2d(p.V(t0)).shape[1]
    sq = np.sqrt(dt)

    x_T = np.empty((n_paths, p.d))
    y_T = np.empty((n_paths, p.r))
    z_T = np.empty(n_paths)
    sup_x = np.empty(n_paths)
    sup_ratio = np.empty(n_paths)
    stored = []

    base = np.random.Philox(key=seed)
    done = 0
    chunk_idx = 0
    while done < n_paths:
        m = min(chunk_size, n_paths - done)
        rng = np.random.Generator(base.jumped(chunk_idx))
        x = np.tile(p.x0, (m, 1))
        y = np.tile(p.y0, (m, 1))
        z = np.full(m, p.z0)
        sx = np.linalg.norm(x, axis=1)
        sr = np.zeros(m)
        keep = min(n_store - len(stored), m) if len(stored) < n_store else 0
        if keep:
            traj = np.empty((keep, n_steps + 1, p.d + p.r + 1))
            traj[:, 0, :p.d] = x[:keep]
            traj[:, 0, p.d:p.d + p.r] = y[:keep]
            traj[:, 0, -1] = z[:keep]
        for i in range(n_steps):
            t = ts[i]
            u = np.atleast_2d(policy(t, x, y))
            a, b, c = p.A(t), p.B(t), p.C(t)
            cost = (np.einsum("ni,ij,nj->n", u, a, u)
                    + np.einsum("ni,ij,nj->n", u, b, x)
                    + np.einsum("ni,ij,nj->n", x, c, x))
            z -= cost * dt
            y = y + u * dt
            dw = rng.standard_normal((m, j)) * sq
            x = x + (x @ p.R(t).T) * dt + dw @ p.V(t).T
            nx = np.linalg.norm(x, axis=1)
            np.maximum(sx, nx, out=sx)
            ratio = np.linalg.norm(u, axis=1) / (1.0 + sx)
            np.maximum(sr, ratio, out=sr)
            if keep:
                traj[:, i + 1, :p.d] = x[:keep]
                traj[:, i + 1, p.d:p.d + p.r] = y[:keep]
                traj[:, i + 1, -1] = z[:keep]
        x_T[done:done + m] = x
        y_T[done:done + m] = y
        z_T[done:done + m] = z
        sup_x[done:done + m] = sx
        sup_ratio[done:done + m] = sr
        if keep:
            stored.extend((ts, traj[k]) for k in range(keep))
        done += m
        chunk_idx += 1
    return Ensemble(x_T, y_T, z_T, sup_x, sup_ratio, stored)


def mc_performance(ensemble, p):
    """Sample mean and standard error of the terminal exponential utility."""
    pen = p.terminal_penalty(ensemble.x_T, ensemble.y_T)
    with np.errstate(over="warn"):
        util = -np.exp(-p.rho * (ensemble.z_T - pen))
    n = ensemble.n_paths
    se = util.std(ddof=1) / np.sqrt(n) if n > 1 else 0.0
    return float(util.mean()), float(se)


def value_function(vc, p, t, x, y, z):
    """Analytic value -exp(-rho (z + theta(t, x, y)))."""
    return -np.exp(-p.rho * (z + vc.theta(t, x, y)))
