"""Backward integration of matrix differential Riccati equations

    dP/dt = Q(t) + Y(t)' P + P Y(t) + P U(t) P,   P(T) given,

where U may be indefinite, together with coefficient transformations
(constant shifts and time-dependent congruences) and a-priori bound
diagnostics built from quadratures of the underlying linear dynamics.
"""

import logging

import numpy as np
from scipy.integrate import simpson
from scipy.linalg import expm

logger = logging.getLogger(__name__)

__all__ = [
    "BlockSpec", "DRECoefficients", "RiccatiSolution", "AssumptionReport",
    "BlowUpError", "NoConvergenceError", "NonCommutingError", "SingularBSBError",
    "as_matrix_function", "assemble_from_blocks", "check_assumptions",
    "solve_dre", "transform_shift", "transform_congruence", "apriori_bounds",
]

SYM_TOL = 1e-12


class BlowUpError(RuntimeError):
    """Raised when the solution norm escapes the configured cap.

    The attribute ``t`` records the first grid time (scanning backward
    from the horizon) at which the cap was exceeded.
    """

    def __init__(self, t, norm):
        super().__init__(f"Riccati solution norm {norm:.3e} exceeded cap at t={t:.6g}")
        self.t = t
        self.norm = norm


class NoConvergenceError(RuntimeError):
    """Implicit-Euler inner fixed-point iteration failed to converge."""


class NonCommutingError(RuntimeError):
    """The state feedback matrices do not commute across times, so the
    closed-form exponential used by the bound quadratures is invalid."""


class SingularBSBError(RuntimeError):
    """B(t) Sigma(t) B(t)' is numerically singular."""


def as_matrix_function(m):
    """Wrap a constant array as a matrix function of time.

    Callables are returned unchanged; anything array-like is frozen and
    returned from a closure.
    """
    if callable(m):
        return m
    a = np.atleast_2d(np.asarray(m, dtype=float))
    return lambda t, _a=a: _a


def _sym_defect(a):
    return np.max(np.abs(a - a.T)) if a.size else 0.0


def _check_sym(a, name, tol=SYM_TOL):
    if _sym_defect(a) > tol * max(1.0, np.max(np.abs(a))):
        raise ValueError(f"{name} is not symmetric within tolerance")


class BlockSpec:
    """Structured coefficients of the control-form Riccati problem.

    The state block has dimension ``d`` and the control block dimension
    ``r <= d``; ``rho`` is the (positive) risk-aversion scale multiplying
    the positive-semidefinite part of the quadratic coefficient.

    Parameters
    ----------
    d, r : int
        State and control dimensions.
    rho : float
        Risk aversion, > 0.
    Q11, Y11, Y21, U11, U22 : array or callable t -> array
        Time-dependent blocks: Q11, U11 symmetric d x d; Y11 d x d;
        Y21 r x d; U22 symmetric positive-definite r x r.
    Psi, Upsilon, Gamma : arrays
        Terminal data: Psi symmetric PSD d x d, Upsilon d x r,
        Gamma symmetric r x r.
    """

    def __init__(self, d, r, rho, Q11, Y11, Y21, U11, U22, Psi, Upsilon, Gamma):
        if not (0 < r <= d):
            raise ValueError("need 0 < r <= d")
        if rho <= 0:
            raise ValueError("rho must be positive")
        self.d, self.r, self.rho = int(d), int(r), float(rho)
        self.Q11 = as_matrix_function(Q11)
        self.Y11 = as_matrix_function(Y11)
        self.Y21 = as_matrix_function(Y21)
        self.U11 = as_matrix_function(U11)
        self.U22 = as_matrix_function(U22)
        self.Psi = np.atleast_2d(np.asarray(Psi, dtype=float))
        self.Upsilon = np.asarray(Upsilon, dtype=float).reshape(self.d, self.r)
        self.Gamma = np.atleast_2d(np.asarray(Gamma, dtype=float))
        _check_sym(self.Psi, "Psi")
        _check_sym(self.Gamma, "Gamma")
        if np.min(np.linalg.eigvalsh(self.Psi)) < -1e-10:
            raise ValueError("Psi must be positive semi-definite")

    def validate_on_grid(self, grid):
        """Check shape/definiteness invariants at every time in ``grid``."""
        d, r = self.d, self.r
        for t in np.atleast_1d(grid):
            q11, u11, u22 = self.Q11(t), self.U11(t), self.U22(t)
            if q11.shape != (d, d) or self.Y11(t).shape != (d, d):
                raise ValueError("Q11/Y11 must be d x d")
            if self.Y21(t).shape != (r, d):
                raise ValueError("Y21 must be r x d")
            _check_sym(q11, "Q11")
            _check_sym(u11, "U11")
            _check_sym(u22, "U22")
            if np.min(np.linalg.eigvalsh(u11)) < -1e-10:
                raise ValueError(f"U11({t}) not PSD")
            if np.min(np.linalg.eigvalsh(u22)) <= 0:
                raise ValueError(f"U22({t}) not positive definite")


class DRECoefficients:
    """Dense coefficients Q(t), Y(t), U(t) and terminal matrix of a DRE.

    ``block`` optionally records the BlockSpec the coefficients were
    assembled from.
    """

    def __init__(self, n, Q, Y, U, P_T, block=None):
        self.n = int(n)
        self.Q = as_matrix_function(Q)
        self.Y = as_matrix_function(Y)
        self.U = as_matrix_function(U)
        self.P_T = np.atleast_2d(np.asarray(P_T, dtype=float))
        if self.P_T.shape != (self.n, self.n):
            raise ValueError("terminal matrix has wrong shape")
        _check_sym(self.P_T, "P(T)")
        self.block = block

    def rhs(self, t, P):
        """Right-hand side Q + Y'P + PY + PUP at time ``t``."""
        Y = self.Y(t)
        return self.Q(t) + Y.T @ P + P @ Y + P @ self.U(t) @ P


class RiccatiSolution:
    """Time grid and symmetric matrix path of a solved DRE.

    ``block`` carries the (d, r) structure of the originating BlockSpec
    when available, so downstream consumers can slice the path.
    """

    def __init__(self, grid, P, scheme, max_residual, block=None):
        self.grid = np.asarray(grid, dtype=float)
        self.P = np.asarray(P, dtype=float)
        self.scheme = scheme
        self.max_residual = float(max_residual)
        self.block = block

    def at(self, t):
        """Linearly interpolated P(t)."""
        g = self.grid
        if t <= g[0]:
            return self.P[0]
        if t >= g[-1]:
            return self.P[-1]
        i = np.searchsorted(g, t) - 1
        w = (t - g[i]) / (g[i + 1] - g[i])
        return (1 - w) * self.P[i] + w * self.P[i + 1]


class AssumptionReport:
    """Boolean outcome of the solvability conditions, with witnesses."""

    def __init__(self, state_cost_psd, noise_coupling_pd, feedback_commutes,
                 zero_cost_terminal, witnesses):
        self.state_cost_psd = state_cost_psd
        self.noise_coupling_pd = noise_coupling_pd
        self.feedback_commutes = feedback_commutes
        self.zero_cost_terminal = zero_cost_terminal
        self.witnesses = witnesses

    def all_satisfied(self):
        return (self.state_cost_psd and self.noise_coupling_pd
                and self.feedback_commutes and self.zero_cost_terminal)


def assemble_from_blocks(spec):
    """Build dense DRE coefficients from a BlockSpec.

    Layout: state block first, so

        Q = [[Q11, 0], [0, 0]],   Y = [[Y11, 0], [Y21, 0]],
        U = [[rho*U11, 0], [0, -U22]],
        P(T) = -[[Psi, Upsilon/2], [Upsilon'/2, Gamma]].
    """
    d, r, rho = spec.d, spec.r, spec.rho
    n = d + r
    spec.validate_on_grid([0.0])

    def Q(t):
        out = np.zeros((n, n))
        out[:d, :d] = spec.Q11(t)
        return out

    def Y(t):
        out = np.zeros((n, n))
        out[:d, :d] = spec.Y11(t)
        out[d:, :d] = spec.Y21(t)
        return out

    def U(t):
        out = np.zeros((n, n))
        out[:d, :d] = rho * spec.U11(t)
        out[d:, d:] = -spec.U22(t)
        return out

    P_T = np.zeros((n, n))
    P_T[:d, :d] = -spec.Psi
    P_T[:d, d:] = -0.5 * spec.Upsilon
    P_T[d:, :d] = -0.5 * spec.Upsilon.T
    P_T[d:, d:] = -spec.Gamma
    return DRECoefficients(n, Q, Y, U, P_T, block=spec)


def check_assumptions(spec, grid):
    """Evaluate the solvability conditions of a BlockSpec on a time grid.

    Returns an AssumptionReport with:

    * ``state_cost_psd``  -- C(t) = Q11 + Y21' U22^-1 Y21 PSD on the grid
      (the state-cost matrix of the equivalent control problem);
    * ``noise_coupling_pd`` -- B Sigma B' positive definite on the grid,
      with B = 2 U22^-1 Y21 and Sigma = U11 / 2;
    * ``feedback_commutes`` -- Y11(s) and Y11(t) commute across grid pairs;
    * ``zero_cost_terminal`` -- C(t) = 0 on the grid and Psi = 0.
    """
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    witnesses = {}
    state_cost_psd = True
    noise_pd = True
    zero_cost = bool(np.max(np.abs(spec.Psi)) <= 1e-12)
    for t in grid:
        y21, u22 = spec.Y21(t), spec.U22(t)
        C = spec.Q11(t) + y21.T @ np.linalg.solve(u22, y21)
        lam = np.min(np.linalg.eigvalsh(0.5 * (C + C.T)))
        if lam < -1e-10 and state_cost_psd:
            state_cost_psd = False
            witnesses["state_cost"] = (t, lam)
        if np.max(np.abs(C)) > 1e-10 and zero_cost:
            zero_cost = False
            witnesses["nonzero_cost"] = t
        B = 2.0 * np.linalg.solve(u22, y21)
        bsb = B @ (0.5 * spec.U11(t)) @ B.T
        mu = np.min(np.linalg.eigvalsh(0.5 * (bsb + bsb.T)))
        if mu <= 1e-12 * max(1.0, np.max(np.abs(bsb))) and noise_pd:
            noise_pd = False
            witnesses["noise_coupling"] = (t, mu)

    commutes = True
    worst = 0.0
    ys = [spec.Y11(t) for t in grid]
    for i in range(len(grid)):
        for j in range(i + 1, len(grid)):
            defect = np.max(np.abs(ys[i] @ ys[j] - ys[j] @ ys[i]))
            if defect > worst:
                worst = defect
                witnesses["commutator"] = (grid[i], grid[j], defect)
    if worst > 1e-10:
        commutes = False
    return AssumptionReport(state_cost_psd, noise_pd, commutes, zero_cost, witnesses)


def _integrate_backward(coeffs, grid, scheme, norm_cap):
    grid = np.asarray(grid, dtype=float)
    n = coeffs.n
    N = len(grid)
    P = np.empty((N, n, n))
    P[-1] = 0.5 * (coeffs.P_T + coeffs.P_T.T)
    for i in range(N - 2, -1, -1):
        t0, t1 = grid[i], grid[i + 1]
        h = t1 - t0  # positive; we step from t1 down to t0
        p1 = P[i + 1]
        if scheme == "explicit-rk4":
            k1 = coeffs.rhs(t1, p1)
            k2 = coeffs.rhs(t1 - 0.5 * h, p1 - 0.5 * h * k1)
            k3 = coeffs.rhs(t1 - 0.5 * h, p1 - 0.5 * h * k2)
            k4 = coeffs.rhs(t0, p1 - h * k3)
            p0 = p1 - (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        elif scheme == "implicit-euler":
            p0 = p1.copy()
            for _ in range(100):
                nxt = p1 - h * coeffs.rhs(t0, p0)
                if np.max(np.abs(nxt - p0)) <= 1e-12 * max(1.0, np.max(np.abs(nxt))):
                    p0 = nxt
                    break
                p0 = nxt
            else:
                raise NoConvergenceError(
                    f"implicit step at t={t0:.6g} did not converge in 100 iterations")
        else:
            raise ValueError(f"unknown scheme {scheme!r}")
        p0 = 0.5 * (p0 + p0.T)
        norm = np.max(np.abs(p0))
        if not np.isfinite(norm) or norm > norm_cap:
            raise BlowUpError(t0, norm)
        P[i] = p0
    return P


def _central_residual(coeffs, grid, P):
    """Max finite-difference defect of the path against the right-hand side.

    Uses fourth-order five-point stencils on uniform interiors (terminal
    boundary layers otherwise dominate the estimate with second-order
    truncation error); falls back to second-order central differences on
    non-uniform grids or very short paths.
    """
    N = len(grid)
    hs = np.diff(grid)
    uniform = N >= 5 and np.ptp(hs) <= 1e-12 * hs[0]
    worst = 0.0
    for i in range(1, N - 1):
        if uniform:
            h = hs[0]
            if i == 1:
                dP = (-3 * P[0] - 10 * P[1] + 18 * P[2] - 6 * P[3] + P[4]) / (12 * h)
            elif i == N - 2:
                dP = (3 * P[-1] + 10 * P[-2] - 18 * P[-3] + 6 * P[-4] - P[-5]) / (12 * h)
            else:
                dP = (-P[i + 2] + 8 * P[i + 1] - 8 * P[i - 1] + P[i - 2]) / (12 * h)
        else:
            dP = (P[i + 1] - P[i - 1]) / (grid[i + 1] - grid[i - 1])
        res = np.max(np.abs(dP - coeffs.rhs(grid[i], P[i])))
        worst = max(worst, res)
    return worst


def solve_dre(coeffs, grid, scheme="explicit-rk4", norm_cap=1e12):
    """Integrate the DRE backward from the terminal condition.

    Parameters
    ----------
    coeffs : DRECoefficients
    grid : array
        Strictly increasing times ending at the horizon.
    scheme : {"explicit-rk4", "implicit-euler"}
    norm_cap : float
        Max-norm cap; exceeding it raises BlowUpError with the failure time.

    Returns
    -------
    RiccatiSolution
        Symmetrized path with a central-difference residual diagnostic.
    """
    grid = np.asarray(grid, dtype=float)
    if len(grid) < 2 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing with >= 2 points")
    P = _integrate_backward(coeffs, grid, scheme, norm_cap)
    return RiccatiSolution(grid, P, scheme, _central_residual(coeffs, grid, P),
                           block=coeffs.block)


def transform_shift(sol, coeffs, K):
    """Shift a solved problem by a constant matrix K.

    Returns the shifted problem (same quadratic coefficient U) with

        Y~ = Y + U K,   Q~ = Q + K U K + Y' K + K Y,
        P~(T) = P(T) - K,

    and its solution path P(t) - K.
    """
    K = np.atleast_2d(np.asarray(K, dtype=float))
    if K.shape != (coeffs.n, coeffs.n):
        raise ValueError("shift matrix has wrong shape")

    def Y(t, _c=coeffs, _K=K):
        return _c.Y(t) + _c.U(t) @ _K

    def Q(t, _c=coeffs, _K=K):
        y = _c.Y(t)
        return _c.Q(t) + _K @ _c.U(t) @ _K + y.T @ _K + _K @ y

    new = DRECoefficients(coeffs.n, Q, Y, coeffs.U, coeffs.P_T - K)
    P = sol.P - K[None, :, :]
    return new, RiccatiSolution(sol.grid, P, sol.scheme,
                                _central_residual(new, sol.grid, P))


def transform_congruence(sol, coeffs, Z, Zprime=None):
    """Congruence-transform a solved problem by an invertible Z(t).

    The transformed problem has

        Y_ = Z^-1 Y Z + Z^-1 Z',   U_ = Z^-1 U Z^-T,   Q_ = Z' Q Z,

    terminal Z(T)' P(T) Z(T), and solution path Z(t)' P(t) Z(t).
    Z' is finite-differenced when not supplied.
    """
    Zf = as_matrix_function(Z)
    if Zprime is None:
        def Zp(t, _z=Zf, _h=1e-6):
            return (_z(t + _h) - _z(t - _h)) / (2 * _h)
    else:
        Zp = as_matrix_function(Zprime)

    def _inv(t):
        z = Zf(t)
        if abs(np.linalg.det(z)) < 1e-300:
            raise np.linalg.LinAlgError(f"Z({t}) is singular")
        return np.linalg.inv(z)

    def Y(t):
        zi = _inv(t)
        return zi @ coeffs.Y(t) @ Zf(t) + zi @ Zp(t)

    def U(t):
        zi = _inv(t)
        return zi @ coeffs.U(t) @ zi.T

    def Q(t):
        z = Zf(t)
        return z.T @ coeffs.Q(t) @ z

    zT = Zf(sol.grid[-1])
    new = DRECoefficients(coeffs.n, Q, Y, U, zT.T @ coeffs.P_T @ zT)
    P = np.array([Zf(t).T @ p @ Zf(t) for t, p in zip(sol.grid, sol.P)])
    return new, RiccatiSolution(sol.grid, P, sol.scheme,
                                _central_residual(new, sol.grid, P))


def _quad_nodes(a, b, step):
    n = max(2, int(np.ceil((b - a) / step)))
    if n % 2 == 1:
        n += 1  # even interval count for Simpson
    return np.linspace(a, b, n + 1)


def _psd_sqrt(m):
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    w = np.clip(w, 0.0, None)
    return v @ np.diag(np.sqrt(w)) @ v.T


def apriori_bounds(spec, t, quadrature_step=1e-2, horizon=None):
    """A-priori lower/upper bounds for the solution at time ``t``.

    The lower bound is assembled from quadratures of the uncontrolled
    state flow (matrix exponentials of the integrated feedback matrix,
    valid under the commutation condition); the upper bound solves a
    linear matrix ODE driven by the noise-coupling matrix B Sigma B'.

    Returns ``(lower, upper)`` as symmetric (d+r) x (d+r) matrices.
    Bound violations by an actual solution are diagnostics for the
    caller; this function only builds the two matrices.
    """
    d, r, rho = spec.d, spec.r, spec.rho
    T = float(horizon) if horizon is not None else 1.0
    if horizon is None:
        raise ValueError("horizon (terminal time) is required")
    T = float(horizon)

    nodes = _quad_nodes(t, T, quadrature_step) if T > t else np.array([t, t])

    rep = check_assumptions(spec, nodes[:: max(1, len(nodes) // 8)])
    if not rep.feedback_commutes:
        raise NonCommutingError("feedback matrices do not commute on the grid")

    def R(s):
        return -spec.Y11(s)

    def Sigma(s):
        return 0.5 * spec.U11(s)

    def Bmat(s):
        return 2.0 * np.linalg.solve(spec.U22(s), spec.Y21(s))

    def Cmat(s):
        y21 = spec.Y21(s)
        return spec.Q11(s) + y21.T @ np.linalg.solve(spec.U22(s), y21)

    # cumulative integral of R from t, evaluated at the Simpson nodes
    Rvals = np.array([R(s) for s in nodes])
    cumR = np.zeros_like(Rvals)
    for i in range(1, len(nodes)):
        cumR[i] = cumR[i - 1] + 0.5 * (nodes[i] - nodes[i - 1]) * (Rvals[i] + Rvals[i - 1])
    flows = np.array([expm(c) for c in cumR])          # R_(t, s)
    Vt = _psd_sqrt(Sigma(t))
    Vbar = flows @ Vt                                   # V_(t, s)

    # lower bound quadratures
    Cs = np.array([Cmat(s) for s in nodes])
    RtT = simpson(np.einsum("kij,kil,klm->kjm", flows, Cs, flows), x=nodes, axis=0)
    SigU = simpson(np.einsum("kij,kmj->kim", Vbar, Vbar), x=nodes, axis=0)  # Sigma_(t,T)

    # inner integral int_s^T Vbar(t,u) du, then G(s) = R_(t,s)' C(s) * inner(s)
    inner = np.zeros_like(Vbar)
    for i in range(len(nodes) - 2, -1, -1):
        inner[i] = inner[i + 1] + 0.5 * (nodes[i + 1] - nodes[i]) * (Vbar[i + 1] + Vbar[i])
    G = np.einsum("kij,kil,klm->kjm", flows, Cs, inner)
    SigTilde = simpson(np.einsum("kji,kjm->kim", G, G), x=nodes, axis=0)

    RT = flows[-1]
    SigVee = simpson(
        np.einsum("ij,kjl,kml,nm->kin",
                  RT @ spec.Psi, Vbar, Vbar, (RT @ spec.Psi)),
        x=nodes, axis=0)

    M1_lo = RtT - 2.0 * rho * (SigTilde + SigVee) + RT.T @ spec.Psi @ RT
    M2_lo = -0.5 * rho * RT.T @ spec.Upsilon
    M3_lo = -2.0 * rho ** 2 * spec.Upsilon.T @ SigU @ spec.Upsilon - rho * spec.Gamma
    lower = np.zeros((d + r, d + r))
    lower[:d, :d] = 0.5 * (M1_lo + M1_lo.T)
    lower[:d, d:] = M2_lo
    lower[d:, :d] = M2_lo.T
    lower[d:, d:] = 0.5 * (M3_lo + M3_lo.T)

    # upper bound: backward linear ODE for the state-block coefficient
    def Bdot(s, h=1e-6):
        return (Bmat(s + h) - Bmat(s - h)) / (2 * h)

    def lin_rhs(s, M):
        Bs = Bmat(s)
        bsb = Bs @ Sigma(s) @ Bs.T
        mu = np.min(np.abs(np.linalg.eigvalsh(0.5 * (bsb + bsb.T))))
        if mu <= 1e-14 * max(1.0, np.max(np.abs(bsb))):
            raise SingularBSBError(f"B Sigma B' singular at s={s:.6g}")
        bsb_inv = np.linalg.inv(bsb)
        Rbar = Bdot(s) + Bs @ R(s)
        Rcheck = Rbar.T @ bsb_inv @ Rbar
        Rtilde = -R(s).T + Rbar.T @ bsb_inv @ Bs @ Sigma(s)
        return -(0.5 / rho) * Rcheck + Rtilde.T @ M + M @ Rtilde

    M1_up = np.zeros((d, d))
    for i in range(len(nodes) - 2, -1, -1):
        h = nodes[i + 1] - nodes[i]
        s1 = nodes[i + 1]
        k1 = lin_rhs(s1, M1_up)
        k2 = lin_rhs(s1 - 0.5 * h, M1_up - 0.5 * h * k1)
        k3 = lin_rhs(s1 - 0.5 * h, M1_up - 0.5 * h * k2)
        k4 = lin_rhs(nodes[i], M1_up - h * k3)
        M1_up = M1_up - (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        M1_up = 0.5 * (M1_up + M1_up.T)

    Bt = Bmat(t)
    upper = np.zeros((d + r, d + r))
    upper[:d, :d] = M1_up
    upper[:d, d:] = 0.5 * Bt.T
    upper[d:, :d] = 0.5 * Bt
    return lower, upper
