"""Operator-splitting solver for convex QPs of the form

    minimize    0.5 z'Pz + q'z
    subject to  l <= Az <= u

with P positive semidefinite and two-sided (possibly infinite) row bounds.
The ADMM scheme follows the OSQP construction: a quasidefinite KKT system is
factorized once and reused every iteration, which is what makes warm starts
cheap. An active-set polish step recovers machine-precision KKT residuals
when it succeeds. All arithmetic is deterministic.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

INF = np.inf

SOLVED = "solved"
MAX_ITERS = "max_iters"
PRIMAL_INFEASIBLE = "primal_infeasible"
DUAL_INFEASIBLE = "dual_infeasible"

_SYM_TOL = 1e-9
_STATIC_REG = 1e-9
_RHO_EQ_SCALE = 1e3
_RHO_MIN, _RHO_MAX = 1e-6, 1e6


@dataclass(frozen=True)
class QpProblem:
    P: sp.csc_matrix
    q: np.ndarray
    A: sp.csc_matrix
    l: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        P = sp.csc_matrix(self.P)
        A = sp.csc_matrix(self.A)
        q = np.asarray(self.q, dtype=np.float64).ravel()
        l = np.asarray(self.l, dtype=np.float64).ravel()
        u = np.asarray(self.u, dtype=np.float64).ravel()
        n = q.shape[0]
        m = A.shape[0]
        if P.shape != (n, n) or A.shape[1] != n or l.shape != (m,) or u.shape != (m,):
            raise ValueError("inconsistent QP dimensions")
        asym = abs(P - P.T)
        if asym.nnz and asym.max() > _SYM_TOL * max(1.0, abs(P).max()):
            raise ValueError("P must be symmetric")
        if np.any(l > u):
            raise ValueError("lower bounds exceed upper bounds")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "l", l)
        object.__setattr__(self, "u", u)

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def m(self) -> int:
        return self.l.shape[0]

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ (self.P @ z) + self.q @ z)


@dataclass(frozen=True)
class QpSettings:
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    eps_abs: float = 1e-6
    eps_rel: float = 0.0
    eps_pinf: float = 1e-6
    eps_dinf: float = 1e-6
    max_iter: int = 20000
    check_interval: int = 25
    scaling_iters: int = 10
    adaptive_rho: bool = True
    adaptive_rho_interval: int = 100
    polish: bool = True
    polish_delta: float = 1e-7
    polish_refine_iters: int = 5


@dataclass
class QpSolution:
    z: np.ndarray
    y: np.ndarray
    status: str
    primal_residual: float
    dual_residual: float
    iterations: int
    objective: float
    polished: bool = False
    solve_time: float = 0.0


def warm_start_distance(sol_a: QpSolution, sol_b: QpSolution) -> float:
    """Euclidean distance between two primal solutions."""
    return float(np.linalg.norm(sol_a.z - sol_b.z))


def _check_psd(P: sp.csc_matrix):
    d = P.diagonal()
    scale = max(1.0, abs(P).max() if P.nnz else 0.0)
    if np.any(d < -_SYM_TOL * scale):
        raise ValueError("P is not positive semidefinite (negative diagonal)")
    if P.shape[0] <= 400:
        w = np.linalg.eigvalsh(P.toarray())
        if w.min() < -1e-8 * scale:
            raise ValueError("P is not positive semidefinite")


def _ruiz_scaling(P, q, A, l, u, iters):
    """Modified Ruiz equilibration; returns scaled data and (D, E, c)."""
    n, m = q.shape[0], l.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    c = 1.0
    Ps, qs, As = P.copy(), q.copy(), A.copy()
    ls, us = l.copy(), u.copy()
    for _ in range(iters):
        # column infinity norms of the stacked [P; A] and of A^T
        col_p = np.asarray(abs(Ps).max(axis=0).todense()).ravel() if Ps.nnz else np.zeros(n)
        col_a = np.asarray(abs(As).max(axis=0).todense()).ravel() if As.nnz else np.zeros(n)
        dx = np.sqrt(np.maximum(col_p, col_a))
        dx[dx < 1e-12] = 1.0
        dx = 1.0 / dx
        row_a = np.asarray(abs(As).max(axis=1).todense()).ravel() if As.nnz else np.zeros(m)
        dz = np.sqrt(row_a)
        dz[dz < 1e-12] = 1.0
        dz = 1.0 / dz
        Dx = sp.diags(dx)
        Dz = sp.diags(dz)
        Ps = (Dx @ Ps @ Dx).tocsc()
        qs = dx * qs
        As = (Dz @ As @ Dx).tocsc()
        ls = dz * ls
        us = dz * us
        D *= dx
        E *= dz
        # cost normalization
        col_p = np.asarray(abs(Ps).max(axis=0).todense()).ravel() if Ps.nnz else np.zeros(n)
        mean_p = col_p.mean() if n else 0.0
        gamma = max(mean_p, float(np.linalg.norm(qs, np.inf)) if n else 0.0)
        gamma = 1.0 / gamma if gamma > 1e-12 else 1.0
        Ps = Ps * gamma
        qs = qs * gamma
        c *= gamma
    return Ps.tocsc(), qs, As.tocsc(), ls, us, D, E, c


class _Workspace:
    """Scaled problem data plus the factorized KKT system."""

    def __init__(self, prob: QpProblem, settings: QpSettings):
        self.settings = settings
        self.n, self.m = prob.n, prob.m
        P = (prob.P + _STATIC_REG * sp.eye(prob.n, format="csc")).tocsc()
        if settings.scaling_iters > 0 and prob.m > 0:
            (self.P, self.q, self.A, self.l, self.u,
             self.D, self.E, self.c) = _ruiz_scaling(P, prob.q, prob.A, prob.l, prob.u,
                                                     settings.scaling_iters)
        else:
            self.P, self.q, self.A = P, prob.q.copy(), prob.A.copy()
            self.l, self.u = prob.l.copy(), prob.u.copy()
            self.D, self.E, self.c = np.ones(prob.n), np.ones(prob.m), 1.0
        self.eq_rows = np.isfinite(prob.l) & np.isfinite(prob.u) & (prob.u - prob.l < 1e-12)
        self.rho_vec = np.full(self.m, settings.rho)
        self.rho_vec[self.eq_rows] *= _RHO_EQ_SCALE
        self._factorize()

    def _factorize(self):
        n, m = self.n, self.m
        if m > 0:
            K = sp.bmat(
                [
                    [self.P + self.settings.sigma * sp.eye(n), self.A.T],
                    [self.A, -sp.diags(1.0 / self.rho_vec)],
                ],
                format="csc",
            )
        else:
            K = (self.P + self.settings.sigma * sp.eye(n)).tocsc()
        self.kkt = spla.splu(K)

    def update_rho(self, scale: float):
        self.rho_vec = np.clip(self.rho_vec * scale, _RHO_MIN, _RHO_MAX)
        self._factorize()


def solve_qp(prob: QpProblem, settings: QpSettings | None = None,
             z0: np.ndarray | None = None, y0: np.ndarray | None = None) -> QpSolution:
    """Solve the QP; optional (z0, y0) warm-start the splitting iteration."""
    t0 = time.perf_counter()
    settings = settings or QpSettings()
    _check_psd(prob.P)
    ws = _Workspace(prob, settings)
    n, m = ws.n, ws.m

    # iterates live in scaled space
    if z0 is not None:
        x = np.asarray(z0, float) / ws.D
    else:
        x = np.zeros(n)
    if m > 0:
        z = np.clip(ws.A @ x, ws.l, ws.u)
        y = ws.c * (np.asarray(y0, float) / ws.E) if y0 is not None else np.zeros(m)
    else:
        z = np.zeros(0)
        y = np.zeros(0)

    status = MAX_ITERS
    r_prim = r_dual = np.inf
    iterations = settings.max_iter
    x_prev = x.copy()
    y_prev = y.copy()

    for k in range(1, settings.max_iter + 1):
        x_prev[:] = x
        y_prev[:] = y
        if m > 0:
            rhs = np.concatenate([settings.sigma * x - ws.q, z - y / ws.rho_vec])
            sol = ws.kkt.solve(rhs)
            x_t = sol[:n]
            nu = sol[n:]
            z_t = z + (nu - y) / ws.rho_vec
            x = settings.alpha * x_t + (1 - settings.alpha) * x
            z_mid = settings.alpha * z_t + (1 - settings.alpha) * z
            z = np.clip(z_mid + y / ws.rho_vec, ws.l, ws.u)
            y = y + ws.rho_vec * (z_mid - z)
        else:
            x = ws.kkt.solve(-ws.q)

        if k % settings.check_interval == 0 or k == settings.max_iter or m == 0:
            r_prim, r_dual, eps_prim, eps_dual = _residuals(ws, x, z, y, settings)
            if r_prim <= eps_prim and r_dual <= eps_dual:
                status = SOLVED
                iterations = k
                break
            if m > 0:
                if _primal_infeasible(ws, y - y_prev, settings):
                    status = PRIMAL_INFEASIBLE
                    iterations = k
                    break
                if _dual_infeasible(ws, x - x_prev, settings):
                    status = DUAL_INFEASIBLE
                    iterations = k
                    break
            if (settings.adaptive_rho and m > 0
                    and k % settings.adaptive_rho_interval == 0 and k < settings.max_iter):
                scale = _rho_rescale(ws, x, z, y, r_prim, r_dual)
                if scale > 5.0 or scale < 0.2:
                    ws.update_rho(scale)

    # unscale
    z_out = ws.D * x
    y_out = (ws.E * y) / ws.c if m > 0 else np.zeros(0)
    r_prim, r_dual = _unscaled_residuals(prob, z_out, y_out)
    sol = QpSolution(
        z=z_out, y=y_out, status=status,
        primal_residual=r_prim, dual_residual=r_dual,
        iterations=iterations, objective=prob.objective(z_out),
    )
    if status in (SOLVED, MAX_ITERS) and settings.polish and m > 0:
        _polish(prob, sol, settings)
        # the polished point is verified directly, so it can rescue a run that
        # hit the iteration cap
        if (sol.polished and status == MAX_ITERS
                and max(sol.primal_residual, sol.dual_residual) <= settings.eps_abs):
            sol.status = SOLVED
    sol.solve_time = time.perf_counter() - t0
    return sol


def _residuals(ws, x, z, y, settings):
    """Unscaled residuals plus the (absolute + relative) tolerances."""
    if ws.m > 0:
        Ax = ws.A @ x
        r_prim_vec = (Ax - z) / ws.E
        r_prim = float(np.linalg.norm(r_prim_vec, np.inf))
        max_prim = max(
            float(np.linalg.norm(Ax / ws.E, np.inf)),
            float(np.linalg.norm(z / ws.E, np.inf)),
        )
        Aty = ws.A.T @ y
    else:
        r_prim = 0.0
        max_prim = 0.0
        Aty = np.zeros(ws.n)
    Px = ws.P @ x
    r_dual_vec = (Px + ws.q + Aty) / ws.D / ws.c
    r_dual = float(np.linalg.norm(r_dual_vec, np.inf))
    max_dual = max(
        float(np.linalg.norm(Px / ws.D / ws.c, np.inf)),
        float(np.linalg.norm(ws.q / ws.D / ws.c, np.inf)),
        float(np.linalg.norm(Aty / ws.D / ws.c, np.inf)),
    )
    eps_prim = settings.eps_abs + settings.eps_rel * max_prim
    eps_dual = settings.eps_abs + settings.eps_rel * max_dual
    return r_prim, r_dual, eps_prim, eps_dual


def _unscaled_residuals(prob: QpProblem, z: np.ndarray, y: np.ndarray):
    if prob.m > 0:
        Az = prob.A @ z
        below = np.maximum(prob.l - Az, 0.0)
        above = np.maximum(Az - prob.u, 0.0)
        r_prim = float(max(below.max(initial=0.0), above.max(initial=0.0)))
        Aty = prob.A.T @ y
    else:
        r_prim = 0.0
        Aty = np.zeros(prob.n)
    r_dual = float(np.linalg.norm(prob.P @ z + prob.q + Aty, np.inf))
    return r_prim, r_dual


def _primal_infeasible(ws, dy, settings) -> bool:
    dy = dy * ws.E / ws.c
    norm = np.linalg.norm(dy, np.inf)
    if norm <= settings.eps_pinf:
        return False
    dy = dy / norm
    # certificate requires zero multipliers against infinite bounds
    if np.any((dy > settings.eps_pinf) & ~np.isfinite(ws.u)):
        return False
    if np.any((dy < -settings.eps_pinf) & ~np.isfinite(ws.l)):
        return False
    u = ws.u / ws.E
    l = ws.l / ws.E
    pos = np.where(np.isfinite(u), u, 0.0) @ np.maximum(dy, 0.0)
    neg = np.where(np.isfinite(l), l, 0.0) @ np.minimum(dy, 0.0)
    if pos + neg >= -settings.eps_pinf:
        return False
    At_dy = (ws.A.T @ (dy / ws.E)) / ws.D
    return bool(np.linalg.norm(At_dy, np.inf) < settings.eps_pinf)


def _dual_infeasible(ws, dx, settings) -> bool:
    dx = dx * ws.D
    norm = np.linalg.norm(dx, np.inf)
    if norm <= settings.eps_dinf:
        return False
    dx = dx / norm
    if (ws.q / ws.D / ws.c) @ dx >= -settings.eps_dinf:
        return False
    Pdx = (ws.P @ (dx / ws.D)) / ws.D / ws.c
    if np.linalg.norm(Pdx, np.inf) >= settings.eps_dinf:
        return False
    Adx = (ws.A @ (dx / ws.D)) / ws.E
    u = ws.u / ws.E
    l = ws.l / ws.E
    bad_up = np.isfinite(u) & (Adx > settings.eps_dinf)
    bad_lo = np.isfinite(l) & (Adx < -settings.eps_dinf)
    return not (np.any(bad_up) or np.any(bad_lo))


def _rho_rescale(ws, x, z, y, r_prim, r_dual) -> float:
    if ws.m == 0:
        return 1.0
    Ax = ws.A @ x
    denom_p = max(
        float(np.linalg.norm(Ax / ws.E, np.inf)),
        float(np.linalg.norm(z / ws.E, np.inf)),
        1e-12,
    )
    Px = ws.P @ x
    Aty = ws.A.T @ y
    denom_d = max(
        float(np.linalg.norm(Px / ws.D / ws.c, np.inf)),
        float(np.linalg.norm(ws.q / ws.D / ws.c, np.inf)),
        float(np.linalg.norm(Aty / ws.D / ws.c, np.inf)),
        1e-12,
    )
    ratio = (r_prim / denom_p) / max(r_dual / denom_d, 1e-12)
    return float(np.sqrt(ratio))


def _active_set_solve(prob: QpProblem, lower: np.ndarray, upper: np.ndarray,
                      settings: QpSettings):
    """Equality-constrained solve on a guessed active set, with refinement."""
    n = prob.n
    n_l, n_u = int(lower.sum()), int(upper.sum())
    A_l = prob.A[lower]
    A_u = prob.A[upper]
    delta = settings.polish_delta
    K = sp.bmat(
        [
            [prob.P + delta * sp.eye(n), A_l.T, A_u.T],
            [A_l, -delta * sp.eye(n_l) if n_l else None, None],
            [A_u, None, -delta * sp.eye(n_u) if n_u else None],
        ],
        format="csc",
    )
    K_exact = sp.bmat(
        [
            [prob.P, A_l.T, A_u.T],
            [A_l, sp.csc_matrix((n_l, n_l)), None],
            [A_u, None, sp.csc_matrix((n_u, n_u))],
        ],
        format="csc",
    )
    rhs = np.concatenate([-prob.q, prob.l[lower], prob.u[upper]])
    try:
        lu = spla.splu(K)
    except RuntimeError:
        return None, None
    t = lu.solve(rhs)
    for _ in range(settings.polish_refine_iters):
        t = t + lu.solve(rhs - K_exact @ t)
    if not np.all(np.isfinite(t)):
        return None, None
    z = t[:n]
    y = np.zeros(prob.m)
    y[lower] = t[n:n + n_l]
    y[upper] = t[n + n_l:]
    return z, y


def _polish(prob: QpProblem, sol: QpSolution, settings: QpSettings):
    """Finish to machine precision via active-set solves with repair.

    The initial active-set guess comes from the splitting dual signs; repair
    rounds add violated rows and drop rows whose multiplier sign is wrong.
    The polished point is accepted only if it improves both residuals.
    """
    eq = np.isfinite(prob.l) & np.isfinite(prob.u) & (prob.u - prob.l < 1e-12)
    lower = (sol.y < 0) & ~eq
    upper = (sol.y > 0) | eq
    tol = 10 * max(settings.eps_abs, 1e-9)
    sign_tol = max(settings.eps_abs, 1e-9)
    best = None
    for _ in range(8):
        z, y = _active_set_solve(prob, lower, upper, settings)
        if z is None:
            break
        r_prim, r_dual = _unscaled_residuals(prob, z, y)
        # a candidate is a KKT point only if the active multipliers push
        # against their own bound; stationarity alone is not enough
        wrong_sign = max(
            float(y[lower].max(initial=0.0)),
            float((-y[upper & ~eq]).max(initial=0.0)),
        )
        if wrong_sign <= sign_tol and (
                best is None or max(r_prim, r_dual) < max(best[2], best[3])):
            best = (z, y, r_prim, r_dual)
        if best is not None and max(best[2], best[3]) <= 1e-9 * max(1.0, float(np.abs(z).max())):
            break
        Az = prob.A @ z
        add_lo = (prob.l - Az > tol) & ~lower & ~eq
        add_up = (Az - prob.u > tol) & ~upper & ~eq
        drop_lo = lower & (y > sign_tol)
        drop_up = upper & (y < -sign_tol) & ~eq
        if not (add_lo.any() or add_up.any() or drop_lo.any() or drop_up.any()):
            break
        lower = (lower | add_lo) & ~drop_lo
        upper = (upper | add_up) & ~drop_up
    if best is None:
        return
    z, y, r_prim, r_dual = best
    if (r_prim <= max(sol.primal_residual, settings.eps_abs)
            and r_dual <= max(sol.dual_residual, settings.eps_abs)
            and max(r_prim, r_dual) <= max(sol.primal_residual, sol.dual_residual)):
        sol.z = z
        sol.y = y
        sol.primal_residual = r_prim
        sol.dual_residual = r_dual
        sol.objective = prob.objective(z)
        sol.polished = True
