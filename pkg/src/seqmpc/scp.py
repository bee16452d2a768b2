"""Sequential convex programming driver.

Each iteration linearizes the dynamics and keep-out constraints around a
dynamically consistent reference (the rollout of the previous controls),
solves one convex subproblem with an infinity-norm trust region, accepts the
result, and shrinks the trust region geometrically.  Convergence requires
both a small cost change and feasibility of the *nonlinear* constraints on
the rolled-out candidate, so the returned trajectory always satisfies the
true dynamics.

The obstacle-free relaxation (REL) uses the same machinery with the keep-out
set stripped; its objective lower-bounds the full problem on full-horizon
solves.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .core import EPS_FEAS, RawTrajectory, running_cost
from .qp import MAX_ITERS, SOLVED, QpProblem, QpSettings, solve_qp
from .scenarios import (FREEFLYER, ProblemSpec, actuation_halfspaces, grid_path,
                        linearize, path_reference_states)

NONE = "none"
TARGET_STATE = "target_state"


@dataclass(frozen=True)
class OcpWindow:
    """Index window [start, start+horizon] over a trajectory of full_horizon steps.

    Indices are 0-based: states carry indices start..start+horizon, and the
    window's terminal state coincides with the goal state iff
    start + horizon == full_horizon.
    """

    start_index: int
    horizon: int
    full_horizon: int

    def __post_init__(self):
        if not (0 <= self.start_index and self.horizon > 0
                and self.start_index + self.horizon <= self.full_horizon):
            raise ValueError("invalid window")

    @property
    def reaches_goal(self) -> bool:
        return self.start_index + self.horizon == self.full_horizon

    @staticmethod
    def full(n_steps: int) -> "OcpWindow":
        return OcpWindow(0, n_steps, n_steps)


@dataclass(frozen=True)
class TerminalCost:
    """Quadratic penalty sum_j w_j (x_j - xref_j)^2 on the window's final state."""

    kind: str = NONE
    x_ref: np.ndarray | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in (NONE, TARGET_STATE):
            raise ValueError(f"unknown terminal cost kind {self.kind!r}")
        if self.kind == TARGET_STATE:
            x_ref = np.asarray(self.x_ref, dtype=np.float64)
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != x_ref.shape or np.any(w < 0):
                raise ValueError("terminal weights must be nonnegative and match x_ref")
            object.__setattr__(self, "x_ref", x_ref)
            object.__setattr__(self, "weights", w)

    def value(self, x: np.ndarray) -> float:
        if self.kind == NONE:
            return 0.0
        d = np.asarray(x) - self.x_ref
        return float(self.weights @ (d * d))


@dataclass(frozen=True)
class ScpSettings:
    trust_region_init: float | None = None   # None: workspace diameter / 4
    trust_region_shrink: float = 0.8
    trust_region_floor: float = 1e-3
    j_tol: float = 1e-4
    eps_feas: float = EPS_FEAS
    max_iterations: int = 30
    penalty_weight: float = 1e3
    penalty_growth: float = 2.0
    # push keep-out-violating warm starts to one obstacle side before the
    # first linearization; no-op on feasible warm starts
    detour_warm_start: bool = True
    # give up early when the violation plateaus far from feasible (blocked
    # geometry); the best iterate is still returned with converged=False
    stall_window: int = 3
    stall_violation: float = 1e-3
    # proximal damping toward the reference; vanishes at the SCP fixed point.
    # Keeps the subproblem strongly convex (the l1 costs are otherwise linear).
    prox_control: float = 1e-2
    prox_state: float = 1e-5
    # optional loose first phase for the kernel tolerance; disabled by default
    # because tolerance-level noise on the l1 problems stalls the j_tol check
    loose_factor: float = 1.0
    qp: QpSettings = field(default_factory=lambda: QpSettings(
        eps_abs=1e-6, eps_rel=1e-6, max_iter=8000))


def default_scp_settings(spec: ProblemSpec, relaxation: bool = False, **overrides) -> ScpSettings:
    """Per-scenario solver defaults.

    The l1 free flyer problems favor a larger splitting step size than the
    quadratic quadrotor ones. Relaxation solves run the kernel tighter: their
    objective is used as a lower bound, and the obstacle-free problems are
    degenerate enough that the active-set polish cannot always stabilize a
    loosely solved iterate.
    """
    rho = 4.0 if spec.scenario_id == FREEFLYER else 0.1
    degenerate = relaxation or spec.n_obstacles == 0 or spec.scenario_id != FREEFLYER
    eps = 1e-6 if degenerate else 1e-5
    kwargs = dict(qp=QpSettings(rho=rho, eps_abs=eps, eps_rel=eps, max_iter=5000))
    kwargs.update(overrides)
    return ScpSettings(**kwargs)


@dataclass
class IterationDiag:
    objective: float
    trust_radius: float
    max_violation: float
    qp_iterations: int = 0


@dataclass
class SolveResult:
    trajectory: RawTrajectory
    objective: float
    scp_iterations: int
    converged: bool
    status: str
    per_iteration: list[IterationDiag]
    wall_time: float

    @property
    def total_cost(self) -> float:
        return self.trajectory.total_cost


def straight_line_reference(spec: ProblemSpec, x_init: np.ndarray, horizon: int,
                            x_end: np.ndarray | None = None) -> RawTrajectory:
    """Zero-control reference whose states interpolate x_init to x_end."""
    x_end = spec.goal if x_end is None else np.asarray(x_end, float)
    states = np.linspace(np.asarray(x_init, float), x_end, horizon + 1)
    n_u = spec.n_u
    return RawTrajectory(
        states=states,
        controls=np.zeros((horizon, n_u)),
        step_costs=np.zeros(horizon),
        violation_flags=np.zeros(horizon, dtype=int),
        dt=spec.dt,
    )


def trajectory_objective(spec: ProblemSpec, states: np.ndarray, controls: np.ndarray,
                         terminal: TerminalCost) -> float:
    cost = sum(running_cost(u, spec.p, spec.q) for u in controls)
    return cost + terminal.value(states[-1])


def detour_reference(spec: ProblemSpec, states: np.ndarray, pad: float = 0.02) -> np.ndarray:
    """Push keep-out-violating segments of a reference to one obstacle side.

    A reference that tunnels through an obstacle produces conflicting
    linearizations (early steps pushed one way, later steps the other), which
    is the main failure mode when warm-starting from the relaxation. Each
    contiguous violating run is projected radially outward along a single
    direction chosen from the run's entry/exit chord. Feasible references are
    returned unchanged.
    """
    d = spec.pos_dim
    out = np.array(states, dtype=float)
    n = out.shape[0]
    for c, radius in zip(spec.obstacle_centers, spec.obstacle_radii):
        margins = np.linalg.norm(out[:, :d] - c, axis=1) - radius
        inside = margins < 0
        if not inside.any():
            continue
        i = 0
        while i < n:
            if not inside[i]:
                i += 1
                continue
            j = i
            while j + 1 < n and inside[j + 1]:
                j += 1
            lo, hi = max(i - 1, 0), min(j + 1, n - 1)
            side = 0.5 * (out[lo, :d] + out[hi, :d]) - c
            if np.linalg.norm(side) < 1e-9:
                chord = out[hi, :d] - out[lo, :d]
                if d == 2:
                    side = np.array([-chord[1], chord[0]])
                else:
                    side = np.cross(chord, [0.0, 0.0, 1.0])
                if np.linalg.norm(side) < 1e-9:
                    side = np.zeros(d)
                    side[1] = 1.0
            side = side / np.linalg.norm(side)
            for k in range(i, j + 1):
                p = out[k, :d] - c
                radial = float(p @ side)
                tang = p - radial * side
                out[k, :d] = c + max(radial, radius + pad) * side + tang
            i = j + 1
    return out


def _terminal_correction(spec: ProblemSpec, x_init: np.ndarray, U: np.ndarray,
                         goal: np.ndarray, max_newton: int = 3,
                         defect_cap: float = 1e-2) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-norm control adjustment driving the rollout endpoint onto the goal.

    One Newton step is exact for affine dynamics; the loop handles the mildly
    nonlinear quadrotor. Corrections larger than defect_cap are left to the
    outer SCP iteration instead.
    """
    U = np.array(U, dtype=float)
    X = spec.rollout(x_init, U)
    H, n_u = U.shape
    for _ in range(max_newton):
        defect = goal - X[-1]
        norm = float(np.linalg.norm(defect, np.inf))
        if norm <= 1e-12 or norm > defect_cap:
            break
        # sensitivities of the terminal state wrt each control, backward pass
        G = np.empty((6, H * n_u))
        T = np.eye(6)
        for i in range(H - 1, -1, -1):
            lin = linearize(spec, X[i], U[i])
            G[:, i * n_u:(i + 1) * n_u] = T @ lin.B
            T = T @ lin.A
        dU, *_ = np.linalg.lstsq(G, defect, rcond=None)
        U = U + dU.reshape(H, n_u)
        X = spec.rollout(x_init, U)
    return X, U


def _max_violation(spec: ProblemSpec, states: np.ndarray, controls: np.ndarray,
                   hard_terminal: bool, goal: np.ndarray) -> float:
    worst = 0.0
    for i, u in enumerate(controls):
        worst = max(worst, spec.max_violation(states[i], u))
    # terminal state: position constraints only (no control attached)
    worst = max(worst, spec.max_violation(states[-1], np.zeros(spec.n_u)))
    if hard_terminal:
        worst = max(worst, float(np.max(np.abs(states[-1] - goal))))
    return worst


class _Subproblem:
    """Assembles the convex QP for one SCP iteration and unpacks its solution.

    Variable layout: window states, controls, then scenario extras (positive /
    negative control parts and per-thruster impulses for the free flyer,
    norm-epigraph variables for p=2, q=1), then keep-out slack variables.
    """

    def __init__(self, spec: ProblemSpec, horizon: int, hard_terminal: bool,
                 terminal: TerminalCost, goal: np.ndarray,
                 settings: "ScpSettings | None" = None):
        self.spec = spec
        self.H = horizon
        self.hard_terminal = hard_terminal
        self.terminal = terminal
        self.goal = goal
        self.settings = settings or ScpSettings()
        if (spec.p, spec.q) == (1, 2):
            raise NotImplementedError("p=1, q=2 running cost is not supported by the SCP kernel")
        H = horizon
        n_x, n_u = spec.n_x, spec.n_u
        self.M = spec.n_obstacles
        self.ff = spec.scenario_id == FREEFLYER
        self.epi = (spec.p, spec.q) == (2, 1)
        self.off_x = 0
        self.off_u = (H + 1) * n_x
        off = self.off_u + H * n_u
        if self.ff:
            self.off_up, off = off, off + H * n_u
            self.off_um, off = off, off + H * n_u
            self.off_dv, off = off, off + H * 8
        if self.epi:
            self.off_t, off = off, off + H
        self.off_s, off = off, off + (H + 1) * self.M
        self.n_vars = off
        # impulse-scale columns are ~100x smaller than position states;
        # scaling them keeps the splitting iteration well conditioned
        self.col_scale = np.ones(self.n_vars)
        if self.ff:
            self.col_scale[self.off_u:self.off_dv + H * 8] = spec.dv_max
            lam = spec.thruster_matrix
            trans = np.linalg.norm(lam[:2], axis=0).sum() * spec.dv_max
            spin = np.abs(lam[2]).sum() * spec.dv_max
            self.u_bound = np.array([trans, trans, spin])

    def x_idx(self, i: int) -> slice:
        return slice(self.off_x + i * self.spec.n_x, self.off_x + (i + 1) * self.spec.n_x)

    def u_idx(self, i: int) -> slice:
        return slice(self.off_u + i * self.spec.n_u, self.off_u + (i + 1) * self.spec.n_u)

    def build(self, x_init, X_ref, U_ref, trust_radius: float, penalty: float) -> QpProblem:
        spec, H = self.spec, self.H
        n_x, n_u = spec.n_x, spec.n_u
        rows_i, cols_i, vals = [], [], []
        l_list, u_list = [], []
        row = 0

        def add_entry(r, c, v):
            rows_i.append(r)
            cols_i.append(c)
            vals.append(v)

        def add_rows(count, lo, hi):
            nonlocal row
            l_list.append(np.broadcast_to(lo, (count,)).astype(float))
            u_list.append(np.broadcast_to(hi, (count,)).astype(float))
            row += count

        # initial state
        for j in range(n_x):
            add_entry(row + j, self.off_x + j, 1.0)
        add_rows(n_x, x_init, x_init)

        # linearized dynamics
        for i in range(H):
            lin = linearize(spec, X_ref[i], U_ref[i])
            xs, us, xn = self.x_idx(i), self.u_idx(i), self.x_idx(i + 1)
            for j in range(n_x):
                add_entry(row + j, xn.start + j, -1.0)
                for k in range(n_x):
                    if lin.A[j, k] != 0.0:
                        add_entry(row + j, xs.start + k, lin.A[j, k])
                for k in range(n_u):
                    if lin.B[j, k] != 0.0:
                        add_entry(row + j, us.start + k, lin.B[j, k])
            add_rows(n_x, -lin.c, -lin.c)

        # trust region boxes intersected with workspace position bounds
        pos_dim = spec.pos_dim
        lo_ws = np.full(n_x, -np.inf)
        hi_ws = np.full(n_x, np.inf)
        if self.ff:
            lo_ws[:pos_dim] = spec.table_lo
            hi_ws[:pos_dim] = spec.table_hi
        last_tr = H if not self.hard_terminal else H - 1
        for i in range(1, last_tr + 1):
            lo = np.maximum(X_ref[i] - trust_radius, lo_ws)
            hi = np.minimum(X_ref[i] + trust_radius, hi_ws)
            bad = lo > hi
            lo[bad] = lo_ws[bad] if np.any(np.isfinite(lo_ws[bad])) else X_ref[i][bad] - trust_radius
            hi[bad] = np.maximum(lo[bad], hi[bad])
            xs = self.x_idx(i)
            for j in range(n_x):
                add_entry(row + j, xs.start + j, 1.0)
            l_list.append(lo)
            u_list.append(hi)
            row += n_x

        # hard terminal equality
        if self.hard_terminal:
            xs = self.x_idx(H)
            for j in range(n_x):
                add_entry(row + j, xs.start + j, 1.0)
            add_rows(n_x, self.goal, self.goal)

        # free flyer actuation lift and l1 splitting
        if self.ff:
            for i in range(H):
                alloc = actuation_halfspaces(float(X_ref[i][2]), spec)
                us = self.u_idx(i)
                for j in range(n_u):
                    add_entry(row + j, us.start + j, 1.0)
                    for k in range(8):
                        if alloc.G[j, k] != 0.0:
                            add_entry(row + j, self.off_dv + i * 8 + k, -alloc.G[j, k])
                add_rows(n_u, 0.0, 0.0)
                for j in range(n_u):
                    add_entry(row + j, us.start + j, 1.0)
                    add_entry(row + j, self.off_up + i * n_u + j, -1.0)
                    add_entry(row + j, self.off_um + i * n_u + j, 1.0)
                add_rows(n_u, 0.0, 0.0)
            for k in range(H * 8):
                add_entry(row + k, self.off_dv + k, 1.0)
            add_rows(H * 8, 0.0, spec.dv_max)
            # the upper bound is implied by the impulse box; making it explicit
            # keeps the splitting variables compact
            up_hi = np.tile(self.u_bound, H)
            for k in range(H * n_u):
                add_entry(row + k, self.off_up + k, 1.0)
            l_list.append(np.zeros(H * n_u))
            u_list.append(up_hi.copy())
            row += H * n_u
            for k in range(H * n_u):
                add_entry(row + k, self.off_um + k, 1.0)
            l_list.append(np.zeros(H * n_u))
            u_list.append(up_hi.copy())
            row += H * n_u

        # outer linearization of t >= ||u||_2 for p=2, q=1
        if self.epi:
            for i in range(H):
                us = self.u_idx(i)
                dirs = list(np.eye(n_u)) + list(-np.eye(n_u))
                nrm = np.linalg.norm(U_ref[i])
                if nrm > 1e-9:
                    dirs.append(U_ref[i] / nrm)
                for d in dirs:
                    add_entry(row, self.off_t + i, 1.0)
                    for j in range(n_u):
                        if d[j] != 0.0:
                            add_entry(row, us.start + j, -d[j])
                    add_rows(1, 0.0, np.inf)

        # linearized keep-out zones with slack, plus slack nonnegativity
        if self.M > 0:
            centers = spec.obstacle_centers
            radii = spec.obstacle_radii
            P_ref = X_ref[:, :pos_dim]
            diffs = P_ref[:, None, :] - centers[None, :, :]
            dists = np.linalg.norm(diffs, axis=2)
            tied = dists < 1e-12
            if np.any(tied):
                diffs[tied] = 0.0
                diffs[tied, ..., 0] = 1e-9
                dists[tied] = 1e-9
            normals = diffs / dists[:, :, None]
            offsets = radii[None, :] + np.einsum("imk,mk->im", normals, centers)
            for i in range(H + 1):
                xs = self.x_idx(i)
                for m in range(self.M):
                    for k in range(pos_dim):
                        if normals[i, m, k] != 0.0:
                            add_entry(row, xs.start + k, normals[i, m, k])
                    add_entry(row, self.off_s + i * self.M + m, 1.0)
                    add_rows(1, offsets[i, m], np.inf)
            for k in range((H + 1) * self.M):
                add_entry(row + k, self.off_s + k, 1.0)
            add_rows((H + 1) * self.M, 0.0, np.inf)

        A = sp.csc_matrix((vals, (rows_i, cols_i)), shape=(row, self.n_vars))
        l = np.concatenate(l_list) if l_list else np.zeros(0)
        u = np.concatenate(u_list) if u_list else np.zeros(0)

        # objective
        q = np.zeros(self.n_vars)
        p_diag = np.zeros(self.n_vars)
        if (spec.p, spec.q) == (2, 2):
            p_diag[self.off_u:self.off_u + H * n_u] = 2.0
        elif (spec.p, spec.q) == (1, 1):
            q[self.off_up:self.off_up + 2 * H * n_u] = 1.0
        elif self.epi:
            q[self.off_t:self.off_t + H] = 1.0
        if self.M > 0:
            q[self.off_s:self.off_s + (H + 1) * self.M] = penalty
        if self.terminal.kind == TARGET_STATE:
            xs = self.x_idx(H)
            p_diag[xs] += 2.0 * self.terminal.weights
            q[xs] += -2.0 * self.terminal.weights * self.terminal.x_ref
        # proximal damping w*||v - v_ref||^2
        w_u = self.settings.prox_control
        if w_u > 0:
            sl = slice(self.off_u, self.off_u + H * n_u)
            p_diag[sl] += 2.0 * w_u
            q[sl] += -2.0 * w_u * U_ref.ravel()
        w_x = self.settings.prox_state
        if w_x > 0:
            sl = slice(self.off_x, self.off_x + (H + 1) * n_x)
            p_diag[sl] += 2.0 * w_x
            q[sl] += -2.0 * w_x * X_ref.ravel()

        # column scaling: solve in units where every variable is O(1)
        s = self.col_scale
        A = (A @ sp.diags(s)).tocsc()
        P = sp.diags(p_diag * s * s, format="csc")
        q = q * s
        return QpProblem(P, q, A, l, u)

    def pack(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        """Map a state/control reference into a (scaled) primal warm start."""
        z = np.zeros(self.n_vars)
        z[self.off_x:self.off_x + X.size] = X.ravel()
        z[self.off_u:self.off_u + U.size] = U.ravel()
        if self.ff:
            up = np.maximum(U, 0.0)
            um = np.maximum(-U, 0.0)
            z[self.off_up:self.off_up + U.size] = up.ravel()
            z[self.off_um:self.off_um + U.size] = um.ravel()
        if self.epi:
            z[self.off_t:self.off_t + self.H] = np.linalg.norm(U, axis=1)
        return z / self.col_scale

    def unpack(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        H, n_x, n_u = self.H, self.spec.n_x, self.spec.n_u
        z = z * self.col_scale
        X = z[self.off_x:self.off_x + (H + 1) * n_x].reshape(H + 1, n_x)
        U = z[self.off_u:self.off_u + H * n_u].reshape(H, n_u)
        return X, U


def solve_scp(spec: ProblemSpec, window: OcpWindow, warm_start: RawTrajectory,
              terminal: TerminalCost | None = None,
              settings: ScpSettings | None = None,
              x_init: np.ndarray | None = None) -> SolveResult:
    """Successive convexification of the windowed problem from a warm start.

    The warm start must cover the window (horizon+1 states, horizon controls).
    Returns the nonlinear rollout of the optimized controls.
    """
    t0 = time.perf_counter()
    settings = settings or default_scp_settings(spec)
    terminal = terminal or TerminalCost()
    H = window.horizon
    if warm_start.controls.shape[0] != H:
        raise ValueError(f"warm start covers {warm_start.controls.shape[0]} steps, window needs {H}")
    x_init = warm_start.states[0] if x_init is None else np.asarray(x_init, float)
    hard_terminal = window.reaches_goal
    sub = _Subproblem(spec, H, hard_terminal, terminal, spec.goal, settings)

    U_ref = np.array(warm_start.controls, dtype=float)
    X_ref = np.array(warm_start.states, dtype=float)
    if settings.detour_warm_start and spec.n_obstacles:
        X_ref = detour_reference(spec, X_ref)
    j_ref = trajectory_objective(spec, X_ref, U_ref, terminal)
    # fallback candidate if every iteration fails: the rollout of the warm-start
    # controls (dynamically consistent, unlike the raw reference states)
    X_fb = spec.rollout(x_init, U_ref)
    viol_fb = _max_violation(spec, X_fb, U_ref, hard_terminal, spec.goal)
    best = (X_fb, U_ref,
            trajectory_objective(spec, X_fb, U_ref, terminal) + settings.penalty_weight * viol_fb)

    radius = settings.trust_region_init
    if radius is None:
        radius = spec.workspace_diameter / 4.0
    penalty = settings.penalty_weight
    diags: list[IterationDiag] = []
    converged = False
    status = "max_iterations"
    z_prev = y_prev = None
    penalty_grown = False
    restarted = False
    restart_at = 0
    qp_tight = settings.qp
    qp_loose = replace(qp_tight,
                       eps_abs=qp_tight.eps_abs * settings.loose_factor,
                       eps_rel=qp_tight.eps_rel * settings.loose_factor)
    qp_settings = qp_loose

    for _ in range(settings.max_iterations):
        prob = sub.build(x_init, X_ref, U_ref, radius, penalty)
        z0 = sub.pack(X_ref, U_ref) if z_prev is None else z_prev
        y0 = y_prev
        qp_sol = solve_qp(prob, qp_settings, z0=z0, y0=y0)
        if qp_sol.status not in (SOLVED, MAX_ITERS):
            if not penalty_grown:
                penalty *= settings.penalty_growth
                penalty_grown = True
                continue
            status = "subproblem_infeasible"
            break
        z_prev, y_prev = qp_sol.z, qp_sol.y
        _, U = sub.unpack(qp_sol.z)
        if hard_terminal:
            X, U = _terminal_correction(spec, x_init, U, spec.goal)
        else:
            X = spec.rollout(x_init, U)
        j_new = trajectory_objective(spec, X, U, terminal)
        viol = _max_violation(spec, X, U, hard_terminal, spec.goal)
        diags.append(IterationDiag(j_new, radius, viol, qp_sol.iterations))
        delta_j = abs(j_new - j_ref)
        X_ref, U_ref, j_ref = X, U, j_new
        merit = j_new + settings.penalty_weight * viol
        if merit < best[2]:
            best = (X, U, merit)
        if delta_j <= settings.j_tol and viol <= settings.eps_feas:
            converged = True
            status = "converged"
            break
        if delta_j <= 5 * settings.j_tol:
            qp_settings = qp_tight
        w = settings.stall_window
        if len(diags) - restart_at >= 2 * w:
            recent = min(d.max_violation for d in diags[-w:])
            earlier = min(d.max_violation for d in diags[-2 * w:-w])
            if recent > settings.stall_violation and recent > 0.8 * earlier:
                if restarted or not (hard_terminal and spec.pos_dim == 2
                                     and spec.n_obstacles):
                    status = "stalled_infeasible"
                    break
                # restart once from a globally planned detour reference; the
                # local linearization cannot escape chained obstacle clusters
                waypoints = grid_path(spec, spec.position(x_init), spec.position(spec.goal))
                restarted = True
                restart_at = len(diags)
                if waypoints is None:
                    status = "stalled_infeasible"
                    break
                X_ref = path_reference_states(spec, x_init, waypoints, H, spec.goal)
                U_ref = np.zeros_like(U_ref)
                j_ref = trajectory_objective(spec, X_ref, U_ref, terminal)
                radius = settings.trust_region_init or spec.workspace_diameter / 4.0
                z_prev = y_prev = None
                qp_settings = qp_loose
                continue
        radius = max(radius * settings.trust_region_shrink, settings.trust_region_floor)

    X, U = (X_ref, U_ref) if converged else best[:2]
    step_costs = np.array([running_cost(u, spec.p, spec.q) for u in U])
    flags = np.array([int(spec.max_violation(X[i], U[i]) > settings.eps_feas) for i in range(H)])
    traj = RawTrajectory(states=X, controls=U, step_costs=step_costs,
                         violation_flags=flags, dt=spec.dt)
    result = SolveResult(
        trajectory=traj,
        objective=float(sum(step_costs) + terminal.value(X[-1])),
        scp_iterations=len(diags),
        converged=converged,
        status=status,
        per_iteration=diags,
        wall_time=time.perf_counter() - t0,
    )
    return result


def solve_rel(spec: ProblemSpec, window: OcpWindow | None = None,
              terminal: TerminalCost | None = None,
              settings: ScpSettings | None = None,
              x_init: np.ndarray | None = None,
              warm_start: RawTrajectory | None = None) -> SolveResult:
    """Solve the relaxation that ignores keep-out constraints.

    On full-horizon windows with no terminal cost the returned objective is a
    lower bound for the full problem. Violation flags on the returned
    trajectory are still evaluated against the *full* constraint set, so the
    relaxation's realized infeasibility is visible to callers.
    """
    window = window or OcpWindow.full(spec.n_steps)
    relaxed = spec.without_obstacles()
    settings = settings or default_scp_settings(spec, relaxation=True)
    x_init = spec.start if x_init is None else np.asarray(x_init, float)
    if warm_start is None:
        x_end = spec.goal if (window.reaches_goal or terminal is None
                              or terminal.kind == NONE) else terminal.x_ref
        warm_start = straight_line_reference(relaxed, x_init, window.horizon, x_end)
    result = solve_scp(relaxed, window, warm_start, terminal=terminal,
                       settings=settings, x_init=x_init)
    # re-evaluate violations against the original obstacle field
    traj = result.trajectory
    eps = settings.eps_feas
    flags = np.array([
        int(spec.max_violation(traj.states[i], traj.controls[i]) > eps)
        for i in range(traj.n_steps)
    ])
    result.trajectory = RawTrajectory(
        states=traj.states, controls=traj.controls,
        step_costs=traj.step_costs, violation_flags=flags, dt=traj.dt,
    )
    return result
