"""Scenario definitions: dynamics, constraints, Jacobians, and instance sampling.

Two scenarios are provided.  The free flyer is a planar floating robot with
eight fixed ON-OFF thrusters moving on a frictionless table; controls are the
net impulsive (dvx, dvy, domega) in the global frame.  The quadrotor is a 3-D
point mass with quadratic drag; controls are the thrust vector.  Both use
6-state / 3-control vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .core import EPS_FEAS, as_vector

FREEFLYER = "freeflyer"
QUADROTOR = "quadrotor"
SCENARIO_IDS = (FREEFLYER, QUADROTOR)

# Sampling ranges and physical constants. These are artifact defaults exposed
# through the run config, not values taken from any publication.
SCENARIO_DEFAULTS = {
    FREEFLYER: {
        "n_steps": 100,
        "dt": 0.4,
        "mass": 16.0,
        "thrust": 1.0,
        "inertia": 0.18,
        "body_half_width": 0.15,
        "thruster_offset": 0.10,
        "robot_radius": 0.15,
        "table": [[0.0, 0.0], [3.5, 2.5]],
        "start_box": [[0.25, 0.35], [0.65, 2.15]],
        "goal_box": [[2.85, 0.35], [3.25, 2.15]],
        "obstacle_box": [[1.05, 0.30], [2.55, 2.20]],
        "obstacle_count": [2, 5],
        "obstacle_radius": [0.12, 0.30],
        "clearance": 0.05,
        "p": 1,
        "q": 1,
    },
    QUADROTOR: {
        "n_steps": 100,
        "dt": 0.1,
        "mass": 1.0,
        "drag_coeff": 0.1,
        "workspace": [[0.0, 0.0, 0.0], [10.0, 10.0, 10.0]],
        "start_box": [[0.5, 3.0, 3.0], [1.5, 7.0, 7.0]],
        "goal_box": [[8.5, 3.0, 3.0], [9.5, 7.0, 7.0]],
        "obstacle_box": [[2.8, 1.5, 1.5], [7.2, 8.5, 8.5]],
        "obstacle_count": [3, 6],
        "obstacle_radius": [0.7, 1.6],
        "clearance": 0.20,
        "p": 2,
        "q": 2,
    },
}

_SAMPLING_BUDGET = 2000


@dataclass(frozen=True)
class LinearizedDynamics:
    """Affine model x' = A x + B u + c valid around the linearization point."""

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray


@dataclass(frozen=True)
class ThrusterAllocation:
    """Frozen-attitude actuation model u = G dv with 0 <= dv <= dv_max."""

    G: np.ndarray
    dv_max: float


@dataclass(frozen=True)
class ProblemSpec:
    """One scenario instance: dynamics parameters, obstacle field, boundary states.

    Obstacle radii for the free flyer already include the robot radius.
    """

    scenario_id: str
    n_steps: int
    dt: float
    start: np.ndarray
    goal: np.ndarray
    obstacle_centers: np.ndarray   # (M, pos_dim)
    obstacle_radii: np.ndarray     # (M,)
    p: int
    q: int
    seed: int = 0
    # free flyer parameters
    mass: float = 0.0
    thrust: float = 0.0
    inertia: float = 0.0
    robot_radius: float = 0.0
    thruster_matrix: np.ndarray | None = None   # (3, 8)
    table_lo: np.ndarray | None = None
    table_hi: np.ndarray | None = None
    # quadrotor parameters
    drag_coeff: float = 0.0
    workspace_lo: np.ndarray | None = None
    workspace_hi: np.ndarray | None = None

    def __post_init__(self):
        if self.scenario_id not in SCENARIO_IDS:
            raise ValueError(f"unknown scenario {self.scenario_id!r}")
        # sampled instances always have n_steps >= 2 (enforced by the sampler);
        # single-step sub-specs arise from receding-horizon slicing
        if self.n_steps < 1:
            raise ValueError("n_steps must be positive")
        for name in ("start", "goal"):
            v = as_vector(getattr(self, name), name)
            if v.shape != (self.n_x,):
                raise ValueError(f"{name} must have dimension {self.n_x}")
            object.__setattr__(self, name, v)
        centers = np.atleast_2d(np.asarray(self.obstacle_centers, dtype=np.float64))
        radii = np.asarray(self.obstacle_radii, dtype=np.float64).ravel()
        if centers.size == 0:
            centers = np.zeros((0, self.pos_dim))
        if centers.shape[0] != radii.shape[0] or (centers.shape[0] and centers.shape[1] != self.pos_dim):
            raise ValueError("obstacle centers/radii are inconsistent")
        if np.any(radii <= 0):
            raise ValueError("obstacle radii must be positive")
        object.__setattr__(self, "obstacle_centers", centers)
        object.__setattr__(self, "obstacle_radii", radii)
        for name in ("table_lo", "table_hi", "workspace_lo", "workspace_hi"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, np.asarray(v, dtype=np.float64))
        if self.thruster_matrix is not None:
            lam = np.asarray(self.thruster_matrix, dtype=np.float64)
            if lam.shape != (3, 8):
                raise ValueError("thruster matrix must be 3x8")
            object.__setattr__(self, "thruster_matrix", lam)

    # --- basic geometry -------------------------------------------------

    n_x = 6
    n_u = 3

    @property
    def pos_dim(self) -> int:
        return 2 if self.scenario_id == FREEFLYER else 3

    @property
    def n_obstacles(self) -> int:
        return self.obstacle_radii.shape[0]

    def position(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x)[: self.pos_dim]

    @property
    def bounds_lo(self) -> np.ndarray:
        return self.table_lo if self.scenario_id == FREEFLYER else self.workspace_lo

    @property
    def bounds_hi(self) -> np.ndarray:
        return self.table_hi if self.scenario_id == FREEFLYER else self.workspace_hi

    @property
    def workspace_diameter(self) -> float:
        return float(np.linalg.norm(self.bounds_hi - self.bounds_lo))

    @property
    def dv_max(self) -> float:
        """Per-thruster delta-v capacity over one step."""
        return self.thrust * self.dt / self.mass

    # --- dynamics ---------------------------------------------------------

    def step(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        if self.scenario_id == FREEFLYER:
            return step_freeflyer(x, u, self.dt)
        return step_quadrotor(x, u, self.dt, self.mass, self.drag_coeff)

    def rollout(self, x0: np.ndarray, controls: np.ndarray) -> np.ndarray:
        """Propagate the nonlinear dynamics; returns (len(controls)+1, n_x) states."""
        states = np.empty((len(controls) + 1, self.n_x))
        states[0] = x0
        for i, u in enumerate(controls):
            states[i + 1] = self.step(states[i], u)
        return states

    # --- constraints ------------------------------------------------------

    def koz_margins(self, r: np.ndarray) -> np.ndarray:
        return koz_margin(r, self.obstacle_centers, self.obstacle_radii)

    def koz_violation_count(self, states: np.ndarray, eps: float = EPS_FEAS) -> int:
        """Number of timesteps whose position is inside any keep-out zone."""
        count = 0
        for x in states:
            margins = self.koz_margins(self.position(x))
            if margins.size and margins.min() < -eps:
                count += 1
        return count

    def max_violation(self, x: np.ndarray, u: np.ndarray) -> float:
        """Largest constraint violation magnitude at (x, u); <= 0 when feasible."""
        worst = 0.0
        r = self.position(x)
        margins = self.koz_margins(r)
        if margins.size:
            worst = max(worst, float(-margins.min()))
        if self.scenario_id == FREEFLYER:
            worst = max(worst, float(np.max(self.table_lo - r, initial=0.0)))
            worst = max(worst, float(np.max(r - self.table_hi, initial=0.0)))
            worst = max(worst, self._actuation_violation(x, u))
        return worst

    def _actuation_violation(self, x: np.ndarray, u: np.ndarray) -> float:
        F, d = self._thruster_facets()
        u_body = rot_gb(-float(x[2])) @ np.asarray(u, float)
        return float(np.max(F @ u_body - d, initial=0.0))

    def _thruster_facets(self) -> tuple[np.ndarray, np.ndarray]:
        key = (self.dv_max, self.thruster_matrix.tobytes())
        cached = _FACET_CACHE.get(key)
        if cached is None:
            cached = zonotope_facets(self.thruster_matrix * self.dv_max)
            _FACET_CACHE[key] = cached
        return cached

    # --- derived specs ----------------------------------------------------

    def without_obstacles(self) -> "ProblemSpec":
        return replace(
            self,
            obstacle_centers=np.zeros((0, self.pos_dim)),
            obstacle_radii=np.zeros(0),
        )

    def with_boundary(self, start=None, goal=None, n_steps=None) -> "ProblemSpec":
        kwargs = {}
        if start is not None:
            kwargs["start"] = np.asarray(start, float)
        if goal is not None:
            kwargs["goal"] = np.asarray(goal, float)
        if n_steps is not None:
            kwargs["n_steps"] = int(n_steps)
        return replace(self, **kwargs)

    # --- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        out = {
            "scenario_id": self.scenario_id,
            "n_steps": self.n_steps,
            "dt": self.dt,
            "start": self.start.tolist(),
            "goal": self.goal.tolist(),
            "obstacle_centers": self.obstacle_centers.tolist(),
            "obstacle_radii": self.obstacle_radii.tolist(),
            "p": self.p,
            "q": self.q,
            "seed": self.seed,
        }
        if self.scenario_id == FREEFLYER:
            out.update(
                mass=self.mass, thrust=self.thrust, inertia=self.inertia,
                robot_radius=self.robot_radius,
                thruster_matrix=self.thruster_matrix.tolist(),
                table_lo=self.table_lo.tolist(), table_hi=self.table_hi.tolist(),
            )
        else:
            out.update(
                mass=self.mass, drag_coeff=self.drag_coeff,
                workspace_lo=self.workspace_lo.tolist(),
                workspace_hi=self.workspace_hi.tolist(),
            )
        return out

    @staticmethod
    def from_dict(d: dict) -> "ProblemSpec":
        return ProblemSpec(**d)


_FACET_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


# --- dynamics ---------------------------------------------------------------

def step_freeflyer(x, u, dt: float) -> np.ndarray:
    """Impulsive double-integrator step.

    The impulse u = (dvx, dvy, domega) is applied first, then positions
    integrate the post-impulse velocities over dt.
    """
    x = as_vector(x, "state")
    u = as_vector(u, "control")
    if x.shape != (6,) or u.shape != (3,):
        raise ValueError("free flyer expects 6 states and 3 controls")
    v_new = x[3:] + u
    out = np.empty(6)
    out[:3] = x[:3] + dt * v_new
    out[3:] = v_new
    return out


def step_quadrotor(x, u, dt: float, mass: float, drag_coeff: float) -> np.ndarray:
    """Point-mass quadrotor step with quadratic drag -beta*||v||*v and no gravity."""
    if mass <= 0:
        raise ValueError("mass must be positive")
    x = as_vector(x, "state")
    u = as_vector(u, "control")
    if x.shape != (6,) or u.shape != (3,):
        raise ValueError("quadrotor expects 6 states and 3 controls")
    r, v = x[:3], x[3:]
    speed = np.linalg.norm(v)
    accel = (-drag_coeff * speed * v + u) / mass
    out = np.empty(6)
    out[:3] = r + dt * v
    out[3:] = v + dt * accel
    return out


def linearize(spec: ProblemSpec, x_ref, u_ref) -> LinearizedDynamics:
    """First-order model of spec.step at (x_ref, u_ref); exact for the free flyer."""
    x_ref = as_vector(x_ref, "x_ref")
    u_ref = as_vector(u_ref, "u_ref")
    dt = spec.dt
    if spec.scenario_id == FREEFLYER:
        A = np.eye(6)
        A[0, 3] = A[1, 4] = A[2, 5] = dt
        B = np.zeros((6, 3))
        B[0, 0] = B[1, 1] = B[2, 2] = dt
        B[3, 0] = B[4, 1] = B[5, 2] = 1.0
        c = np.zeros(6)
        return LinearizedDynamics(A, B, c)
    # quadrotor: d(-beta*||v||*v)/dv = -beta*(||v|| I + v v^T / ||v||), zero at v = 0
    v = x_ref[3:]
    speed = np.linalg.norm(v)
    beta = spec.drag_coeff
    m = spec.mass
    drag_jac = np.zeros((3, 3))
    if speed > 0:
        drag_jac = -beta * (speed * np.eye(3) + np.outer(v, v) / speed)
    A = np.eye(6)
    A[:3, 3:] = dt * np.eye(3)
    A[3:, 3:] += dt / m * drag_jac
    B = np.zeros((6, 3))
    B[3:, :] = dt / m * np.eye(3)
    c = spec.step(x_ref, u_ref) - A @ x_ref - B @ u_ref
    return LinearizedDynamics(A, B, c)


# --- keep-out zones ----------------------------------------------------------

def koz_margin(r, centers, radii) -> np.ndarray:
    """Signed clearances ||r - c_m|| - R_m; nonnegative means feasible."""
    r = np.asarray(r, dtype=np.float64)
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    radii = np.asarray(radii, dtype=np.float64).ravel()
    if centers.shape[0] == 0:
        return np.zeros(0)
    return np.linalg.norm(centers - r[None, :], axis=1) - radii


def linearize_koz(r_ref, center, radius) -> tuple[np.ndarray, float]:
    """Supporting halfspace a.r >= b of the keep-out constraint at r_ref.

    At the obstacle center the gradient is undefined; the reference is nudged
    along the first axis as a deterministic tie-break.
    """
    r_ref = np.asarray(r_ref, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    diff = r_ref - center
    dist = np.linalg.norm(diff)
    if dist < 1e-12:
        diff = np.zeros_like(diff)
        diff[0] = 1e-9
        dist = 1e-9
    a = diff / dist
    b = radius + float(a @ center)
    return a, b


# --- free flyer actuation -----------------------------------------------------

def rot_gb(psi: float) -> np.ndarray:
    """Body-to-global rotation for (dvx, dvy, domega); the rate is unchanged."""
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def default_thruster_matrix(inertia: float, mass: float, half_width: float, offset: float) -> np.ndarray:
    """Columns map a unit per-thruster delta-v to body-frame (dvx, dvy, domega).

    Eight thrusters, two per face, mounted offset from the centerline so each
    force direction is available with either torque sign.
    """
    a, b = half_width, offset
    directions = [
        (1, 0), (1, 0), (-1, 0), (-1, 0),
        (0, 1), (0, 1), (0, -1), (0, -1),
    ]
    positions = [
        (-a, -b), (-a, b), (a, b), (a, -b),
        (b, -a), (-b, -a), (-b, a), (b, a),
    ]
    lam = np.zeros((3, 8))
    for j, ((dx, dy), (px, py)) in enumerate(zip(directions, positions)):
        torque = px * dy - py * dx
        lam[0, j] = dx
        lam[1, j] = dy
        lam[2, j] = torque * mass / inertia
    return lam


def actuation_halfspaces(psi_ref: float, spec: ProblemSpec) -> ThrusterAllocation:
    """Actuation model with the attitude frozen at psi_ref.

    The nonlinear limit 0 <= inv(Lambda) inv(R) u <= dv_max is represented by
    lifting per-thruster impulses into the decision vector: u = G dv with
    G = R(psi_ref) Lambda and box-bounded dv.
    """
    if spec.scenario_id != FREEFLYER:
        raise ValueError("actuation halfspaces are defined for the free flyer only")
    G = rot_gb(psi_ref) @ spec.thruster_matrix
    return ThrusterAllocation(G=G, dv_max=spec.dv_max)


def zonotope_facets(generators: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """H-representation of {G t : t in [0,1]^k} for 3-D generators G.

    Returns (F, d) with membership F u <= d. Facet normals come from cross
    products of generator pairs; offsets from the support function.
    """
    G = np.asarray(generators, dtype=np.float64)
    dim, k = G.shape
    if dim != 3:
        raise ValueError("zonotope_facets expects 3-D generators")
    center = G.sum(axis=1) / 2.0
    normals = []
    for i in range(k):
        for j in range(i + 1, k):
            n = np.cross(G[:, i], G[:, j])
            norm = np.linalg.norm(n)
            if norm < 1e-12:
                continue
            n = n / norm
            key = tuple(np.round(n, 9))
            neg = tuple(np.round(-n, 9))
            if key in normals or neg in normals:
                continue
            normals.append(key)
    F = []
    d = []
    for key in normals:
        n = np.array(key)
        support = float(np.abs(n @ G).sum()) / 2.0
        F.append(n)
        d.append(support + n @ center)
        F.append(-n)
        d.append(support - n @ center)
    return np.array(F), np.array(d)


# --- instance sampling ---------------------------------------------------------

def _uniform_in_box(rng: np.random.Generator, box) -> np.ndarray:
    lo, hi = np.asarray(box[0], float), np.asarray(box[1], float)
    return rng.uniform(lo, hi)


def _has_corridor(lo, hi, centers, radii, start_x, goal_x, margin=0.03, cell=0.05) -> bool:
    """Grid flood-fill check that the 2-D obstacle field leaves a passage
    from the start column to the goal column."""
    nx = max(int((hi[0] - lo[0]) / cell), 2)
    ny = max(int((hi[1] - lo[1]) / cell), 2)
    xs = lo[0] + (np.arange(nx) + 0.5) * (hi[0] - lo[0]) / nx
    ys = lo[1] + (np.arange(ny) + 0.5) * (hi[1] - lo[1]) / ny
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    free = np.ones((nx, ny), dtype=bool)
    for c, r in zip(centers, radii):
        free &= (gx - c[0]) ** 2 + (gy - c[1]) ** 2 > (r + margin) ** 2
    seen = np.zeros_like(free)
    start_col = min(int(np.searchsorted(xs, start_x)), nx - 1)
    goal_col = min(int(np.searchsorted(xs, goal_x)), nx - 1)
    stack = [(start_col, j) for j in range(ny) if free[start_col, j]]
    for i, j in stack:
        seen[i, j] = True
    while stack:
        i, j = stack.pop()
        if i == goal_col:
            return True
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            a, b = i + di, j + dj
            if 0 <= a < nx and 0 <= b < ny and free[a, b] and not seen[a, b]:
                seen[a, b] = True
                stack.append((a, b))
    return False


def grid_path(spec: ProblemSpec, start_pos, goal_pos, margin: float = 0.04,
              cell: float = 0.05) -> np.ndarray | None:
    """Shortest obstacle-free grid path between two table positions (2-D only).

    Returns shortcut-smoothed waypoints including both endpoints, or None when
    no passage exists at the requested clearance. Used to rebuild references
    when successive convexification stalls inside an obstacle cluster.
    """
    if spec.pos_dim != 2:
        return None
    lo, hi = spec.bounds_lo, spec.bounds_hi
    nx = max(int((hi[0] - lo[0]) / cell), 2)
    ny = max(int((hi[1] - lo[1]) / cell), 2)
    xs = lo[0] + (np.arange(nx) + 0.5) * (hi[0] - lo[0]) / nx
    ys = lo[1] + (np.arange(ny) + 0.5) * (hi[1] - lo[1]) / ny
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    free = np.ones((nx, ny), dtype=bool)
    for c, r in zip(spec.obstacle_centers, spec.obstacle_radii):
        free &= (gx - c[0]) ** 2 + (gy - c[1]) ** 2 > (r + margin) ** 2

    def to_cell(p):
        i = int(np.clip((p[0] - lo[0]) / (hi[0] - lo[0]) * nx, 0, nx - 1))
        j = int(np.clip((p[1] - lo[1]) / (hi[1] - lo[1]) * ny, 0, ny - 1))
        return i, j

    start = to_cell(start_pos)
    goal = to_cell(goal_pos)
    free[start] = True
    free[goal] = True
    from collections import deque
    parent = {start: None}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        if cur == goal:
            break
        i, j = cur
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)):
            nxt = (i + di, j + dj)
            if (0 <= nxt[0] < nx and 0 <= nxt[1] < ny and free[nxt]
                    and nxt not in parent):
                parent[nxt] = cur
                queue.append(nxt)
    if goal not in parent:
        return None
    cells = []
    cur = goal
    while cur is not None:
        cells.append(cur)
        cur = parent[cur]
    cells.reverse()
    pts = np.array([[xs[i], ys[j]] for i, j in cells])
    pts[0] = start_pos
    pts[-1] = goal_pos

    def clear_segment(a, b):
        n = max(int(np.linalg.norm(b - a) / (cell / 2)), 2)
        line = np.linspace(a, b, n)
        for c, r in zip(spec.obstacle_centers, spec.obstacle_radii):
            if np.any(np.linalg.norm(line - c, axis=1) <= r + margin):
                return False
        return True

    # greedy line-of-sight shortcutting
    out = [pts[0]]
    k = 0
    while k < len(pts) - 1:
        nxt = k + 1
        for j in range(len(pts) - 1, k, -1):
            if clear_segment(pts[k], pts[j]):
                nxt = j
                break
        out.append(pts[nxt])
        k = nxt
    return np.array(out)


def path_reference_states(spec: ProblemSpec, x_init, waypoints: np.ndarray,
                          horizon: int, x_end) -> np.ndarray:
    """Time-parameterize waypoints into horizon+1 reference states.

    Positions follow the path at uniform arc length; velocities are the
    finite differences; remaining state entries interpolate x_init to x_end.
    """
    seg = np.linalg.norm(np.diff(waypoints, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1] if cum[-1] > 0 else 1.0
    targets = np.linspace(0.0, cum[-1], horizon + 1)
    pos = np.empty((horizon + 1, 2))
    for k, s in enumerate(targets):
        idx = int(np.searchsorted(cum, s, side="right") - 1)
        idx = min(idx, len(seg) - 1) if len(seg) else 0
        t = (s - cum[idx]) / seg[idx] if len(seg) and seg[idx] > 0 else 0.0
        pos[k] = waypoints[idx] + t * (waypoints[idx + 1] - waypoints[idx])
    states = np.linspace(np.asarray(x_init, float), np.asarray(x_end, float), horizon + 1)
    states[:, :2] = pos
    vel = np.diff(pos, axis=0) / spec.dt
    states[:-1, 3:5] = vel
    states[-1, 3:5] = 0.0
    return states


def sample_problem(scenario_id: str, seed: int, overrides: dict | None = None) -> ProblemSpec:
    """Draw a random problem instance; deterministic in (scenario_id, seed).

    Obstacles are resampled until strictly inside the workspace, and start/goal
    until clear of every inflated keep-out zone.
    """
    if scenario_id not in SCENARIO_IDS:
        raise ValueError(f"unknown scenario {scenario_id!r}")
    cfg = dict(SCENARIO_DEFAULTS[scenario_id])
    if overrides:
        unknown = set(overrides) - set(cfg)
        if unknown:
            raise ValueError(f"unknown scenario parameters: {sorted(unknown)}")
        cfg.update(overrides)
    if int(cfg["n_steps"]) < 2:
        raise ValueError("sampled instances need n_steps >= 2")
    rng = np.random.default_rng(seed)
    pos_dim = 2 if scenario_id == FREEFLYER else 3
    inflate = cfg["robot_radius"] if scenario_id == FREEFLYER else 0.0
    bounds = cfg["table"] if scenario_id == FREEFLYER else cfg["workspace"]
    lo, hi = np.asarray(bounds[0], float), np.asarray(bounds[1], float)

    count = int(rng.integers(cfg["obstacle_count"][0], cfg["obstacle_count"][1] + 1))
    for field_attempt in range(_SAMPLING_BUDGET + 1):
        if field_attempt == _SAMPLING_BUDGET:
            raise RuntimeError("obstacle sampling budget exhausted")
        centers, radii = [], []
        for _ in range(count):
            for attempt in range(_SAMPLING_BUDGET + 1):
                if attempt == _SAMPLING_BUDGET:
                    raise RuntimeError("obstacle sampling budget exhausted")
                c = _uniform_in_box(rng, cfg["obstacle_box"])
                r = rng.uniform(*cfg["obstacle_radius"]) + inflate
                if np.all(c - r > lo) and np.all(c + r < hi):
                    centers.append(c)
                    radii.append(r)
                    break
        centers = np.array(centers).reshape(count, pos_dim)
        radii = np.array(radii)
        if scenario_id != FREEFLYER:
            break
        # reject obstacle fields that wall off the table; keeps the solvers on
        # hard-but-feasible instances
        if _has_corridor(lo, hi, centers, radii,
                         cfg["start_box"][1][0], cfg["goal_box"][0][0]):
            break

    def _clear_point(box) -> np.ndarray:
        for attempt in range(_SAMPLING_BUDGET + 1):
            if attempt == _SAMPLING_BUDGET:
                raise RuntimeError("start/goal sampling budget exhausted")
            p = _uniform_in_box(rng, box)
            margins = koz_margin(p, centers, radii)
            if margins.size == 0 or margins.min() > cfg["clearance"]:
                return p

    start = np.zeros(6)
    goal = np.zeros(6)
    start[:pos_dim] = _clear_point(cfg["start_box"])
    goal[:pos_dim] = _clear_point(cfg["goal_box"])

    common = dict(
        scenario_id=scenario_id,
        n_steps=int(cfg["n_steps"]),
        dt=float(cfg["dt"]),
        start=start,
        goal=goal,
        obstacle_centers=centers,
        obstacle_radii=radii,
        p=int(cfg["p"]),
        q=int(cfg["q"]),
        seed=seed,
    )
    if scenario_id == FREEFLYER:
        # headings are sampled, angular rates are zero at both ends
        start[2] = rng.uniform(-math.pi, math.pi)
        goal[2] = rng.uniform(-math.pi, math.pi)
        lam = default_thruster_matrix(
            cfg["inertia"], cfg["mass"], cfg["body_half_width"], cfg["thruster_offset"]
        )
        return ProblemSpec(
            **common,
            mass=cfg["mass"],
            thrust=cfg["thrust"],
            inertia=cfg["inertia"],
            robot_radius=cfg["robot_radius"],
            thruster_matrix=lam,
            table_lo=lo,
            table_hi=hi,
        )
    return ProblemSpec(
        **common,
        mass=cfg["mass"],
        drag_coeff=cfg["drag_coeff"],
        workspace_lo=lo,
        workspace_hi=hi,
    )
