"""Shared trajectory types and the cost/bookkeeping formulas used everywhere.

States and controls are plain 1-D float64 arrays; composite records are frozen
dataclasses whose arrays are set read-only at construction so they can be shared
freely across worker processes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Tolerance below which a constraint is not counted as violated.
EPS_FEAS = 1e-6


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


def as_vector(values, name: str = "vector") -> np.ndarray:
    """Validate and return a finite 1-D float64 array."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite entries")
    return v


@dataclass(frozen=True)
class RawTrajectory:
    """One solved (or rolled-out) instance on a uniform time grid.

    states has length N+1, controls/step_costs/violation_flags length N.
    """

    states: np.ndarray
    controls: np.ndarray
    step_costs: np.ndarray
    violation_flags: np.ndarray
    dt: float

    def __post_init__(self):
        states = _freeze(np.asarray(self.states, dtype=np.float64))
        controls = _freeze(np.asarray(self.controls, dtype=np.float64))
        costs = _freeze(np.asarray(self.step_costs, dtype=np.float64))
        flags = _freeze(np.asarray(self.violation_flags, dtype=np.int64))
        n = controls.shape[0]
        if states.shape[0] != n + 1:
            raise ValueError(f"expected {n + 1} states for {n} controls, got {states.shape[0]}")
        if costs.shape != (n,) or flags.shape != (n,):
            raise ValueError("step_costs and violation_flags must have one entry per control")
        if not (np.all(np.isfinite(states)) and np.all(np.isfinite(controls)) and np.all(np.isfinite(costs))):
            raise ValueError("trajectory contains non-finite entries")
        if np.any(costs < 0):
            raise ValueError("step costs must be nonnegative")
        if not np.all((flags == 0) | (flags == 1)):
            raise ValueError("violation flags must be 0 or 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "controls", controls)
        object.__setattr__(self, "step_costs", costs)
        object.__setattr__(self, "violation_flags", flags)

    @property
    def n_steps(self) -> int:
        return self.controls.shape[0]

    @property
    def total_cost(self) -> float:
        return float(np.sum(self.step_costs))


@dataclass(frozen=True)
class PerformanceParams:
    """Conditioning triple for one timestep: target state, reward-to-go,
    remaining violation budget."""

    target: np.ndarray
    reward_to_go: float
    violation_budget: int

    def __post_init__(self):
        object.__setattr__(self, "target", _freeze(as_vector(self.target, "target")))
        if self.violation_budget < 0:
            raise ValueError("violation_budget must be nonnegative")


@dataclass(frozen=True)
class SequenceSample:
    """Interleaved per-step representation of a trajectory for sequence modeling.

    Step i carries (target, rtg[i], vbudget[i], states[i], controls[i]); the
    target is constant across steps. rtg is the negated suffix sum of step
    costs, vbudget the suffix count of violation flags.
    """

    target: np.ndarray
    rtg: np.ndarray
    vbudget: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    dt: float
    instance_id: str = ""
    scenario_id: str = ""

    def __post_init__(self):
        target = _freeze(as_vector(self.target, "target"))
        rtg = _freeze(np.asarray(self.rtg, dtype=np.float64))
        vb = _freeze(np.asarray(self.vbudget, dtype=np.int64))
        states = _freeze(np.asarray(self.states, dtype=np.float64))
        controls = _freeze(np.asarray(self.controls, dtype=np.float64))
        n = controls.shape[0]
        if not (rtg.shape == (n,) and vb.shape == (n,) and states.shape[0] == n):
            raise ValueError("per-step field lengths are inconsistent")
        # rtg[i] = rtg[i+1] - cost_i with nonnegative costs, so rtg never decreases.
        if n > 1 and np.any(np.diff(rtg) < -1e-9 * np.maximum(1.0, np.abs(rtg[:-1]))):
            raise ValueError("reward-to-go must be non-decreasing over time")
        if np.any(vb < 0):
            raise ValueError("violation budget must be nonnegative")
        deltas = -np.diff(np.concatenate([vb, [0]]))
        if not np.all((deltas == 0) | (deltas == 1)):
            raise ValueError("violation budget must decrease by 0 or 1 per step")
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "rtg", rtg)
        object.__setattr__(self, "vbudget", vb)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "controls", controls)

    @property
    def n_steps(self) -> int:
        return self.controls.shape[0]

    def step(self, i: int) -> tuple[PerformanceParams, np.ndarray, np.ndarray]:
        params = PerformanceParams(self.target, float(self.rtg[i]), int(self.vbudget[i]))
        return params, self.states[i], self.controls[i]

    @property
    def step_costs(self) -> np.ndarray:
        """Per-step costs recovered from the reward-to-go telescoping
        (rtg[i] = rtg[i+1] - cost[i] with rtg[N] = 0)."""
        return np.diff(np.concatenate([self.rtg, [0.0]]))

    @property
    def violation_flags(self) -> np.ndarray:
        return -np.diff(np.concatenate([self.vbudget, [0]]))


@dataclass(frozen=True)
class ConditionSeed:
    """User-supplied conditioning for autoregressive generation."""

    target: np.ndarray
    reward_to_go: float
    violation_budget: int
    initial_state: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "target", _freeze(as_vector(self.target, "target")))
        object.__setattr__(self, "initial_state", _freeze(as_vector(self.initial_state, "initial_state")))
        if self.violation_budget < 0:
            raise ValueError("violation_budget must be nonnegative")


def running_cost(u, p: int = 2, q: int = 1) -> float:
    """Control-effort stage cost ||u||_p^q with p, q in {1, 2}."""
    if p not in (1, 2) or q not in (1, 2):
        raise ValueError(f"unsupported cost orders p={p}, q={q}")
    u = as_vector(u, "control")
    if p == 1:
        norm = float(np.sum(np.abs(u)))
    else:
        norm = float(np.linalg.norm(u))
    return norm if q == 1 else norm * norm


def reward_to_go(step_costs) -> np.ndarray:
    """Negated suffix sums: out[i] = -sum(step_costs[i:])."""
    costs = np.asarray(step_costs, dtype=np.float64)
    if not np.all(np.isfinite(costs)):
        raise ValueError("step costs contain non-finite entries")
    return -np.cumsum(costs[::-1])[::-1]


def violation_budget(violation_flags) -> np.ndarray:
    """Suffix counts: out[i] = sum(violation_flags[i:])."""
    flags = np.asarray(violation_flags, dtype=np.int64)
    if not np.all((flags == 0) | (flags == 1)):
        raise ValueError("violation flags must be 0 or 1")
    return np.cumsum(flags[::-1])[::-1]


def check_violation(x, u, spec, eps: float = EPS_FEAS) -> int:
    """1 if (x, u) violates any scenario constraint by more than eps, else 0.

    The geometry lives on the scenario spec; see ProblemSpec.max_violation.
    """
    return int(spec.max_violation(np.asarray(x, float), np.asarray(u, float)) > eps)


def to_sequence(raw: RawTrajectory, target, instance_id: str = "", scenario_id: str = "") -> SequenceSample:
    """Re-arrange a raw trajectory into the interleaved per-step representation."""
    target = as_vector(target, "target")
    n = raw.n_steps
    if raw.states.shape[0] != n + 1:
        raise ValueError("raw trajectory has inconsistent lengths")
    return SequenceSample(
        target=target,
        rtg=reward_to_go(raw.step_costs),
        vbudget=violation_budget(raw.violation_flags),
        states=raw.states[:n],
        controls=raw.controls,
        dt=raw.dt,
        instance_id=instance_id,
        scenario_id=scenario_id,
    )


def build_trajectory(spec, states, controls) -> RawTrajectory:
    """Assemble a RawTrajectory, evaluating costs and violation flags."""
    states = np.asarray(states, dtype=np.float64)
    controls = np.asarray(controls, dtype=np.float64)
    costs = np.array([running_cost(u, spec.p, spec.q) for u in controls])
    flags = np.array([check_violation(states[i], controls[i], spec)
                      for i in range(len(controls))])
    return RawTrajectory(states=states, controls=controls, step_costs=costs,
                         violation_flags=flags, dt=spec.dt)


def non_convexity_factor(violations_rel: int, max_violations: int) -> float:
    """Difficulty proxy: relaxation violation count over the batch maximum."""
    if max_violations <= 0:
        raise ValueError("max_violations must be positive")
    if not 0 <= violations_rel <= max_violations:
        raise ValueError("violations_rel must lie in [0, max_violations]")
    return violations_rel / max_violations


def normalized_cost_increment(cost: float, lower_bound: float, max_cost: float) -> float:
    """Map cost into [0, 1]: 0 at the lower bound, 1 at the worst observed."""
    denom = max_cost - lower_bound
    if denom <= 0:
        raise ValueError("max_cost must exceed lower_bound")
    if not lower_bound <= cost <= max_cost:
        raise ValueError("cost must lie in [lower_bound, max_cost]")
    return (cost - lower_bound) / denom
