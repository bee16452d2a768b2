"""Closed-loop fine-tuning: roll out an exploration policy, relabel every
visited state with the full-remaining-horizon expert, aggregate, retrain.

Each successful rollout yields exactly one fixed-length training sequence: the
prefix of states visited by the exploration policy joined with the expert's
completion from the last visited state, with every stored control produced by
the expert. Exploration alternates whole rollouts between the current model
and the expert policy; rollout horizons are sampled from a discrete set that
spans short to full.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .core import ConditionSeed, RawTrajectory, check_violation, running_cost, to_sequence
from .dataset import split_samples
from .model import ModelParams, NormStats, generate
from .scenarios import ProblemSpec, sample_problem
from .scp import OcpWindow, SolveResult, default_scp_settings, solve_rel, solve_scp
from .training import TrainSettings, stack_samples, train

log = logging.getLogger(__name__)

MIX_ALTERNATE = "alternate"
MIX_MODEL_ONLY = "model_only"
MIX_EXPERT_ONLY = "expert_only"


@dataclass(frozen=True)
class DaggerConfig:
    dagger_iterations: int = 2
    trajectories_per_iteration: int = 8
    horizon_set: tuple = ()          # empty: N/10 .. N in ten uniform steps
    expert_mix_rule: str = MIX_ALTERNATE
    retrain_epochs: int = 6
    retrain_lr_scale: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.dagger_iterations < 0:
            raise ValueError("dagger_iterations must be nonnegative")
        if self.expert_mix_rule not in (MIX_ALTERNATE, MIX_MODEL_ONLY, MIX_EXPERT_ONLY):
            raise ValueError(f"unknown mix rule {self.expert_mix_rule!r}")

    def horizons(self, n_steps: int) -> tuple:
        if self.horizon_set:
            if any(not 0 < h <= n_steps for h in self.horizon_set):
                raise ValueError("horizons must lie in (0, N]")
            return tuple(self.horizon_set)
        step = max(n_steps // 10, 1)
        return tuple(range(step, n_steps + 1, step))


@dataclass
class FinetuneReport:
    iterations: list[dict] = field(default_factory=list)

    @property
    def dataset_sizes(self) -> list[int]:
        return [it["d_ft_size"] for it in self.iterations]


class ExpertFailure(RuntimeError):
    pass


def _expert_solve(spec: ProblemSpec, x, step_index: int,
                  warm: RawTrajectory | None = None, settings=None) -> SolveResult:
    remaining = spec.n_steps - step_index
    if remaining < 1:
        raise ValueError("no remaining horizon for the expert")
    sub = spec.with_boundary(start=np.asarray(x, float), n_steps=remaining)
    settings = settings or default_scp_settings(sub)
    if warm is None:
        rel = solve_rel(sub)
        warm = rel.trajectory
    return solve_scp(sub, OcpWindow.full(remaining), warm, settings=settings)


def expert_action(x, spec: ProblemSpec, step_index: int = 0) -> np.ndarray:
    """First control of the full-remaining-horizon solution from state x."""
    result = _expert_solve(spec, x, step_index)
    if not result.converged:
        raise ExpertFailure(f"expert solve failed at step {step_index}: {result.status}")
    return result.trajectory.controls[0]


def _shift_warm(traj: RawTrajectory) -> RawTrajectory | None:
    if traj.n_steps < 2:
        return None
    return RawTrajectory(
        states=traj.states[1:], controls=traj.controls[1:],
        step_costs=traj.step_costs[1:], violation_flags=traj.violation_flags[1:],
        dt=traj.dt,
    )


def _relabel_rollout(spec: ProblemSpec, visited: np.ndarray, settings) -> RawTrajectory:
    """Expert controls at every visited state plus the expert completion.

    visited has h+1 states (the exploration prefix); the returned trajectory
    spans the full horizon N.
    """
    n = spec.n_steps
    h = visited.shape[0] - 1
    controls = []
    warm = None
    for t in range(h):
        result = _expert_solve(spec, visited[t], t, warm=warm, settings=settings)
        if not result.converged:
            raise ExpertFailure(f"relabel solve failed at step {t}: {result.status}")
        controls.append(result.trajectory.controls[0])
        warm = _shift_warm(result.trajectory)
    completion = _expert_solve(spec, visited[h], h, warm=warm, settings=settings)
    if not completion.converged:
        raise ExpertFailure(f"completion solve failed at step {h}: {completion.status}")
    states = np.concatenate([visited[:h], completion.trajectory.states], axis=0)
    controls = np.array(controls + list(completion.trajectory.controls))
    assert states.shape[0] == n + 1 and controls.shape[0] == n
    costs = np.array([running_cost(u, spec.p, spec.q) for u in controls])
    flags = np.array([check_violation(states[i], controls[i], spec) for i in range(n)])
    return RawTrajectory(states=states, controls=controls, step_costs=costs,
                         violation_flags=flags, dt=spec.dt)


def _explore_model(params, stats, spec: ProblemSpec, horizon: int, settings) -> np.ndarray:
    rel = solve_rel(spec)
    seed_cond = ConditionSeed(
        target=spec.goal, reward_to_go=-rel.objective,
        violation_budget=0, initial_state=spec.start,
    )
    states, _ = generate(params, stats, seed_cond, horizon, spec)
    return states


def _explore_expert(spec: ProblemSpec, horizon: int, settings) -> np.ndarray:
    states = [spec.start]
    warm = None
    for t in range(horizon):
        result = _expert_solve(spec, states[-1], t, warm=warm, settings=settings)
        if not result.converged:
            raise ExpertFailure(f"expert exploration failed at step {t}: {result.status}")
        states.append(spec.step(states[-1], result.trajectory.controls[0]))
        warm = _shift_warm(result.trajectory)
    return np.array(states)


def finetune(pretrained: ModelParams, stats: NormStats, open_loop_samples: list,
             config: DaggerConfig, scenario_id: str,
             scenario_overrides: dict | None = None,
             train_settings: TrainSettings | None = None,
             log_fn=None) -> tuple[ModelParams, FinetuneReport]:
    """Iterative aggregation per the fine-tuning algorithm.

    The aggregated set always contains the open-loop data; retraining warm
    starts from the previous iterate's parameters at a reduced learning rate.
    Normalization statistics stay fixed to the pre-training ones.
    """
    params = pretrained.copy()
    base_train = train_settings or TrainSettings()
    retrain = replace(
        base_train,
        epochs=config.retrain_epochs,
        learning_rate=base_train.learning_rate * config.retrain_lr_scale,
    )
    d_ft = list(open_loop_samples)
    report = FinetuneReport()
    for it in range(config.dagger_iterations):
        new_samples = []
        failures = 0
        for r in range(config.trajectories_per_iteration):
            rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xDA66, it, r]))
            iseed = int(rng.integers(0, 2 ** 63 - 1))
            spec = sample_problem(scenario_id, iseed, scenario_overrides)
            settings = default_scp_settings(spec)
            horizons = config.horizons(spec.n_steps)
            horizon = int(horizons[rng.integers(len(horizons))])
            if config.expert_mix_rule == MIX_MODEL_ONLY:
                use_model = True
            elif config.expert_mix_rule == MIX_EXPERT_ONLY:
                use_model = False
            else:
                use_model = r % 2 == 0
            try:
                if use_model:
                    visited = _explore_model(params, stats, spec, horizon, settings)
                else:
                    visited = _explore_expert(spec, horizon, settings)
                traj = _relabel_rollout(spec, visited, settings)
            except (ExpertFailure, FloatingPointError) as exc:
                failures += 1
                log.warning("dagger iter %d rollout %d dropped: %s", it, r, exc)
                continue
            iid = f"{scenario_id}-dagger-{config.seed:08x}-{it:03d}-{r:03d}"
            new_samples.append(to_sequence(traj, traj.states[-1], instance_id=iid,
                                           scenario_id=scenario_id))
        if not new_samples:
            raise RuntimeError(
                f"dagger iteration {it}: every rollout failed "
                f"({failures}/{config.trajectories_per_iteration})")
        d_ft = d_ft + new_samples
        train_split, val_split = split_samples(d_ft)
        crop = params.config.context_length
        train_data = stack_samples(train_split if train_split else d_ft, stats,
                                   crop_length=crop, crop_seed=config.seed + it)
        val_data = (stack_samples(val_split, stats, crop_length=crop,
                                  crop_seed=config.seed + 1000 + it)
                    if val_split else None)
        result = train(params, stats, train_data, val_data,
                       replace(retrain, seed=retrain.seed + it + 1), log=log_fn)
        params = result.params
        report.iterations.append({
            "iteration": it,
            "n_new": len(new_samples),
            "n_failures": failures,
            "d_ft_size": len(d_ft),
            "best_val_loss": result.best_val_loss,
            "final_train_loss": result.final_train_loss,
        })
        if log_fn:
            log_fn(f"dagger iter {it}: +{len(new_samples)} rollouts "
                   f"({failures} failed), |D_ft|={len(d_ft)}, "
                   f"val={result.best_val_loss:.6g}")
    return params, report
