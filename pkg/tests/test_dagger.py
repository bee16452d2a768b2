import numpy as np
import pytest

from helpers import small_overrides, tiny_corpus
from seqmpc.dagger import (DaggerConfig, ExpertFailure, _relabel_rollout, expert_action,
                           finetune)
from seqmpc.model import ModelConfig, NormStats, init_params
from seqmpc.scenarios import sample_problem
from seqmpc.scp import OcpWindow, default_scp_settings, solve_rel, solve_scp
from seqmpc.training import TrainSettings

N_STEPS = 12
OVR = small_overrides("freeflyer", N_STEPS)


@pytest.fixture(scope="module")
def spec():
    return sample_problem("freeflyer", 31, OVR)


@pytest.fixture(scope="module")
def tiny_model():
    cfg = ModelConfig(context_length=N_STEPS, n_layers=1, n_heads=1, embed_dim=16)
    return init_params(cfg, seed=0), NormStats.identity(6, 3)


class TestConfig:
    def test_default_horizons_span_short_to_full(self):
        cfg = DaggerConfig()
        hs = cfg.horizons(100)
        assert hs[0] == 10 and hs[-1] == 100 and len(hs) == 10

    def test_explicit_horizons_validated(self):
        cfg = DaggerConfig(horizon_set=(4, 200))
        with pytest.raises(ValueError):
            cfg.horizons(12)

    def test_bad_mix_rule(self):
        with pytest.raises(ValueError):
            DaggerConfig(expert_mix_rule="sometimes")


class TestExpert:
    def test_first_action_matches_full_solution(self, spec):
        rel = solve_rel(spec)
        full = solve_scp(spec, OcpWindow.full(spec.n_steps), rel.trajectory)
        u = expert_action(spec.start, spec, 0)
        np.testing.assert_allclose(u, full.trajectory.controls[0], atol=1e-6)

    def test_obstacle_free_expert_equals_rel(self, spec):
        free = spec.without_obstacles()
        rel = solve_rel(free)
        u = expert_action(free.start, free, 0)
        np.testing.assert_allclose(u, rel.trajectory.controls[0], atol=2e-3)

    def test_closed_loop_expert_reproduces_cost(self, spec):
        from seqmpc.core import running_cost
        rel = solve_rel(spec)
        full = solve_scp(spec, OcpWindow.full(spec.n_steps), rel.trajectory)
        x = spec.start.copy()
        total = 0.0
        from seqmpc.dagger import _expert_solve, _shift_warm
        warm = None
        for t in range(spec.n_steps):
            res = _expert_solve(spec, x, t, warm=warm)
            assert res.converged
            u = res.trajectory.controls[0]
            total += running_cost(u, spec.p, spec.q)
            x = spec.step(x, u)
            warm = _shift_warm(res.trajectory)
        assert total == pytest.approx(full.objective, rel=0.05)
        assert np.abs(x - spec.goal).max() < 1e-4


class TestRelabel:
    def test_relabeled_rollout_structure(self, spec):
        rng = np.random.default_rng(0)
        # exploration prefix: three noisy-drift states from the start
        visited = [spec.start]
        for _ in range(3):
            u = rng.normal(scale=0.2 * spec.dv_max, size=3)
            visited.append(spec.step(visited[-1], u))
        traj = _relabel_rollout(spec, np.array(visited), default_scp_settings(spec))
        assert traj.states.shape == (spec.n_steps + 1, 6)
        assert traj.controls.shape == (spec.n_steps, 3)
        np.testing.assert_array_equal(traj.states[:3], np.array(visited)[:3])
        # the expert completion ends on the goal
        assert np.abs(traj.states[-1] - spec.goal).max() <= 1e-5

    def test_relabel_controls_come_from_expert(self, spec):
        visited = np.array([spec.start, spec.step(spec.start, np.zeros(3))])
        traj = _relabel_rollout(spec, visited, default_scp_settings(spec))
        u_expert = expert_action(visited[0], spec, 0)
        np.testing.assert_allclose(traj.controls[0], u_expert, atol=1e-8)


class TestFinetune:
    def test_zero_iterations_returns_pretrained(self, tiny_model):
        params, stats = tiny_model
        samples = tiny_corpus("freeflyer", 2, seed=6, n_steps=N_STEPS)
        cfg = DaggerConfig(dagger_iterations=0, seed=0)
        tuned, report = finetune(params, stats, samples, cfg, "freeflyer", OVR)
        assert report.iterations == []
        for k in params.tensors:
            assert np.array_equal(tuned.tensors[k], params.tensors[k])

    def test_aggregation_grows_and_contains_openloop(self, tiny_model):
        params, stats = tiny_model
        samples = tiny_corpus("freeflyer", 2, seed=7, n_steps=N_STEPS)
        cfg = DaggerConfig(dagger_iterations=2, trajectories_per_iteration=2,
                           horizon_set=(3, 6), retrain_epochs=1, seed=1)
        tuned, report = finetune(
            params, stats, samples, cfg, "freeflyer", OVR,
            train_settings=TrainSettings(epochs=1, batch_size=2, seed=0))
        sizes = report.dataset_sizes
        assert len(sizes) == 2
        assert sizes[0] > len(samples)
        assert sizes[1] > sizes[0]

    def test_deterministic(self, tiny_model):
        params, stats = tiny_model
        samples = tiny_corpus("freeflyer", 2, seed=8, n_steps=N_STEPS)
        cfg = DaggerConfig(dagger_iterations=1, trajectories_per_iteration=2,
                           horizon_set=(3,), retrain_epochs=1, seed=2)
        ts = TrainSettings(epochs=1, batch_size=2, seed=0)
        a, _ = finetune(params, stats, samples, cfg, "freeflyer", OVR, train_settings=ts)
        b, _ = finetune(params, stats, samples, cfg, "freeflyer", OVR, train_settings=ts)
        assert a.checksum() == b.checksum()
