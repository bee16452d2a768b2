"""Shared test utilities: batches, gradient checks, tiny corpora."""

import numpy as np

from seqmpc.core import to_sequence
from seqmpc.model import ModelConfig, NormStats, init_params, loss_and_grad
from seqmpc.scenarios import sample_problem
from seqmpc.scp import OcpWindow, solve_rel, solve_scp

MICRO_CONFIG = ModelConfig(context_length=4, n_layers=2, n_heads=2,
                           embed_dim=16, n_x=6, n_u=3)

# maneuver durations comparable to the full-size defaults (40 s / 10 s); with
# the default dt a short grid makes the actuation-limited free flyer unreachable
_DURATION = {"freeflyer": 40.0, "quadrotor": 10.0}


def small_overrides(scenario_id, n_steps, **extra):
    out = {"n_steps": n_steps, "dt": round(_DURATION[scenario_id] / n_steps, 4)}
    out.update(extra)
    return out


def random_batch(rng, batch=2, steps=4, n_x=6, n_u=3):
    return {
        "target": rng.normal(size=(batch, steps, n_x)),
        "rtg": rng.normal(size=(batch, steps)),
        "vb": rng.normal(size=(batch, steps)),
        "states": rng.normal(size=(batch, steps, n_x)),
        "controls": rng.normal(size=(batch, steps, n_u)),
        "normalized": True,
    }


def finite_difference_check(params, stats, batch, coords_per_tensor=None, h=1e-5):
    """Compare analytic gradients with central differences.

    coords_per_tensor None sweeps every coordinate; otherwise that many
    seeded random coordinates per tensor. The error is relative to the larger
    of the two values with a 1e-6 floor, so near-zero coordinates are compared
    absolutely (central differences bottom out around 1e-11 there).
    """
    value, grads = loss_and_grad(params, stats, batch)
    rng = np.random.default_rng(0)
    worst = 0.0
    for name, tensor in params.tensors.items():
        flat = tensor.ravel()
        if coords_per_tensor is None:
            indices = range(flat.size)
        else:
            indices = rng.integers(0, flat.size, size=min(coords_per_tensor, flat.size))
        for i in indices:
            orig = flat[i]
            flat[i] = orig + h
            lp, _ = loss_and_grad(params, stats, batch, need_grad=False)
            flat[i] = orig - h
            lm, _ = loss_and_grad(params, stats, batch, need_grad=False)
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            an = grads[name].ravel()[i]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    return worst


def tiny_corpus(scenario_id, n, seed=0, n_steps=16, workers=None):
    """Solve a handful of small instances into sequence samples for training
    tests. Alternates relaxation-only and full solves like the dataset module."""
    samples = []
    attempt = 0
    while len(samples) < n and attempt < 4 * n:
        attempt += 1
        spec = sample_problem(scenario_id, seed * 10_000 + attempt,
                              small_overrides(scenario_id, n_steps))
        rel = solve_rel(spec)
        if not rel.converged:
            continue
        if len(samples) % 2 == 0:
            result = solve_scp(spec, OcpWindow.full(spec.n_steps), rel.trajectory)
            if not result.converged:
                continue
        else:
            result = rel
        traj = result.trajectory
        samples.append(to_sequence(traj, traj.states[-1],
                                   instance_id=f"tiny-{seed}-{attempt}",
                                   scenario_id=scenario_id))
    return samples
