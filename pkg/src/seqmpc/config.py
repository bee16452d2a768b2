"""Run configuration: schema, validation, defaults, and hashing.

All experiment knobs live in one JSON file; commands take the config path and
nothing else, so a (config, seed) pair pins down every output byte except
wall-clock timings. Unknown keys anywhere in the file are rejected.
"""

from __future__ import annotations

import hashlib
import json
from copy import deepcopy

from .scenarios import SCENARIO_DEFAULTS, SCENARIO_IDS

CONFIG_VERSION = 1

DEFAULT_CONFIG = {
    "config_version": CONFIG_VERSION,
    "seed": 0,
    "output_dir": "runs/default",
    "workers": 1,
    "scenario": {
        "id": "freeflyer",
        "overrides": {},
    },
    "solver": {
        "j_tol": 1e-4,
        "max_iterations": 30,
        "penalty_weight": 1e3,
        "trust_region_shrink": 0.8,
    },
    "model": {
        "context_length": None,    # None: trajectory length
        "n_layers": 3,
        "n_heads": 3,
        "embed_dim": 96,
        "dropout": 0.0,
        "paper_scale": False,      # True: six layers, six heads
        "init_seed": 0,
    },
    "dataset": {
        "n_instances": 2000,
        "filename": "dataset.jsonl",
    },
    "training": {
        "epochs": 40,
        "batch_size": 16,
        "learning_rate": 3e-4,
        "grad_clip": 1.0,
        "patience": 10,
        "compute_dtype": "float64",
        "crops_per_sample": 2,
    },
    "dagger": {
        "dagger_iterations": 2,
        "trajectories_per_iteration": 8,
        "horizon_set": [],
        "expert_mix_rule": "alternate",
        "retrain_epochs": 6,
        "retrain_lr_scale": 0.3,
    },
    "eval_openloop": {
        "n_instances": 200,
        "min_ncf": 0.5,
        "max_candidates": 1500,
        "use_finetuned": True,
    },
    "eval_mpc": {
        "n_instances": 100,
        "horizons": [10, 20, 30],
        "strategies": ["REL_MPC", "DIST_MPC", "TTO_MPC", "FT_TTO_MPC"],
        "strategy_horizons": {},
        "terminal_weight": 10.0,
        "runtime_instances": 4,
        "runtime_horizons": [10, 20, 30, 40, 50, 60, 70, 80, 90, 100],
        "runtime_strategies": ["REL_MPC", "FT_TTO_MPC"],
    },
}


def _merge_validate(defaults, given, path=""):
    if not isinstance(given, dict):
        raise ValueError(f"config section {path or '<root>'} must be an object")
    unknown = set(given) - set(defaults)
    if unknown:
        raise ValueError(f"unknown config keys at {path or '<root>'}: {sorted(unknown)}")
    merged = {}
    for key, default in defaults.items():
        if key in given:
            value = given[key]
            # scenario overrides are validated against the scenario schema later
            if isinstance(default, dict) and key not in ("overrides", "strategy_horizons"):
                value = _merge_validate(default, value, f"{path}.{key}" if path else key)
            merged[key] = value
        else:
            merged[key] = deepcopy(default)
    return merged


def validate_config(raw: dict) -> dict:
    """Merge a raw config dict with defaults, rejecting unknown keys."""
    cfg = _merge_validate(DEFAULT_CONFIG, raw)
    if cfg["config_version"] != CONFIG_VERSION:
        raise ValueError(f"unsupported config_version {cfg['config_version']}")
    scenario = cfg["scenario"]["id"]
    if scenario not in SCENARIO_IDS:
        raise ValueError(f"unknown scenario {scenario!r}")
    overrides = cfg["scenario"]["overrides"]
    unknown = set(overrides) - set(SCENARIO_DEFAULTS[scenario])
    if unknown:
        raise ValueError(f"unknown scenario overrides: {sorted(unknown)}")
    named = (cfg["eval_mpc"]["strategies"] + cfg["eval_mpc"]["runtime_strategies"]
             + list(cfg["eval_mpc"]["strategy_horizons"]))
    for kind in named:
        if kind not in ("REL_MPC", "DIST_MPC", "TTO_MPC", "FT_TTO_MPC"):
            raise ValueError(f"unknown MPC strategy {kind!r}")
    if cfg["model"]["paper_scale"]:
        cfg["model"]["n_layers"] = 6
        cfg["model"]["n_heads"] = 6
    return cfg


def load_config(path) -> dict:
    with open(path) as fh:
        raw = json.load(fh)
    return validate_config(raw)


def config_hash(cfg: dict) -> str:
    """Hash of the experiment-defining keys; output location and worker count
    do not change what gets computed."""
    significant = {k: v for k, v in cfg.items() if k not in ("output_dir", "workers")}
    return hashlib.sha256(json.dumps(significant, sort_keys=True).encode()).hexdigest()[:16]
