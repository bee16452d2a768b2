"""Batch entry points: data generation, training, fine-tuning, evaluation,
and report emission.

Every command takes a JSON config file (see config.DEFAULT_CONFIG for the
schema) and writes its outputs under the config's output directory with a
provenance header (config hash, package version, seed). Metric tables are
split from timing tables: metric bytes are reproducible from (config, seed),
wall-clock timings are not and live in separate files.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from multiprocessing import Pool

import numpy as np

from . import __version__
from .config import config_hash, load_config, validate_config
from .core import ConditionSeed, build_trajectory
from .dagger import DaggerConfig, finetune
from .dataset import (compute_norm_stats, generate_dataset, load_manifest,
                      load_samples, norm_stats_from_dict, split_samples)
from .model import ModelConfig, generate, init_params
from .mpc import MpcStrategy, evaluate_suite
from .scenarios import SCENARIO_DEFAULTS, sample_problem
from .scp import OcpWindow, default_scp_settings, solve_rel, solve_scp
from .training import TrainSettings, load_checkpoint, save_checkpoint, stack_samples, train

log = logging.getLogger("seqmpc")


# --- shared helpers ------------------------------------------------------------

def _outdir(cfg) -> str:
    os.makedirs(cfg["output_dir"], exist_ok=True)
    return cfg["output_dir"]


def _path(cfg, name) -> str:
    return os.path.join(_outdir(cfg), name)


def _provenance(cfg) -> list[str]:
    return [
        f"# seqmpc_version={__version__}",
        f"# config_hash={config_hash(cfg)}",
        f"# seed={cfg['seed']}",
    ]


def write_table(path, rows: list[dict], columns: list[str], header_lines: list[str]):
    with open(path, "w") as fh:
        for line in header_lines:
            fh.write(line + "\n")
        fh.write("\t".join(columns) + "\n")
        for row in rows:
            fh.write("\t".join(_fmt(row[c]) for c in columns) + "\n")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_table(path) -> list[dict]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing metrics file {path}")
    rows = []
    columns = None
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            if columns is None:
                columns = line.split("\t")
                continue
            values = line.split("\t")
            row = {}
            for c, v in zip(columns, values):
                try:
                    row[c] = int(v) if v.lstrip("-").isdigit() else float(v)
                except ValueError:
                    row[c] = v
            rows.append(row)
    return rows


def _scp_settings(cfg, spec, relaxation=False):
    solver = cfg["solver"]
    return default_scp_settings(
        spec, relaxation=relaxation,
        j_tol=solver["j_tol"], max_iterations=solver["max_iterations"],
        penalty_weight=solver["penalty_weight"],
        trust_region_shrink=solver["trust_region_shrink"],
    )


def _scenario_steps(cfg) -> int:
    sc = cfg["scenario"]
    return int(sc["overrides"].get("n_steps", SCENARIO_DEFAULTS[sc["id"]]["n_steps"]))


def _model_config(cfg) -> ModelConfig:
    m = cfg["model"]
    ctx = m["context_length"] or _scenario_steps(cfg)
    return ModelConfig(
        context_length=int(ctx), n_layers=m["n_layers"], n_heads=m["n_heads"],
        embed_dim=m["embed_dim"], dropout=m["dropout"],
    )


def _train_settings(cfg) -> TrainSettings:
    tr = cfg["training"]
    return TrainSettings(
        epochs=tr["epochs"], batch_size=tr["batch_size"],
        learning_rate=tr["learning_rate"], grad_clip=tr["grad_clip"],
        patience=tr["patience"], seed=cfg["seed"],
        compute_dtype=tr["compute_dtype"],
    )


def _dataset_path(cfg) -> str:
    return _path(cfg, cfg["dataset"]["filename"])


def _eval_seed(cfg, namespace: int, index: int) -> int:
    return int(np.random.SeedSequence([cfg["seed"], namespace, index]).generate_state(1)[0])


_NS_OPENLOOP = 0xE7A1
_NS_MPC = 0x3BC5


# --- commands -------------------------------------------------------------------

def cmd_generate_data(cfg) -> str:
    path = _dataset_path(cfg)
    log.info("generating dataset at %s", path)
    n_done = [0]

    def progress(done, total):
        if done % 25 == 0 or done == total:
            log.info("dataset: %d/%d instances", done, total)

    manifest = generate_dataset(
        cfg["scenario"]["id"], cfg["dataset"]["n_instances"], cfg["seed"], path,
        overrides=cfg["scenario"]["overrides"], workers=cfg["workers"],
        progress=progress,
    )
    failure_rate = manifest.n_failed / max(manifest.n_instances, 1)
    log.info("dataset done: %d written, %d failed (%.1f%%)",
             manifest.n_written, manifest.n_failed, 100 * failure_rate)
    return path


def cmd_train(cfg) -> str:
    data_path = _dataset_path(cfg)
    if not os.path.exists(data_path):
        raise FileNotFoundError(f"dataset not found at {data_path}; run generate-data first")
    samples, _ = load_samples(data_path)
    manifest = load_manifest(data_path)
    stats = norm_stats_from_dict(manifest.norm_stats)
    train_split, val_split = split_samples(samples)
    log.info("training on %d samples (%d validation)", len(train_split), len(val_split))
    mc = _model_config(cfg)
    crops = cfg["training"]["crops_per_sample"]
    train_data = stack_samples(train_split, stats, crop_length=mc.context_length,
                               crops_per_sample=crops, crop_seed=cfg["seed"])
    val_data = (stack_samples(val_split, stats, crop_length=mc.context_length,
                              crops_per_sample=crops, crop_seed=cfg["seed"] + 1)
                if val_split else None)
    params = init_params(mc, seed=cfg["model"]["init_seed"])
    result = train(params, stats, train_data, val_data, _train_settings(cfg), log=log.info)
    ckpt = _path(cfg, "pretrained.ckpt")
    save_checkpoint(ckpt, result.params, stats, meta={
        "kind": "pretrained",
        "config_hash": config_hash(cfg),
        "seqmpc_version": __version__,
        "seed": cfg["seed"],
        "scenario": cfg["scenario"]["id"],
        "dataset": cfg["dataset"]["filename"],
        "best_val_loss": result.best_val_loss,
        "final_train_loss": result.final_train_loss,
    })
    rows = [{"epoch": h["epoch"], "train_loss": h["train_loss"],
             "val_loss": h.get("val_loss", float("nan"))} for h in result.history]
    write_table(_path(cfg, "training_history.tsv"), rows,
                ["epoch", "train_loss", "val_loss"], _provenance(cfg))
    log.info("saved %s (best val %.6g)", ckpt, result.best_val_loss)
    return ckpt


def cmd_finetune(cfg) -> str:
    pre_path = _path(cfg, "pretrained.ckpt")
    if not os.path.exists(pre_path):
        raise FileNotFoundError(f"pretrained checkpoint missing at {pre_path}; run train first")
    data_path = _dataset_path(cfg)
    if not os.path.exists(data_path):
        raise FileNotFoundError(f"dataset not found at {data_path}")
    params, stats, meta = load_checkpoint(pre_path)
    samples, _ = load_samples(data_path)
    dg = cfg["dagger"]
    config = DaggerConfig(
        dagger_iterations=dg["dagger_iterations"],
        trajectories_per_iteration=dg["trajectories_per_iteration"],
        horizon_set=tuple(dg["horizon_set"]),
        expert_mix_rule=dg["expert_mix_rule"],
        retrain_epochs=dg["retrain_epochs"],
        retrain_lr_scale=dg["retrain_lr_scale"],
        seed=cfg["seed"],
    )
    tuned, report = finetune(
        params, stats, samples, config, cfg["scenario"]["id"],
        scenario_overrides=cfg["scenario"]["overrides"],
        train_settings=_train_settings(cfg), log_fn=log.info,
    )
    ckpt = _path(cfg, "finetuned.ckpt")
    save_checkpoint(ckpt, tuned, stats, meta={
        "kind": "finetuned",
        "config_hash": config_hash(cfg),
        "seqmpc_version": __version__,
        "seed": cfg["seed"],
        "scenario": cfg["scenario"]["id"],
        "lineage": {"pretrained": os.path.basename(pre_path),
                    "pretrained_meta": meta},
        "dagger_report": report.iterations,
    })
    with open(_path(cfg, "dagger_report.json"), "w") as fh:
        json.dump({"iterations": report.iterations,
                   "provenance": {"config_hash": config_hash(cfg),
                                  "version": __version__}}, fh, indent=2, sort_keys=True)
    log.info("saved %s after %d dagger iterations", ckpt, len(report.iterations))
    return ckpt


# openloop evaluation worker state
_worker_state: dict = {}


def _limit_worker_threads():
    # worker processes run many small solves; nested BLAS threading on two
    # cores only adds contention
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(1)
    except Exception:
        os.environ["OPENBLAS_NUM_THREADS"] = "1"


def _init_openloop_worker(cfg):
    _limit_worker_threads()
    _worker_state["cfg"] = cfg
    _worker_state["models"] = {}
    for name, fname in (("TTO", "pretrained.ckpt"), ("FT-TTO", "finetuned.ckpt")):
        path = os.path.join(cfg["output_dir"], fname)
        if os.path.exists(path):
            params, stats, _ = load_checkpoint(path)
            _worker_state["models"][name] = (params, stats)


def _openloop_candidate(args):
    cfg, index = args
    seed = _eval_seed(cfg, _NS_OPENLOOP, index)
    spec = sample_problem(cfg["scenario"]["id"], seed, cfg["scenario"]["overrides"])
    settings = _scp_settings(cfg, spec, relaxation=True)
    loose = default_scp_settings(spec, relaxation=False, max_iterations=15)
    rel = solve_rel(spec, settings=loose)
    if not rel.converged:
        return index, None
    violations = spec.koz_violation_count(rel.trajectory.states)
    return index, violations


def _openloop_instance(args):
    cfg, index, ncf = args
    seed = _eval_seed(cfg, _NS_OPENLOOP, index)
    spec = sample_problem(cfg["scenario"]["id"], seed, cfg["scenario"]["overrides"])
    settings = _scp_settings(cfg, spec)
    rel = solve_rel(spec, settings=_scp_settings(cfg, spec, relaxation=True))
    if not rel.converged:
        return index, []
    lb = rel.objective
    window = OcpWindow.full(spec.n_steps)
    rows = []

    def add_row(method, warm, gen_time):
        import time as _time
        t0 = _time.perf_counter()
        result = solve_scp(spec, window, warm, settings=settings)
        rows.append({
            "instance": index, "instance_seed": seed, "ncf": ncf, "method": method,
            "cost": result.objective, "lower_bound": lb,
            "subopt": (result.objective - lb) / max(abs(lb), 1e-9),
            "scp_iterations": result.scp_iterations,
            "converged": result.converged,
            "warm_time": gen_time, "solve_time": _time.perf_counter() - t0,
        })

    add_row("REL", rel.trajectory, 0.0)
    import time as _time
    for name, model in sorted(_worker_state["models"].items()):
        params, stats = model
        cond = ConditionSeed(target=spec.goal, reward_to_go=-lb,
                             violation_budget=0, initial_state=spec.start)
        t0 = _time.perf_counter()
        try:
            states, controls = generate(params, stats, cond, spec.n_steps, spec)
        except FloatingPointError:
            continue
        gen_time = _time.perf_counter() - t0
        add_row(name, build_trajectory(spec, states, controls), gen_time)
    return index, rows


def cmd_eval_openloop(cfg) -> str:
    ev = cfg["eval_openloop"]
    candidates = list(range(ev["max_candidates"]))
    log.info("screening %d candidate instances", len(candidates))
    args = [(cfg, i) for i in candidates]
    violations: dict[int, int] = {}
    if cfg["workers"] > 1:
        with Pool(cfg["workers"]) as pool:
            for index, v in pool.imap(_openloop_candidate, args, chunksize=4):
                if v is not None:
                    violations[index] = v
    else:
        for a in args:
            index, v = _openloop_candidate(a)
            if v is not None:
                violations[index] = v
    if not violations:
        raise RuntimeError("no candidate instance had a solvable relaxation")
    c_max = max(violations.values())
    if c_max == 0:
        raise RuntimeError("all candidates are convex-solvable; cannot bucket by difficulty")
    ncf = {i: v / c_max for i, v in violations.items()}
    hard = [i for i in sorted(ncf) if ncf[i] > ev["min_ncf"]]
    selected = hard[: ev["n_instances"]]
    if len(selected) < ev["n_instances"]:
        log.warning("only %d/%d instances exceed ncf %.2f; raise max_candidates",
                    len(selected), ev["n_instances"], ev["min_ncf"])
    log.info("selected %d hard instances (C_max=%d)", len(selected), c_max)

    _init_openloop_worker(cfg)
    inst_args = [(cfg, i, ncf[i]) for i in selected]
    all_rows = []
    if cfg["workers"] > 1:
        with Pool(cfg["workers"], initializer=_init_openloop_worker, initargs=(cfg,)) as pool:
            for index, rows in pool.imap(_openloop_instance, inst_args, chunksize=1):
                all_rows.extend(rows)
                if index % 20 == 0:
                    log.info("openloop eval: instance %d done", index)
    else:
        for a in inst_args:
            _, rows = _openloop_instance(a)
            all_rows.extend(rows)
    all_rows.sort(key=lambda r: (r["instance"], r["method"]))
    columns = ["instance", "instance_seed", "ncf", "method", "cost", "lower_bound",
               "subopt", "scp_iterations", "converged"]
    out = _path(cfg, "openloop_metrics.tsv")
    write_table(out, all_rows, columns, _provenance(cfg))
    write_table(_path(cfg, "openloop_timings.tsv"), all_rows,
                ["instance", "method", "warm_time", "solve_time"],
                _provenance(cfg) + ["# wall-clock times; not reproducible byte-for-byte"])
    log.info("wrote %s (%d rows)", out, len(all_rows))
    return out


def _init_mpc_worker(cfg):
    _init_openloop_worker(cfg)


def _build_strategies(cfg, kinds):
    models = _worker_state["models"]
    strategies = []
    for kind in kinds:
        model = None
        if kind == "TTO_MPC":
            model = models.get("TTO")
        elif kind == "FT_TTO_MPC":
            model = models.get("FT-TTO")
        if kind in ("TTO_MPC", "FT_TTO_MPC") and model is None:
            raise FileNotFoundError(f"{kind} requires a checkpoint that was not found")
        strategies.append(MpcStrategy(kind=kind, model=model,
                                      terminal_weight=cfg["eval_mpc"]["terminal_weight"]))
    return strategies


def _mpc_instance(args):
    cfg, index, horizons, kinds, strategy_horizons = args
    seed = _eval_seed(cfg, _NS_MPC, index)
    spec = sample_problem(cfg["scenario"]["id"], seed, cfg["scenario"]["overrides"])
    strategies = _build_strategies(cfg, kinds)
    settings = _scp_settings(cfg, spec)
    rows = evaluate_suite(strategies, [spec], list(horizons), settings=settings,
                          strategy_horizons=strategy_horizons)
    for r in rows:
        r["instance"] = index
        r["instance_seed"] = seed
    return index, rows


def cmd_eval_mpc(cfg) -> str:
    ev = cfg["eval_mpc"]
    _init_openloop_worker(cfg)

    def run_grid(indices, horizons, kinds, tag, strategy_horizons=None):
        args = [(cfg, i, horizons, kinds, strategy_horizons) for i in indices]
        rows = []
        if cfg["workers"] > 1:
            with Pool(cfg["workers"], initializer=_init_mpc_worker, initargs=(cfg,)) as pool:
                for index, r in pool.imap(_mpc_instance, args, chunksize=1):
                    rows.extend(r)
                    log.info("mpc eval (%s): instance %d done", tag, index)
        else:
            for a in args:
                index, r = _mpc_instance(a)
                rows.extend(r)
                log.info("mpc eval (%s): instance %d done", tag, index)
        rows.sort(key=lambda r: (r["instance"], r["strategy"], r["horizon"]))
        return rows

    sh = ev["strategy_horizons"] or None
    main_kinds = list(sh) if sh else ev["strategies"]
    main_rows = run_grid(range(ev["n_instances"]), ev["horizons"], main_kinds,
                         "main", strategy_horizons=sh)
    metric_cols = ["instance", "instance_seed", "strategy", "horizon", "total_cost",
                   "lower_bound", "max_cost", "norm_increment", "target_error",
                   "mean_scp_iterations", "aborted"]
    timing_cols = ["instance", "strategy", "horizon", "mean_warm_time",
                   "mean_ocp_time", "max_step_time"]
    out = _path(cfg, "mpc_metrics.tsv")
    write_table(out, main_rows, metric_cols, _provenance(cfg))
    write_table(_path(cfg, "mpc_timings.tsv"), main_rows, timing_cols,
                _provenance(cfg) + ["# wall-clock times; not reproducible byte-for-byte"])

    runtime_rows = run_grid(
        range(10_000, 10_000 + ev["runtime_instances"]),
        ev["runtime_horizons"], ev["runtime_strategies"], "runtime")
    write_table(_path(cfg, "mpc_runtime_grid.tsv"), runtime_rows,
                metric_cols + ["mean_warm_time", "mean_ocp_time", "max_step_time"],
                _provenance(cfg) + ["# wall-clock times; not reproducible byte-for-byte"])
    log.info("wrote %s (%d rows)", out, len(main_rows))
    return out


def cmd_report(cfg) -> str:
    report_dir = os.path.join(_outdir(cfg), "report")
    os.makedirs(report_dir, exist_ok=True)
    header = _provenance(cfg)
    summary_lines = []

    # open-loop buckets: improvements vs the relaxation warm start, cumulative
    # over difficulty thresholds
    ol_path = _path(cfg, "openloop_metrics.tsv")
    ol_rows = read_table(ol_path)
    by_instance: dict[int, dict] = {}
    for r in ol_rows:
        by_instance.setdefault(r["instance"], {})[r["method"]] = r
    methods = sorted({r["method"] for r in ol_rows} - {"REL"})
    bucket_rows = []
    for theta in [round(0.1 * k, 1) for k in range(10)]:
        chosen = [inst for inst in by_instance.values()
                  if "REL" in inst and inst["REL"]["ncf"] >= theta]
        for method in methods:
            pairs = [(i["REL"], i[method]) for i in chosen if method in i]
            if not pairs:
                continue
            base_sub = np.mean([p[0]["subopt"] for p in pairs])
            meth_sub = np.mean([p[1]["subopt"] for p in pairs])
            base_it = np.mean([p[0]["scp_iterations"] for p in pairs])
            meth_it = np.mean([p[1]["scp_iterations"] for p in pairs])
            bucket_rows.append({
                "threshold": theta, "method": method, "n": len(pairs),
                "cost_improvement_pct": 100.0 * (base_sub - meth_sub) / max(base_sub, 1e-12),
                "iteration_reduction_pct": 100.0 * (base_it - meth_it) / max(base_it, 1e-12),
            })
    write_table(os.path.join(report_dir, "fig_openloop_buckets.tsv"), bucket_rows,
                ["threshold", "method", "n", "cost_improvement_pct",
                 "iteration_reduction_pct"], header)

    # mpc cost curves
    mpc_path = _path(cfg, "mpc_metrics.tsv")
    mpc_rows = read_table(mpc_path)
    curve_rows = []
    for (strategy, horizon) in sorted({(r["strategy"], r["horizon"]) for r in mpc_rows}):
        sel = [r for r in mpc_rows if r["strategy"] == strategy and r["horizon"] == horizon]
        curve_rows.append({
            "strategy": strategy, "horizon": horizon, "n": len(sel),
            "mean_norm_increment": float(np.mean([r["norm_increment"] for r in sel])),
            "mean_target_error": float(np.mean([r["target_error"] for r in sel])),
            "mean_scp_iterations": float(np.mean([r["mean_scp_iterations"] for r in sel])),
        })
    write_table(os.path.join(report_dir, "fig_mpc_cost_vs_horizon.tsv"), curve_rows,
                ["strategy", "horizon", "n", "mean_norm_increment",
                 "mean_target_error", "mean_scp_iterations"], header)

    # runtime decomposition curves from the runtime grid
    rt_path = _path(cfg, "mpc_runtime_grid.tsv")
    rt_rows = read_table(rt_path)
    rt_curves = []
    for (strategy, horizon) in sorted({(r["strategy"], r["horizon"]) for r in rt_rows}):
        sel = [r for r in rt_rows if r["strategy"] == strategy and r["horizon"] == horizon]
        rt_curves.append({
            "strategy": strategy, "horizon": horizon, "n": len(sel),
            "mean_warm_time": float(np.mean([r["mean_warm_time"] for r in sel])),
            "mean_ocp_time": float(np.mean([r["mean_ocp_time"] for r in sel])),
            "mean_max_step_time": float(np.mean([r["max_step_time"] for r in sel])),
        })
    write_table(os.path.join(report_dir, "fig_mpc_runtime_vs_horizon.tsv"), rt_curves,
                ["strategy", "horizon", "n", "mean_warm_time", "mean_ocp_time",
                 "mean_max_step_time"], header)

    from scipy.stats import spearmanr
    rel_curve = [(r["horizon"], r["mean_ocp_time"]) for r in rt_curves
                 if r["strategy"] == "REL_MPC"]
    if len(rel_curve) >= 3:
        hs, ts = zip(*sorted(rel_curve))
        rho = float(spearmanr(hs, ts).statistic)
        summary_lines.append(f"relmpc_ocp_time_spearman_vs_horizon\t{rho!r}")

    summary_lines.append(f"openloop_rows\t{len(ol_rows)}")
    summary_lines.append(f"openloop_cost_sum\t{sum(r['cost'] for r in ol_rows)!r}")
    summary_lines.append(f"openloop_iter_sum\t{sum(r['scp_iterations'] for r in ol_rows)}")
    summary_lines.append(f"mpc_rows\t{len(mpc_rows)}")
    summary_lines.append(f"mpc_cost_sum\t{sum(r['total_cost'] for r in mpc_rows)!r}")
    for (strategy, horizon) in sorted({(r["strategy"], r["horizon"]) for r in mpc_rows}):
        sel = [r["norm_increment"] for r in mpc_rows
               if r["strategy"] == strategy and r["horizon"] == horizon]
        summary_lines.append(
            f"mpc_mean_increment\t{strategy}\tH={horizon}\t{float(np.mean(sel))!r}")
    with open(os.path.join(report_dir, "summary.txt"), "w") as fh:
        for line in header:
            fh.write(line + "\n")
        for line in summary_lines:
            fh.write(line + "\n")
    log.info("report written to %s", report_dir)
    return report_dir


# --- main -----------------------------------------------------------------------

_COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "eval-openloop": cmd_eval_openloop,
    "eval-mpc": cmd_eval_mpc,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="seqmpc",
        description="sequence-model-guided trajectory optimization and MPC",
    )
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="path to the JSON run config")
    parser.add_argument("--output-dir", default=None, help="override the config output_dir")
    parser.add_argument("--workers", type=int, default=None, help="override worker count")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        cfg = load_config(args.config)
        if args.output_dir:
            cfg["output_dir"] = args.output_dir
        if args.workers:
            cfg["workers"] = args.workers
        _COMMANDS[args.command](cfg)
    except (ValueError, KeyError) as exc:
        log.error("configuration error: %s", exc)
        return 2
    except FileNotFoundError as exc:
        log.error("missing input: %s", exc)
        return 3
    except RuntimeError as exc:
        log.error("run failed: %s", exc)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
