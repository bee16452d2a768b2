"""Training-corpus generation, normalization statistics, and record files.

Records are line-delimited JSON, one trajectory per line, with keys in sorted
order and floats in Python repr (shortest round-trip) encoding, so a corpus
generated from the same (scenario, size, seed) is byte-identical and survives
read/write round trips bit-exactly. A manifest sidecar documents fractions,
seeds, the scenario parameter snapshot, and the normalization statistics.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from multiprocessing import Pool

import numpy as np

from .core import SequenceSample, to_sequence
from .model import NormStats
from .scenarios import SCENARIO_DEFAULTS, sample_problem
from .scp import OcpWindow, default_scp_settings, solve_rel, solve_scp

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
_STD_FLOOR = 1e-8


@dataclass
class DatasetManifest:
    scenario_id: str
    n_instances: int
    fraction_full: float
    fraction_rel: float
    seed: int
    scenario_params: dict
    format_version: int = FORMAT_VERSION
    n_written: int = 0
    n_failed: int = 0
    failed_ids: list = field(default_factory=list)
    norm_stats: dict | None = None

    def __post_init__(self):
        if abs(self.fraction_full + self.fraction_rel - 1.0) > 1e-12:
            raise ValueError("fractions must sum to 1")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def from_dict(d: dict) -> "DatasetManifest":
        return DatasetManifest(**d)


def instance_seed(seed: int, index: int) -> int:
    """Stable per-instance seed derived from the corpus seed."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def instance_identifier(scenario_id: str, seed: int, index: int) -> str:
    return f"{scenario_id}-{seed:08x}-{index:06d}"


def sample_to_record(sample: SequenceSample, extra: dict | None = None) -> dict:
    rec = {
        "instance_id": sample.instance_id,
        "scenario_id": sample.scenario_id,
        "dt": sample.dt,
        "target": sample.target.tolist(),
        "rtg": sample.rtg.tolist(),
        "vbudget": sample.vbudget.tolist(),
        "states": sample.states.tolist(),
        "controls": sample.controls.tolist(),
    }
    if extra:
        rec.update(extra)
    return rec


def record_to_sample(rec: dict) -> SequenceSample:
    return SequenceSample(
        target=np.array(rec["target"], dtype=float),
        rtg=np.array(rec["rtg"], dtype=float),
        vbudget=np.array(rec["vbudget"], dtype=np.int64),
        states=np.array(rec["states"], dtype=float),
        controls=np.array(rec["controls"], dtype=float),
        dt=float(rec["dt"]),
        instance_id=rec["instance_id"],
        scenario_id=rec["scenario_id"],
    )


def write_records(path, records) -> int:
    count = 0
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")
            count += 1
    return count


def read_records(path):
    """Yield validated record dicts; malformed lines raise with their number."""
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {lineno}: truncated or invalid record ({exc})")
            missing = {"instance_id", "scenario_id", "dt", "target", "rtg",
                       "vbudget", "states", "controls"} - set(rec)
            if missing:
                raise ValueError(f"{path}: line {lineno}: missing fields {sorted(missing)}")
            yield rec


def load_samples(path) -> tuple[list[SequenceSample], list[dict]]:
    """Read a record file; the SequenceSample constructor re-validates the
    suffix-sum invariants of every stored trajectory."""
    samples, metas = [], []
    for rec in read_records(path):
        samples.append(record_to_sample(rec))
        metas.append(rec)
    return samples, metas


def compute_norm_stats(samples: list[SequenceSample]) -> NormStats:
    """Per-dimension mean and std (floored) over the given samples."""
    if not samples:
        raise ValueError("cannot compute statistics of an empty dataset")
    states = np.concatenate([s.states for s in samples])
    controls = np.concatenate([s.controls for s in samples])
    targets = np.stack([s.target for s in samples])
    rtg = np.concatenate([s.rtg for s in samples])
    vb = np.concatenate([s.vbudget.astype(float) for s in samples])

    def _std(a, axis=0):
        return np.maximum(np.std(a, axis=axis), _STD_FLOOR)

    return NormStats(
        state_mean=states.mean(axis=0), state_std=_std(states),
        control_mean=controls.mean(axis=0), control_std=_std(controls),
        target_mean=targets.mean(axis=0), target_std=_std(targets),
        rtg_mean=float(rtg.mean()), rtg_std=float(_std(rtg, axis=None)),
        vb_mean=float(vb.mean()), vb_std=float(_std(vb, axis=None)),
    )


def norm_stats_to_dict(stats: NormStats) -> dict:
    return {k: v.tolist() for k, v in stats.to_arrays().items()}


def norm_stats_from_dict(d: dict) -> NormStats:
    return NormStats.from_arrays({k: np.array(v, dtype=float) for k, v in d.items()})


def is_validation_instance(instance_id: str, val_mod: int = 10) -> bool:
    """Stable 90/10 split keyed on a hash of the instance id."""
    digest = hashlib.sha1(instance_id.encode()).digest()
    return int.from_bytes(digest[:4], "big") % val_mod == 0


def split_samples(samples: list[SequenceSample]):
    train = [s for s in samples if not is_validation_instance(s.instance_id)]
    val = [s for s in samples if is_validation_instance(s.instance_id)]
    return train, val


def _limit_worker_threads():
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(1)
    except Exception:
        os.environ["OPENBLAS_NUM_THREADS"] = "1"


def _generate_one(args) -> tuple[int, dict | None]:
    scenario_id, seed, index, overrides = args
    iseed = instance_seed(seed, index)
    iid = instance_identifier(scenario_id, seed, index)
    spec = sample_problem(scenario_id, iseed, overrides)
    settings = default_scp_settings(spec)
    kind = "full" if index % 2 == 0 else "rel"
    rel = solve_rel(spec)
    if not rel.converged:
        log.warning("instance %s: relaxation failed (%s), dropped", iid, rel.status)
        return index, None
    if kind == "rel":
        result = rel
        extra = {
            "kind": "rel",
            "instance_seed": iseed,
            "rel_cost": rel.objective,
            "scp_iterations": rel.scp_iterations,
        }
    else:
        full = solve_scp(spec, OcpWindow.full(spec.n_steps), rel.trajectory,
                         settings=settings)
        if not full.converged:
            log.warning("instance %s: full solve failed (%s), dropped", iid, full.status)
            return index, None
        result = full
        extra = {
            "kind": "full",
            "instance_seed": iseed,
            "rel_cost": rel.objective,
            "full_cost": full.objective,
            "scp_iterations": full.scp_iterations,
        }
    traj = result.trajectory
    sample = to_sequence(traj, traj.states[-1], instance_id=iid, scenario_id=scenario_id)
    return index, sample_to_record(sample, extra)


def generate_dataset(scenario_id: str, n_instances: int, seed: int, out_path,
                     overrides: dict | None = None, workers: int = 1,
                     progress=None) -> DatasetManifest:
    """Solve n_instances randomized problems and write the record file.

    Even indices get full solves warm-started from the relaxation, odd indices
    get the relaxation only. Existing records at out_path are kept and their
    indices skipped, so interrupted runs resume without duplicates.
    """
    if n_instances < 2:
        raise ValueError("need at least two instances")
    out_path = str(out_path)
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    done: dict[int, dict] = {}
    if os.path.exists(out_path):
        for rec in read_records(out_path):
            prefix = instance_identifier(scenario_id, seed, 0).rsplit("-", 1)[0]
            if rec["instance_id"].startswith(prefix):
                done[int(rec["instance_id"].rsplit("-", 1)[1])] = rec
    todo = [i for i in range(n_instances) if i not in done]
    args = [(scenario_id, seed, i, overrides) for i in todo]
    results: dict[int, dict | None] = {}
    if workers > 1 and len(args) > 1:
        with Pool(workers, initializer=_limit_worker_threads) as pool:
            for index, rec in pool.imap(_generate_one, args, chunksize=1):
                results[index] = rec
                if progress:
                    progress(len(results), len(args))
    else:
        for a in args:
            index, rec = _generate_one(a)
            results[index] = rec
            if progress:
                progress(len(results), len(args))

    failed = sorted(i for i, rec in results.items() if rec is None)
    all_records = dict(done)
    all_records.update({i: r for i, r in results.items() if r is not None})
    ordered = [all_records[i] for i in sorted(all_records)]
    write_records(out_path, ordered)

    samples = [record_to_sample(r) for r in ordered]
    train, _ = split_samples(samples)
    stats = compute_norm_stats(train if train else samples)
    manifest = DatasetManifest(
        scenario_id=scenario_id,
        n_instances=n_instances,
        fraction_full=0.5,
        fraction_rel=0.5,
        seed=seed,
        scenario_params=dict(overrides or {}),
        n_written=len(ordered),
        n_failed=len(failed),
        failed_ids=[instance_identifier(scenario_id, seed, i) for i in failed],
        norm_stats=norm_stats_to_dict(stats),
    )
    manifest.scenario_params = {**SCENARIO_DEFAULTS[scenario_id], **(overrides or {})}
    with open(manifest_path(out_path), "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
    return manifest


def manifest_path(records_path) -> str:
    return str(records_path) + ".manifest.json"


def load_manifest(records_path) -> DatasetManifest:
    with open(manifest_path(records_path)) as fh:
        return DatasetManifest.from_dict(json.load(fh))
