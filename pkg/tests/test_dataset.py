import hashlib
import json

import numpy as np
import pytest

from helpers import small_overrides, tiny_corpus
from seqmpc.dataset import (DatasetManifest, compute_norm_stats, generate_dataset,
                            instance_identifier, instance_seed, is_validation_instance,
                            load_manifest, load_samples, norm_stats_from_dict,
                            norm_stats_to_dict, read_records, record_to_sample,
                            sample_to_record, split_samples, write_records)

TINY = small_overrides("freeflyer", 12)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "tiny.jsonl"
    manifest = generate_dataset("freeflyer", 6, 123, out, overrides=TINY)
    return out, manifest


class TestRecords:
    def test_round_trip_bit_exact(self, tmp_path):
        samples = tiny_corpus("quadrotor", 2, seed=1, n_steps=10)
        records = [sample_to_record(s, {"kind": "full"}) for s in samples]
        path = tmp_path / "r.jsonl"
        write_records(path, records)
        loaded = [record_to_sample(r) for r in read_records(path)]
        for a, b in zip(samples, loaded):
            assert np.array_equal(a.states, b.states)
            assert np.array_equal(a.controls, b.controls)
            assert np.array_equal(a.rtg, b.rtg)
            assert np.array_equal(a.vbudget, b.vbudget)
            assert np.array_equal(a.target, b.target)
            assert a.dt == b.dt and a.instance_id == b.instance_id

    def test_empty_round_trip(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        write_records(path, [])
        assert list(read_records(path)) == []

    def test_truncated_line_reports_number(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"instance_id": "a"\n')
        with pytest.raises(ValueError, match="line 1"):
            list(read_records(path))

    def test_missing_fields_reported(self, tmp_path):
        path = tmp_path / "bad2.jsonl"
        path.write_text('{"instance_id": "a"}\n')
        with pytest.raises(ValueError, match="missing fields"):
            list(read_records(path))


class TestNormStats:
    def test_constant_field_floored(self):
        samples = tiny_corpus("quadrotor", 2, seed=2, n_steps=8)
        stats = compute_norm_stats(samples)
        assert np.all(stats.state_std > 0)
        # violation budgets of feasible-only corpora are constant zero
        if all(s.vbudget.max() == 0 for s in samples):
            assert stats.vb_std == pytest.approx(1e-8)

    def test_restandardization(self):
        samples = tiny_corpus("quadrotor", 2, seed=3, n_steps=8)
        stats = compute_norm_stats(samples)
        states = np.concatenate([s.states for s in samples])
        z = (states - stats.state_mean) / stats.state_std
        assert np.abs(z.mean(axis=0)).max() < 1e-10
        collapsed = stats.state_std < 1e-6
        assert np.allclose(z.std(axis=0)[~collapsed], 1.0, atol=1e-10)

    def test_matches_two_pass_oracle(self):
        samples = tiny_corpus("freeflyer", 3, seed=4, n_steps=8)
        stats = compute_norm_stats(samples)
        controls = np.concatenate([s.controls for s in samples])
        mean = np.array([np.mean(controls[:, j]) for j in range(3)])
        var = np.array([np.mean((controls[:, j] - mean[j]) ** 2) for j in range(3)])
        np.testing.assert_allclose(stats.control_mean, mean, atol=1e-12)
        np.testing.assert_allclose(stats.control_std,
                                   np.maximum(np.sqrt(var), 1e-8), atol=1e-12)

    def test_dict_round_trip(self):
        samples = tiny_corpus("freeflyer", 2, seed=5, n_steps=8)
        stats = compute_norm_stats(samples)
        clone = norm_stats_from_dict(norm_stats_to_dict(stats))
        for a, b in zip(stats.to_arrays().values(), clone.to_arrays().values()):
            np.testing.assert_array_equal(a, b)


class TestGeneration:
    def test_manifest_counts(self, corpus):
        path, manifest = corpus
        samples, metas = load_samples(path)
        assert manifest.n_written == len(samples)
        assert manifest.fraction_full == 0.5 and manifest.fraction_rel == 0.5
        kinds = {m["kind"] for m in metas}
        assert kinds <= {"full", "rel"}

    def test_full_samples_have_zero_budget(self, corpus):
        path, _ = corpus
        samples, metas = load_samples(path)
        for s, m in zip(samples, metas):
            if m["kind"] == "full":
                assert s.vbudget[0] == 0

    def test_rel_cost_lower_bounds_full_cost(self, corpus):
        path, _ = corpus
        _, metas = load_samples(path)
        for m in metas:
            if m["kind"] == "full":
                assert m["rel_cost"] <= m["full_cost"] * (1 + 1e-5) + 1e-8

    def test_deterministic_bytes(self, corpus, tmp_path):
        path, _ = corpus
        again = tmp_path / "again.jsonl"
        generate_dataset("freeflyer", 6, 123, again, overrides=TINY)
        assert path.read_bytes() == again.read_bytes()
        h1 = hashlib.sha256(path.read_bytes()).hexdigest()
        assert h1 == hashlib.sha256(again.read_bytes()).hexdigest()

    def test_resume_skips_existing(self, corpus, tmp_path):
        path, _ = corpus
        resumed = tmp_path / "resume.jsonl"
        lines = path.read_text().splitlines(keepends=True)
        resumed.write_text("".join(lines[:2]))
        generate_dataset("freeflyer", 6, 123, resumed, overrides=TINY)
        assert resumed.read_bytes() == path.read_bytes()

    def test_parallel_generation_identical(self, corpus, tmp_path):
        path, _ = corpus
        par = tmp_path / "par.jsonl"
        generate_dataset("freeflyer", 6, 123, par, overrides=TINY, workers=2)
        assert par.read_bytes() == path.read_bytes()

    def test_loaded_samples_revalidate(self, corpus):
        path, _ = corpus
        samples, _ = load_samples(path)
        for s in samples:
            assert np.all(np.diff(s.vbudget) <= 0)
            costs = s.step_costs
            assert np.all(costs >= -1e-12)

    def test_manifest_round_trip(self, corpus):
        path, manifest = corpus
        loaded = load_manifest(path)
        assert loaded.to_dict() == manifest.to_dict()

    def test_needs_two_instances(self, tmp_path):
        with pytest.raises(ValueError):
            generate_dataset("freeflyer", 1, 0, tmp_path / "x.jsonl")


class TestSplit:
    def test_split_stable_and_disjoint(self):
        ids = [instance_identifier("freeflyer", 7, i) for i in range(200)]
        val = [i for i in ids if is_validation_instance(i)]
        assert 0 < len(val) < len(ids)
        assert val == [i for i in ids if is_validation_instance(i)]
        frac = len(val) / len(ids)
        assert 0.02 < frac < 0.25

    def test_instance_seed_stable(self):
        assert instance_seed(7, 3) == instance_seed(7, 3)
        assert instance_seed(7, 3) != instance_seed(7, 4)
