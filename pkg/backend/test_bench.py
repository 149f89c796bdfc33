#!/usr/bin/env python3
"""
Tests for the experiment harness.
This script tests:
1. Manifest reading and the category-disjoint split
2. Synthetic categories
3. CSV output with header comments
4. Test-set evaluation, ICP baseline and ablation arms (trained arms included)
5. Single-pair and test-set averaged traces
"""

import math
import tempfile
from pathlib import Path

import numpy as np
import pytest
import yaml
from scipy import stats

from exceptions import DataFormatError, ValidationError
from services.agent_service import RegistrationTrace, TraceRecord
from services.bench_service import (
    ABLATION_COLUMNS,
    EVAL_COLUMNS,
    MEAN_TRACE_COLUMNS,
    ROTATION_COLUMNS,
    BenchService,
    DatasetSpec,
    ExperimentConfig,
    ManifestEntry,
    aggregate_traces,
    read_csv,
    read_manifest,
    sample_rotation_rows,
    split_manifest,
    summary_row,
    synthetic_categories,
    synthetic_entries,
    write_csv,
)
from services.cloud_service import PerturbationConfig
from services.rewardnet_service import NetConfig
from services.sampling_service import TransformSampleConfig
from services.training_service import TrainConfig


def small_config(**overrides):
    values = dict(n_points=32, n_pairs=5, dataset=DatasetSpec(shape_points=64), workers=2, seed=3)
    values.update(overrides)
    return ExperimentConfig(**values)


def test_synthetic_categories():
    categories = synthetic_categories(7)
    assert len(categories) == 40
    assert [name for name, _, _ in categories[:2]] == ["sphere_00", "sphere_01"]
    assert categories[10][0] == "box_00" and categories[39][0] == "torus_09"
    assert all(params is None for name, _, params in categories if name.endswith("_00"))
    assert categories == synthetic_categories(7)
    print("✅ 40 synthetic categories, family by family")


def test_split_is_category_disjoint():
    split = split_manifest(synthetic_entries(7))
    assert split.counts() == {"train": 20, "val": 0, "test": 20}
    train = {e.category for e in split.train}
    test = {e.category for e in split.test}
    assert not train & test
    assert all(name.startswith(("sphere", "box")) for name in train)
    print("✅ First half of the categories trains, second half tests")


def test_split_holds_out_validation_entries():
    entries = [ManifestEntry(f"{c}_{i}.xyz", c) for c in ("a", "b", "c", "d") for i in range(10)]
    split = split_manifest(entries, val_fraction=0.1)
    assert split.counts() == {"train": 18, "val": 2, "test": 20}
    assert [e.file for e in split.val] == ["a_9.xyz", "b_9.xyz"]
    with pytest.raises(ValidationError):
        split_manifest(entries[:10])
    with pytest.raises(DataFormatError):
        split_manifest([ManifestEntry("x.xyz", "")] + entries)
    print("✅ Validation entries come from the training categories")


def test_read_manifest():
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "manifest.yaml"
        path.write_text(yaml.safe_dump([{"file": "chair.xyz", "category": "chair"},
                                        {"file": "/abs/desk.off", "category": "desk"}]))
        entries = read_manifest(path)
        assert entries[0] == ManifestEntry(str(Path(tmp) / "chair.xyz"), "chair")
        assert entries[1].file == "/abs/desk.off"

        wrapped = Path(tmp) / "wrapped.yaml"
        wrapped.write_text(yaml.safe_dump({"entries": [{"file": "a.xyz", "category": "a"}]}))
        assert len(read_manifest(wrapped)) == 1

        broken = Path(tmp) / "broken.yaml"
        broken.write_text(yaml.safe_dump([{"file": "a.xyz"}]))
        with pytest.raises(DataFormatError):
            read_manifest(broken)
        with pytest.raises(DataFormatError):
            read_manifest(Path(tmp) / "missing.yaml")
    print("✅ Manifest entries resolve relative to the manifest")


def test_write_csv_header_and_floats():
    with tempfile.TemporaryDirectory() as tmp:
        path = write_csv(Path(tmp) / "out" / "rows.csv", [{"a": 1, "b": 0.1 + 0.2}], ["a", "b"],
                         {"command": "eval", "seed": 5})
        lines = path.read_text().splitlines()
        assert lines[:2] == ["# command: eval", "# seed: 5"]
        assert lines[2:] == ["a,b", "1,0.3"]
        frame = read_csv(path)
        assert list(frame.columns) == ["a", "b"] and len(frame) == 1
        assert not (Path(tmp) / "out" / "rows.csv.tmp").exists()
    print("✅ CSV header comments and %.10g floats")


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(reward_source="network")
    with pytest.raises(ValueError):
        ExperimentConfig(n_points=4096)
    with pytest.raises(ValueError):
        DatasetSpec(kind="manifest")
    assert small_config(protocol="partial").resolved_perturbation().final_points == 23
    print("✅ Experiment config validation")


def test_partial_protocol_rejects_uncropped_perturbation():
    with pytest.raises(ValueError):
        small_config(protocol="partial", perturbation=PerturbationConfig.noisy(n_points=32))
    with pytest.raises(ValueError):
        small_config(protocol="partial",
                     perturbation=PerturbationConfig(n_points=32, crop_fraction=0.7, final_points=30))
    explicit = small_config(protocol="partial", perturbation=PerturbationConfig.partial(n_points=32, seed=11))
    assert explicit.resolved_perturbation().seed == 11
    assert small_config(protocol="clean", perturbation=PerturbationConfig.noisy(n_points=32)).perturbation.noise_sigma > 0
    print("✅ Partial protocol keeps its crop with an explicit perturbation")


def test_config_from_yaml():
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "exp.yaml"
        path.write_text(yaml.safe_dump({"protocol": "noisy", "n_pairs": 7, "policy": {"kind": "stoch2"}}))
        cfg = ExperimentConfig.from_yaml(path, n_pairs=3, seed=None)
        assert cfg.protocol == "noisy" and cfg.n_pairs == 3 and cfg.policy.kind == "stoch2"
        bad = Path(tmp) / "bad.yaml"
        bad.write_text("- just\n- a list\n")
        with pytest.raises(DataFormatError):
            ExperimentConfig.from_yaml(bad)
    print("✅ YAML config with overrides")


def test_test_pairs_are_deterministic():
    bench = BenchService(small_config())
    first = bench.test_pairs()
    again = BenchService(small_config()).test_pairs()
    assert [name for name, _ in first] == ["helix_00", "helix_01", "helix_02", "helix_03", "helix_04"]
    for (_, a), (_, b) in zip(first, again):
        assert np.array_equal(a.source.points, b.source.points)
        assert np.array_equal(a.gt.rotation, b.gt.rotation)
    print("✅ Test set fixed by the seed")


def test_evaluate_rows_follow_test_set_order():
    results = BenchService(small_config()).evaluate()
    assert [r.index for r in results] == list(range(5))
    rows = [r.to_row() for r in results]
    assert all(set(EVAL_COLUMNS) == set(row) for row in rows)
    serial = BenchService(small_config(workers=1)).evaluate()
    assert [r.report.rot_err_deg for r in serial] == [r.report.rot_err_deg for r in results]
    summary = summary_row(results)
    assert summary["pair_index"] == "mean"
    assert summary["rot_err_deg"] == pytest.approx(np.mean([r.report.rot_err_deg for r in results]))
    assert all(r.init_rot_err_deg <= 60.0 + 1e-9 for r in results)
    print(f"✅ Oracle mean rotation error {summary['rot_err_deg']:.3f}°")


def test_icp_baseline_rows():
    results = BenchService(small_config(n_pairs=3)).evaluate(source_kind="icp")
    assert len(results) == 3
    assert all(r.trace is None and math.isfinite(r.report.mcd) for r in results)
    print("✅ Plain ICP baseline evaluates the same test set")


def test_trace_and_timing():
    bench = BenchService(small_config(n_pairs=2))
    result, trace = bench.trace(1)
    assert len(trace) == 60 and result.index == 1
    with pytest.raises(ValidationError):
        bench.trace(5)
    with pytest.raises(ValidationError):
        BenchService(small_config(reward_source="icp")).trace(0)
    timing = bench.time_registrations()
    assert timing["n_pairs"] == 2 and timing["min_ms"] <= timing["mean_ms"] <= timing["max_ms"]
    print("✅ Trace of one pair and per-call timing")


def flat_trace(values, initial):
    records = [TraceRecord(i, 0, "rot_x+_large", np.zeros(24), None, v, v / 10.0, v / 100.0)
               for i, v in enumerate(values)]
    return RegistrationTrace(records, initial, initial / 10.0, initial / 100.0)


def test_aggregate_traces():
    traces = [flat_trace([4.0, 2.0], 30.0), flat_trace([6.0, 2.0], 40.0), flat_trace([8.0, 2.0], 50.0)]
    rows, initial = aggregate_traces(traces)
    assert len(rows) == 2 and all(set(row) == set(MEAN_TRACE_COLUMNS) for row in rows)
    assert rows[0]["iter"] == 0 and rows[1]["n_pairs"] == 3
    assert rows[0]["rot_err_deg_mean"] == pytest.approx(6.0)
    assert rows[0]["rot_err_deg_std"] == pytest.approx(2.0)
    assert rows[0]["rot_err_deg_ci95"] == pytest.approx(stats.t.ppf(0.975, 2) * 2.0 / math.sqrt(3))
    assert rows[0]["trans_err_mean"] == pytest.approx(0.6)
    assert rows[1]["chamfer_ci95"] == pytest.approx(0.0, abs=1e-12)
    assert initial == pytest.approx({"rot_err_deg": 40.0, "trans_err": 4.0, "chamfer": 0.4})
    single, _ = aggregate_traces(traces[:1])
    assert math.isnan(single[0]["rot_err_deg_ci95"])
    with pytest.raises(ValidationError):
        aggregate_traces([])
    with pytest.raises(ValidationError):
        aggregate_traces([flat_trace([1.0], 2.0), flat_trace([1.0, 1.0], 2.0)])
    print("✅ Trace aggregation: mean, std and t half-width per iteration")


def test_mean_trace_over_test_set():
    bench = BenchService(small_config(n_pairs=3))
    rows, initial = bench.mean_trace()
    assert len(rows) == 60 and [row["iter"] for row in rows] == list(range(60))
    singles = [bench.trace(i)[1] for i in range(3)]
    for it in (0, 19, 59):
        for metric in ("rot_err_deg", "trans_err", "chamfer"):
            expected = np.mean([getattr(t.records[it], metric) for t in singles])
            assert rows[it][f"{metric}_mean"] == pytest.approx(expected, rel=1e-12, abs=1e-15)
            assert rows[it][f"{metric}_ci95"] >= 0.0
    assert initial["rot_err_deg"] == pytest.approx(np.mean([t.initial_rot_err_deg for t in singles]))
    assert rows[-1]["rot_err_deg_mean"] < initial["rot_err_deg"]
    with pytest.raises(ValidationError):
        BenchService(small_config(reward_source="icp")).mean_trace()
    print("✅ Test-set averaged trace with initial errors")


def test_reward_and_policy_ablations():
    bench = BenchService(small_config(n_pairs=3))
    rows = bench.run_ablation("reward")
    assert [row["arm"] for row in rows] == ["oracle_se3", "oracle_l2", "oracle_mcd"]
    assert all(set(row) == set(ABLATION_COLUMNS) for row in rows)
    assert all(row["status"] == "ok" and row["n_pairs"] == 3 for row in rows)
    policies = bench.run_ablation("policy")
    assert [row["arm"] for row in policies] == ["greedy", "stoch1", "stoch2", "uniform"]
    with pytest.raises(ValidationError):
        bench.run_ablation("unknown")
    print("✅ Reward and policy ablations report every arm")


def quick_training():
    return TrainConfig(total_epochs=2, curriculum_boundary_epoch=1, lr_decay_epochs=[], samples_per_epoch=4,
                       batch_size=4, val_samples=2, n_points=32, seed=3)


def test_sampling_ablation_shares_one_test_set():
    bench = BenchService(small_config(n_pairs=3))
    seen = []
    build_pairs = bench.test_pairs

    def recording(transform=None):
        pairs = build_pairs(transform)
        seen.append((transform, pairs))
        return pairs

    bench.test_pairs = recording
    rows = bench.run_ablation("sampling", NetConfig.tiny(seed=3), quick_training())
    assert [row["arm"] for row in rows] == ["isotropic", "naive"]
    assert all(row["status"] == "ok" and row["n_pairs"] == 3 for row in rows)
    assert len(seen) == 2
    (first_transform, first), (second_transform, second) = seen
    assert first_transform == second_transform == TransformSampleConfig.naive_test_set(seed=3)
    for (name_a, a), (name_b, b) in zip(first, second):
        assert name_a == name_b
        assert np.array_equal(a.source.points, b.source.points)
        assert np.array_equal(a.target.points, b.target.points)
    print("✅ Both sampling arms are scored on the same naive test set")


def test_curriculum_ablation_arms():
    rows = BenchService(small_config(n_pairs=2)).run_ablation("curriculum", NetConfig.tiny(seed=4), quick_training())
    assert [row["arm"] for row in rows] == ["curriculum", "uniform", "adhoc"]
    assert all(set(row) == set(ABLATION_COLUMNS) for row in rows)
    assert all(row["status"] == "ok" and row["n_pairs"] == 2 for row in rows)
    assert all(math.isfinite(row["rot_err_deg"]) for row in rows)
    print("✅ Curriculum ablation trains and scores every arm")


def test_sample_rotation_rows():
    rows = sample_rotation_rows("haar", math.radians(45.0), 20, seed=4)
    assert len(rows) == 20
    assert all(set(row) == set(ROTATION_COLUMNS) for row in rows)
    assert all(row["angle_rad"] <= math.radians(45.0) + 1e-9 for row in rows)
    assert rows == sample_rotation_rows("haar", math.radians(45.0), 20, seed=4)
    with pytest.raises(ValidationError):
        sample_rotation_rows("haar", 1.0, 0)
    print("✅ Rotation rows for sampler histograms")


if __name__ == "__main__":
    print("🧪 Testing the experiment harness")
    print("=" * 50)
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
