"""End-to-end harness tests: runs, sweeps, heatmaps, CSV determinism."""

import math
from dataclasses import replace

import numpy as np
import pytest

from calidrop.engine import ActionTag, Thresholds
from calidrop.errors import ArgError, InvalidThresholds, RangeError
from calidrop.eviction import EvictionPolicy, PolicyKind
from calidrop.harness import (
    STEP_COLUMNS,
    Comparison,
    RunConfig,
    calibration_size_sweep,
    heatmap,
    run,
    sweep,
)
from calidrop.kvstore import ModelDims
from calidrop.workload import DriftWorkload, generate


def make_config(tmp_path, *, drift=0.05, seed=0, prompt_len=48, decode_len=24, budget=16,
                theta1=0.7, theta2=0.85, layers=1, heads=2, workers=1,
                comparisons=frozenset({Comparison.EVICTION_ONLY, Comparison.CALIDROP}),
                calibration_size=math.inf):
    workload = DriftWorkload(
        seed=seed,
        dims=ModelDims(n_layers=layers, n_heads=heads, d_k=8, d_v=4),
        prompt_len=prompt_len,
        decode_len=decode_len,
        drift=drift,
    )
    return RunConfig(
        workload=workload,
        policy=EvictionPolicy(PolicyKind.SNAPKV, budget=budget, window=8, kernel=5),
        thresholds=Thresholds(theta1, theta2),
        calibration_size=calibration_size,
        comparisons=comparisons,
        output_dir=tmp_path / "out",
        workers=workers,
    )


class TestRun:
    def test_zero_drift_calibrates_exactly(self, tmp_path):
        result = run(make_config(tmp_path, drift=0.0))
        assert all(r.action == ActionTag.CALIBRATE.value for r in result.records)
        assert result.mean_l1(Comparison.CALIDROP) < 1e-8

    def test_forced_recompute_is_exact_every_step(self, tmp_path):
        result = run(make_config(tmp_path, theta1=1.0 - 1e-9, theta2=1.0))
        assert all(r.action == ActionTag.RECOMPUTE.value for r in result.records)
        assert all(r.l1_calidrop < 1e-8 for r in result.records)

    def test_calibration_beats_plain_eviction_under_drift(self, tmp_path):
        result = run(make_config(tmp_path, prompt_len=96, decode_len=48, budget=16))
        assert result.mean_l1(Comparison.CALIDROP) < result.mean_l1(Comparison.EVICTION_ONLY)

    def test_record_shape_and_invariants(self, tmp_path):
        config = make_config(tmp_path, layers=2, heads=2)
        result = run(config)
        assert len(result.records) == 2 * 2 * 24
        for r in result.records:
            assert r.l1_evict_only >= 0.0
            assert r.l1_calidrop >= 0.0
            assert 0.0 <= r.alpha_j <= 1.0
        assert [r for r in result.records] == sorted(result.records, key=lambda r: (r.layer, r.head, r.step))

    def test_fullkv_reproduces_oracle(self, tmp_path):
        config = make_config(
            tmp_path,
            comparisons=frozenset({Comparison.CALIDROP, Comparison.FULL_KV}),
        )
        result = run(config)
        assert all(r.l1_fullkv is not None and r.l1_fullkv < 1e-10 for r in result.records)

    def test_csv_files_written(self, tmp_path):
        config = make_config(tmp_path)
        run(config)
        out = tmp_path / "out"
        steps = (out / "steps.csv").read_text().splitlines()
        assert steps[0] == ",".join(STEP_COLUMNS)
        assert len(steps) == 1 + 24 * 2
        assert (out / "frequency.csv").exists()
        assert (out / "summary.csv").exists()

    def test_empty_comparisons_rejected(self, tmp_path):
        with pytest.raises(ArgError):
            make_config(tmp_path, comparisons=frozenset())


class TestFrequency:
    def test_bounds_and_extremes(self, tmp_path):
        result = run(make_config(tmp_path))
        assert all(0.0 <= f <= 1.0 for f in result.layer_frequency().values())

        never = run(make_config(tmp_path, theta1=-1.0, theta2=0.0))
        assert all(f == 0.0 for f in never.layer_frequency().values())

        always = run(make_config(tmp_path, theta1=1.0 - 1e-9, theta2=1.0))
        assert all(f == 1.0 for f in always.layer_frequency().values())

    def test_frequency_csv_one_row_per_layer(self, tmp_path):
        config = make_config(tmp_path, layers=3)
        run(config)
        lines = (tmp_path / "out" / "frequency.csv").read_text().splitlines()
        assert lines[0] == "layer,recompute_frequency"
        assert len(lines) == 4


class TestSweep:
    def test_degenerate_grid_matches_run(self, tmp_path):
        config = make_config(tmp_path)
        rows = sweep(config, [0.7], [0.85])
        result = run(config)
        assert len(rows) == 1
        assert rows[0]["mean_l1"] == pytest.approx(result.mean_l1(Comparison.CALIDROP), abs=1e-15)
        assert rows[0]["recompute_frequency"] == result.action_fraction(ActionTag.RECOMPUTE)
        assert rows[0]["calibrate_fraction"] == result.action_fraction(ActionTag.CALIBRATE)

    def test_recompute_frequency_nondecreasing_in_theta1(self, tmp_path):
        rows = sweep(make_config(tmp_path, decode_len=48), [0.3, 0.5, 0.7, 0.8], [0.85])
        freqs = [r["recompute_frequency"] for r in rows]
        assert freqs == sorted(freqs)

    def test_calibrate_fraction_nonincreasing_in_theta2(self, tmp_path):
        rows = sweep(make_config(tmp_path, decode_len=48), [0.5], [0.6, 0.75, 0.9])
        fracs = [r["calibrate_fraction"] for r in rows]
        assert fracs == sorted(fracs, reverse=True)

    def test_invalid_pair_rejected(self, tmp_path):
        with pytest.raises(InvalidThresholds):
            sweep(make_config(tmp_path), [0.9], [0.85])

    def test_empty_grid_rejected(self, tmp_path):
        with pytest.raises(ArgError):
            sweep(make_config(tmp_path), [], [0.85])

    def test_sweep_csv_written(self, tmp_path):
        config = make_config(tmp_path)
        sweep(config, [0.6, 0.7], [0.85])
        lines = (tmp_path / "out" / "sweep.csv").read_text().splitlines()
        assert lines[0] == "theta1,theta2,mean_l1,recompute_frequency,calibrate_fraction"
        assert len(lines) == 3


class TestHeatmap:
    def test_unit_diagonal_and_exact_symmetry(self, tmp_path):
        workload = make_config(tmp_path).workload
        m = heatmap(workload, 0, 0, (0, 40))
        assert np.all(np.diag(m) == 1.0)
        assert np.array_equal(m, m.T)
        assert np.all(m >= -1.0) and np.all(m <= 1.0)

    def test_zero_drift_decode_region_is_all_ones(self, tmp_path):
        config = make_config(tmp_path, drift=0.0)
        trace = generate(config.workload)
        start = trace.prompt_len
        m = heatmap(trace, 0, 0, (start, start + trace.decode_len))
        assert np.all(m == 1.0)

    def test_csv_written(self, tmp_path):
        workload = make_config(tmp_path).workload
        out = tmp_path / "heatmap.csv"
        m = heatmap(workload, 0, 1, (0, 10), out)
        lines = out.read_text().splitlines()
        assert len(lines) == 11
        assert lines[0].startswith("pos,0,1,")
        assert m.shape == (10, 10)

    def test_bad_span_or_head(self, tmp_path):
        workload = make_config(tmp_path).workload
        with pytest.raises(RangeError):
            heatmap(workload, 0, 0, (0, 10_000))
        with pytest.raises(RangeError):
            heatmap(workload, 0, 5, (0, 10))
        with pytest.raises(RangeError):
            heatmap(workload, 0, 0, (5, 5))


class TestCalibrationSizeSweep:
    def test_endpoints(self, tmp_path):
        config = make_config(tmp_path, prompt_len=64, decode_len=24, budget=16)
        rows = calibration_size_sweep(config, [0, 8, math.inf])

        # size 0 degrades to plain eviction
        assert abs(rows[0]["mean_l1"] - rows[0]["mean_l1_evict_only"]) < 1e-12

        # size inf matches the untruncated configuration exactly
        untruncated = run(replace(config, calibration_size=math.inf))
        assert abs(rows[2]["mean_l1"] - untruncated.mean_l1(Comparison.CALIDROP)) < 1e-12

        csv_lines = (tmp_path / "out" / "calibration_sizes.csv").read_text().splitlines()
        assert csv_lines[0] == "calibration_size,mean_l1,mean_l1_evict_only,median_step_seconds"
        assert csv_lines[1].startswith("0,")
        assert csv_lines[3].startswith("inf,")

    def test_bad_size_rejected(self, tmp_path):
        with pytest.raises(ArgError):
            calibration_size_sweep(make_config(tmp_path), [-1])


class TestDeterminism:
    def test_identical_runs_are_byte_identical(self, tmp_path):
        config_a = make_config(tmp_path / "a", seed=3)
        config_b = make_config(tmp_path / "b", seed=3)
        run(config_a)
        run(config_b)
        for name in ("steps.csv", "frequency.csv", "summary.csv"):
            a = (tmp_path / "a" / "out" / name).read_bytes()
            b = (tmp_path / "b" / "out" / name).read_bytes()
            assert a == b, name

    def test_worker_count_does_not_change_output(self, tmp_path):
        serial = make_config(tmp_path / "w1", seed=4, layers=2, heads=2, workers=1)
        pooled = make_config(tmp_path / "w4", seed=4, layers=2, heads=2, workers=4)
        run(serial)
        run(pooled)
        a = (tmp_path / "w1" / "out" / "steps.csv").read_bytes()
        b = (tmp_path / "w4" / "out" / "steps.csv").read_bytes()
        assert a == b
