"""CLI behavior: subcommands, config/flag precedence, exit codes."""

import json
import subprocess
import sys

import pytest

from calidrop.cli import main
from calidrop.kvstore import ModelDims
from calidrop.workload import DriftWorkload, generate, save_trace


def write_config(tmp_path, **overrides):
    config = {
        "workload": {
            "seed": 0,
            "n_layers": 1,
            "n_heads": 1,
            "d_k": 8,
            "d_v": 4,
            "prompt_len": 40,
            "decode_len": 12,
            "drift": 0.05,
        },
        "policy": {"kind": "snapkv", "budget": 16, "window": 8, "kernel": 5},
        "thresholds": {"theta1": 0.7, "theta2": 0.85},
        "calibration_size": "inf",
        "output_dir": str(tmp_path / "out"),
    }
    config.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    return path


class TestSimulate:
    def test_default_run_succeeds(self, tmp_path):
        config = write_config(tmp_path)
        assert main(["simulate", "--config", str(config)]) == 0
        lines = (tmp_path / "out" / "steps.csv").read_text().splitlines()
        assert len(lines) == 1 + 12

    def test_flag_overrides_config(self, tmp_path):
        config = write_config(tmp_path)
        assert main(["simulate", "--config", str(config), "--decode-len", "5", "--out", str(tmp_path / "o2")]) == 0
        lines = (tmp_path / "o2" / "steps.csv").read_text().splitlines()
        assert len(lines) == 1 + 5

    def test_no_config_uses_defaults(self, tmp_path):
        assert main(["simulate", "--prompt-len", "30", "--decode-len", "4", "--budget", "33",
                     "--out", str(tmp_path / "out")]) == 0

    def test_invalid_threshold_is_config_error(self, tmp_path):
        config = write_config(tmp_path)
        assert main(["simulate", "--config", str(config), "--theta1", "3.0"]) == 2

    def test_bad_json_is_config_error(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{nope")
        assert main(["simulate", "--config", str(bad)]) == 2

    def test_unknown_policy_kind_is_config_error(self, tmp_path):
        config = write_config(tmp_path, policy={"kind": "mystery", "budget": 8})
        assert main(["simulate", "--config", str(config)]) == 2


class TestReplay:
    @pytest.fixture()
    def trace_dir(self, tmp_path):
        workload = DriftWorkload(
            seed=1, dims=ModelDims(1, 2, 8, 4), prompt_len=40, decode_len=10, drift=0.05
        )
        path = tmp_path / "trace"
        save_trace(generate(workload), path)
        return path

    def test_replay_succeeds(self, tmp_path, trace_dir):
        config = write_config(tmp_path)
        assert main(["replay", "--config", str(config), "--trace", str(trace_dir)]) == 0
        lines = (tmp_path / "out" / "steps.csv").read_text().splitlines()
        assert len(lines) == 1 + 2 * 10

    def test_missing_trace_is_config_error(self, tmp_path):
        config = write_config(tmp_path)
        assert main(["replay", "--config", str(config)]) == 2

    def test_corrupt_trace_is_data_error(self, tmp_path, trace_dir):
        (trace_dir / "L0_H0_q_prefill.bin").unlink()
        config = write_config(tmp_path)
        assert main(["replay", "--config", str(config), "--trace", str(trace_dir)]) == 3

    def test_bad_manifest_is_data_error(self, tmp_path, trace_dir):
        (trace_dir / "manifest.json").write_text("{}")
        config = write_config(tmp_path)
        assert main(["replay", "--config", str(config), "--trace", str(trace_dir)]) == 3


class TestOtherCommands:
    def test_sweep(self, tmp_path):
        config = write_config(tmp_path)
        assert main(["sweep", "--config", str(config), "--theta1-grid", "0.6,0.7", "--theta2-grid", "0.85"]) == 0
        lines = (tmp_path / "out" / "sweep.csv").read_text().splitlines()
        assert len(lines) == 3

    def test_sweep_invalid_pair(self, tmp_path):
        config = write_config(tmp_path)
        assert main(["sweep", "--config", str(config), "--theta1-grid", "0.9", "--theta2-grid", "0.85"]) == 2

    def test_heatmap(self, tmp_path):
        config = write_config(tmp_path)
        assert main(["heatmap", "--config", str(config), "--layer", "0", "--head", "0",
                     "--start", "0", "--stop", "16"]) == 0
        assert (tmp_path / "out" / "heatmap.csv").exists()

    def test_heatmap_bad_span(self, tmp_path):
        config = write_config(tmp_path)
        assert main(["heatmap", "--config", str(config), "--stop", "99999"]) == 2

    def test_cal_size(self, tmp_path):
        config = write_config(tmp_path)
        assert main(["cal-size", "--config", str(config), "--sizes", "0,4,inf"]) == 0
        lines = (tmp_path / "out" / "calibration_sizes.csv").read_text().splitlines()
        assert len(lines) == 4

    def test_cal_size_without_sizes(self, tmp_path):
        config = write_config(tmp_path)
        assert main(["cal-size", "--config", str(config)]) == 2

    def test_heatmap_accepts_trace_source(self, tmp_path):
        workload = DriftWorkload(
            seed=2, dims=ModelDims(1, 1, 8, 4), prompt_len=20, decode_len=6, drift=0.05
        )
        save_trace(generate(workload), tmp_path / "trace")
        assert main(["heatmap", "--trace", str(tmp_path / "trace"),
                     "--out", str(tmp_path / "out")]) == 0
        lines = (tmp_path / "out" / "heatmap.csv").read_text().splitlines()
        assert len(lines) == 1 + 26  # trace length, not the synthetic default

    def test_cal_size_accepts_trace_source(self, tmp_path):
        workload = DriftWorkload(
            seed=2, dims=ModelDims(1, 1, 8, 4), prompt_len=40, decode_len=6, drift=0.05
        )
        save_trace(generate(workload), tmp_path / "trace")
        assert main(["cal-size", "--trace", str(tmp_path / "trace"), "--sizes", "0,inf",
                     "--budget", "16", "--window", "8", "--out", str(tmp_path / "out")]) == 0
        lines = (tmp_path / "out" / "calibration_sizes.csv").read_text().splitlines()
        assert len(lines) == 3


class TestProcessInvocation:
    def test_module_entry_point(self, tmp_path):
        config = write_config(tmp_path)
        proc = subprocess.run(
            [sys.executable, "-m", "calidrop.cli", "simulate", "--config", str(config)],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0, proc.stderr
        assert "steps.csv" in proc.stdout

    def test_exit_code_on_config_error(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "calidrop.cli", "simulate", "--theta1", "9"],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 2
