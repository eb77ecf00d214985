"""Command-line entry points.

Subcommands: ``simulate`` (synthetic drift workload), ``replay`` (recorded
trace directory), ``sweep`` (threshold grid), ``heatmap`` (query similarity
matrix), ``cal-size`` (calibration-size sweep).  Settings come from an
optional JSON config file (``--config``), with every key overridable by a
same-named flag.  Exit codes: 0 success, 2 config error, 3 data/format
error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from .errors import CalidropError, ConfigError, DimMismatch, FormatError, TruncatedFile
from .engine import Thresholds
from .eviction import EvictionPolicy, PolicyKind
from .harness import (
    Comparison,
    RunConfig,
    calibration_size_sweep,
    heatmap,
    resolve_trace,
    run,
    sweep,
)
from .kvstore import ModelDims
from .workload import DriftWorkload

_WORKLOAD_DEFAULTS = {
    "seed": 0,
    "n_layers": 1,
    "n_heads": 1,
    "d_k": 8,
    "d_v": 8,
    "prompt_len": 256,
    "decode_len": 128,
    "drift": 0.05,
    "scale": 1.0,
}
_POLICY_DEFAULTS = {"kind": "snapkv", "budget": 64, "sinks": 32, "window": 32, "kernel": 5}
_THRESHOLD_DEFAULTS = {"theta1": 0.7, "theta2": 0.85}


def _parse_size(text: str) -> int | float:
    if text.strip().lower() in ("inf", "infinity"):
        return math.inf
    try:
        value = int(text)
    except ValueError:
        raise ConfigError(f"calibration size must be an int or 'inf', got {text!r}") from None
    if value < 0:
        raise ConfigError(f"calibration size must be >= 0, got {value}")
    return value


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated floats, got {text!r}") from None


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return data


def _build_run_config(args: argparse.Namespace, source: str) -> RunConfig:
    """Assemble a RunConfig from config file plus flag overrides.

    ``source`` selects the workload: "drift" (synthetic only), "trace"
    (trace directory required), or "either" (trace when given, else drift).
    """
    cfg = _load_config_file(args.config)

    wl = dict(_WORKLOAD_DEFAULTS, **cfg.get("workload", {}))
    for key, flag in (
        ("seed", "seed"),
        ("drift", "drift"),
        ("prompt_len", "prompt_len"),
        ("decode_len", "decode_len"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            wl[key] = value

    pol = dict(_POLICY_DEFAULTS, **cfg.get("policy", {}))
    for key in ("budget", "sinks", "window", "kernel"):
        value = getattr(args, key, None)
        if value is not None:
            pol[key] = value
    if getattr(args, "policy", None) is not None:
        pol["kind"] = args.policy

    th = dict(_THRESHOLD_DEFAULTS, **cfg.get("thresholds", {}))
    if getattr(args, "theta1", None) is not None:
        th["theta1"] = args.theta1
    if getattr(args, "theta2", None) is not None:
        th["theta2"] = args.theta2

    cal_size = cfg.get("calibration_size", "inf")
    if getattr(args, "calibration_size", None) is not None:
        cal_size = args.calibration_size
    if isinstance(cal_size, str):
        cal_size = _parse_size(cal_size)

    comparisons = cfg.get("comparisons", [])
    if getattr(args, "comparisons", None) is not None:
        comparisons = [c for c in args.comparisons.split(",") if c.strip()]
    try:
        comp_set = (
            frozenset(Comparison(c) for c in comparisons)
            if comparisons
            else frozenset({Comparison.EVICTION_ONLY, Comparison.CALIDROP})
        )
    except ValueError as exc:
        raise ConfigError(f"unknown comparison: {exc}") from None

    trace_path = cfg.get("trace")
    if getattr(args, "trace", None) is not None:
        trace_path = args.trace

    output_dir = cfg.get("output_dir", "runs")
    if getattr(args, "out", None) is not None:
        output_dir = args.out

    workers = cfg.get("workers", 1)
    if getattr(args, "workers", None) is not None:
        workers = args.workers

    try:
        if source == "trace" and not trace_path:
            raise ConfigError("replay needs a trace directory (--trace or config 'trace')")
        if source != "drift" and trace_path:
            workload: DriftWorkload | str = str(trace_path)
        else:
            workload = DriftWorkload(
                seed=int(wl["seed"]),
                dims=ModelDims(
                    n_layers=int(wl["n_layers"]),
                    n_heads=int(wl["n_heads"]),
                    d_k=int(wl["d_k"]),
                    d_v=int(wl["d_v"]),
                ),
                prompt_len=int(wl["prompt_len"]),
                decode_len=int(wl["decode_len"]),
                drift=float(wl["drift"]),
                scale=float(wl["scale"]),
            )
        policy = EvictionPolicy(
            kind=PolicyKind(pol["kind"]),
            budget=int(pol["budget"]),
            sinks=int(pol["sinks"]),
            window=int(pol["window"]),
            kernel=int(pol["kernel"]),
        )
        thresholds = Thresholds(theta1=float(th["theta1"]), theta2=float(th["theta2"]))
        return RunConfig(
            workload=workload,
            policy=policy,
            thresholds=thresholds,
            calibration_size=cal_size,
            comparisons=comp_set,
            output_dir=output_dir,
            workers=int(workers),
        )
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"bad configuration: {exc}") from None


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--policy", choices=[k.value for k in PolicyKind])
    p.add_argument("--budget", type=int)
    p.add_argument("--sinks", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--kernel", type=int)
    p.add_argument("--theta1", type=float)
    p.add_argument("--theta2", type=float)
    p.add_argument("--calibration-size", dest="calibration_size", type=_parse_size)
    p.add_argument("--seed", type=int)
    p.add_argument("--drift", type=float)
    p.add_argument("--prompt-len", dest="prompt_len", type=int)
    p.add_argument("--decode-len", dest="decode_len", type=int)
    p.add_argument("--comparisons", help="comma list: eviction_only,calidrop,fullkv")
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory for CSV files")
    p.add_argument("--trace", help="trace directory (replay)")


def _make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="calidrop", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, text in (
        ("simulate", "run the synthetic drift workload"),
        ("replay", "replay a recorded trace directory"),
    ):
        p = sub.add_parser(name, help=text)
        _add_common_flags(p)

    p = sub.add_parser("sweep", help="threshold grid sweep")
    _add_common_flags(p)
    p.add_argument("--theta1-grid", dest="theta1_grid", help="comma-separated theta1 values")
    p.add_argument("--theta2-grid", dest="theta2_grid", help="comma-separated theta2 values")

    p = sub.add_parser("heatmap", help="query cosine-similarity matrix")
    _add_common_flags(p)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--head", type=int, default=0)
    p.add_argument("--start", type=int)
    p.add_argument("--stop", type=int)

    p = sub.add_parser("cal-size", help="calibration-size sweep")
    _add_common_flags(p)
    p.add_argument("--sizes", help="comma list of sizes, 'inf' allowed")
    return parser


def _cmd_run(args: argparse.Namespace, source: str) -> int:
    config = _build_run_config(args, source)
    result = run(config)
    out = Path(config.output_dir)
    print(f"wrote {out / 'steps.csv'} ({len(result.records)} rows)")
    print(f"wrote {out / 'frequency.csv'} and {out / 'summary.csv'}")
    for comparison in sorted(config.comparisons, key=lambda c: c.value):
        print(f"mean L1 [{comparison.value}]: {result.mean_l1(comparison):.6g}")
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    config = _build_run_config(args, source="either")
    cfg = _load_config_file(args.config)
    grid1 = _parse_floats(args.theta1_grid) if args.theta1_grid else cfg.get("theta1_grid", [])
    grid2 = _parse_floats(args.theta2_grid) if args.theta2_grid else cfg.get("theta2_grid", [])
    rows = sweep(config, grid1, grid2)
    print(f"wrote {Path(config.output_dir) / 'sweep.csv'} ({len(rows)} rows)")
    return 0


def _cmd_heatmap(args: argparse.Namespace) -> int:
    config = _build_run_config(args, source="either")
    cfg = _load_config_file(args.config)
    trace = resolve_trace(config)
    start = args.start if args.start is not None else cfg.get("start", 0)
    stop = args.stop if args.stop is not None else cfg.get("stop", trace.prompt_len + trace.decode_len)
    out_path = Path(config.output_dir) / "heatmap.csv"
    matrix = heatmap(trace, args.layer, args.head, (start, stop), out_path)
    print(f"wrote {out_path} ({matrix.shape[0]}x{matrix.shape[1]})")
    return 0


def _cmd_cal_size(args: argparse.Namespace) -> int:
    config = _build_run_config(args, source="either")
    cfg = _load_config_file(args.config)
    if args.sizes:
        sizes = [_parse_size(s) for s in args.sizes.split(",") if s.strip()]
    else:
        sizes = [_parse_size(str(s)) for s in cfg.get("sizes", [])]
    if not sizes:
        raise ConfigError("cal-size needs --sizes or config 'sizes'")
    rows = calibration_size_sweep(config, sizes)
    print(f"wrote {Path(config.output_dir) / 'calibration_sizes.csv'} ({len(rows)} rows)")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _make_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            return _cmd_run(args, source="drift")
        if args.command == "replay":
            return _cmd_run(args, source="trace")
        if args.command == "sweep":
            return _cmd_sweep(args)
        if args.command == "heatmap":
            return _cmd_heatmap(args)
        if args.command == "cal-size":
            return _cmd_cal_size(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except (FormatError, TruncatedFile, DimMismatch) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except CalidropError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
