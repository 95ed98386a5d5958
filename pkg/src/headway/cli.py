"""Batch front end: run closed-loop simulations, calibrate memory, regenerate
reports.  Exit codes: 0 success, 1 scenario errors, 2 configuration errors."""

import argparse
import glob
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .cassette import Cassette
from .config import AppConfig, ConfigError, load_config
from .memory import (
    CalibrationError, MemoryEntry, PARAM_NAMES, BUILTIN_GROUPS, build_groups,
    calibrate_scene, load_memory, save_memory, significance_matrix,
)
from .metrics import aggregate, report_csv, report_json, scenario_report
from .planner import (
    CompletionLedger, HttpLmClient, LmPlanner, MemoryPlanner, ReplayLmClient,
)
from .scenario import ScenarioError, load_scenario_file
from .simulator import SimConfig, SimTrace, run_scenario


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _make_planner(args, cfg: AppConfig, memory):
    if args.planner == "memory":
        return MemoryPlanner(memory)
    if args.cassette:
        client = ReplayLmClient(Cassette.load(args.cassette))
        return LmPlanner(memory, client, vocabulary=cfg.vocabulary)
    lm = cfg.services.get("lm", {})
    if not lm.get("endpoint"):
        raise ConfigError("planner 'lm' needs --cassette or services.lm.endpoint in config")
    client = HttpLmClient(
        endpoint=lm["endpoint"], model=lm.get("model"),
        temperature=lm.get("temperature", 0.0),
        max_tokens=lm.get("max_tokens", 1024),
        timeout=lm.get("timeout", 30.0),
        api_key=cfg.lm_api_key(),
    )
    return LmPlanner(memory, client, vocabulary=cfg.vocabulary)


def _ledger_from_traces(traces) -> CompletionLedger:
    """Rebuild completion/latency accounting from recorded planner events."""
    ledger = CompletionLedger()
    for trace in traces:
        sid = trace.header["scenario"]["id"]
        for ev in trace.events:
            if ev["verdict"] == "memory":
                continue
            ledger.record(sid, ev["verdict"], ev.get("response_latency", 0.0))
    return ledger


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    memory = load_memory(args.memory) if args.memory else list(BUILTIN_GROUPS)
    planner = _make_planner(args, cfg, memory)
    sim_cfg = cfg.sim
    if args.seed is not None:
        sim_cfg = replace(sim_cfg, seed=args.seed)

    paths = sorted(glob.glob(args.scenarios))
    if not paths:
        raise ConfigError(f"no scenarios match {args.scenarios!r}")
    os.makedirs(args.out, exist_ok=True)

    ledger = CompletionLedger()
    reports = []
    failures = []
    for path in paths:
        try:
            scn = load_scenario_file(path)
            trace = run_scenario(scn, planner, sim_cfg, cfg.mpc, ledger)
        except Exception as e:
            failures.append((path, f"{type(e).__name__}: {e}"))
            continue
        _atomic_write(os.path.join(args.out, f"{scn.id}.trace.jsonl"), trace.to_jsonl())
        rep = scenario_report(trace, ledger)
        _atomic_write(
            os.path.join(args.out, f"{scn.id}.report.json"),
            json.dumps(rep.__dict__, indent=2, sort_keys=True) + "\n",
        )
        reports.append(rep)
        print(f"ran {scn.id}: steps={rep.n_steps} rms_a={rep.rms_a:.3f}"
              + (f" min_pet={rep.min_pet:.3f}" if rep.min_pet is not None else ""))

    rollup = aggregate(reports, ledger)
    _atomic_write(os.path.join(args.out, "rollup.json"), report_json(rollup))
    _atomic_write(os.path.join(args.out, "rollup.csv"), report_csv(rollup))

    if failures:
        print("failures:", file=sys.stderr)
        for path, err in failures:
            print(f"  {path}: {err}", file=sys.stderr)
        return 1
    return 0


def cmd_calibrate(args) -> int:
    scene_paths = sorted(glob.glob(os.path.join(args.scenes, "*.json")))
    if not scene_paths:
        raise ConfigError(f"no scenario files in {args.scenes!r}")

    entries = []
    failures = []
    for path in scene_paths:
        try:
            scn = load_scenario_file(path)
            ref_path = os.path.join(args.refs, f"{scn.id}.json")
            with open(ref_path, "r") as fh:
                ref = json.load(fh)
            params = calibrate_scene(scn, ref)
            entries.append(MemoryEntry(
                scenario_id=scn.id, features=scn.feature_cell(), params=params,
            ))
            print(f"calibrated {scn.id}: {params.as_list()}")
        except (ScenarioError, CalibrationError, OSError, json.JSONDecodeError) as e:
            failures.append((path, f"{type(e).__name__}: {e}"))
            print(f"calibration failed for {path}: {e}", file=sys.stderr)

    if not entries:
        raise ConfigError("calibration produced no entries")

    pvals = significance_matrix(entries)
    groups = build_groups(entries, pvals)
    save_memory(groups, args.out)
    print(f"wrote memory with {len(groups)} group(s) to {args.out}")

    for name in PARAM_NAMES:
        print(f"p-values [{name}] (rows/cols = rain,night,intersection cells 000..111):")
        mat = pvals.values[name]
        for row in mat:
            print("  " + " ".join(f"{cell:5.3f}" if np.isfinite(cell) else "  .  " for cell in row))
    return 1 if failures else 0


def cmd_report(args) -> int:
    paths = sorted(glob.glob(os.path.join(args.traces, "*.trace.jsonl")))
    if not paths:
        raise ConfigError(f"no traces in {args.traces!r}")
    traces = []
    for path in paths:
        try:
            traces.append(SimTrace.load(path))
        except (ValueError, KeyError) as e:
            print(f"skipping corrupt trace {path}: {e}", file=sys.stderr)
    if not traces:
        raise ConfigError("no readable traces")
    ledger = _ledger_from_traces(traces)
    reports = [scenario_report(tr, ledger) for tr in traces]
    rollup = aggregate(reports, ledger)
    _atomic_write(os.path.join(args.traces, "rollup.json"), report_json(rollup))
    _atomic_write(os.path.join(args.traces, "rollup.csv"), report_csv(rollup))
    print(report_csv(rollup), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="headway",
        description="Closed-loop longitudinal driving: planner + MPC simulation harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate scenarios and write traces + reports")
    p_run.add_argument("--scenarios", required=True, help="glob of scenario JSON files")
    p_run.add_argument("--planner", choices=("memory", "lm"), default="memory")
    p_run.add_argument("--config", default=None, help="config JSON file")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--cassette", default=None, help="LM cassette for replay")
    p_run.add_argument("--memory", default=None, help="memory file (default: built-in fixture)")
    p_run.set_defaults(func=cmd_run)

    p_cal = sub.add_parser("calibrate", help="calibrate scenes and build the memory file")
    p_cal.add_argument("--scenes", required=True, help="directory of scenario JSON files")
    p_cal.add_argument("--refs", required=True, help="directory of <id>.json reference trajectories")
    p_cal.add_argument("--out", required=True, help="memory file to write")
    p_cal.set_defaults(func=cmd_calibrate)

    p_rep = sub.add_parser("report", help="recompute metrics from existing traces")
    p_rep.add_argument("--traces", required=True, help="directory containing *.trace.jsonl")
    p_rep.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
