"""Post-hoc trace evaluation: PET, RMS acceleration, completion, latency.

PET in the 1-D setting: for every spatial point the leader's rear bumper
vacates at t1 and the ego's front bumper reaches at t2, PET(p) = t2 - t1;
the reported value is the minimum over points sampled at 0.1 m.  Stop lines
are static and contribute no PET.
"""

import json
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import accel
from .scenario import FEATURE_NAMES, load_scenario

PET_RESOLUTION = 0.1
SAFETY_THRESHOLD_PET = 1.0  # reported against, never enforced


@dataclass
class ScenarioReport:
    scenario_id: str
    features: tuple
    n_steps: int
    min_pet: Optional[float]
    rms_a: float
    accel_min: float
    accel_max: float
    completed: bool


def _leader_series(trace):
    """(t, ego_front, lead_rear) over the contiguous leader-present steps."""
    scn = load_scenario(trace.header["scenario"])
    l_lead = scn.plant.length
    ts, ego, rear = [], [], []
    for rec in trace.steps:
        if rec.get("lead_gap") is None:
            continue
        ts.append(rec["t"])
        ego.append(rec["x"])
        rear.append(rec["x"] + rec["lead_gap"] - l_lead)
    return np.asarray(ts), np.asarray(ego), np.asarray(rear)


def compute_pet(trace, resolution: float = PET_RESOLUTION) -> Optional[float]:
    """Minimum PET over leader-vacated points, or None when the ego never
    reaches any vacated point inside the run."""
    ts, ego, rear = _leader_series(trace)
    if len(ts) < 2:
        return None
    lo = max(float(ego[0]), float(rear[0]))
    hi = min(float(ego[-1]), float(rear[-1]))
    if hi <= lo:
        return None
    n_points = int(np.floor((hi - lo) / resolution)) + 1
    best, found = accel.pet_scan(ts, ego, rear, lo, resolution, n_points)
    return float(best) if found else None


def compute_rms_a(trace) -> float:
    if not trace.steps:
        raise ValueError("empty trace")
    a = np.asarray([rec["a"] for rec in trace.steps])
    return float(np.sqrt(np.mean(a * a)))


def accel_envelope(trace):
    a = np.asarray([rec["a"] for rec in trace.steps])
    return float(np.min(a)), float(np.max(a))


def scenario_report(trace, ledger=None) -> ScenarioReport:
    scn_doc = trace.header["scenario"]
    features = tuple(int(scn_doc["features"][k]) for k in FEATURE_NAMES)
    amin, amax = accel_envelope(trace)
    completed = True
    if ledger is not None:
        completed = ledger.scenario_completed(scn_doc["id"])
    return ScenarioReport(
        scenario_id=scn_doc["id"],
        features=features,
        n_steps=len(trace.steps),
        min_pet=compute_pet(trace),
        rms_a=compute_rms_a(trace),
        accel_min=amin,
        accel_max=amax,
        completed=completed,
    )


GROUP_KEYS = tuple(f"{r}{n}{i}" for r in (0, 1) for n in (0, 1) for i in (0, 1))


def aggregate(reports: Sequence[ScenarioReport], ledger=None) -> dict:
    """Rollup keyed by feature group: PET minima, RMS means, completion,
    plus overall latency statistics from the ledger."""
    groups: Dict[str, List[ScenarioReport]] = {}
    for rep in reports:
        key = "".join(str(b) for b in rep.features)
        groups.setdefault(key, []).append(rep)

    out_groups = {}
    for key in GROUP_KEYS:
        members = groups.get(key)
        if not members:
            continue  # empty group omitted
        pets = [r.min_pet for r in members if r.min_pet is not None]
        out_groups[key] = {
            "scenarios": len(members),
            "min_pet": min(pets) if pets else None,
            "mean_rms_a": float(np.mean([r.rms_a for r in members])),
            "completion": sum(r.completed for r in members) / len(members),
        }

    pets = [r.min_pet for r in reports if r.min_pet is not None]
    overall = {
        "scenarios": len(reports),
        "min_pet": min(pets) if pets else None,
        "mean_rms_a": float(np.mean([r.rms_a for r in reports])) if reports else None,
        "completion": (sum(r.completed for r in reports) / len(reports)) if reports else 1.0,
    }
    if ledger is not None:
        overall["completion"] = ledger.completion_rate()
        if ledger.latencies:
            lat = np.asarray(ledger.latencies)
            overall["latency_mean"] = float(np.mean(lat))
            overall["latency_p95"] = float(np.percentile(lat, 95))
    return {"groups": out_groups, "overall": overall}


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.3f}"
    return str(value)


def report_csv(rollup: dict) -> str:
    """Flat table: rows = feature flags then metrics, columns = the 8 groups."""
    present = [k for k in GROUP_KEYS if k in rollup["groups"]]
    lines = ["metric," + ",".join(present)]
    for row, pick in (("rain", 0), ("night", 1), ("intersection", 2)):
        lines.append(row + "," + ",".join(k[pick] for k in present))
    for metric in ("min_pet", "mean_rms_a", "completion"):
        cells = [_fmt(rollup["groups"][k][metric]) for k in present]
        lines.append(metric + "," + ",".join(cells))
    return "\n".join(lines) + "\n"


def report_json(rollup: dict) -> str:
    return json.dumps(rollup, indent=2, sort_keys=True) + "\n"
