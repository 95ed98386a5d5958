"""Two-rate closed-loop orchestration.

The lower loop steps MPC + plant every dt_l.  The upper planner refreshes the
driving parameters every dt_u with modeled (virtual time) or real (wall clock)
latency; the handoff is a single-slot atomic swap and the lower loop never
waits after the initial blocking call.  Only the most recently issued
request's response is ever applied; superseded responses are discarded.
"""

import json
import threading
import time
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional

import numpy as np

from .dynamics import PlantParams, VehicleState, plant_step
from .mpc import DrivingParams, MpcConfig, SpacingPolicy, mpc_step
from .scenario import (
    EgoTrack, LeaderState, Scenario, SceneStatus, encode_scene, load_scenario,
    serialize_scenario,
)


class ReplayMismatch(AssertionError):
    pass


@dataclass(frozen=True)
class SimConfig:
    dt_l: float = 0.1
    dt_u: float = 5.0
    mode: str = "virtual_time"  # virtual_time | wall_clock
    latency_model: str = "zero"  # zero | fixed:<s> | recorded | jitter:<mean>,<spread>
    seed: int = 0
    d_0: float = 2.0

    def validate(self) -> None:
        if self.dt_l <= 0 or self.dt_u < self.dt_l:
            raise ValueError("need 0 < dt_l <= dt_u")
        ratio = self.dt_u / self.dt_l
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("dt_u must be an integer multiple of dt_l")
        if self.mode not in ("virtual_time", "wall_clock"):
            raise ValueError(f"unknown mode {self.mode!r}")
        _parse_latency_model(self.latency_model)


def _parse_latency_model(spec: str):
    if spec == "zero":
        return ("zero",)
    if spec == "recorded":
        return ("recorded",)
    if spec.startswith("fixed:"):
        return ("fixed", float(spec.split(":", 1)[1]))
    if spec.startswith("jitter:"):
        mean_s, spread_s = spec.split(":", 1)[1].split(",")
        return ("jitter", float(mean_s), float(spread_s))
    raise ValueError(f"unknown latency model {spec!r}")


class _LatencySampler:
    def __init__(self, spec: str, seed: int):
        self.model = _parse_latency_model(spec)
        self.rng = np.random.default_rng(seed)

    def sample(self, recorded_latency: float) -> float:
        kind = self.model[0]
        if kind == "zero":
            return 0.0
        if kind == "fixed":
            return self.model[1]
        if kind == "recorded":
            return float(recorded_latency)
        mean, spread = self.model[1], self.model[2]
        return max(0.0, mean + self.rng.uniform(-spread, spread))


@dataclass
class SimTrace:
    header: dict
    steps: List[dict] = field(default_factory=list)
    events: List[dict] = field(default_factory=list)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"header": self.header}, sort_keys=True)]
        for ev in self.events:
            lines.append(json.dumps({"event": ev}, sort_keys=True))
        for st in self.steps:
            lines.append(json.dumps({"step": st}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str) -> "SimTrace":
        header = None
        steps, events = [], []
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if "header" in rec:
                header = rec["header"]
            elif in_ev := rec.get("event"):
                events.append(in_ev)
            elif "step" in rec:
                steps.append(rec["step"])
        if header is None:
            raise ValueError("trace has no header record")
        return cls(header=header, steps=steps, events=events)

    @classmethod
    def load(cls, path) -> "SimTrace":
        with open(path, "r") as fh:
            return cls.from_jsonl(fh.read())


def _scene_for(track: EgoTrack, scenario: Scenario, t: float) -> SceneStatus:
    return encode_scene(track, scenario, t)


def _theta_list(p: DrivingParams):
    return [int(p.N), p.Q, p.R, p.Q_h, p.v_d, p.h_d]


def run_scenario(
    scenario: Scenario,
    planner,
    cfg: SimConfig = SimConfig(),
    mpc_cfg: MpcConfig = MpcConfig(),
    ledger=None,
) -> SimTrace:
    """Simulate one scenario closed-loop and return the full trace."""
    cfg.validate()
    mpc_cfg.validate()
    if cfg.mode == "wall_clock":
        return _run_wall_clock(scenario, planner, cfg, mpc_cfg, ledger)
    return _run_virtual(scenario, planner, cfg, mpc_cfg, ledger)


def _header(scenario, planner, cfg, mpc_cfg):
    return {
        "scenario": serialize_scenario(scenario),
        "sim_config": asdict(cfg),
        "mpc_config": asdict(mpc_cfg),
        "planner": {"name": getattr(planner, "name", type(planner).__name__)},
        "format": 1,
    }


def _run_virtual(scenario, planner, cfg, mpc_cfg, ledger) -> SimTrace:
    dt = cfg.dt_l
    n_steps = int(round(scenario.duration / dt))
    steps_per_update = int(round(cfg.dt_u / dt))
    plant = scenario.plant
    sampler = _LatencySampler(cfg.latency_model, cfg.seed)

    trace = SimTrace(header=_header(scenario, planner, cfg, mpc_cfg))
    state = scenario.ego_init
    track = EgoTrack(state)

    # initial call blocks: theta must exist before the first control step
    scene0 = _scene_for(track, scenario, 0.0)
    decision = planner.decide("initial", scenario, scene0, None, ledger)
    latency0 = sampler.sample(decision.response.latency if decision.response else 0.0)
    theta = decision.params
    theta_src = "req0"
    trace.events.append({
        "req_id": 0, "kind": "initial", "t_issue": 0.0, "latency": latency0,
        "response_latency": decision.response.latency if decision.response else 0.0,
        "t_arrival": 0.0, "verdict": decision.response.verdict if decision.response else "memory",
        "source": decision.source, "params": _theta_list(theta),
        "applied": True, "applied_step": 0, "superseded": False,
    })

    pending = None  # at most one in-flight request; older ones are discarded
    next_req = 1
    prev_u = 0.0

    for i in range(n_steps):
        t = i * dt

        if pending is not None and pending["t_arrival"] <= t + 1e-12:
            theta = pending["params"]
            theta_src = f"req{pending['req_id']}"
            ev = trace.events[pending["event_index"]]
            ev["applied"] = True
            ev["applied_step"] = i
            pending = None

        if i > 0 and i % steps_per_update == 0:
            scene_u = _scene_for(track, scenario, t)
            d = planner.decide("update", scenario, scene_u, theta, ledger)
            lat = sampler.sample(d.response.latency if d.response else 0.0)
            if pending is not None:
                trace.events[pending["event_index"]]["superseded"] = True
            trace.events.append({
                "req_id": next_req, "kind": "update", "t_issue": t, "latency": lat,
                "response_latency": d.response.latency if d.response else 0.0,
                "t_arrival": t + lat,
                "verdict": d.response.verdict if d.response else "memory",
                "source": d.source, "params": _theta_list(d.params),
                "applied": False, "applied_step": None, "superseded": False,
            })
            pending = {"req_id": next_req, "t_arrival": t + lat, "params": d.params,
                       "event_index": len(trace.events) - 1}
            next_req += 1

        scene = _scene_for(track, scenario, t)
        anomaly = None
        try:
            policy = SpacingPolicy(h_d=theta.h_d, d_0=cfg.d_0)
            u, sol = mpc_step(theta, scene, mpc_cfg, policy, plant)
            status = sol.status
        except Exception as e:  # controller fault: hold previous control
            u = prev_u
            status = "held"
            anomaly = f"{type(e).__name__}: {e}"
        prev_u = u

        rec = {
            "step": i, "t": t, "x": state.x, "v": state.v, "a": state.a, "u": u,
            "theta": _theta_list(theta), "theta_src": theta_src,
            "lead_gap": scene.leader.gap if scene.leader else None,
            "lead_v": scene.leader.v if scene.leader else None,
            "stop_gap": scene.stop_line_gap, "status": status,
        }
        if anomaly:
            rec["anomaly"] = anomaly
        trace.steps.append(rec)

        state = plant_step(state, u, plant, dt)
        state = replace(state, t=(i + 1) * dt)
        track.append(state)

    return trace


def _run_wall_clock(scenario, planner, cfg, mpc_cfg, ledger) -> SimTrace:
    """Same contract with real latency: the planner runs on its own thread and
    hands results over through a lock-protected single slot."""
    dt = cfg.dt_l
    n_steps = int(round(scenario.duration / dt))
    steps_per_update = int(round(cfg.dt_u / dt))
    plant = scenario.plant

    trace = SimTrace(header=_header(scenario, planner, cfg, mpc_cfg))
    state = scenario.ego_init
    track = EgoTrack(state)

    lock = threading.Lock()
    slot = {}  # req_id -> (decision, wall arrival)

    wall0 = time.monotonic()
    scene0 = _scene_for(track, scenario, 0.0)
    decision = planner.decide("initial", scenario, scene0, None, ledger)
    latency0 = time.monotonic() - wall0
    theta = decision.params
    theta_src = "req0"
    trace.events.append({
        "req_id": 0, "kind": "initial", "t_issue": 0.0, "latency": latency0,
        "response_latency": decision.response.latency if decision.response else 0.0,
        "t_arrival": 0.0, "verdict": decision.response.verdict if decision.response else "memory",
        "source": decision.source, "params": _theta_list(theta),
        "applied": True, "applied_step": 0, "superseded": False,
    })

    start = time.monotonic()
    latest_req = 0
    next_req = 1
    prev_u = 0.0
    threads = []

    def worker(req_id, scene_u, prev_theta, t_issue):
        d = planner.decide("update", scenario, scene_u, prev_theta, ledger)
        arrival = time.monotonic() - start
        with lock:
            slot[req_id] = (d, arrival, t_issue)

    for i in range(n_steps):
        t = i * dt
        deadline = start + t
        delay = deadline - time.monotonic()
        if delay > 0:
            time.sleep(delay)

        with lock:
            if latest_req in slot:
                d, arrival, t_issue = slot.pop(latest_req)
                slot.clear()
                theta = d.params
                theta_src = f"req{latest_req}"
                trace.events.append({
                    "req_id": latest_req, "kind": "update", "t_issue": t_issue,
                    "latency": arrival - t_issue,
                    "response_latency": d.response.latency if d.response else 0.0,
                    "t_arrival": arrival,
                    "verdict": d.response.verdict if d.response else "memory",
                    "source": d.source, "params": _theta_list(d.params),
                    "applied": True, "applied_step": i, "superseded": False,
                })

        if i > 0 and i % steps_per_update == 0:
            scene_u = _scene_for(track, scenario, t)
            latest_req = next_req
            th = threading.Thread(target=worker, args=(next_req, scene_u, theta, t),
                                  daemon=True)
            th.start()
            threads.append(th)
            next_req += 1

        scene = _scene_for(track, scenario, t)
        anomaly = None
        try:
            policy = SpacingPolicy(h_d=theta.h_d, d_0=cfg.d_0)
            u, sol = mpc_step(theta, scene, mpc_cfg, policy, plant)
            status = sol.status
        except Exception as e:
            u = prev_u
            status = "held"
            anomaly = f"{type(e).__name__}: {e}"
        prev_u = u

        rec = {
            "step": i, "t": t, "x": state.x, "v": state.v, "a": state.a, "u": u,
            "theta": _theta_list(theta), "theta_src": theta_src,
            "lead_gap": scene.leader.gap if scene.leader else None,
            "lead_v": scene.leader.v if scene.leader else None,
            "stop_gap": scene.stop_line_gap, "status": status,
        }
        if anomaly:
            rec["anomaly"] = anomaly
        trace.steps.append(rec)

        state = plant_step(state, u, plant, dt)
        state = replace(state, t=(i + 1) * dt)
        track.append(state)

    for th in threads:
        th.join(timeout=0.1)
    return trace


def run_static(scenario: Scenario, params: DrivingParams,
               mpc_cfg: MpcConfig = MpcConfig(), d_0: float = 2.0, dt: float = 0.1):
    """Fast fixed-parameter closed loop for calibration; returns (t, x, v)."""
    n_steps = int(round(scenario.duration / dt))
    plant = scenario.plant
    policy = SpacingPolicy(h_d=params.h_d, d_0=d_0)
    state = scenario.ego_init
    ts = np.empty(n_steps)
    xs = np.empty(n_steps)
    vs = np.empty(n_steps)
    for i in range(n_steps):
        t = i * dt
        leader = None
        if scenario.leader_track is not None:
            lx, lv, la = scenario.leader_track.state_at(t)
            leader = LeaderState(gap=lx - state.x, v=lv, a=la)
        stop_gap = None
        if scenario.stop_line_x is not None:
            g = scenario.stop_line_x - state.x
            if g > 0:
                stop_gap = g
        scene = SceneStatus(t=t, ego_history=(state,) * 6, leader=leader,
                            stop_line_gap=stop_gap)
        u, _sol = mpc_step(params, scene, mpc_cfg, policy, plant)
        ts[i] = t
        xs[i] = state.x
        vs[i] = state.v
        state = plant_step(state, u, plant, dt)
        state = replace(state, t=(i + 1) * dt)
    return ts, xs, vs


def replay_trace(trace: SimTrace, planner) -> SimTrace:
    """Re-run a virtual-time trace and verify byte-identical reproduction."""
    header = trace.header
    if header["sim_config"]["mode"] != "virtual_time":
        raise ValueError("only virtual_time traces can be replayed")
    scenario = load_scenario(header["scenario"])
    cfg = SimConfig(**header["sim_config"])
    mpc_cfg = MpcConfig(**header["mpc_config"])
    fresh = run_scenario(scenario, planner, cfg, mpc_cfg)

    for kind, old, new in (("event", trace.events, fresh.events),
                           ("step", trace.steps, fresh.steps)):
        if len(old) != len(new):
            raise ReplayMismatch(f"{kind} count differs: {len(old)} vs {len(new)}")
        for k, (o, n) in enumerate(zip(old, new)):
            so = json.dumps(o, sort_keys=True)
            sn = json.dumps(n, sort_keys=True)
            if so != sn:
                raise ReplayMismatch(f"{kind} {k} differs:\n  recorded: {so}\n  replayed: {sn}")
    return fresh
