"""Scenario files, validation, and the scene encoder.

A scenario is a 1-D longitudinal scene: ego initial state, an optional
timestamped leader track, an optional stop line, and feature flags used for
grouping runs.  ``encode_scene`` produces the controller/planner view at time
t: an ego history window sampled every ``delta_t`` seconds plus gaps to the
leader rear axle reference point and the stop line, both with the ego as
origin.
"""

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynamics import PlantParams, VehicleState

GAMMA = 5
DELTA_T = 0.5

FEATURE_NAMES = ("rain", "night", "intersection")


class ScenarioError(ValueError):
    """Scenario document failed schema validation."""


@dataclass(frozen=True)
class LeaderState:
    """Leader as seen from the ego: gap to its position (m), speed, accel."""

    gap: float
    v: float
    a: float = 0.0


class LeaderTrack:
    """Timestamped (t, x, v) leader samples with linear interpolation.

    Acceleration is the finite difference of v on each interval.  Outside the
    sampled range the leader continues at constant velocity.
    """

    def __init__(self, t, x, v):
        self.t = np.asarray(t, dtype=float)
        self.x = np.asarray(x, dtype=float)
        self.v = np.asarray(v, dtype=float)
        if self.t.ndim != 1 or len(self.t) == 0:
            raise ScenarioError("leader_track must contain at least one sample")
        if not (len(self.t) == len(self.x) == len(self.v)):
            raise ScenarioError("leader_track fields t/x/v must have equal length")
        if len(self.t) > 1 and np.any(np.diff(self.t) <= 0):
            raise ScenarioError("leader_track.t not increasing")

    def state_at(self, t: float):
        """(x, v, a) at time t; constant velocity beyond the sampled range."""
        ts, xs, vs = self.t, self.x, self.v
        if t <= ts[0]:
            return xs[0] + vs[0] * (t - ts[0]), vs[0], 0.0
        if t >= ts[-1]:
            return xs[-1] + vs[-1] * (t - ts[-1]), vs[-1], 0.0
        i = int(np.searchsorted(ts, t, side="right")) - 1
        dt = ts[i + 1] - ts[i]
        w = (t - ts[i]) / dt
        x = xs[i] + w * (xs[i + 1] - xs[i])
        v = vs[i] + w * (vs[i + 1] - vs[i])
        a = (vs[i + 1] - vs[i]) / dt
        return float(x), float(v), float(a)


@dataclass
class Scenario:
    id: str
    features: dict
    ego_init: VehicleState
    duration: float
    leader_track: Optional[LeaderTrack] = None
    stop_line_x: Optional[float] = None
    env_tags: Optional[dict] = None
    image_refs: Optional[list] = None
    plant: PlantParams = field(default_factory=PlantParams)

    def feature_cell(self):
        return tuple(bool(self.features[k]) for k in FEATURE_NAMES)


@dataclass(frozen=True)
class SceneStatus:
    """Planner/controller view of the scene at one instant."""

    t: float
    ego_history: tuple  # (gamma+1) VehicleState, oldest first, spacing delta_t
    leader: Optional[LeaderState]
    stop_line_gap: Optional[float]


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise ScenarioError(f"{where}.{key} missing" if where else f"{key} missing")
    return doc[key]


def _check_keys(doc: dict, allowed, where: str):
    for k in doc:
        if k not in allowed:
            loc = f" in {where}" if where else ""
            raise ScenarioError(f"unknown key '{k}'{loc}")


def _number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioError(f"{where} must be a number")
    return float(value)


def load_scenario(doc) -> Scenario:
    """Validate a scenario document (dict or JSON string) into a Scenario."""
    if isinstance(doc, str):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as e:
            raise ScenarioError(f"not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ScenarioError("scenario document must be a mapping")
    _check_keys(
        doc,
        {"id", "features", "ego_init", "leader_track", "stop_line_x",
         "env_tags", "image_refs", "duration", "plant"},
        "",
    )

    sid = _require(doc, "id", "")
    if not isinstance(sid, str) or not sid:
        raise ScenarioError("id must be a non-empty string")

    feats = _require(doc, "features", "")
    if not isinstance(feats, dict):
        raise ScenarioError("features must be a mapping")
    _check_keys(feats, set(FEATURE_NAMES), "features")
    features = {}
    for name in FEATURE_NAMES:
        val = _require(feats, name, "features")
        if not isinstance(val, bool):
            raise ScenarioError(f"features.{name} must be a boolean")
        features[name] = val

    ego = _require(doc, "ego_init", "")
    if not isinstance(ego, dict):
        raise ScenarioError("ego_init must be a mapping")
    _check_keys(ego, {"x", "v", "a"}, "ego_init")
    ego_init = VehicleState(
        x=_number(_require(ego, "x", "ego_init"), "ego_init.x"),
        v=_number(_require(ego, "v", "ego_init"), "ego_init.v"),
        a=_number(ego.get("a", 0.0), "ego_init.a"),
        t=0.0,
    )
    if ego_init.v < 0:
        raise ScenarioError("ego_init.v must be >= 0")

    duration = _number(_require(doc, "duration", ""), "duration")
    if not duration > 0:
        raise ScenarioError("duration must be > 0")

    leader_track = None
    if doc.get("leader_track") is not None:
        raw = doc["leader_track"]
        if not isinstance(raw, list) or not raw:
            raise ScenarioError("leader_track must be a non-empty list")
        ts, xs, vs = [], [], []
        for i, samp in enumerate(raw):
            if not isinstance(samp, dict):
                raise ScenarioError(f"leader_track[{i}] must be a mapping")
            _check_keys(samp, {"t", "x", "v"}, f"leader_track[{i}]")
            ts.append(_number(_require(samp, "t", f"leader_track[{i}]"), f"leader_track[{i}].t"))
            xs.append(_number(_require(samp, "x", f"leader_track[{i}]"), f"leader_track[{i}].x"))
            vs.append(_number(_require(samp, "v", f"leader_track[{i}]"), f"leader_track[{i}].v"))
        leader_track = LeaderTrack(ts, xs, vs)

    stop_line_x = None
    if doc.get("stop_line_x") is not None:
        stop_line_x = _number(doc["stop_line_x"], "stop_line_x")

    env_tags = None
    if doc.get("env_tags") is not None:
        raw = doc["env_tags"]
        if not isinstance(raw, dict):
            raise ScenarioError("env_tags must be a mapping")
        _check_keys(raw, {"weather", "lighting", "road_type", "road_condition", "obstacles"}, "env_tags")
        env_tags = {}
        for key in ("weather", "lighting", "road_type", "road_condition"):
            if key in raw:
                if not isinstance(raw[key], str):
                    raise ScenarioError(f"env_tags.{key} must be a string")
                env_tags[key] = raw[key]
        if "obstacles" in raw:
            obs = raw["obstacles"]
            if not isinstance(obs, list) or not all(isinstance(o, str) for o in obs):
                raise ScenarioError("env_tags.obstacles must be a list of strings")
            env_tags["obstacles"] = list(obs)

    image_refs = None
    if doc.get("image_refs") is not None:
        raw = doc["image_refs"]
        if not isinstance(raw, list) or not all(isinstance(r, str) for r in raw):
            raise ScenarioError("image_refs must be a list of strings")
        image_refs = list(raw)

    plant = PlantParams()
    if doc.get("plant") is not None:
        raw = doc["plant"]
        if not isinstance(raw, dict):
            raise ScenarioError("plant must be a mapping")
        _check_keys(raw, {"m", "K_d", "d_m", "tau_A", "length"}, "plant")
        kwargs = {}
        for key in ("m", "K_d", "d_m", "tau_A", "length"):
            if key in raw:
                kwargs[key] = _number(raw[key], f"plant.{key}")
        plant = PlantParams(**kwargs)
        try:
            plant.validate()
        except ValueError as e:
            raise ScenarioError(f"plant: {e}") from None

    return Scenario(
        id=sid, features=features, ego_init=ego_init, duration=duration,
        leader_track=leader_track, stop_line_x=stop_line_x,
        env_tags=env_tags, image_refs=image_refs, plant=plant,
    )


def load_scenario_file(path) -> Scenario:
    with open(path, "r") as fh:
        text = fh.read()
    try:
        return load_scenario(text)
    except ScenarioError as e:
        raise ScenarioError(f"{path}: {e}") from None


def serialize_scenario(scn: Scenario) -> dict:
    """Inverse of load_scenario up to float representation."""
    doc = {
        "id": scn.id,
        "features": {k: bool(scn.features[k]) for k in FEATURE_NAMES},
        "ego_init": {"x": scn.ego_init.x, "v": scn.ego_init.v, "a": scn.ego_init.a},
        "duration": scn.duration,
    }
    if scn.leader_track is not None:
        doc["leader_track"] = [
            {"t": float(t), "x": float(x), "v": float(v)}
            for t, x, v in zip(scn.leader_track.t, scn.leader_track.x, scn.leader_track.v)
        ]
    if scn.stop_line_x is not None:
        doc["stop_line_x"] = scn.stop_line_x
    if scn.env_tags is not None:
        doc["env_tags"] = {k: (list(v) if isinstance(v, list) else v) for k, v in scn.env_tags.items()}
    if scn.image_refs is not None:
        doc["image_refs"] = list(scn.image_refs)
    p = scn.plant
    if p != PlantParams():
        doc["plant"] = {"m": p.m, "K_d": p.K_d, "d_m": p.d_m, "tau_A": p.tau_A, "length": p.length}
    return doc


class EgoTrack:
    """Append-only record of realized ego states for history interpolation."""

    def __init__(self, init: VehicleState):
        self.init = init
        self.t = [init.t]
        self.x = [init.x]
        self.v = [init.v]
        self.a = [init.a]

    def append(self, state: VehicleState):
        self.t.append(state.t)
        self.x.append(state.x)
        self.v.append(state.v)
        self.a.append(state.a)

    def state_at(self, t: float) -> VehicleState:
        ts = self.t
        if t <= ts[0]:
            return VehicleState(x=self.init.x, v=self.init.v, a=self.init.a, t=t)
        if t >= ts[-1]:
            return VehicleState(x=self.x[-1], v=self.v[-1], a=self.a[-1], t=t)
        i = int(np.searchsorted(np.asarray(ts), t, side="right")) - 1
        w = (t - ts[i]) / (ts[i + 1] - ts[i])
        return VehicleState(
            x=self.x[i] + w * (self.x[i + 1] - self.x[i]),
            v=self.v[i] + w * (self.v[i + 1] - self.v[i]),
            a=self.a[i] + w * (self.a[i + 1] - self.a[i]),
            t=t,
        )


def encode_scene(
    track: EgoTrack,
    scenario: Scenario,
    t: float,
    gamma: int = GAMMA,
    delta_t: float = DELTA_T,
) -> SceneStatus:
    """Scene status at time t: history window plus leader/stop-line gaps.

    History samples before the trajectory start replicate the initial state
    (padding); the gaps use the ego as origin and the stop-line entry is
    dropped once passed.
    """
    history = tuple(
        track.state_at(t - (gamma - k) * delta_t) for k in range(gamma + 1)
    )
    ego_now = history[-1]

    leader = None
    if scenario.leader_track is not None:
        lx, lv, la = scenario.leader_track.state_at(t)
        leader = LeaderState(gap=lx - ego_now.x, v=lv, a=la)

    stop_gap = None
    if scenario.stop_line_x is not None:
        gap = scenario.stop_line_x - ego_now.x
        if gap > 0:
            stop_gap = gap

    return SceneStatus(t=t, ego_history=history, leader=leader, stop_line_gap=stop_gap)


def render_scene_text(scene: SceneStatus) -> str:
    """Deterministic prompt fragment describing the scene (2-decimal fixed)."""
    lines = ["Ego vehicle history (oldest first, 0.5 s apart):"]
    for st in scene.ego_history:
        dt = st.t - scene.t
        tag = "now  " if abs(dt) < 1e-9 else f"{dt:+.1f}s"
        lines.append(
            f"  [{tag}] position {st.x:.2f} m, speed {st.v:.2f} m/s, acceleration {st.a:.2f} m/s^2"
        )
    if scene.leader is not None:
        lines.append(
            f"Preceding vehicle: {scene.leader.gap:.2f} m ahead, speed {scene.leader.v:.2f} m/s, "
            f"acceleration {scene.leader.a:.2f} m/s^2"
        )
    if scene.stop_line_gap is not None:
        lines.append(f"Stop line: {scene.stop_line_gap:.2f} m ahead")
    return "\n".join(lines) + "\n"
