"""Upper-layer planner: prompt assembly, LM service clients, response parsing
with range validation, and the memory fallback that makes planning total.

Two planner flavors share one interface: LmPlanner (service or cassette
backed) and MemoryPlanner (pure lookup baseline whose parameters never
change mid-run).
"""

import re
import time
from dataclasses import dataclass, field
from typing import Optional

import requests

from .cassette import Cassette, CassetteMiss, request_digest
from .environment import EnvDescription, assemble_env, env_features, fetch_scores, render_env_text
from .mpc import DrivingParams, InvalidDrivingParams
from .memory import lookup
from .scenario import SceneStatus, render_scene_text

SYSTEM_TEXT = (
    "You are the upper-layer planner of an autonomous vehicle. From the "
    "environment and scene information you choose the six driving parameters "
    "[N, Q, R, Q^h, v^d, h^d] for the lower-layer controller. Q is fixed at 1."
)

COT_STEPS = (
    "Understand the current situation: describe the environment and the scene around the ego vehicle.",
    "Evaluate the prediction horizon: choose N suited to how far ahead the situation must be anticipated.",
    "Set cost weights: choose R and Q^h balancing control effort against headway tracking (Q is fixed at 1).",
    "Define desired speed: choose v^d appropriate for the conditions.",
    "Determine Desired Headway: choose h^d keeping a safe distance to the preceding vehicle.",
)

FINAL_INSTRUCTION = (
    "End your answer with the final six parameters as a single bracketed list: "
    "[N, Q, R, Q^h, v^d, h^d]"
)

DEFAULT_TIMEOUT = 30.0
DEFAULT_RETRIES = 1


class TransportError(RuntimeError):
    """Service unreachable, timed out, or returned a non-success status."""


def format_param_vector(params: DrivingParams) -> str:
    vals = [str(int(params.N))] + [f"{v:g}" for v in
                                   (params.Q, params.R, params.Q_h, params.v_d, params.h_d)]
    return "[" + ", ".join(vals) + "]"


@dataclass
class PromptBundle:
    kind: str  # initial | update
    env_fragment: str
    scene_fragment: str
    memory_fragment: Optional[str] = None
    prev_params_fragment: Optional[str] = None
    image_ref: Optional[str] = None
    instruction: str = SYSTEM_TEXT
    cot_steps: tuple = COT_STEPS

    def __post_init__(self):
        have_mem = self.memory_fragment is not None
        have_prev = self.prev_params_fragment is not None
        if have_mem == have_prev:
            raise ValueError("exactly one of memory fragment and previous-params fragment must be present")

    def text(self) -> str:
        parts = [self.instruction, "", "## Environment", self.env_fragment.rstrip()]
        parts += ["", "## Scene", self.scene_fragment.rstrip()]
        if self.memory_fragment is not None:
            parts += ["", "## Reference parameters from memory", self.memory_fragment.rstrip()]
        if self.prev_params_fragment is not None:
            parts += ["", "## Previous driving parameters", self.prev_params_fragment.rstrip()]
        parts += ["", "## Reasoning steps"]
        for i, step in enumerate(self.cot_steps, start=1):
            parts.append(f"{i}. {step}")
        parts += ["", FINAL_INSTRUCTION]
        return "\n".join(parts) + "\n"


def build_prompt(
    kind: str,
    env: EnvDescription,
    scene: SceneStatus,
    memory_params: Optional[DrivingParams] = None,
    prev_params: Optional[DrivingParams] = None,
    image_ref: Optional[str] = None,
) -> PromptBundle:
    if kind == "initial":
        if memory_params is None:
            raise ValueError("initial prompt requires memory parameters")
        return PromptBundle(
            kind=kind,
            env_fragment=render_env_text(env),
            scene_fragment=render_scene_text(scene),
            memory_fragment=format_param_vector(memory_params),
            image_ref=image_ref,
        )
    if kind == "update":
        if prev_params is None:
            raise ValueError("update prompt requires previous parameters")
        return PromptBundle(
            kind=kind,
            env_fragment=render_env_text(env),
            scene_fragment=render_scene_text(scene),
            prev_params_fragment=format_param_vector(prev_params),
            image_ref=image_ref,
        )
    raise ValueError(f"unknown prompt kind {kind!r}")


@dataclass
class PlannerResponse:
    raw_text: str
    parsed: Optional[DrivingParams]
    latency: float
    verdict: str  # valid | parse_failure | range_failure | transport_failure


_BRACKET = re.compile(r"\[([^\[\]]*)\]")
_Q_TOL = 1e-3  # responses carry floats; Q within [0.999, 1.001] pins to 1


def parse_response(raw_text: str, latency: float = 0.0) -> PlannerResponse:
    """Extract the LAST bracketed numeric list; exactly six numbers, ranges
    enforced, N coerced to the nearest integer."""
    last = None
    for match in _BRACKET.finditer(raw_text):
        tokens = [tok.strip() for tok in match.group(1).split(",")]
        if not tokens or any(tok == "" for tok in tokens):
            continue
        try:
            nums = [float(tok) for tok in tokens]
        except ValueError:
            continue
        last = nums
    if last is None or len(last) != 6:
        return PlannerResponse(raw_text=raw_text, parsed=None, latency=latency,
                               verdict="parse_failure")
    n_raw, q, r, qh, vd, hd = last
    n = int(n_raw + 0.5) if n_raw >= 0 else int(n_raw - 0.5)
    if abs(q - 1.0) > _Q_TOL:
        return PlannerResponse(raw_text=raw_text, parsed=None, latency=latency,
                               verdict="range_failure")
    try:
        params = DrivingParams(N=n, Q=1.0, R=r, Q_h=qh, v_d=vd, h_d=hd)
        params.validate()
    except InvalidDrivingParams:
        return PlannerResponse(raw_text=raw_text, parsed=None, latency=latency,
                               verdict="range_failure")
    return PlannerResponse(raw_text=raw_text, parsed=params, latency=latency, verdict="valid")


@dataclass
class CompletionLedger:
    """Per-scenario verdict counts plus latency samples."""

    calls: dict = field(default_factory=dict)
    latencies: list = field(default_factory=list)

    def record(self, scenario_id: str, verdict: str, latency: float) -> None:
        counts = self.calls.setdefault(
            scenario_id,
            {"total": 0, "valid": 0, "parse_failure": 0, "range_failure": 0,
             "transport_failure": 0},
        )
        counts["total"] += 1
        counts[verdict] += 1
        self.latencies.append(float(latency))

    def scenario_completed(self, scenario_id: str) -> bool:
        counts = self.calls.get(scenario_id)
        if counts is None:
            return True  # no planner calls -> nothing to fail
        return counts["total"] == counts["valid"]

    def completion_rate(self) -> float:
        if not self.calls:
            return 1.0
        done = sum(1 for sid in self.calls if self.scenario_completed(sid))
        return done / len(self.calls)

    def totals(self) -> dict:
        agg = {"total": 0, "valid": 0, "parse_failure": 0, "range_failure": 0,
               "transport_failure": 0}
        for counts in self.calls.values():
            for k in agg:
                agg[k] += counts[k]
        return agg


class HttpLmClient:
    """Minimal HTTP client for the LM service.

    Request body: {system, prompt, image?, temperature, max_tokens, model?};
    response body: {text, usage}.  The credential travels in a bearer header
    read from an environment variable, never from config files.
    """

    def __init__(self, endpoint: str, model: Optional[str] = None,
                 temperature: float = 0.0, max_tokens: int = 1024,
                 timeout: float = DEFAULT_TIMEOUT, retries: int = DEFAULT_RETRIES,
                 api_key: Optional[str] = None):
        self.endpoint = endpoint
        self.model = model
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.timeout = timeout
        self.retries = retries
        self.api_key = api_key

    def request_body(self, system: str, prompt: str, image: Optional[str]) -> dict:
        body = {
            "system": system,
            "prompt": prompt,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }
        if image is not None:
            body["image"] = image
        if self.model is not None:
            body["model"] = self.model
        return body

    def complete(self, system: str, prompt: str, image: Optional[str] = None):
        body = self.request_body(system, prompt, image)
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_err = None
        for _ in range(self.retries + 1):
            t0 = time.monotonic()
            try:
                resp = requests.post(self.endpoint, json=body, headers=headers,
                                     timeout=self.timeout)
                if resp.status_code != 200:
                    last_err = TransportError(f"LM service returned {resp.status_code}")
                    continue
                text = resp.json()["text"]
                return text, time.monotonic() - t0
            except requests.RequestException as e:
                last_err = TransportError(f"LM request failed: {e}")
        raise last_err


class ScriptedLmClient:
    """Test double: plays back a fixed list of (text, latency) responses."""

    def __init__(self, script):
        self.script = list(script)
        self.requests = []
        self._i = 0

    def complete(self, system: str, prompt: str, image: Optional[str] = None):
        self.requests.append({"system": system, "prompt": prompt, "image": image})
        if self._i >= len(self.script):
            raise TransportError("scripted client exhausted")
        entry = self.script[self._i]
        self._i += 1
        if isinstance(entry, Exception):
            raise entry
        if isinstance(entry, dict):
            return entry["text"], float(entry.get("latency", 0.0))
        text, latency = entry
        return text, float(latency)


class ReplayLmClient:
    """Serves completions from a cassette; a miss is an error, not a fallback."""

    def __init__(self, cassette: Cassette, model: Optional[str] = None,
                 temperature: float = 0.0, max_tokens: int = 1024):
        self.cassette = cassette
        self.model = model
        self.temperature = temperature
        self.max_tokens = max_tokens

    def _body(self, system, prompt, image):
        body = {"kind": "lm", "system": system, "prompt": prompt,
                "temperature": self.temperature, "max_tokens": self.max_tokens}
        if image is not None:
            body["image"] = image
        if self.model is not None:
            body["model"] = self.model
        return body

    def complete(self, system: str, prompt: str, image: Optional[str] = None):
        response, latency = self.cassette.replay(self._body(system, prompt, image))
        return response["text"], latency


class RecordingLmClient:
    """Wraps a live client and records every exchange into a cassette."""

    def __init__(self, inner, cassette: Cassette, model: Optional[str] = None,
                 temperature: float = 0.0, max_tokens: int = 1024):
        self.inner = inner
        self.cassette = cassette
        self.model = model
        self.temperature = temperature
        self.max_tokens = max_tokens

    def _body(self, system, prompt, image):
        body = {"kind": "lm", "system": system, "prompt": prompt,
                "temperature": self.temperature, "max_tokens": self.max_tokens}
        if image is not None:
            body["image"] = image
        if self.model is not None:
            body["model"] = self.model
        return body

    def complete(self, system: str, prompt: str, image: Optional[str] = None):
        text, latency = self.inner.complete(system, prompt, image)
        self.cassette.record(self._body(system, prompt, image), {"text": text}, latency)
        return text, latency


class HttpEncoderClient:
    """Client for the image-encoder scoring service.

    Request: {image_id, labels: {category: [labels]}}; response:
    {scores: [{category, label, score}]}.
    """

    def __init__(self, endpoint: str, timeout: float = DEFAULT_TIMEOUT,
                 retries: int = DEFAULT_RETRIES):
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries

    def score_labels(self, image_ref: str, vocabulary: dict):
        body = {"image_id": image_ref, "labels": {k: list(v) for k, v in vocabulary.items()}}
        last_err = None
        for _ in range(self.retries + 1):
            try:
                resp = requests.post(self.endpoint, json=body, timeout=self.timeout)
                if resp.status_code != 200:
                    last_err = TransportError(f"encoder service returned {resp.status_code}")
                    continue
                return resp.json()["scores"]
            except requests.RequestException as e:
                last_err = TransportError(f"encoder request failed: {e}")
        raise last_err


class ReplayEncoderClient:
    def __init__(self, cassette: Cassette):
        self.cassette = cassette

    def score_labels(self, image_ref: str, vocabulary: dict):
        body = {"kind": "encoder", "image_id": image_ref,
                "labels": {k: list(v) for k, v in vocabulary.items()}}
        response, _latency = self.cassette.replay(body)
        return response["scores"]


class RecordingEncoderClient:
    def __init__(self, inner, cassette: Cassette):
        self.inner = inner
        self.cassette = cassette

    def score_labels(self, image_ref: str, vocabulary: dict):
        t0 = time.monotonic()
        scores = self.inner.score_labels(image_ref, vocabulary)
        body = {"kind": "encoder", "image_id": image_ref,
                "labels": {k: list(v) for k, v in vocabulary.items()}}
        self.cassette.record(body, {"scores": scores}, time.monotonic() - t0)
        return scores


@dataclass
class PlannerDecision:
    params: DrivingParams
    response: Optional[PlannerResponse]
    source: str  # lm | memory | memory_fallback
    prompt: Optional[PromptBundle] = None


def memory_planner(features, memory) -> DrivingParams:
    """Static baseline: pure memory lookup, no service calls."""
    return lookup(memory, features)


def plan(
    kind: str,
    env: EnvDescription,
    scene: SceneStatus,
    features,
    memory,
    client,
    prev_params: Optional[DrivingParams] = None,
    image_ref: Optional[str] = None,
    ledger: Optional[CompletionLedger] = None,
    scenario_id: str = "",
) -> PlannerDecision:
    """Build the prompt, call the LM, parse; fall back to memory on any
    non-valid verdict.  Totality: always returns usable parameters."""
    memory_params = lookup(memory, features)
    prompt = build_prompt(
        kind, env, scene,
        memory_params=memory_params if kind == "initial" else None,
        prev_params=prev_params if kind == "update" else None,
        image_ref=image_ref,
    )
    try:
        text, latency = client.complete(SYSTEM_TEXT, prompt.text(), image_ref)
        response = parse_response(text, latency=latency)
    except CassetteMiss:
        raise  # replay divergence is an error, never a silent fallback
    except TransportError:
        response = PlannerResponse(raw_text="", parsed=None, latency=0.0,
                                   verdict="transport_failure")
    if ledger is not None:
        ledger.record(scenario_id, response.verdict, response.latency)
    if response.verdict == "valid":
        return PlannerDecision(params=response.parsed, response=response,
                               source="lm", prompt=prompt)
    return PlannerDecision(params=memory_params, response=response,
                           source="memory_fallback", prompt=prompt)


class MemoryPlanner:
    """Deterministic baseline: parameters come from memory and never change."""

    name = "memory"

    def __init__(self, memory):
        self.memory = memory

    def decide(self, kind: str, scenario, scene: SceneStatus,
               prev_params: Optional[DrivingParams], ledger=None) -> PlannerDecision:
        params = memory_planner(scenario.feature_cell(), self.memory)
        return PlannerDecision(params=params, response=None, source="memory")


class LmPlanner:
    """Service-backed planner with environment encoding and memory fallback."""

    name = "lm"

    def __init__(self, memory, client, encoder_client=None, vocabulary=None):
        self.memory = memory
        self.client = client
        self.encoder_client = encoder_client
        self.vocabulary = vocabulary

    def _environment(self, scenario, image_ref):
        scores = fetch_scores(image_ref, self.encoder_client,
                              env_tags=scenario.env_tags, vocabulary=self.vocabulary)
        return assemble_env(scores)

    def decide(self, kind: str, scenario, scene: SceneStatus,
               prev_params: Optional[DrivingParams], ledger=None) -> PlannerDecision:
        image_ref = None
        if scenario.image_refs:
            idx = min(int(scene.t // 0.5), len(scenario.image_refs) - 1)
            image_ref = scenario.image_refs[idx]
        try:
            env = self._environment(scenario, image_ref)
            features = env_features(env)
        except Exception as e:
            if isinstance(e, CassetteMiss):
                raise
            # no environment available: count the call as a transport failure
            response = PlannerResponse(raw_text="", parsed=None, latency=0.0,
                                       verdict="transport_failure")
            if ledger is not None:
                ledger.record(scenario.id, response.verdict, response.latency)
            params = lookup(self.memory, scenario.feature_cell())
            return PlannerDecision(params=params, response=response,
                                   source="memory_fallback")
        return plan(
            kind, env, scene, features, self.memory, self.client,
            prev_params=prev_params, image_ref=image_ref,
            ledger=ledger, scenario_id=scenario.id,
        )
