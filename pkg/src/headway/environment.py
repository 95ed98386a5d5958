"""Environment description assembly from encoder scores or scenario fixtures.

The image-encoder service scores a fixed label vocabulary per category; the
description keeps the top label for each mandatory category and filters the
optional ones by confidence threshold (road condition > 0.3, obstacles > 0.2,
both strict).
"""

from dataclasses import dataclass, field
from typing import List, Optional

from .cassette import CassetteMiss

MANDATORY = ("weather", "lighting", "road_type")

ROAD_CONDITION_THRESHOLD = 0.3
OBSTACLE_THRESHOLD = 0.2

DEFAULT_VOCABULARY = {
    "weather": ["clear", "rainy", "foggy", "snowy"],
    "lighting": ["day", "night", "dusk"],
    "road_type": ["urban street", "highway", "intersection approach", "parking lot"],
    "road_condition": ["wet", "dry", "construction"],
    "obstacle": ["parked vehicles", "pedestrian", "cone", "barrier"],
}


class EnvError(ValueError):
    pass


@dataclass(frozen=True)
class LabelScore:
    category: str
    label: str
    score: float

    def validate(self) -> None:
        if self.category not in ("weather", "lighting", "road_type", "road_condition", "obstacle"):
            raise EnvError(f"unknown category {self.category!r}")
        if not (0.0 <= self.score <= 1.0):
            raise EnvError(f"score must be in [0, 1], got {self.score!r}")


@dataclass(frozen=True)
class EnvDescription:
    weather: str
    lighting: str
    road_type: str
    road_condition: Optional[str] = None
    obstacles: tuple = ()


def _top(entries):
    """Highest score wins; lexicographically smallest label on ties."""
    best = None
    for label, score in entries:
        if best is None or score > best[1] or (score == best[1] and label < best[0]):
            best = (label, score)
    return best


def assemble_env(scores: List[LabelScore]) -> EnvDescription:
    """Build the description: top label per mandatory category regardless of
    score, thresholded optional categories."""
    by_cat = {}
    for s in scores:
        s.validate()
        by_cat.setdefault(s.category, []).append((s.label, s.score))

    picked = {}
    for cat in MANDATORY:
        if cat not in by_cat:
            raise EnvError(f"missing mandatory category: {cat}")
        picked[cat] = _top(by_cat[cat])[0]

    road_condition = None
    if "road_condition" in by_cat:
        label, score = _top(by_cat["road_condition"])
        if score > ROAD_CONDITION_THRESHOLD:
            road_condition = label

    obstacles = ()
    if "obstacle" in by_cat:
        kept = [(lbl, sc) for lbl, sc in by_cat["obstacle"] if sc > OBSTACLE_THRESHOLD]
        obstacles = tuple(sorted({lbl for lbl, _ in kept}))

    return EnvDescription(
        weather=picked["weather"],
        lighting=picked["lighting"],
        road_type=picked["road_type"],
        road_condition=road_condition,
        obstacles=obstacles,
    )


def scores_from_tags(env_tags: dict) -> List[LabelScore]:
    """Fixture fallback: each tagged label becomes a unit-confidence score."""
    scores = []
    for cat in MANDATORY:
        if cat in env_tags:
            scores.append(LabelScore(category=cat, label=env_tags[cat], score=1.0))
    if "road_condition" in env_tags:
        scores.append(LabelScore(category="road_condition", label=env_tags["road_condition"], score=1.0))
    for obs in env_tags.get("obstacles", []):
        scores.append(LabelScore(category="obstacle", label=obs, score=1.0))
    return scores


def fetch_scores(image_ref: Optional[str], client, env_tags: Optional[dict] = None,
                 vocabulary: Optional[dict] = None) -> List[LabelScore]:
    """Score the image via the encoder service, falling back to the scenario
    fixture tags when the service is absent or unreachable.

    Raises EnvError when neither source is available so the planner can fall
    back to memory parameters.
    """
    if client is not None and image_ref is not None:
        vocab = vocabulary or DEFAULT_VOCABULARY
        try:
            raw = client.score_labels(image_ref, vocab)
            return [LabelScore(category=r["category"], label=r["label"], score=float(r["score"]))
                    for r in raw]
        except CassetteMiss:
            raise  # replay divergence is an error, never a silent fallback
        except Exception:
            if env_tags is None:
                raise EnvError("encoder service unavailable and no env_tags fixture") from None
    if env_tags is not None:
        return scores_from_tags(env_tags)
    raise EnvError("no encoder client and no env_tags fixture")


def render_env_text(env: EnvDescription) -> str:
    """One line per present category, fixed order."""
    lines = [
        f"Weather: {env.weather}",
        f"Lighting: {env.lighting}",
        f"Road type: {env.road_type}",
    ]
    if env.road_condition is not None:
        lines.append(f"Road condition: {env.road_condition}")
    if env.obstacles:
        lines.append("Obstacles: " + ", ".join(env.obstacles))
    return "\n".join(lines) + "\n"


def env_features(env: EnvDescription) -> dict:
    """Map the description onto the three grouping flags used by memory."""
    return {
        "rain": env.weather == "rainy",
        "night": env.lighting == "night",
        "intersection": env.road_type == "intersection approach",
    }
