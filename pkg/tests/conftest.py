"""Shared builders for the test suite.

Most tests construct scenarios programmatically instead of loading files, so
the builders here keep the dict plumbing in one place.
"""

import numpy as np
import pytest

from headway.scenario import load_scenario


def make_scenario_doc(**overrides):
    """A minimal valid scenario document; overrides are merged on top."""
    doc = {
        "id": "synthetic-000",
        "features": {"rain": False, "night": False, "intersection": False},
        "ego_init": {"x": 0.0, "v": 5.0, "a": 0.0},
        "duration": 10.0,
    }
    doc.update(overrides)
    return doc


def make_scenario(**overrides):
    return load_scenario(make_scenario_doc(**overrides))


def constant_speed_track(x0, v, t_end, dt=0.5):
    """Leader track samples for a constant-speed leader."""
    ts = [round(k * dt, 6) for k in range(int(t_end / dt) + 1)]
    return [{"t": t, "x": x0 + v * t, "v": v} for t in ts]


def braking_track(x0, v0, t_brake, decel, t_end, dt=0.1):
    """Leader cruises at v0, then brakes at `decel` (m/s^2, positive number)
    starting at t_brake until standstill, then holds position."""
    rows = []
    x = x0
    v = v0
    t = 0.0
    n = int(round(t_end / dt))
    for k in range(n + 1):
        rows.append({"t": round(t, 6), "x": x, "v": v})
        a = -decel if (t >= t_brake and v > 0.0) else 0.0
        v_next = max(0.0, v + a * dt)
        # trapezoid keeps x consistent with v even across the stop
        x += 0.5 * (v + v_next) * dt
        v = v_next
        t += dt
    return rows


def feature_cells():
    """All 8 binary feature combinations in canonical order."""
    out = []
    for r in (0, 1):
        for n in (0, 1):
            for i in (0, 1):
                out.append((r, n, i))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
