"""Reference memory: per-scene calibration, significance-driven grouping over
the {rain, night, intersection} feature cube, and group-mean lookup.

The shipped fixture memory reproduces the aggregated parameters of the eight
grouped scenarios so the full stack runs without calibration data.
"""

import json
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .mpc import DrivingParams

PARAM_NAMES = ("N", "R", "Q_h", "v_d", "h_d")  # Q excluded: fixed at 1
ALPHA = 0.05

# canonical cell order over (rain, night, intersection)
CELLS: Tuple[Tuple[int, int, int], ...] = tuple(
    (r, n, i) for r in (0, 1) for n in (0, 1) for i in (0, 1)
)
CELL_INDEX = {c: k for k, c in enumerate(CELLS)}


class ReferenceMemoryError(ValueError):
    pass


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class MemoryEntry:
    scenario_id: str
    features: Tuple[int, int, int]  # (rain, night, intersection)
    params: DrivingParams

    def __post_init__(self):
        self.params.validate()
        if self.features not in CELL_INDEX:
            raise ReferenceMemoryError(f"features must be a binary triple, got {self.features!r}")


@dataclass(frozen=True)
class ScenarioGroup:
    member_cells: Tuple[Tuple[int, int, int], ...]
    mean_params: DrivingParams


@dataclass
class PValueMatrix:
    """8x8 symmetric p-value matrix per parameter; NaN marks not-computable."""

    values: Dict[str, np.ndarray]
    alpha: float = ALPHA

    def mergeable(self, i: int, j: int) -> bool:
        """True when every parameter's p-value is computable and non-significant."""
        for name in PARAM_NAMES:
            p = self.values[name][i, j]
            if not np.isfinite(p) or p < self.alpha:
                return False
        return True


def _welch_p(a: np.ndarray, b: np.ndarray) -> float:
    if len(a) < 2 or len(b) < 2:
        return float("nan")
    if np.ptp(a) == 0.0 and np.ptp(b) == 0.0:
        # degenerate constant samples: no spread to test against
        return 1.0 if a[0] == b[0] else 0.0
    return float(stats.ttest_ind(a, b, equal_var=False).pvalue)


def significance_matrix(entries: Sequence[MemoryEntry], alpha: float = ALPHA) -> PValueMatrix:
    """Pairwise Welch t-test per parameter across the 8 feature cells."""
    samples: Dict[int, Dict[str, list]] = {}
    for e in entries:
        cell = CELL_INDEX[e.features]
        bucket = samples.setdefault(cell, {name: [] for name in PARAM_NAMES})
        vals = {"N": float(e.params.N), "R": e.params.R, "Q_h": e.params.Q_h,
                "v_d": e.params.v_d, "h_d": e.params.h_d}
        for name in PARAM_NAMES:
            bucket[name].append(vals[name])

    values = {name: np.full((8, 8), np.nan) for name in PARAM_NAMES}
    for name in PARAM_NAMES:
        np.fill_diagonal(values[name], 1.0)
    for i in range(8):
        for j in range(i + 1, 8):
            if i not in samples or j not in samples:
                continue
            for name in PARAM_NAMES:
                p = _welch_p(np.asarray(samples[i][name]), np.asarray(samples[j][name]))
                values[name][i, j] = p
                values[name][j, i] = p
    return PValueMatrix(values=values, alpha=alpha)


def _mean_params(entry_lists: List[List[MemoryEntry]]) -> DrivingParams:
    pool = [e for lst in entry_lists for e in lst]
    n = int(np.floor(np.mean([e.params.N for e in pool]) + 0.5))
    return DrivingParams(
        N=n,
        Q=1.0,
        R=float(np.mean([e.params.R for e in pool])),
        Q_h=float(np.mean([e.params.Q_h for e in pool])),
        v_d=float(np.mean([e.params.v_d for e in pool])),
        h_d=float(np.mean([e.params.h_d for e in pool])),
    )


def build_groups(entries: Sequence[MemoryEntry], pvals: PValueMatrix,
                 alpha: float = ALPHA) -> List[ScenarioGroup]:
    """Union cells that are non-significant on every parameter; empty cells
    join the nearest populated group (Hamming distance, lexicographic ties)."""
    pvals = PValueMatrix(values=pvals.values, alpha=alpha)
    by_cell: Dict[int, List[MemoryEntry]] = {}
    for e in entries:
        by_cell.setdefault(CELL_INDEX[e.features], []).append(e)
    populated = sorted(by_cell)
    if not populated:
        raise ReferenceMemoryError("no entries to group")

    parent = list(range(8))

    def find(k):
        while parent[k] != k:
            parent[k] = parent[parent[k]]
            k = parent[k]
        return k

    def union(i, j):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    for ai in range(len(populated)):
        for bi in range(ai + 1, len(populated)):
            i, j = populated[ai], populated[bi]
            if pvals.mergeable(i, j):
                union(i, j)

    roots: Dict[int, List[int]] = {}
    for c in populated:
        roots.setdefault(find(c), []).append(c)

    # attach empty cells to the nearest populated group
    cluster_of = {c: find(c) for c in populated}
    for c in range(8):
        if c in by_cell:
            continue
        best = None
        for p in populated:
            d = sum(x != y for x, y in zip(CELLS[c], CELLS[p]))
            key = (d, cluster_of[p], p)
            if best is None or key < best:
                best = key
        roots[best[1]].append(c)

    groups = []
    for root in sorted(roots):
        cells = sorted(roots[root])
        mean = _mean_params([by_cell.get(c, []) for c in cells if c in by_cell])
        groups.append(ScenarioGroup(
            member_cells=tuple(CELLS[c] for c in cells), mean_params=mean,
        ))
    _check_partition(groups)
    return groups


def _check_partition(groups: Sequence[ScenarioGroup]) -> None:
    seen = [c for g in groups for c in g.member_cells]
    if sorted(seen) != sorted(CELLS):
        raise ReferenceMemoryError("groups do not partition the 8-cell feature cube")


def lookup(groups: Sequence[ScenarioGroup], features) -> DrivingParams:
    """Group mean for the scenario's feature triple (total by partition)."""
    if isinstance(features, dict):
        features = (int(features["rain"]), int(features["night"]), int(features["intersection"]))
    features = tuple(int(bool(f)) for f in features)
    for g in groups:
        if features in g.member_cells:
            return g.mean_params
    raise ReferenceMemoryError(f"feature cell {features} not covered by memory")


def _p(n, r, qh, vd, hd):
    return DrivingParams(N=n, Q=1.0, R=r, Q_h=qh, v_d=vd, h_d=hd)


# Aggregated fixture memory over (rain, night, intersection) cells.
BUILTIN_GROUPS: Tuple[ScenarioGroup, ...] = (
    ScenarioGroup(
        member_cells=((0, 0, 0), (0, 0, 1), (1, 0, 1), (1, 1, 0)),
        mean_params=_p(9, 1.68, 2.75, 6.44, 2.60),
    ),
    ScenarioGroup(
        member_cells=((0, 1, 0), (1, 1, 1)),
        mean_params=_p(9, 1.68, 1.99, 5.09, 2.55),
    ),
    ScenarioGroup(
        member_cells=((0, 1, 1), (1, 0, 0)),
        mean_params=_p(9, 1.15, 1.99, 5.09, 2.55),
    ),
)


def save_memory(groups: Sequence[ScenarioGroup], path) -> None:
    doc = {
        "groups": [
            {"features": [list(c) for c in g.member_cells],
             "params": g.mean_params.as_list()}
            for g in groups
        ]
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_memory(path) -> List[ScenarioGroup]:
    with open(path, "r") as fh:
        doc = json.load(fh)
    groups = []
    for g in doc["groups"]:
        cells = tuple(tuple(int(v) for v in c) for c in g["features"])
        groups.append(ScenarioGroup(
            member_cells=cells, mean_params=DrivingParams.from_sequence(g["params"]),
        ))
    _check_partition(groups)
    return groups


@dataclass(frozen=True)
class CalibrationGrid:
    N: tuple = tuple(range(5, 16))
    R: tuple = tuple(np.round(np.arange(0.5, 3.0 + 1e-9, 0.25), 10))
    Q_h: tuple = tuple(np.round(np.arange(0.5, 4.0 + 1e-9, 0.25), 10))
    v_d: tuple = tuple(np.round(np.arange(2.0, 12.0 + 1e-9, 0.25), 10))
    h_d: tuple = tuple(np.round(np.arange(1.0, 4.0 + 1e-9, 0.1), 10))

    def validate(self) -> None:
        for name in ("N", "R", "Q_h", "v_d", "h_d"):
            if len(getattr(self, name)) == 0:
                raise CalibrationError(f"empty calibration grid for {name}")


def _default_simulate(scenario, params):
    from .simulator import run_static  # deferred: simulator imports planner/memory
    return run_static(scenario, params)


def calibrate_scene(
    scenario,
    reference_trajectory,
    grids: Optional[CalibrationGrid] = None,
    simulate: Optional[Callable] = None,
    max_sweeps: int = 8,
    refine_rounds: int = 2,
) -> DrivingParams:
    """Fit driving parameters to a recorded ego trajectory.

    Coordinate-wise grid sweeps to a fixpoint minimizing position RMSE of the
    closed-loop simulation against the reference, then coordinate descent at
    half the grid step for the continuous parameters.  Q stays pinned at 1.
    """
    grids = grids or CalibrationGrid()
    grids.validate()
    simulate = simulate or _default_simulate

    t_ref = np.asarray(reference_trajectory["t"], dtype=float)
    x_ref = np.asarray(reference_trajectory["x"], dtype=float)
    if len(t_ref) < 2:
        raise CalibrationError("reference trajectory needs at least 2 samples")
    if t_ref[-1] < scenario.duration - 0.1 - 1e-9:
        raise CalibrationError("reference trajectory does not span the scenario duration")

    cache: Dict[tuple, float] = {}

    def rmse(theta: dict) -> float:
        key = (theta["N"], round(theta["R"], 9), round(theta["Q_h"], 9),
               round(theta["v_d"], 9), round(theta["h_d"], 9))
        if key in cache:
            return cache[key]
        params = DrivingParams(N=int(theta["N"]), Q=1.0, R=float(theta["R"]),
                               Q_h=float(theta["Q_h"]), v_d=float(theta["v_d"]),
                               h_d=float(theta["h_d"]))
        try:
            t_sim, x_sim, _v = simulate(scenario, params)
            ref_at = np.interp(t_sim, t_ref, x_ref)
            err = float(np.sqrt(np.mean((np.asarray(x_sim) - ref_at) ** 2)))
        except Exception:
            err = float("inf")
        if not np.isfinite(err):
            err = float("inf")
        cache[key] = err
        return err

    theta = {
        "N": grids.N[len(grids.N) // 2],
        "R": grids.R[len(grids.R) // 2],
        "Q_h": grids.Q_h[len(grids.Q_h) // 2],
        "v_d": grids.v_d[len(grids.v_d) // 2],
        "h_d": grids.h_d[len(grids.h_d) // 2],
    }
    best = rmse(theta)

    sweep_order = ("v_d", "h_d", "N", "R", "Q_h")
    for _ in range(max_sweeps):
        changed = False
        for name in sweep_order:
            for value in getattr(grids, name):
                cand = dict(theta)
                cand[name] = value
                err = rmse(cand)
                if err < best - 1e-15:
                    best = err
                    theta = cand
                    changed = True
        if best == float("inf"):
            raise CalibrationError("every calibration candidate diverged")
        if not changed or best < 1e-15:
            break

    for _ in range(refine_rounds):
        if best < 1e-15:
            break
        for name in ("R", "Q_h", "v_d", "h_d"):
            grid = getattr(grids, name)
            if len(grid) < 2:
                continue
            half = float(np.min(np.diff(np.asarray(grid, dtype=float)))) / 2.0
            for value in (theta[name] - half, theta[name] + half):
                if value < min(grid) or value > max(grid):
                    continue
                cand = dict(theta)
                cand[name] = value
                err = rmse(cand)
                if err < best - 1e-15:
                    best = err
                    theta = cand

    return DrivingParams(N=int(theta["N"]), Q=1.0, R=float(theta["R"]),
                         Q_h=float(theta["Q_h"]), v_d=float(theta["v_d"]),
                         h_d=float(theta["h_d"]))
