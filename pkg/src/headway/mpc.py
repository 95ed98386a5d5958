"""Receding-horizon longitudinal controller.

Each call condenses the lag-linear prediction model into a dense strictly
convex QP over the desired-acceleration sequence plus four family slacks
(speed lower/upper, input lower/upper), solves it with the in-repo active-set
kernel, and returns the first control.  Costs follow the constant-time-headway
car-following objective: squared speed error to the desired speed, squared
control effort, squared spacing error to h_d * v + d_0 when a leader or stop
line is present, and a large quadratic slack penalty.
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from . import accel
from .dynamics import PlantParams, zoh_matrices

N_SLACK = 4  # speed-lower, speed-upper, input-lower, input-upper

N_MIN, N_MAX = 1, 30
V_D_MIN, V_D_MAX = 0.0, 30.0
H_D_MIN, H_D_MAX = 0.5, 5.0


class InvalidDrivingParams(ValueError):
    """Upper-layer parameter vector violates its admissible ranges."""


@dataclass(frozen=True)
class DrivingParams:
    """The six upper-layer outputs [N, Q, R, Q_h, v_d, h_d].

    N: prediction horizon (steps), Q: speed weight (fixed at 1),
    R: control-effort weight, Q_h: headway weight, v_d: desired speed (m/s),
    h_d: desired time headway (s).
    """

    N: int
    Q: float
    R: float
    Q_h: float
    v_d: float
    h_d: float

    def validate(self) -> None:
        if not isinstance(self.N, (int, np.integer)) or not (N_MIN <= self.N <= N_MAX):
            raise InvalidDrivingParams(f"N must be an integer in [{N_MIN}, {N_MAX}], got {self.N!r}")
        if abs(self.Q - 1.0) > 1e-9:
            raise InvalidDrivingParams(f"Q is fixed at 1, got {self.Q!r}")
        if not (self.R > 0):
            raise InvalidDrivingParams(f"R must be > 0, got {self.R!r}")
        if not (self.Q_h >= 0):
            raise InvalidDrivingParams(f"Q_h must be >= 0, got {self.Q_h!r}")
        if not (V_D_MIN <= self.v_d <= V_D_MAX):
            raise InvalidDrivingParams(f"v_d must be in [{V_D_MIN}, {V_D_MAX}], got {self.v_d!r}")
        if not (H_D_MIN <= self.h_d <= H_D_MAX):
            raise InvalidDrivingParams(f"h_d must be in [{H_D_MIN}, {H_D_MAX}], got {self.h_d!r}")

    def as_list(self) -> list:
        return [int(self.N), self.Q, self.R, self.Q_h, self.v_d, self.h_d]

    @classmethod
    def from_sequence(cls, seq) -> "DrivingParams":
        if len(seq) != 6:
            raise InvalidDrivingParams(f"expected 6 parameters, got {len(seq)}")
        n, q, r, qh, vd, hd = (float(s) for s in seq)
        params = cls(N=int(round(n)), Q=q, R=r, Q_h=qh, v_d=vd, h_d=hd)
        params.validate()
        # pin Q exactly once validated within tolerance
        return cls(N=params.N, Q=1.0, R=r, Q_h=qh, v_d=vd, h_d=hd)


@dataclass(frozen=True)
class SpacingPolicy:
    """Constant time headway spacing: desired gap = h_d * v + d_0."""

    h_d: float
    d_0: float = 2.0

    def desired_gap(self, v: float) -> float:
        return self.h_d * v + self.d_0

    @classmethod
    def from_params(cls, params: DrivingParams, d_0: float = 2.0) -> "SpacingPolicy":
        return cls(h_d=params.h_d, d_0=d_0)


@dataclass(frozen=True)
class MpcConfig:
    """Lower-layer step, actuator/speed envelope and slack scaling."""

    dt_l: float = 0.1
    v_min: float = 0.0
    v_max: float = 15.0
    u_min: float = -3.5
    u_max: float = 3.0
    rho: float = 1e4
    sigma_min_y: float = 1.0
    sigma_max_y: float = 1.0
    sigma_min_u: float = 1.0
    sigma_max_u: float = 1.0

    def validate(self) -> None:
        if not (self.dt_l > 0):
            raise ValueError("dt_l must be > 0")
        if self.v_min > self.v_max:
            raise ValueError("v_min must be <= v_max")
        if not (self.u_min < 0 < self.u_max):
            raise ValueError("u bounds must straddle 0")
        if not (self.rho > 0):
            raise ValueError("rho must be > 0")
        for name in ("sigma_min_y", "sigma_max_y", "sigma_min_u", "sigma_max_u"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True)
class LeaderReference:
    """Effective front constraint: nearest of leader rear bumper and stop line.

    x_ref is expressed in ego-origin coordinates (a gap, m); v_ref is the
    constraint's speed (0 for a stop line) used for constant-velocity
    extrapolation over the horizon.
    """

    kind: str  # vehicle | stop_line | both | none
    x_ref: float = 0.0
    v_ref: float = 0.0
    l_lead: float = 4.5

    @property
    def exists(self) -> bool:
        return self.kind != "none"


@dataclass
class QpProblem:
    """Dense condensed QP: min 0.5 z'Hz + f'z + const  s.t.  Gz <= h.

    Decision vector z = [u_0 .. u_{N-1}, eps_1 .. eps_4].  Row order: N speed
    lower, N speed upper, N input lower, N input upper, 4 slack nonnegativity.
    """

    H: np.ndarray
    f: np.ndarray
    G: np.ndarray
    h: np.ndarray
    const: float
    n_controls: int
    n_slack: int
    sigmas: np.ndarray
    feasible: bool  # a feasible start exists given the slack scaling


@dataclass
class MpcSolution:
    u_seq: np.ndarray
    predicted_states: np.ndarray  # (N, 3) rows of (x, v, a)
    cost: float
    slack: np.ndarray
    status: str  # optimal | max_iter | infeasible_relaxed
    kkt_residual: float
    iterations: int


@lru_cache(maxsize=64)
def prediction_matrices(tau: float, dt: float, N: int):
    """Condensing matrices for the ZOH model over an N-step horizon.

    Returns (P, Gm) with P[k] = Ad^(k+1) (3x3) and Gm[k, :, j] the gain of u_j
    on the state at step k+1 (zero for j > k).  Read-only arrays, cached.
    """
    Ad, Bd = zoh_matrices(tau, dt)
    P = np.zeros((N, 3, 3))
    Gm = np.zeros((N, 3, N))
    imp = np.zeros((N, 3))  # imp[d] = Ad^d @ Bd
    imp[0] = Bd
    for d in range(1, N):
        imp[d] = Ad @ imp[d - 1]
    acc = np.eye(3)
    for k in range(N):
        acc = Ad @ acc
        P[k] = acc
        for j in range(k + 1):
            Gm[k, :, j] = imp[k - j]
    P.setflags(write=False)
    Gm.setflags(write=False)
    return P, Gm


def resolve_leader(scene, leader_length: float = 4.5) -> LeaderReference:
    """Pick the effective front constraint from preceding vehicle and stop line.

    Ego-origin convention: when both exist the reference is the nearer of the
    leader's rear bumper (gap - leader_length) and the stop line.
    """
    lead = scene.leader
    stop = scene.stop_line_gap
    if lead is not None and stop is not None:
        rear = lead.gap - leader_length
        if rear < stop:
            return LeaderReference(kind="both", x_ref=rear, v_ref=lead.v, l_lead=leader_length)
        return LeaderReference(kind="both", x_ref=stop, v_ref=0.0, l_lead=leader_length)
    if lead is not None:
        return LeaderReference(
            kind="vehicle", x_ref=lead.gap - leader_length, v_ref=lead.v, l_lead=leader_length
        )
    if stop is not None:
        return LeaderReference(kind="stop_line", x_ref=stop, v_ref=0.0, l_lead=leader_length)
    return LeaderReference(kind="none")


@lru_cache(maxsize=64)
def _qp_structure(params: DrivingParams, cfg: MpcConfig, policy: SpacingPolicy, tau: float, has_leader: bool):
    """State-independent parts of the condensed QP (H, G and gain matrices)."""
    N = params.N
    dt = cfg.dt_l
    P, Gm = prediction_matrices(tau, dt, N)
    Gx = np.ascontiguousarray(Gm[:, 0, :])
    Gv = np.ascontiguousarray(Gm[:, 1, :])
    Px = np.ascontiguousarray(P[:, 0, :])
    Pv = np.ascontiguousarray(P[:, 1, :])

    n = N + N_SLACK
    Hu = 2.0 * (params.Q * (Gv.T @ Gv) + params.R * np.eye(N))
    Ge = None
    if has_leader and params.Q_h > 0:
        Ge = Gx + params.h_d * Gv
        Hu = Hu + 2.0 * params.Q_h * (Ge.T @ Ge)
    elif has_leader:
        Ge = Gx + params.h_d * Gv  # zero weight still defines the error term
    H = np.zeros((n, n))
    H[:N, :N] = Hu
    for i in range(N_SLACK):
        H[N + i, N + i] = 2.0 * cfg.rho

    sigmas = np.array([cfg.sigma_min_y, cfg.sigma_max_y, cfg.sigma_min_u, cfg.sigma_max_u])
    n_rows = 4 * N + N_SLACK
    G = np.zeros((n_rows, n))
    # speed lower: -v_k - sigma1*eps1 <= -v_min
    G[0:N, :N] = -Gv
    G[0:N, N + 0] = -sigmas[0]
    # speed upper: v_k - sigma2*eps2 <= v_max
    G[N : 2 * N, :N] = Gv
    G[N : 2 * N, N + 1] = -sigmas[1]
    # input lower: -u_k - sigma3*eps3 <= -u_min
    G[2 * N : 3 * N, :N] = -np.eye(N)
    G[2 * N : 3 * N, N + 2] = -sigmas[2]
    # input upper: u_k - sigma4*eps4 <= u_max
    G[3 * N : 4 * N, :N] = np.eye(N)
    G[3 * N : 4 * N, N + 3] = -sigmas[3]
    # slack nonnegativity
    for i in range(N_SLACK):
        G[4 * N + i, N + i] = -1.0
    for arr in (H, G, Gx, Gv, Px, Pv):
        arr.setflags(write=False)
    if Ge is not None:
        Ge.setflags(write=False)
    return H, G, Gx, Gv, Px, Pv, Ge, sigmas


def build_qp(
    params: DrivingParams,
    scene,
    leader: LeaderReference,
    cfg: MpcConfig,
    policy: SpacingPolicy,
    tau_A: float = 0.4,
) -> QpProblem:
    """Condense model, costs and soft constraints into a dense QP.

    Rejects parameter vectors that violate the admissible ranges so the caller
    can fall back to memory parameters.
    """
    params.validate()
    cfg.validate()
    N = params.N
    dt = cfg.dt_l
    has_leader = leader.exists
    H, G, Gx, Gv, Px, Pv, Ge, sigmas = _qp_structure(params, cfg, policy, tau_A, has_leader)

    ego = scene.ego_history[-1]
    s0 = np.array([0.0, ego.v, ego.a])  # ego-origin
    xfree = Px @ s0
    vfree = Pv @ s0

    dv_free = vfree - params.v_d
    f_u = 2.0 * params.Q * (Gv.T @ dv_free)
    const = params.Q * float(dv_free @ dv_free)
    if has_leader:
        steps = np.arange(1, N + 1, dtype=float)
        ref_pos = leader.x_ref + leader.v_ref * dt * steps
        c = ref_pos - xfree - params.h_d * vfree - policy.d_0
        if params.Q_h > 0:
            f_u = f_u - 2.0 * params.Q_h * (Ge.T @ c)
            const += params.Q_h * float(c @ c)
    f = np.concatenate([f_u, np.zeros(N_SLACK)])

    h = np.concatenate(
        [
            vfree - cfg.v_min,
            cfg.v_max - vfree,
            np.full(N, -cfg.u_min),
            np.full(N, cfg.u_max),
            np.zeros(N_SLACK),
        ]
    )

    feasible = True
    if sigmas[0] == 0.0 and np.any(vfree < cfg.v_min - 1e-12):
        feasible = False
    if sigmas[1] == 0.0 and np.any(vfree > cfg.v_max + 1e-12):
        feasible = False

    return QpProblem(
        H=H, f=f, G=G, h=h, const=const,
        n_controls=N, n_slack=N_SLACK, sigmas=sigmas, feasible=feasible,
    )


def _feasible_start(qp: QpProblem):
    """Strictly feasible start: u = 0, slacks sized to cover any violation."""
    N = qp.n_controls
    z0 = np.zeros(N + N_SLACK)
    active0 = np.zeros(qp.G.shape[0], dtype=np.bool_)
    # at u = 0, speed rows read  -sigma*eps <= h  per family
    for fam in range(N_SLACK):
        rows = slice(fam * N, (fam + 1) * N)
        worst = float(np.min(qp.h[rows]))
        if worst < 0.0:
            z0[N + fam] = -worst / qp.sigmas[fam] + 1.0
        else:
            active0[4 * N + fam] = True  # keep unused slack pinned at zero
    return z0, active0


def solve_qp(qp: QpProblem, max_iter: Optional[int] = None, tol: float = 1e-9):
    """Solve the condensed QP; returns (z, lam, cost, status, kkt_residual, iters)."""
    N = qp.n_controls
    if not qp.feasible:
        z = np.zeros(N + N_SLACK)
        return z, np.zeros(qp.G.shape[0]), np.inf, "infeasible_relaxed", np.inf, 0
    if max_iter is None:
        max_iter = 8 * qp.G.shape[0] + 20
    z0, active0 = _feasible_start(qp)
    z, lam, iters, code = accel.active_set_qp(qp.H, qp.f, qp.G, qp.h, z0, active0, max_iter, tol)
    cost = 0.5 * float(z @ (qp.H @ z)) + float(qp.f @ z) + qp.const
    resid = qp.H @ z + qp.f + qp.G.T @ lam
    kkt = float(np.max(np.abs(resid))) / max(1.0, float(np.max(np.abs(qp.f))))
    status = "optimal" if code == 0 else "max_iter"
    return z, lam, cost, status, kkt, iters


def mpc_step(
    params: DrivingParams,
    scene,
    cfg: MpcConfig,
    policy: SpacingPolicy,
    plant: PlantParams = PlantParams(),
):
    """One receding-horizon step: resolve leader, build QP, solve, first control."""
    leader = resolve_leader(scene, leader_length=plant.length)
    qp = build_qp(params, scene, leader, cfg, policy, tau_A=plant.tau_A)
    z, lam, cost, status, kkt, iters = solve_qp(qp)
    N = params.N
    u_seq = z[:N].copy()
    slack = z[N:].copy()

    ego = scene.ego_history[-1]
    P, Gm = prediction_matrices(plant.tau_A, cfg.dt_l, N)
    s0 = np.array([0.0, ego.v, ego.a])
    states = P @ s0 + Gm @ u_seq
    states[:, 0] += ego.x  # back to absolute positions

    sol = MpcSolution(
        u_seq=u_seq,
        predicted_states=states,
        cost=cost,
        slack=slack,
        status=status,
        kkt_residual=kkt,
        iterations=iters,
    )
    return float(u_seq[0]), sol
