"""Compare the jitted and pure-numpy builds of the hot kernels.

Backend selection happens once at import time in headway.accel, so a single
process cannot time both paths.  The parent re-runs this file with --worker
under HEADWAY_NO_NUMBA=0 and =1, reads one JSON line per run, and prints a
table.  Workloads are sized like a real session: a few minutes of simulated
driving, a few thousand horizon-9 solves, PET sweeps over long traces.

    python3 benchmarks/bench_kernels.py
"""

import json
import os
import subprocess
import sys
import time

import numpy as np


def bench_rk4(reps=200_000):
    from headway import accel

    # dependent sequential stepping, same shape as the closed loop
    us = 1.5 * np.sin(0.013 * np.arange(reps))
    x, v, a = 0.0, 5.0, 0.0
    accel.rk4_plant(x, v, a, 1.0, 1500.0, 0.55, 150.0, 0.4, 0.1, 10)  # warm
    t0 = time.perf_counter()
    for i in range(reps):
        x, v, a = accel.rk4_plant(x, v, a, us[i], 1500.0, 0.55, 150.0, 0.4, 0.1, 10)
    dt = time.perf_counter() - t0
    return dt, x + v + a


def bench_qp(reps=2000):
    from headway import accel
    from headway.dynamics import VehicleState
    from headway.mpc import (
        DrivingParams,
        MpcConfig,
        SpacingPolicy,
        _feasible_start,
        build_qp,
        resolve_leader,
    )
    from headway.scenario import LeaderState, SceneStatus

    params = DrivingParams(N=9, Q=1.0, R=1.68, Q_h=2.75, v_d=6.44, h_d=2.6)
    st = VehicleState(x=0.0, v=5.0, a=0.2)
    scene = SceneStatus(
        t=0.0, ego_history=(st,), leader=LeaderState(gap=18.0, v=4.0), stop_line_gap=None
    )
    qp = build_qp(params, scene, resolve_leader(scene), MpcConfig(), SpacingPolicy(h_d=2.6))
    z0, active0 = _feasible_start(qp)
    args = (qp.H, qp.f, qp.G, qp.h)
    accel.active_set_qp(*args, z0.copy(), active0.copy(), 80, 1e-10)  # warm
    t0 = time.perf_counter()
    acc = 0.0
    for _ in range(reps):
        z, lam, iters, code = accel.active_set_qp(*args, z0.copy(), active0.copy(), 80, 1e-10)
        acc += z[0]
    dt = time.perf_counter() - t0
    return dt, acc / reps


def bench_pet(reps=50):
    from headway import accel

    n = 6000
    t = 0.1 * np.arange(n)
    lead_rear = 12.0 + 4.0 * t + 0.4 * np.sin(0.05 * t)
    ego_front = 4.2 * t
    n_points = 2000
    accel.pet_scan(t, ego_front, lead_rear, 15.0, 0.1, 64)  # warm
    t0 = time.perf_counter()
    best = 0.0
    for _ in range(reps):
        best, found = accel.pet_scan(t, ego_front, lead_rear, 15.0, 0.1, n_points)
    dt = time.perf_counter() - t0
    return dt, best


def worker():
    from headway import accel

    out = {"mode": "numba" if accel.NUMBA_ENABLED else "numpy"}
    for name, fn in [("rk4_plant", bench_rk4), ("active_set_qp", bench_qp), ("pet_scan", bench_pet)]:
        secs, check = fn()
        out[name] = secs
        out[name + "_check"] = check
    print(json.dumps(out))


def spawn(no_numba):
    env = dict(os.environ, HEADWAY_NO_NUMBA="1" if no_numba else "0")
    proc = subprocess.run(
        [sys.executable, os.path.abspath(__file__), "--worker"],
        env=env, capture_output=True, text=True, check=True,
    )
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main():
    if "--worker" in sys.argv:
        worker()
        return
    fast = spawn(no_numba=False)
    slow = spawn(no_numba=True)
    if fast["mode"] != "numba":
        print("note: numba unavailable, both runs use the numpy fallback")
    print(f"{'kernel':<16}{fast['mode']:>10}{slow['mode']:>10}{'speedup':>10}")
    for name in ("rk4_plant", "active_set_qp", "pet_scan"):
        a, b = fast[name], slow[name]
        print(f"{name:<16}{a:>9.3f}s{b:>9.3f}s{b / a:>9.1f}x")
        da = abs(fast[name + "_check"] - slow[name + "_check"])
        if da > 1e-6 * max(1.0, abs(slow[name + "_check"])):
            print(f"  warning: {name} checksums differ by {da:.3e}")


if __name__ == "__main__":
    main()
