"""Hot numeric kernels, written in plain numpy so they run with or without numba.

Importing from this module always gives the pure-numpy implementation;
``headway.accel`` re-exports the same functions wrapped with ``numba.njit``
unless the HEADWAY_NO_NUMBA environment flag (or a missing numba) selects the
fallback.  Keep everything here nopython-compatible: no python objects, no
keyword-only numpy calls that numba lacks.
"""

import numpy as np


def rk4_plant(x, v, a, u, m, kd, dm, tau, dt, nsub):
    """Integrate the engine-lag longitudinal model one step of ``dt``.

    The engine input is recomputed from the feedback-linearizing control law at
    every derivative evaluation, so the aerodynamic and mechanical drag terms
    cancel analytically and the acceleration dynamics collapse to a first-order
    lag toward ``u``.  Speed is floored at zero: the vehicle never reverses,
    and both v and a are zeroed at the clamp instant.

    Returns the updated ``(x, v, a)`` triple.
    """
    h = dt / nsub
    inv_m = 1.0 / m
    inv_tau = 1.0 / tau

    def deriv(vv, aa):
        eta = m * u + kd * vv * vv + dm + 2.0 * tau * kd * vv * aa
        f_va = -2.0 * kd * inv_m * vv * aa - (aa + kd * inv_m * vv * vv + dm * inv_m) * inv_tau
        return f_va + eta * inv_m * inv_tau

    for _ in range(nsub):
        k1x = v
        k1v = a
        k1a = deriv(v, a)

        v2 = v + 0.5 * h * k1v
        a2 = a + 0.5 * h * k1a
        k2x = v2
        k2v = a2
        k2a = deriv(v2, a2)

        v3 = v + 0.5 * h * k2v
        a3 = a + 0.5 * h * k2a
        k3x = v3
        k3v = a3
        k3a = deriv(v3, a3)

        v4 = v + h * k3v
        a4 = a + h * k3a
        k4x = v4
        k4v = a4
        k4a = deriv(v4, a4)

        x_new = x + h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
        v_new = v + h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
        a_new = a + h / 6.0 * (k1a + 2.0 * k2a + 2.0 * k3a + k4a)

        if v_new < 0.0:
            # stop within the substep: advance x to the (linear-in-v) rest point
            if v > 0.0:
                frac = v / (v - v_new)
                x = x + 0.5 * v * frac * h
            v = 0.0
            a = 0.0
        else:
            x = x_new
            v = v_new
            a = a_new
    return x, v, a


def active_set_qp(H, f, G, h, z0, active0, max_iter, tol):
    """Primal active-set solver for min 0.5 z'Hz + f'z  s.t.  Gz <= h.

    H must be symmetric positive definite and z0 feasible; the iterate stays
    feasible throughout.  Working-set steps use the null-space method with an
    SVD rank cut, so degenerate working sets (square or rank-deficient) give an
    exact p = 0 and clean least-squares multipliers instead of noise.  Ties
    (blocking rows) are broken by lowest row index, which makes the solve
    deterministic.

    Returns ``(z, lam, iterations, status)`` with status 0 = optimal and
    1 = iteration limit (best feasible iterate).
    """
    n_rows = G.shape[0]
    n = H.shape[0]
    z = z0.copy()
    active = active0.copy()
    lam = np.zeros(n_rows)
    status = 1
    it = 0
    while it < max_iter:
        it += 1
        g = H @ z + f
        act_idx = np.where(active)[0]
        na = act_idx.shape[0]
        if na == 0:
            p = -np.linalg.solve(H, g)
            lam_act = np.zeros(0)
        else:
            Ga = np.ascontiguousarray(G[act_idx])
            U, s, Vt = np.linalg.svd(Ga)
            r = 0
            for i in range(s.shape[0]):
                if s[i] > 1e-12 * max(1.0, s[0]):
                    r += 1
            if r < n:
                Z = np.ascontiguousarray(Vt[r:].T)  # null-space basis of Ga
                red = Z.T @ (H @ Z)
                pz = np.linalg.solve(red, -(Z.T @ g))
                p = Z @ pz
            else:
                p = np.zeros(n)
            # least-squares multipliers for Ga' lam = -(g + H p)
            w = g + H @ p
            c = np.ascontiguousarray(Vt[:r]) @ w
            lam_act = -(np.ascontiguousarray(U[:, :r]) @ (c / s[:r]))
        scale = 1.0 + np.max(np.abs(z))
        if np.max(np.abs(p)) <= tol * scale:
            if na > 0:
                jmin = int(np.argmin(lam_act))
                if lam_act[jmin] < -tol:
                    active[act_idx[jmin]] = False
                    continue
                for i in range(na):
                    lam[act_idx[i]] = lam_act[i]
            # close out the last Newton step unless it would leave the
            # feasible set; H @ p is exactly the stationarity residual
            z_try = z + p
            if np.max(G @ z_try - h) <= 1e-9 * scale:
                z = z_try
            status = 0
            break
        Gp = G @ p
        Gz = G @ z
        alpha = 1.0
        block = -1
        for i in range(n_rows):
            if (not active[i]) and Gp[i] > 1e-12:
                ai = (h[i] - Gz[i]) / Gp[i]
                if ai < alpha:
                    alpha = ai
                    block = i
        if alpha < 0.0:
            alpha = 0.0
        z = z + alpha * p
        if block >= 0:
            active[block] = True
    return z, lam, it, status


def pet_scan(t, ego_front, lead_rear, p_start, dp, n_points):
    """Minimum post-encroachment time over a grid of spatial points.

    Both position series must be non-decreasing (forward-only traffic).  For
    each grid point p the vacate time is the last instant the leader rear is at
    or behind p and the arrival time is the first instant the ego front reaches
    p, both linearly interpolated between samples.  Points the leader vacated
    before the window, or that the ego occupied from the start, do not count.

    Returns ``(min_pet, found)`` where found is 0 when no grid point yields a
    conflict.
    """
    n = t.shape[0]
    best = np.inf
    found = 0
    i = 0  # first index with lead_rear > p
    j = 0  # first index with ego_front >= p
    for k in range(n_points):
        p = p_start + k * dp
        while i < n and lead_rear[i] <= p:
            i += 1
        if i >= n:
            break  # rear never clears p; monotone, so later points are hopeless too
        if i == 0:
            continue  # vacated before the window started
        t1 = t[i - 1] + (p - lead_rear[i - 1]) / (lead_rear[i] - lead_rear[i - 1]) * (t[i] - t[i - 1])
        while j < n and ego_front[j] < p:
            j += 1
        if j >= n:
            break  # ego never gets there
        if j == 0:
            continue  # ego began at or past p
        t2 = t[j - 1] + (p - ego_front[j - 1]) / (ego_front[j] - ego_front[j - 1]) * (t[j] - t[j - 1])
        pet = t2 - t1
        if pet < best:
            best = pet
            found = 1
    return best, found
