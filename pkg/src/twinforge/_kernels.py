"""JIT-compiled inner loops for kinematics and geometry.

Everything here works on plain float64 arrays so the environment step can
run without Python-level per-joint overhead. Public wrappers live in
``kinematics`` and ``world``.
"""
import math

import numpy as np
from numba import njit

N_JOINTS = 5


@njit(cache=True)
def fk_frames(axes, trans, q):
    rots = np.empty((N_JOINTS, 3, 3))
    origins = np.empty((N_JOINTS, 3))
    R = np.eye(3)
    p = np.zeros(3)
    Ri = np.empty((3, 3))
    for i in range(N_JOINTS):
        x, y, z = axes[i, 0], axes[i, 1], axes[i, 2]
        s = math.sin(q[i])
        c = math.cos(q[i])
        v = 1.0 - c
        # Rodrigues rotation about a unit axis
        Ri[0, 0] = c + x * x * v
        Ri[0, 1] = x * y * v - z * s
        Ri[0, 2] = x * z * v + y * s
        Ri[1, 0] = y * x * v + z * s
        Ri[1, 1] = c + y * y * v
        Ri[1, 2] = y * z * v - x * s
        Ri[2, 0] = z * x * v - y * s
        Ri[2, 1] = z * y * v + x * s
        Ri[2, 2] = c + z * z * v
        origins[i, 0] = p[0]
        origins[i, 1] = p[1]
        origins[i, 2] = p[2]
        Rn = np.empty((3, 3))
        for r in range(3):
            for k in range(3):
                Rn[r, k] = R[r, 0] * Ri[0, k] + R[r, 1] * Ri[1, k] + R[r, 2] * Ri[2, k]
        R = Rn
        rots[i] = R
        for r in range(3):
            p[r] += R[r, 0] * trans[i, 0] + R[r, 1] * trans[i, 1] + R[r, 2] * trans[i, 2]
    return rots, origins, p


@njit(cache=True)
def position_jacobian(axes, trans, q):
    rots, origins, p = fk_frames(axes, trans, q)
    J = np.empty((3, N_JOINTS))
    for j in range(N_JOINTS):
        wx = rots[j, 0, 0] * axes[j, 0] + rots[j, 0, 1] * axes[j, 1] + rots[j, 0, 2] * axes[j, 2]
        wy = rots[j, 1, 0] * axes[j, 0] + rots[j, 1, 1] * axes[j, 1] + rots[j, 1, 2] * axes[j, 2]
        wz = rots[j, 2, 0] * axes[j, 0] + rots[j, 2, 1] * axes[j, 1] + rots[j, 2, 2] * axes[j, 2]
        rx = p[0] - origins[j, 0]
        ry = p[1] - origins[j, 1]
        rz = p[2] - origins[j, 2]
        J[0, j] = wy * rz - wz * ry
        J[1, j] = wz * rx - wx * rz
        J[2, j] = wx * ry - wy * rx
    return p, J


@njit(cache=True)
def _solve3(A, b):
    # Cramer's rule; A is symmetric positive definite here (J J^T + lambda^2 I)
    a, bb, c = A[0, 0], A[0, 1], A[0, 2]
    d, e, f = A[1, 0], A[1, 1], A[1, 2]
    g, h, k = A[2, 0], A[2, 1], A[2, 2]
    co0 = e * k - f * h
    co1 = f * g - d * k
    co2 = d * h - e * g
    det = a * co0 + bb * co1 + c * co2
    x = np.empty(3)
    x[0] = (b[0] * co0 + bb * (f * b[2] - b[1] * k) + c * (b[1] * h - e * b[2])) / det
    x[1] = (a * (b[1] * k - f * b[2]) + b[0] * co1 + c * (d * b[2] - b[1] * g)) / det
    x[2] = (a * (e * b[2] - b[1] * h) + bb * (b[1] * g - d * b[2]) + b[0] * co2) / det
    return x


@njit(cache=True)
def ik_dls(axes, trans, lower, upper, target, seed, tol, max_iter, damping):
    """Returns (q, residual). Stops early after 5 non-improving iterations."""
    q = np.minimum(np.maximum(seed.copy(), lower), upper)
    lam2 = damping * damping
    best = np.inf
    stalled = 0
    A = np.empty((3, 3))
    e = np.empty(3)
    for _ in range(max_iter + 1):
        p, J = position_jacobian(axes, trans, q)
        for r in range(3):
            e[r] = target[r] - p[r]
        err = math.sqrt(e[0] * e[0] + e[1] * e[1] + e[2] * e[2])
        if err <= tol:
            return q, err
        if err < best * (1.0 - 1e-6):
            best = err
            stalled = 0
        else:
            stalled += 1
            if stalled >= 5:
                break
        for r in range(3):
            for c in range(3):
                A[r, c] = J[r, 0] * J[c, 0] + J[r, 1] * J[c, 1] + J[r, 2] * J[c, 2] + J[r, 3] * J[c, 3] + J[r, 4] * J[c, 4]
            A[r, r] += lam2
        y = _solve3(A, e)
        for j in range(N_JOINTS):
            qj = q[j] + J[0, j] * y[0] + J[1, j] * y[1] + J[2, j] * y[2]
            q[j] = min(max(qj, lower[j]), upper[j])
    p = fk_frames(axes, trans, q)[2]
    err = math.sqrt((target[0] - p[0]) ** 2 + (target[1] - p[1]) ** 2 + (target[2] - p[2]) ** 2)
    return q, err


@njit(cache=True)
def _lex_less(ax, ay, az, bx, by, bz):
    if ax != bx:
        return ax < bx
    if ay != by:
        return ay < by
    return az < bz


@njit(cache=True)
def segment_box(a, b, lo, hi):
    """Closest pair between segment [a, b] and box [lo, hi].

    Returns (signed_gap, seg_point(3), box_point(3)). ``signed_gap`` is the
    Euclidean gap when disjoint, else minus the depth of the deepest
    segment point (distance to its nearest face).
    """
    d = b - a
    ts = np.empty(8)
    ts[0] = 0.0
    ts[1] = 1.0
    n = 2
    for i in range(3):
        if d[i] != 0.0:
            for bound in (lo[i], hi[i]):
                t = (bound - a[i]) / d[i]
                if 0.0 < t < 1.0:
                    ts[n] = t
                    n += 1
    ts = np.sort(ts[:n])

    best_f = np.inf
    best_p = np.empty(3)
    cand = np.empty(3)
    for s in range(n - 1):
        t0 = ts[s]
        t1 = ts[s + 1]
        if t1 <= t0:
            continue
        tm = 0.5 * (t0 + t1)
        qa = 0.0
        qb = 0.0
        for i in range(3):
            pm = a[i] + tm * d[i]
            if pm < lo[i]:
                c0 = a[i] - lo[i]
            elif pm > hi[i]:
                c0 = a[i] - hi[i]
            else:
                continue
            qa += d[i] * d[i]
            qb += 2.0 * c0 * d[i]
        if qa > 0.0:
            tstar = min(max(-qb / (2.0 * qa), t0), t1)
            tlist = (tstar, tstar)
        else:
            tlist = (t0, t1)
        for t in tlist:
            f = 0.0
            for i in range(3):
                cand[i] = a[i] + t * d[i]
                cl = min(max(cand[i], lo[i]), hi[i])
                f += (cand[i] - cl) ** 2
            if f < best_f - 1e-18 or (
                abs(f - best_f) <= 1e-18 and _lex_less(cand[0], cand[1], cand[2], best_p[0], best_p[1], best_p[2])
            ):
                best_f = f
                best_p[:] = cand

    # gaps below 1e-10 m are contact; rounding at an entry point must not mask penetration
    if best_f > 1e-20:
        bp = np.empty(3)
        for i in range(3):
            bp[i] = min(max(best_p[i], lo[i]), hi[i])
        return math.sqrt(best_f), best_p, bp

    # penetrating: maximise depth(t) = min over the six face margins (concave, piecewise linear)
    slope = np.empty(6)
    icpt = np.empty(6)
    for i in range(3):
        icpt[2 * i] = a[i] - lo[i]
        slope[2 * i] = d[i]
        icpt[2 * i + 1] = hi[i] - a[i]
        slope[2 * i + 1] = -d[i]
    cands = np.empty(17)
    cands[0] = 0.0
    cands[1] = 1.0
    m = 2
    for k in range(6):
        for l in range(k + 1, 6):
            ds = slope[k] - slope[l]
            if ds != 0.0:
                t = (icpt[l] - icpt[k]) / ds
                if 0.0 < t < 1.0:
                    cands[m] = t
                    m += 1
    best_depth = -np.inf
    best_face = 0
    for c in range(m):
        t = cands[c]
        depth = np.inf
        face = 0
        for k in range(6):
            v = icpt[k] + slope[k] * t
            if v < depth:
                depth = v
                face = k
        for i in range(3):
            cand[i] = a[i] + t * d[i]
        if depth > best_depth + 1e-15 or (
            abs(depth - best_depth) <= 1e-15 and _lex_less(cand[0], cand[1], cand[2], best_p[0], best_p[1], best_p[2])
        ):
            best_depth = depth
            best_face = face
            best_p[:] = cand
    bp = best_p.copy()
    axis = best_face // 2
    bp[axis] = lo[axis] if best_face % 2 == 0 else hi[axis]
    return -best_depth, best_p, bp


@njit(cache=True)
def capsule_box(a, b, radius, lo, hi):
    """(distance, pos_A, pos_B) with the capsule radius subtracted."""
    g, sp, bp = segment_box(a, b, lo, hi)
    if g > 0.0:
        pa = np.empty(3)
        for i in range(3):
            pa[i] = sp[i] + radius * (bp[i] - sp[i]) / g
        return g - radius, pa, bp
    return g - radius, sp, bp


@njit(cache=True)
def arm_capsules_world(axes, trans, q, cap_joint, cap_p0, cap_p1):
    rots, origins, _ = fk_frames(axes, trans, q)
    nc = cap_joint.shape[0]
    w0 = np.empty((nc, 3))
    w1 = np.empty((nc, 3))
    for c in range(nc):
        j = cap_joint[c]
        for r in range(3):
            w0[c, r] = origins[j, r] + rots[j, r, 0] * cap_p0[c, 0] + rots[j, r, 1] * cap_p0[c, 1] + rots[j, r, 2] * cap_p0[c, 2]
            w1[c, r] = origins[j, r] + rots[j, r, 0] * cap_p1[c, 0] + rots[j, r, 1] * cap_p1[c, 1] + rots[j, r, 2] * cap_p1[c, 2]
    return w0, w1


@njit(cache=True)
def closest_over_pairs(w0, w1, radii, box_lo, box_hi):
    """Minimum over capsules x boxes; ties keep the earlier (capsule, box) pair."""
    best = np.inf
    best_a = np.zeros(3)
    best_b = np.zeros(3)
    best_c = -1
    best_o = -1
    for c in range(w0.shape[0]):
        for o in range(box_lo.shape[0]):
            dist, pa, pb = capsule_box(w0[c], w1[c], radii[c], box_lo[o], box_hi[o])
            if dist < best:
                best = dist
                best_a = pa
                best_b = pb
                best_c = c
                best_o = o
    return best, best_a, best_b, best_c, best_o
