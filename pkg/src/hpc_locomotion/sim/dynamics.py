"""Planar biped rigid-body dynamics (numba kernels).

Generalised coordinates ``q = [x, z, pitch, hip_l, knee_l, hip_r, knee_r]``.
The root is the hip joint. Positive pitch tilts the torso top toward -x; a
positive hip angle swings the foot toward +x; negative knee angles fold the
shank backward. Equations of motion are assembled per substep with Kane's
method, ``M(q) qdd = Q(q, qd)``, and integrated semi-implicitly.
"""
import numpy as np
from numba import njit

NQ = 7
# body constants: torso mass, torso com height, thigh mass, thigh length, shank mass, shank length
BODY = np.array([10.0, 0.25, 3.0, 0.45, 2.0, 0.45])
TORSO_LENGTH = 0.5


@njit(cache=True)
def _terrain(heights, origin, cell, x):
    n = heights.shape[0]
    pos = (x - origin) / cell
    if pos <= 0.0:
        return heights[0], 0.0
    if pos >= n - 1:
        return heights[n - 1], 0.0
    i = int(pos)
    if i > n - 2:
        i = n - 2
    frac = pos - i
    h0 = heights[i]
    h1 = heights[i + 1]
    return h0 + (h1 - h0) * frac, (h1 - h0) / cell


@njit(cache=True)
def _kinematics(q, body, payload):
    """Returns link COM positions [5,2], COM Jacobians [5,2,7], angle selectors [5,7],
    link angles [5], masses [5], inertias [5], foot positions [2,2] and foot Jacobians [2,2,7]."""
    m_t = body[0] + payload
    ct = body[1]
    m1, l1, m2, l2 = body[2], body[3], body[4], body[5]
    th = q[2]
    pos = np.zeros((5, 2))
    jac = np.zeros((5, 2, NQ))
    sel = np.zeros((5, NQ))
    ang = np.zeros(5)
    mass = np.array([m_t, m1, m2, m1, m2])
    inertia = np.array([body[0] * 0.5 * 0.5 / 12.0, m1 * l1 * l1 / 12.0, m2 * l2 * l2 / 12.0,
                        m1 * l1 * l1 / 12.0, m2 * l2 * l2 / 12.0])
    foot = np.zeros((2, 2))
    fjac = np.zeros((2, 2, NQ))
    for k in range(5):
        jac[k, 0, 0] = 1.0
        jac[k, 1, 1] = 1.0
    # torso: root + ct * (-sin th, cos th)
    pos[0, 0] = q[0] - ct * np.sin(th)
    pos[0, 1] = q[1] + ct * np.cos(th)
    jac[0, 0, 2] = -ct * np.cos(th)
    jac[0, 1, 2] = -ct * np.sin(th)
    sel[0, 2] = 1.0
    ang[0] = th
    for leg in range(2):
        ih = 3 + 2 * leg
        ik = ih + 1
        a = th + q[ih]
        b = a + q[ik]
        sa, ca, sb, cb = np.sin(a), np.cos(a), np.sin(b), np.cos(b)
        t = 1 + 2 * leg
        s = t + 1
        # thigh com: root + l1/2 * (sin a, -cos a)
        pos[t, 0] = q[0] + 0.5 * l1 * sa
        pos[t, 1] = q[1] - 0.5 * l1 * ca
        for j in (2, ih):
            jac[t, 0, j] = 0.5 * l1 * ca
            jac[t, 1, j] = 0.5 * l1 * sa
        sel[t, 2] = 1.0
        sel[t, ih] = 1.0
        ang[t] = a
        # shank com: root + l1 d(a) + l2/2 d(b)
        pos[s, 0] = q[0] + l1 * sa + 0.5 * l2 * sb
        pos[s, 1] = q[1] - l1 * ca - 0.5 * l2 * cb
        for j in (2, ih):
            jac[s, 0, j] = l1 * ca + 0.5 * l2 * cb
            jac[s, 1, j] = l1 * sa + 0.5 * l2 * sb
        jac[s, 0, ik] = 0.5 * l2 * cb
        jac[s, 1, ik] = 0.5 * l2 * sb
        sel[s, 2] = 1.0
        sel[s, ih] = 1.0
        sel[s, ik] = 1.0
        ang[s] = b
        foot[leg, 0] = q[0] + l1 * sa + l2 * sb
        foot[leg, 1] = q[1] - l1 * ca - l2 * cb
        fjac[leg, 0, 0] = 1.0
        fjac[leg, 1, 1] = 1.0
        for j in (2, ih):
            fjac[leg, 0, j] = l1 * ca + l2 * cb
            fjac[leg, 1, j] = l1 * sa + l2 * sb
        fjac[leg, 0, ik] = l2 * cb
        fjac[leg, 1, ik] = l2 * sb
    return pos, jac, sel, ang, mass, inertia, foot, fjac


@njit(cache=True)
def _velocity_bias(q, qd, body):
    """Jdot*qd for every link COM: centripetal terms of the planar chain."""
    ct, l1, l2 = body[1], body[3], body[5]
    th, thd = q[2], qd[2]
    bias = np.zeros((5, 2))
    # torso: d2/dt2 of ct*(-sin th, cos th) at fixed thdd = ct*thd^2*(sin th, -cos th)
    bias[0, 0] = ct * thd * thd * np.sin(th)
    bias[0, 1] = -ct * thd * thd * np.cos(th)
    for leg in range(2):
        ih = 3 + 2 * leg
        a = th + q[ih]
        b = a + q[ih + 1]
        ad = thd + qd[ih]
        bd = ad + qd[ih + 1]
        # d(a) = (sin a, -cos a); second derivative at fixed add is -d(a)*ad^2
        t = 1 + 2 * leg
        bias[t, 0] = -0.5 * l1 * np.sin(a) * ad * ad
        bias[t, 1] = 0.5 * l1 * np.cos(a) * ad * ad
        bias[t + 1, 0] = -l1 * np.sin(a) * ad * ad - 0.5 * l2 * np.sin(b) * bd * bd
        bias[t + 1, 1] = l1 * np.cos(a) * ad * ad + 0.5 * l2 * np.cos(b) * bd * bd
    return bias


@njit(cache=True)
def mechanical_energy(q, qd, body, payload, gravity):
    pos, jac, sel, ang, mass, inertia, foot, fjac = _kinematics(q, body, payload)
    ke = 0.0
    pe = 0.0
    for k in range(5):
        v = jac[k] @ qd
        w = sel[k] @ qd
        ke += 0.5 * mass[k] * (v[0] * v[0] + v[1] * v[1]) + 0.5 * inertia[k] * w * w
        pe += mass[k] * gravity * pos[k, 1]
    return ke + pe


@njit(cache=True)
def foot_positions(q, body):
    pos, jac, sel, ang, mass, inertia, foot, fjac = _kinematics(q, body, 0.0)
    return foot


@njit(cache=True)
def _cholesky_solve(a, b):
    n = a.shape[0]
    low = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1):
            acc = a[i, j]
            for k in range(j):
                acc -= low[i, k] * low[j, k]
            if i == j:
                low[i, i] = np.sqrt(acc)
            else:
                low[i, j] = acc / low[j, j]
    y = np.zeros(n)
    for i in range(n):
        acc = b[i]
        for k in range(i):
            acc -= low[i, k] * y[k]
        y[i] = acc / low[i, i]
    x = np.zeros(n)
    for i in range(n - 1, -1, -1):
        acc = y[i]
        for k in range(i + 1, n):
            acc -= low[k, i] * x[k]
        x[i] = acc / low[i, i]
    return x


@njit(cache=True)
def _substep(q, qd, target, kp, kd, torque_limit, joint_lo, joint_hi, limit_k, limit_c,
             body, payload, gravity, mu, heights, origin, cell,
             k_n, c_n, k_t, c_t, anchors, anchor_on, contact, fnormal, torque, dt):
    pos, jac, sel, ang, mass, inertia, foot, fjac = _kinematics(q, body, payload)
    bias = _velocity_bias(q, qd, body)
    mm = np.zeros((NQ, NQ))
    rhs = np.zeros(NQ)
    for k in range(5):
        m = mass[k]
        ik = inertia[k]
        for i in range(NQ):
            ji0 = jac[k, 0, i]
            ji1 = jac[k, 1, i]
            si = sel[k, i]
            rhs[i] -= m * (ji1 * gravity + ji0 * bias[k, 0] + ji1 * bias[k, 1])
            if ji0 == 0.0 and ji1 == 0.0 and si == 0.0:
                continue
            for j in range(i, NQ):
                val = m * (ji0 * jac[k, 0, j] + ji1 * jac[k, 1, j]) + ik * si * sel[k, j]
                mm[i, j] += val
    for i in range(NQ):
        for j in range(i):
            mm[i, j] = mm[j, i]
    for j in range(4):
        qi = 3 + j
        tau = kp[j] * (target[j] - q[qi]) - kd[j] * qd[qi]
        if tau > torque_limit:
            tau = torque_limit
        elif tau < -torque_limit:
            tau = -torque_limit
        torque[j] = tau
        lim = 0.0
        if q[qi] > joint_hi[j]:
            lim = -limit_k * (q[qi] - joint_hi[j]) - limit_c * qd[qi]
        elif q[qi] < joint_lo[j]:
            lim = -limit_k * (q[qi] - joint_lo[j]) - limit_c * qd[qi]
        rhs[qi] += tau + lim
    for leg in range(2):
        fx, fz = foot[leg, 0], foot[leg, 1]
        h, slope = _terrain(heights, origin, cell, fx)
        inv = 1.0 / np.sqrt(1.0 + slope * slope)
        nx, nz = -slope * inv, inv
        tx, tz = inv, slope * inv
        pen = (h - fz) * inv
        contact[leg] = False
        fnormal[leg] = 0.0
        if pen > 0.0:
            vfx = 0.0
            vfz = 0.0
            for i in range(NQ):
                vfx += fjac[leg, 0, i] * qd[i]
                vfz += fjac[leg, 1, i] * qd[i]
            vn = vfx * nx + vfz * nz
            vt = vfx * tx + vfz * tz
            fn = k_n * pen - c_n * vn
            if fn < 0.0:
                fn = 0.0
            if not anchor_on[leg]:
                anchors[leg, 0] = fx
                anchors[leg, 1] = fz
                anchor_on[leg] = True
            disp = (fx - anchors[leg, 0]) * tx + (fz - anchors[leg, 1]) * tz
            ft = -k_t * disp - c_t * vt
            cap = mu * fn
            if ft > cap or ft < -cap:
                ft = cap if ft > 0.0 else -cap
                anchors[leg, 0] = fx + ft / k_t * tx
                anchors[leg, 1] = fz + ft / k_t * tz
            if fn > 0.0:
                contact[leg] = True
                fnormal[leg] = fn
            gx = fn * nx + ft * tx
            gz = fn * nz + ft * tz
            for i in range(NQ):
                rhs[i] += fjac[leg, 0, i] * gx + fjac[leg, 1, i] * gz
        else:
            anchor_on[leg] = False
    qdd = _cholesky_solve(mm, rhs)
    for i in range(NQ):
        qd[i] += dt * qdd[i]
        q[i] += dt * qd[i]


@njit(cache=True)
def step_batch(qpos, qvel, targets, kp, kd, torque_limit, joint_lo, joint_hi, limit_k, limit_c,
               body, payload, gravity, friction, heights, origins, cell,
               k_n, c_n, k_t, c_t, anchors, anchor_on, contact, fnormal, torques, fault,
               n_sub, dt):
    """Advance every walker one control step (``n_sub`` physics substeps of ``dt``)."""
    n = qpos.shape[0]
    for e in range(n):
        if fault[e]:
            continue
        for _ in range(n_sub):
            _substep(qpos[e], qvel[e], targets[e], kp[e], kd[e], torque_limit, joint_lo, joint_hi,
                     limit_k, limit_c, body, payload[e], gravity[e], friction[e], heights[e],
                     origins[e], cell, k_n, c_n, k_t, c_t, anchors[e], anchor_on[e], contact[e],
                     fnormal[e], torques[e], dt)
        ok = True
        for i in range(NQ):
            if not (np.isfinite(qpos[e, i]) and np.isfinite(qvel[e, i])):
                ok = False
        if not ok:
            fault[e] = True
