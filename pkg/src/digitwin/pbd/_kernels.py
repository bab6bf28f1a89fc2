"""Numba kernels for the PBD core.

Everything here works on flat struct-of-arrays state and small float tuples
so the inner solver loops never touch the heap. Quaternions are ``(x, y, z, w)``
tuples. The constraint formulas live in the ``*_deltas`` functions; the
Python-facing solvers in :mod:`digitwin.pbd.constraints` call the same
functions, so the oracle tests exercise exactly what the stepper runs.
"""

import numpy as np
from numba import njit

KIND_RIGID_RIGID = 0
KIND_RIGID_PARTICLE = 1
KIND_PARTICLE_PARTICLE = 2
KIND_BODY_PLANE = 3
KIND_PARTICLE_PLANE = 4

ZERO3 = (0.0, 0.0, 0.0)


# --- small vector / quaternion algebra on tuples --------------------------------


@njit(cache=True)
def v3(a, i):
    return (a[i, 0], a[i, 1], a[i, 2])


@njit(cache=True)
def q4(a, i):
    return (a[i, 0], a[i, 1], a[i, 2], a[i, 3])


@njit(cache=True)
def add3(a, b):
    return (a[0] + b[0], a[1] + b[1], a[2] + b[2])


@njit(cache=True)
def sub3(a, b):
    return (a[0] - b[0], a[1] - b[1], a[2] - b[2])


@njit(cache=True)
def scale3(a, s):
    return (a[0] * s, a[1] * s, a[2] * s)


@njit(cache=True)
def dot3(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


@njit(cache=True)
def cross3(a, b):
    return (a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0])


@njit(cache=True)
def norm3(a):
    return np.sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2])


@njit(cache=True)
def qmul(a, b):
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return (
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    )


@njit(cache=True)
def qconj(q):
    return (-q[0], -q[1], -q[2], q[3])


@njit(cache=True)
def qscale(q, s):
    return (q[0] * s, q[1] * s, q[2] * s, q[3] * s)


@njit(cache=True)
def qadd(a, b):
    return (a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3])


@njit(cache=True)
def qnorm(q):
    return np.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])


@njit(cache=True)
def qnormalize(q):
    return qscale(q, 1.0 / qnorm(q))


@njit(cache=True)
def qrot(q, v):
    u = (q[0], q[1], q[2])
    t = scale3(cross3(u, v), 2.0)
    return add3(add3(v, scale3(t, q[3])), cross3(u, t))


@njit(cache=True)
def pure_times(v, q):
    """``[v, 0] ⊗ q``."""
    return qmul((v[0], v[1], v[2], 0.0), q)


@njit(cache=True)
def iinv_apply(q, inv_inertia, b, v):
    """World-frame inverse inertia ``R I_b^-1 R^T`` applied to ``v``."""
    vb = qrot(qconj(q), v)
    u = mat_apply(inv_inertia, b, vb)
    return qrot(q, u)


@njit(cache=True)
def mat_apply(m, b, v):
    return (
        m[b, 0, 0] * v[0] + m[b, 0, 1] * v[1] + m[b, 0, 2] * v[2],
        m[b, 1, 0] * v[0] + m[b, 1, 1] * v[1] + m[b, 1, 2] * v[2],
        m[b, 2, 0] * v[0] + m[b, 2, 1] * v[1] + m[b, 2, 2] * v[2],
    )


@njit(cache=True)
def m3(a, b):
    """Matrix ``a[b]`` as a tuple of row tuples."""
    return (
        (a[b, 0, 0], a[b, 0, 1], a[b, 0, 2]),
        (a[b, 1, 0], a[b, 1, 1], a[b, 1, 2]),
        (a[b, 2, 0], a[b, 2, 1], a[b, 2, 2]),
    )


@njit(cache=True)
def mv3(m, v):
    return (dot3(m[0], v), dot3(m[1], v), dot3(m[2], v))


ZERO33 = ((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), (0.0, 0.0, 0.0))


@njit(cache=True)
def body_frames(bq, b_inv_inertia, rot, iw):
    """Per body: rotation matrix ``rot[b]`` and world inverse inertia ``iw[b] = R I^-1 Rᵀ``."""
    for b in range(bq.shape[0]):
        q = q4(bq, b)
        for c in range(3):
            e = (1.0 if c == 0 else 0.0, 1.0 if c == 1 else 0.0, 1.0 if c == 2 else 0.0)
            col = iinv_apply(q, b_inv_inertia, b, e)
            rc = qrot(q, e)
            for r in range(3):
                iw[b, r, c] = col[r]
                rot[b, r, c] = rc[r]


@njit(cache=True)
def sphere_world_centers(bx, bq, b_sph_start, b_sph_count, s_offset, out):
    for b in range(bx.shape[0]):
        x = v3(bx, b)
        q = q4(bq, b)
        for s in range(b_sph_start[b], b_sph_start[b] + b_sph_count[b]):
            c = add3(x, qrot(q, v3(s_offset, s)))
            out[s, 0] = c[0]
            out[s, 1] = c[1]
            out[s, 2] = c[2]


# --- constraint formulas -------------------------------------------------------------


@njit(cache=True)
def generalized_inverse_mass(inv_m, inv_inertia_w, r, n):
    """``m^-1 + (r×n)ᵀ I_w^-1 (r×n)``; ``inv_inertia_w`` is a world-frame 3x3 row tuple."""
    rn = cross3(r, n)
    return inv_m + dot3(rn, mv3(inv_inertia_w, rn))


@njit(cache=True)
def pair_deltas(p, n, ri, rj, inv_mi, inv_inertia_i, inv_mj, inv_inertia_j):
    """Position/rotation-vector corrections for a positional impulse ``p`` along ``n``.

    With ``p = C / (w_i + w_j)`` and ``C = n·(b_j - b_i)`` this is the Lagrange
    projection of a unilateral contact; ``p < 0`` pushes ``i`` along ``-n`` and
    ``j`` along ``+n``. Momentum-neutral: ``m_i Δx_i + m_j Δx_j = 0``.
    Entities without rotational freedom pass a zero inverse inertia.
    """
    dxi = scale3(n, inv_mi * p)
    dxj = scale3(n, -inv_mj * p)
    dthi = scale3(mv3(inv_inertia_i, cross3(ri, n)), p)
    dthj = scale3(mv3(inv_inertia_j, cross3(rj, n)), -p)
    return dxi, dthi, dxj, dthj


@njit(cache=True)
def shear_stretch_deltas(xa, xb, q, wa, wb, wq, rest):
    """Cosserat shear-stretch projection for one segment.

    ``C = (x_b - x_a)/l - d3(q)``. Signs follow the constraint-decreasing
    direction, which agrees with the generic Lagrange projection using the
    homogeneous-quadratic director gradient (∂d3/∂q ∂d3/∂qᵀ = 4 I).
    """
    x, y, z, w = q
    d3 = (2.0 * (x * z + w * y), 2.0 * (y * z - w * x), w * w - x * x - y * y + z * z)
    c = sub3(scale3(sub3(xb, xa), 1.0 / rest), d3)
    denom = wa + wb + 4.0 * wq * rest * rest
    if denom <= 0.0:
        return ZERO3, ZERO3, (0.0, 0.0, 0.0, 0.0), c, False
    dxa = scale3(c, wa * rest / denom)
    dxb = scale3(c, -wb * rest / denom)
    # [C, 0] ⊗ q ⊗ ē3, with ē3 the conjugate of the pure quaternion e3
    cq = pure_times(c, q)
    dq = qscale(qmul(cq, (0.0, 0.0, -1.0, 0.0)), 2.0 * wq * rest * rest / denom)
    return dxa, dxb, dq, c, True


@njit(cache=True)
def bend_twist_deltas(qi, qj, rest_imag, wi, wj, stiffness):
    """Cosserat bend-twist projection for one pair of adjacent segments.

    ``C = Im(q̄_i q_j) - α Im(q̄⁰_i q⁰_j)`` with ``α ∈ {+1, -1}`` picked to
    minimise ``|C|`` (quaternion double cover).
    """
    rel = qmul(qconj(qi), qj)
    om = (rel[0], rel[1], rel[2])
    cm = sub3(om, rest_imag)
    cp = add3(om, rest_imag)
    c = cm
    if dot3(cp, cp) < dot3(cm, cm):
        c = cp
    denom = wi + wj
    if denom <= 0.0:
        return (0.0, 0.0, 0.0, 0.0), (0.0, 0.0, 0.0, 0.0), c, False
    cs = scale3(c, stiffness)
    cquat = (cs[0], cs[1], cs[2], 0.0)
    dqi = qscale(qmul(qj, cquat), wi / denom)
    dqj = qscale(qmul(qi, cquat), -wj / denom)
    return dqi, dqj, c, True


# --- broad phase ---------------------------------------------------------------------


@njit(cache=True)
def _cell_hash(ix, iy, iz, mask):
    h = (ix * 73856093) ^ (iy * 19349663) ^ (iz * 83492791)
    return h & mask


@njit(cache=True)
def spatial_hash_pairs(centers, cell_size):
    """All pairs ``i < j`` whose grid cells are neighbours (27-cell stencil)."""
    n = centers.shape[0]
    out = np.empty((max(16, 8 * n), 2), dtype=np.int64)
    m = 0
    if n < 2:
        return out[:0]
    size = 1
    while size < 2 * n:
        size *= 2
    mask = size - 1
    cells = np.empty((n, 3), dtype=np.int64)
    keys = np.empty(n, dtype=np.int64)
    for i in range(n):
        for k in range(3):
            cells[i, k] = np.int64(np.floor(centers[i, k] / cell_size))
        keys[i] = _cell_hash(cells[i, 0], cells[i, 1], cells[i, 2], mask)
    order = np.argsort(keys, kind="mergesort")
    start = np.full(size, -1, dtype=np.int64)
    end = np.full(size, -1, dtype=np.int64)
    for k in range(n):
        key = keys[order[k]]
        if start[key] < 0:
            start[key] = k
        end[key] = k + 1
    for i in range(n):
        for dx in range(-1, 2):
            for dy in range(-1, 2):
                for dz in range(-1, 2):
                    cx = cells[i, 0] + dx
                    cy = cells[i, 1] + dy
                    cz = cells[i, 2] + dz
                    key = _cell_hash(cx, cy, cz, mask)
                    s = start[key]
                    if s < 0:
                        continue
                    for k in range(s, end[key]):
                        j = order[k]
                        if j <= i:
                            continue
                        if cells[j, 0] != cx or cells[j, 1] != cy or cells[j, 2] != cz:
                            continue
                        if m == out.shape[0]:
                            grown = np.empty((2 * m, 2), dtype=np.int64)
                            grown[:m] = out[:m]
                            out = grown
                        out[m, 0] = i
                        out[m, 1] = j
                        m += 1
    return out[:m]


# --- contact generation --------------------------------------------------------------


@njit(cache=True)
def _grow(buf):
    grown = np.empty((2 * buf.shape[0], 5), dtype=np.int64)
    grown[: buf.shape[0]] = buf
    return grown


@njit(cache=True)
def _put(buf, m, kind, ei, ej, si, sj):
    buf[m, 0] = kind
    buf[m, 1] = ei
    buf[m, 2] = ej
    buf[m, 3] = si
    buf[m, 4] = sj


@njit(cache=True)
def collect_contacts(
    bx, bq, b_inv_mass, b_bound, b_sph_start, b_sph_count,
    s_offset, s_radius,
    px, p_inv_mass, p_radius, p_rod, p_rod_idx,
    has_plane, plane_n, plane_d, margin, brute_force_limit,
):
    """Contact candidates within ``margin`` as rows ``(kind, i, j, sphere_i, sphere_j)``.

    Entities (bodies by bounding sphere, particles) are culled first, then
    exact sphere-sphere / sphere-plane distances decide. Planes use index -1
    on the ``i`` side; rigid bodies always precede particles.
    """
    nb = bx.shape[0]
    npart = px.shape[0]
    sw = np.empty((s_radius.shape[0], 3))
    sphere_world_centers(bx, bq, b_sph_start, b_sph_count, s_offset, sw)
    buf = np.empty((max(64, 2 * (s_radius.shape[0] + npart)), 5), dtype=np.int64)
    m = 0
    pn = (plane_n[0], plane_n[1], plane_n[2])
    if has_plane:
        for b in range(nb):
            if b_inv_mass[b] == 0.0:
                continue
            if dot3(pn, v3(bx, b)) - plane_d - b_bound[b] >= margin:
                continue
            for s in range(b_sph_start[b], b_sph_start[b] + b_sph_count[b]):
                if dot3(pn, v3(sw, s)) - plane_d - s_radius[s] < margin:
                    if m == buf.shape[0]:
                        buf = _grow(buf)
                    _put(buf, m, KIND_BODY_PLANE, -1, b, -1, s)
                    m += 1
        for p in range(npart):
            if p_inv_mass[p] == 0.0:
                continue
            if dot3(pn, v3(px, p)) - plane_d - p_radius[p] < margin:
                if m == buf.shape[0]:
                    buf = _grow(buf)
                _put(buf, m, KIND_PARTICLE_PLANE, -1, p, -1, -1)
                m += 1

    ne = nb + npart
    ecenter = np.empty((ne, 3))
    erad = np.empty(ne)
    for b in range(nb):
        ecenter[b, 0] = bx[b, 0]
        ecenter[b, 1] = bx[b, 1]
        ecenter[b, 2] = bx[b, 2]
        erad[b] = b_bound[b]
    for p in range(npart):
        ecenter[nb + p, 0] = px[p, 0]
        ecenter[nb + p, 1] = px[p, 1]
        ecenter[nb + p, 2] = px[p, 2]
        erad[nb + p] = p_radius[p]

    if ne <= brute_force_limit:
        cand = np.empty((max(1, ne * (ne - 1) // 2), 2), dtype=np.int64)
        nc = 0
        for e1 in range(ne):
            for e2 in range(e1 + 1, ne):
                cand[nc, 0] = e1
                cand[nc, 1] = e2
                nc += 1
        cand = cand[:nc]
    else:
        rmax = 0.0
        for e in range(ne):
            rmax = max(rmax, erad[e])
        cand = spatial_hash_pairs(ecenter, 2.0 * rmax + margin)

    # scratch list of the spheres of body e2 that reach body e1
    near = np.empty(max(1, s_radius.shape[0]), dtype=np.int64)
    for k in range(cand.shape[0]):
        e1 = cand[k, 0]
        e2 = cand[k, 1]
        c1 = v3(ecenter, e1)
        c2 = v3(ecenter, e2)
        if norm3(sub3(c2, c1)) - erad[e1] - erad[e2] >= margin:
            continue
        kin1 = (b_inv_mass[e1] == 0.0) if e1 < nb else (p_inv_mass[e1 - nb] == 0.0)
        kin2 = (b_inv_mass[e2] == 0.0) if e2 < nb else (p_inv_mass[e2 - nb] == 0.0)
        if kin1 and kin2:
            continue
        if e1 < nb and e2 < nb:
            nn = 0
            for t in range(b_sph_start[e2], b_sph_start[e2] + b_sph_count[e2]):
                if norm3(sub3(v3(sw, t), c1)) - b_bound[e1] - s_radius[t] < margin:
                    near[nn] = t
                    nn += 1
            if nn == 0:
                continue
            for s in range(b_sph_start[e1], b_sph_start[e1] + b_sph_count[e1]):
                cs = v3(sw, s)
                if norm3(sub3(cs, c2)) - b_bound[e2] - s_radius[s] >= margin:
                    continue
                for u in range(nn):
                    t = near[u]
                    if norm3(sub3(v3(sw, t), cs)) - s_radius[s] - s_radius[t] < margin:
                        if m == buf.shape[0]:
                            buf = _grow(buf)
                        _put(buf, m, KIND_RIGID_RIGID, e1, e2, s, t)
                        m += 1
        elif e1 < nb:
            p = e2 - nb
            cp = v3(px, p)
            for s in range(b_sph_start[e1], b_sph_start[e1] + b_sph_count[e1]):
                if norm3(sub3(cp, v3(sw, s))) - s_radius[s] - p_radius[p] < margin:
                    if m == buf.shape[0]:
                        buf = _grow(buf)
                    _put(buf, m, KIND_RIGID_PARTICLE, e1, p, s, -1)
                    m += 1
        else:
            p1 = e1 - nb
            p2 = e2 - nb
            if p_rod[p1] >= 0 and p_rod[p1] == p_rod[p2] and abs(p_rod_idx[p1] - p_rod_idx[p2]) <= 1:
                continue
            if m == buf.shape[0]:
                buf = _grow(buf)
            _put(buf, m, KIND_PARTICLE_PARTICLE, p1, p2, -1, -1)
            m += 1
    return buf[:m]


@njit(cache=True)
def contact_frame(on_plane, ci, ri, cj, rj, plane_n, plane_d):
    """Normal, gap and surface points for spheres ``(ci, ri)`` and ``(cj, rj)``.

    With ``on_plane`` the ``i`` side is the half-space ``n·x >= d`` given by
    the 3-tuple ``plane_n`` and ``ci``/``ri`` are ignored.
    """
    if on_plane:
        n = plane_n
        h = dot3(n, cj) - plane_d
        return n, h - rj, sub3(cj, scale3(n, h)), sub3(cj, scale3(n, rj))
    d = sub3(cj, ci)
    dist = norm3(d)
    if dist < 1e-12:
        n = (0.0, 0.0, 1.0)
    else:
        n = scale3(d, 1.0 / dist)
    return n, dist - ri - rj, add3(ci, scale3(n, ri)), sub3(cj, scale3(n, rj))


@njit(cache=True)
def contact_geometry(c, s_world, s_radius, px, p_radius, plane_n, plane_d):
    """Current normal, gap ``C`` and contact points ``b_i``, ``b_j`` of contact row ``c``.

    ``s_world`` holds the world-frame centers of the rigid-body spheres.
    """
    kind = c[0]
    if kind == KIND_RIGID_RIGID or kind == KIND_BODY_PLANE:
        cj = (s_world[c[4], 0], s_world[c[4], 1], s_world[c[4], 2])
        rj = s_radius[c[4]]
    else:
        cj = (px[c[2], 0], px[c[2], 1], px[c[2], 2])
        rj = p_radius[c[2]]
    if kind == KIND_PARTICLE_PARTICLE:
        ci = (px[c[1], 0], px[c[1], 1], px[c[1], 2])
        ri = p_radius[c[1]]
    elif kind == KIND_RIGID_RIGID or kind == KIND_RIGID_PARTICLE:
        ci = (s_world[c[3], 0], s_world[c[3], 1], s_world[c[3], 2])
        ri = s_radius[c[3]]
    else:
        ci = ZERO3
        ri = 0.0
    on_plane = kind == KIND_BODY_PLANE or kind == KIND_PARTICLE_PLANE
    return contact_frame(on_plane, ci, ri, cj, rj, (plane_n[0], plane_n[1], plane_n[2]), plane_d)


# --- the stepper ---------------------------------------------------------------------


@njit(cache=True)
def _nlerp(a, b, t):
    if a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3] < 0.0:
        b = qscale(b, -1.0)
    return qnormalize(qadd(qscale(a, 1.0 - t), qscale(b, t)))


@njit(cache=True)
def _angular_velocity(q, qprev, h):
    dq = qmul(q, qconj(qprev))
    if dq[3] < 0.0:
        dq = qscale(dq, -1.0)
    return (2.0 * dq[0] / h, 2.0 * dq[1] / h, 2.0 * dq[2] / h)


@njit(cache=True)
def predict(
    h, alpha, gravity,
    bx, bv, bq, bw, b_inv_mass, b_inv_inertia, b_start_x, b_start_q, b_target_x, b_target_q, b_force, b_torque,
    b_prev_x, b_prev_q,
    px, pv, p_inv_mass, p_force, p_prev_x,
    g_q, g_w, g_inv_inertia, g_prev_q,
):
    g = (gravity[0], gravity[1], gravity[2])
    for b in range(bx.shape[0]):
        for k in range(3):
            b_prev_x[b, k] = bx[b, k]
        for k in range(4):
            b_prev_q[b, k] = bq[b, k]
        if b_inv_mass[b] == 0.0:
            # scripted kinematic entity: interpolate toward this step's target
            for k in range(3):
                bx[b, k] = b_start_x[b, k] + alpha * (b_target_x[b, k] - b_start_x[b, k])
            q = _nlerp(q4(b_start_q, b), q4(b_target_q, b), alpha)
            for k in range(4):
                bq[b, k] = q[k]
            continue
        q = q4(bq, b)
        im = b_inv_mass[b]
        for k in range(3):
            bv[b, k] += h * (g[k] + b_force[b, k] * im)
            bx[b, k] += h * bv[b, k]
        dw = iinv_apply(q, b_inv_inertia, b, v3(b_torque, b))
        for k in range(3):
            bw[b, k] += h * dw[k]
        q = qnormalize(qadd(q, qscale(pure_times(v3(bw, b), q), 0.5 * h)))
        for k in range(4):
            bq[b, k] = q[k]
    for p in range(px.shape[0]):
        for k in range(3):
            p_prev_x[p, k] = px[p, k]
        im = p_inv_mass[p]
        if im == 0.0:
            continue
        for k in range(3):
            pv[p, k] += h * (g[k] + p_force[p, k] * im)
            px[p, k] += h * pv[p, k]
    for s in range(g_q.shape[0]):
        q = q4(g_q, s)
        for k in range(4):
            g_prev_q[s, k] = q[k]
        if g_inv_inertia[s] == 0.0:
            continue
        q = qnormalize(qadd(q, qscale(pure_times(v3(g_w, s), q), 0.5 * h)))
        for k in range(4):
            g_q[s, k] = q[k]


@njit(cache=True)
def update_velocities(
    h, damping,
    bx, bv, bq, bw, b_inv_mass, b_prev_x, b_prev_q,
    px, pv, p_inv_mass, p_prev_x,
    g_q, g_w, g_inv_inertia, g_prev_q,
):
    for b in range(bx.shape[0]):
        damp = 1.0 if b_inv_mass[b] == 0.0 else damping
        for k in range(3):
            bv[b, k] = damp * (bx[b, k] - b_prev_x[b, k]) / h
        w = _angular_velocity(q4(bq, b), q4(b_prev_q, b), h)
        for k in range(3):
            bw[b, k] = damp * w[k]
    for p in range(px.shape[0]):
        if p_inv_mass[p] == 0.0:
            for k in range(3):
                pv[p, k] = 0.0
            continue
        for k in range(3):
            pv[p, k] = damping * (px[p, k] - p_prev_x[p, k]) / h
    for s in range(g_q.shape[0]):
        w = _angular_velocity(q4(g_q, s), q4(g_prev_q, s), h)
        for k in range(3):
            g_w[s, k] = damping * w[k]


@njit(cache=True)
def solve_contacts(
    contacts, lam_n, lam_t, rigid_pass, friction,
    bx, bq, b_inv_mass, b_rot, b_iw, b_prev_x, b_prev_q,
    s_offset, s_radius,
    px, p_inv_mass, p_radius, p_prev_x,
    plane_n, plane_d,
    acc_bx, acc_bq, acc_bn, acc_px, acc_pn,
):
    """One Jacobi sweep over contact rows.

    ``rigid_pass`` selects the rigid-rigid/body-plane rows (True) or the rows
    involving particles (False), so the caller can keep the solve order of
    the substep loop: particle contacts, rod constraints, rigid contacts.

    ``friction == 0`` runs the normal (non-penetration) projection. A
    positive ``friction`` runs a friction-only sweep over the rows that
    carried normal impulse in this substep, capping each row's tangential
    impulse vector at ``friction * lam_n``.

    Array reads stay in this loop body on purpose: passing arrays into
    helpers inside branches defeats numba's refcount pruning and costs an
    order of magnitude in speed.
    """
    pn = (plane_n[0], plane_n[1], plane_n[2])
    ident = (0.0, 0.0, 0.0, 1.0)
    for k in range(contacts.shape[0]):
        kind = contacts[k, 0]
        ei = contacts[k, 1]
        ej = contacts[k, 2]
        si = contacts[k, 3]
        sj = contacts[k, 4]
        is_rigid = kind == KIND_RIGID_RIGID or kind == KIND_BODY_PLANE
        if is_rigid != rigid_pass:
            continue
        i_body = kind == KIND_RIGID_RIGID or kind == KIND_RIGID_PARTICLE
        i_plane = kind == KIND_BODY_PLANE or kind == KIND_PARTICLE_PLANE
        j_body = kind == KIND_RIGID_RIGID or kind == KIND_BODY_PLANE
        # j side state
        if j_body:
            xj = (bx[ej, 0], bx[ej, 1], bx[ej, 2])
            cj = add3(xj, mv3(m3(b_rot, ej), (s_offset[sj, 0], s_offset[sj, 1], s_offset[sj, 2])))
            rad_j = s_radius[sj]
            qj = (bq[ej, 0], bq[ej, 1], bq[ej, 2], bq[ej, 3])
            im_j = b_inv_mass[ej]
            Ij = m3(b_iw, ej)
            xj_prev = (b_prev_x[ej, 0], b_prev_x[ej, 1], b_prev_x[ej, 2])
            qj_prev = (b_prev_q[ej, 0], b_prev_q[ej, 1], b_prev_q[ej, 2], b_prev_q[ej, 3])
        else:
            cj = (px[ej, 0], px[ej, 1], px[ej, 2])
            rad_j = p_radius[ej]
            xj = cj
            qj = ident
            im_j = p_inv_mass[ej]
            Ij = ZERO33
            xj_prev = (p_prev_x[ej, 0], p_prev_x[ej, 1], p_prev_x[ej, 2])
            qj_prev = ident
        # i side state
        if i_plane:
            ci = ZERO3
            rad_i = 0.0
            xi = ZERO3
            qi = ident
            im_i = 0.0
            Ii = ZERO33
            xi_prev = ZERO3
            qi_prev = ident
        elif i_body:
            xi = (bx[ei, 0], bx[ei, 1], bx[ei, 2])
            ci = add3(xi, mv3(m3(b_rot, ei), (s_offset[si, 0], s_offset[si, 1], s_offset[si, 2])))
            rad_i = s_radius[si]
            qi = (bq[ei, 0], bq[ei, 1], bq[ei, 2], bq[ei, 3])
            im_i = b_inv_mass[ei]
            Ii = m3(b_iw, ei)
            xi_prev = (b_prev_x[ei, 0], b_prev_x[ei, 1], b_prev_x[ei, 2])
            qi_prev = (b_prev_q[ei, 0], b_prev_q[ei, 1], b_prev_q[ei, 2], b_prev_q[ei, 3])
        else:
            ci = (px[ei, 0], px[ei, 1], px[ei, 2])
            rad_i = p_radius[ei]
            xi = ci
            qi = ident
            im_i = p_inv_mass[ei]
            Ii = ZERO33
            xi_prev = (p_prev_x[ei, 0], p_prev_x[ei, 1], p_prev_x[ei, 2])
            qi_prev = ident
        n, gap, bi, bj = contact_frame(i_plane, ci, rad_i, cj, rad_j, pn, plane_d)
        if friction > 0.0:
            # friction sweep: only rows that carried normal impulse during this substep
            if lam_n[k] <= 0.0:
                continue
        elif gap >= 0.0:
            continue
        ri = ZERO3 if i_plane else sub3(bi, xi)
        rj = sub3(bj, xj)
        if friction == 0.0:
            wi = generalized_inverse_mass(im_i, Ii, ri, n)
            wj = generalized_inverse_mass(im_j, Ij, rj, n)
            wsum = wi + wj
            if wsum <= 0.0:
                continue
            p = gap / wsum
            dxi, dthi, dxj, dthj = pair_deltas(p, n, ri, rj, im_i, Ii, im_j, Ij)
            lam_n[k] += -p
        else:
            dxi, dthi, dxj, dthj = ZERO3, ZERO3, ZERO3, ZERO3
            # position-level Coulomb friction, budget mu * accumulated normal impulse
            # material points at the start of the substep (fixed for the plane)
            slip_i = ZERO3 if i_plane else sub3(bi, _material_prev(bi, xi, qi, xi_prev, qi_prev))
            slip_j = sub3(bj, _material_prev(bj, xj, qj, xj_prev, qj_prev))
            d = sub3(slip_j, slip_i)
            t = sub3(d, scale3(n, dot3(d, n)))
            tl = norm3(t)
            if tl > 1e-12:
                tdir = scale3(t, 1.0 / tl)
                wt = generalized_inverse_mass(im_i, Ii, ri, tdir) + generalized_inverse_mass(im_j, Ij, rj, tdir)
                if wt > 0.0:
                    # the tangential impulse is a vector: corrections that reverse direction across
                    # iterations cancel instead of draining the Coulomb budget
                    old_t = (lam_t[k, 0], lam_t[k, 1], lam_t[k, 2])
                    cand = add3(old_t, scale3(tdir, tl / wt))
                    cap = friction * lam_n[k]
                    cn = norm3(cand)
                    if cn > cap:
                        cand = scale3(cand, cap / cn) if cn > 0.0 else ZERO3
                    inc = sub3(cand, old_t)
                    il = norm3(inc)
                    if il > 0.0:
                        for c in range(3):
                            lam_t[k, c] = cand[c]
                        fxi, fthi, fxj, fthj = pair_deltas(il, scale3(inc, 1.0 / il), ri, rj, im_i, Ii, im_j, Ij)
                        dxi = add3(dxi, fxi)
                        dthi = add3(dthi, fthi)
                        dxj = add3(dxj, fxj)
                        dthj = add3(dthj, fthj)
        if im_i > 0.0:
            if i_body:
                dq = qscale(pure_times(dthi, qi), 0.5)
                for c in range(3):
                    acc_bx[ei, c] += dxi[c]
                for c in range(4):
                    acc_bq[ei, c] += dq[c]
                acc_bn[ei] += 1.0
            else:
                for c in range(3):
                    acc_px[ei, c] += dxi[c]
                acc_pn[ei] += 1.0
        if im_j > 0.0:
            if j_body:
                dq = qscale(pure_times(dthj, qj), 0.5)
                for c in range(3):
                    acc_bx[ej, c] += dxj[c]
                for c in range(4):
                    acc_bq[ej, c] += dq[c]
                acc_bn[ej] += 1.0
            else:
                for c in range(3):
                    acc_px[ej, c] += dxj[c]
                acc_pn[ej] += 1.0


@njit(cache=True)
def _material_prev(b, x, q, x_prev, q_prev):
    """Where the material point currently at ``b`` sat at the start of the substep."""
    return add3(x_prev, qrot(q_prev, qrot(qconj(q), sub3(b, x))))


@njit(cache=True)
def solve_rods(
    px, p_inv_mass, g_q, g_inv_inertia, g_p0, g_p1, g_rest_len,
    d_s0, d_s1, d_rest, d_stiff,
    acc_px, acc_pn, acc_gq, acc_gn,
):
    """Shear-stretch sweep followed by bend-twist sweep (Jacobi accumulation)."""
    skipped = 0
    for s in range(g_q.shape[0]):
        a = g_p0[s]
        b = g_p1[s]
        dxa, dxb, dq, c, ok = shear_stretch_deltas(v3(px, a), v3(px, b), q4(g_q, s), p_inv_mass[a],
                                                   p_inv_mass[b], g_inv_inertia[s], g_rest_len[s])
        if not ok:
            skipped += 1
            continue
        if p_inv_mass[a] > 0.0:
            for k in range(3):
                acc_px[a, k] += dxa[k]
            acc_pn[a] += 1.0
        if p_inv_mass[b] > 0.0:
            for k in range(3):
                acc_px[b, k] += dxb[k]
            acc_pn[b] += 1.0
        if g_inv_inertia[s] > 0.0:
            for k in range(4):
                acc_gq[s, k] += dq[k]
            acc_gn[s] += 1.0
    for k in range(d_s0.shape[0]):
        i = d_s0[k]
        j = d_s1[k]
        dqi, dqj, c, ok = bend_twist_deltas(q4(g_q, i), q4(g_q, j), v3(d_rest, k), g_inv_inertia[i],
                                            g_inv_inertia[j], d_stiff[k])
        if not ok:
            skipped += 1
            continue
        for t in range(4):
            acc_gq[i, t] += dqi[t]
            acc_gq[j, t] += dqj[t]
        acc_gn[i] += 1.0
        acc_gn[j] += 1.0
    return skipped


@njit(cache=True)
def apply_deltas(bx, bq, acc_bx, acc_bq, acc_bn, px, acc_px, acc_pn, g_q, acc_gq, acc_gn):
    """Average accumulated deltas per entity and apply; returns degenerate-update count."""
    degenerate = 0
    for b in range(bx.shape[0]):
        n = acc_bn[b]
        if n == 0.0:
            continue
        for k in range(3):
            bx[b, k] += acc_bx[b, k] / n
        q = (bq[b, 0] + acc_bq[b, 0] / n, bq[b, 1] + acc_bq[b, 1] / n,
             bq[b, 2] + acc_bq[b, 2] / n, bq[b, 3] + acc_bq[b, 3] / n)
        qn = qnorm(q)
        if qn < 1e-12:
            degenerate += 1
            continue
        for k in range(4):
            bq[b, k] = q[k] / qn
    for p in range(px.shape[0]):
        n = acc_pn[p]
        if n == 0.0:
            continue
        for k in range(3):
            px[p, k] += acc_px[p, k] / n
    for s in range(g_q.shape[0]):
        n = acc_gn[s]
        if n == 0.0:
            continue
        q = (g_q[s, 0] + acc_gq[s, 0] / n, g_q[s, 1] + acc_gq[s, 1] / n,
             g_q[s, 2] + acc_gq[s, 2] / n, g_q[s, 3] + acc_gq[s, 3] / n)
        qn = qnorm(q)
        if qn < 1e-12:
            degenerate += 1
            continue
        for k in range(4):
            g_q[s, k] = q[k] / qn
    return degenerate


@njit(cache=True)
def _max_speed(bv, bx, b_inv_mass, b_start_x, b_target_x, dt, pv):
    vmax = 0.0
    for b in range(bv.shape[0]):
        if b_inv_mass[b] == 0.0:
            s = norm3(sub3(v3(b_target_x, b), v3(b_start_x, b))) / dt
        else:
            s = norm3(v3(bv, b))
        vmax = max(vmax, s)
    for p in range(pv.shape[0]):
        vmax = max(vmax, norm3(v3(pv, p)))
    return vmax


@njit(cache=True)
def step_kernel(
    dt, n_sub, n_iter, gravity, damping, friction, margin, brute_force_limit,
    bx, bv, bq, bw, b_inv_mass, b_inv_inertia, b_bound, b_sph_start, b_sph_count,
    b_target_x, b_target_q, b_force, b_torque,
    s_offset, s_radius,
    px, pv, p_inv_mass, p_radius, p_rod, p_rod_idx, p_force,
    g_q, g_w, g_inv_inertia, g_p0, g_p1, g_rest_len,
    d_s0, d_s1, d_rest, d_stiff,
    has_plane, plane_n, plane_d,
):
    """Advance the world by ``dt`` using ``n_sub`` substeps of ``n_iter`` Jacobi iterations.

    Returns ``(skipped_constraints, degenerate_updates)``.
    """
    nb = bx.shape[0]
    npart = px.shape[0]
    ng = g_q.shape[0]
    h = dt / n_sub
    b_start_x = bx.copy()
    b_start_q = bq.copy()
    b_prev_x = np.empty_like(bx)
    b_prev_q = np.empty_like(bq)
    p_prev_x = np.empty_like(px)
    g_prev_q = np.empty_like(g_q)
    acc_bx = np.zeros((nb, 3))
    acc_bq = np.zeros((nb, 4))
    acc_bn = np.zeros(nb)
    acc_px = np.zeros((npart, 3))
    acc_pn = np.zeros(npart)
    acc_gq = np.zeros((ng, 4))
    acc_gn = np.zeros(ng)
    b_iw = np.empty_like(b_inv_inertia)
    b_rot = np.empty_like(b_inv_inertia)
    skipped = 0
    degenerate = 0
    for sub in range(n_sub):
        # anticipate motion within the substep so fast entities do not tunnel past the margin
        vmax = _max_speed(bv, bx, b_inv_mass, b_start_x, b_target_x, dt, pv)
        contacts = collect_contacts(
            bx, bq, b_inv_mass, b_bound, b_sph_start, b_sph_count, s_offset, s_radius,
            px, p_inv_mass, p_radius, p_rod, p_rod_idx,
            has_plane, plane_n, plane_d, margin + 2.0 * vmax * h, brute_force_limit,
        )
        lam_n = np.zeros(contacts.shape[0])
        lam_t = np.zeros((contacts.shape[0], 3))
        predict(
            h, (sub + 1.0) / n_sub, gravity,
            bx, bv, bq, bw, b_inv_mass, b_inv_inertia, b_start_x, b_start_q, b_target_x, b_target_q,
            b_force, b_torque, b_prev_x, b_prev_q,
            px, pv, p_inv_mass, p_force, p_prev_x,
            g_q, g_w, g_inv_inertia, g_prev_q,
        )
        for it in range(n_iter + 1):
            # the extra sweep is friction only, run once the normal corrections have settled
            mu = friction if it == n_iter else 0.0
            if it == n_iter and friction <= 0.0:
                break
            acc_bx[:] = 0.0
            acc_bq[:] = 0.0
            acc_bn[:] = 0.0
            acc_px[:] = 0.0
            acc_pn[:] = 0.0
            acc_gq[:] = 0.0
            acc_gn[:] = 0.0
            body_frames(bq, b_inv_inertia, b_rot, b_iw)
            solve_contacts(
                contacts, lam_n, lam_t, False, mu,
                bx, bq, b_inv_mass, b_rot, b_iw, b_prev_x, b_prev_q, s_offset, s_radius,
                px, p_inv_mass, p_radius, p_prev_x, plane_n, plane_d,
                acc_bx, acc_bq, acc_bn, acc_px, acc_pn,
            )
            if it < n_iter:
                skipped += solve_rods(
                    px, p_inv_mass, g_q, g_inv_inertia, g_p0, g_p1, g_rest_len,
                    d_s0, d_s1, d_rest, d_stiff, acc_px, acc_pn, acc_gq, acc_gn,
                )
            solve_contacts(
                contacts, lam_n, lam_t, True, mu,
                bx, bq, b_inv_mass, b_rot, b_iw, b_prev_x, b_prev_q, s_offset, s_radius,
                px, p_inv_mass, p_radius, p_prev_x, plane_n, plane_d,
                acc_bx, acc_bq, acc_bn, acc_px, acc_pn,
            )
            degenerate += apply_deltas(bx, bq, acc_bx, acc_bq, acc_bn, px, acc_px, acc_pn, g_q, acc_gq, acc_gn)
        update_velocities(
            h, damping, bx, bv, bq, bw, b_inv_mass, b_prev_x, b_prev_q,
            px, pv, p_inv_mass, p_prev_x, g_q, g_w, g_inv_inertia, g_prev_q,
        )
    return skipped, degenerate
