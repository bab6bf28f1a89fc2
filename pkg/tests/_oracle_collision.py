"""Brute-force narrow phase used as a test oracle."""

import numpy as np

from digitwin.collision import DEFAULT_MARGIN
from digitwin.math3d import quat_rotate
from digitwin.pbd import _kernels as K


def brute_force_pairs(world, margin: float = DEFAULT_MARGIN) -> list[tuple]:
    """Reference all-pairs narrow phase; used as a test oracle."""
    spheres = []  # (kind_is_body, entity, sphere, center, radius, kinematic, rod, rod_index)
    for b in range(world.num_bodies):
        start, count = world.body_sphere_start[b], world.body_sphere_count[b]
        for s in range(start, start + count):
            c = world.body_x[b] + quat_rotate(world.body_q[b], world.sphere_offset[s])
            spheres.append((True, b, s, c, world.sphere_radius[s], world.body_inv_mass[b] == 0.0, -1, -1))
    for p in range(world.num_particles):
        spheres.append((False, p, -1, world.particle_x[p], world.particle_radius[p],
                        world.particle_inv_mass[p] == 0.0, world.particle_rod[p], world.particle_rod_index[p]))
    out = []
    for a in range(len(spheres)):
        for b in range(a + 1, len(spheres)):
            A, B = spheres[a], spheres[b]
            if A[0] and B[0] and A[1] == B[1]:
                continue
            if A[5] and B[5]:
                continue
            if not A[0] and not B[0] and A[6] >= 0 and A[6] == B[6] and abs(A[7] - B[7]) <= 1:
                continue
            d = B[3] - A[3]
            dist = np.linalg.norm(d)
            if dist - A[4] - B[4] >= margin:
                continue
            n = d / dist if dist >= 1e-12 else np.array([0.0, 0.0, 1.0])
            if A[0] and B[0]:
                out.append((K.KIND_RIGID_RIGID, A[1], B[1], A[2], B[2], tuple(n)))
            elif A[0]:
                out.append((K.KIND_RIGID_PARTICLE, A[1], B[1], A[2], -1, tuple(n)))
            else:
                out.append((K.KIND_PARTICLE_PARTICLE, A[1], B[1], -1, -1, tuple(n)))
    if world.ground is not None:
        pn = np.asarray(world.ground.normal)
        for A in spheres:
            if A[5]:
                continue
            if A[3] @ pn - world.ground.offset - A[4] < margin:
                kind = K.KIND_BODY_PLANE if A[0] else K.KIND_PARTICLE_PLANE
                out.append((kind, -1, A[1], -1, A[2], tuple(pn)))
    return sorted(out)
