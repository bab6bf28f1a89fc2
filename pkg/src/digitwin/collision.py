"""Contact generation: uniform-grid broad phase and sphere/plane narrow phase."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pbd import _kernels as K
from .pbd.state import GroundPlane  # noqa: F401  (public home of the type)

DEFAULT_MARGIN = 5e-4

KIND_NAMES = {
    K.KIND_RIGID_RIGID: "rigid-rigid",
    K.KIND_RIGID_PARTICLE: "rigid-particle",
    K.KIND_PARTICLE_PARTICLE: "particle-particle",
    K.KIND_BODY_PLANE: "entity-plane",
    K.KIND_PARTICLE_PLANE: "entity-plane",
}


@dataclass
class ContactPair:
    """One narrow-phase contact.

    ``n`` points from entity ``i`` toward entity ``j``. For plane contacts the
    plane is always side ``i`` (index -1). ``sphere_i``/``sphere_j`` index the
    world's rigid-body collision spheres (-1 for particles and planes).
    """

    kind: str
    i: int
    j: int
    n: np.ndarray
    b_i: np.ndarray
    b_j: np.ndarray
    r_i: np.ndarray
    r_j: np.ndarray
    sphere_i: int = -1
    sphere_j: int = -1
    code: int = -1

    @property
    def gap(self) -> float:
        """Signed separation ``n · (b_j - b_i)``; negative when penetrating."""
        return float(self.n @ (self.b_j - self.b_i))


def broad_phase(centers, radii, cell_size: float) -> np.ndarray:
    """Candidate pairs from a uniform spatial hash.

    Returns an ``(m, 2)`` array of index pairs ``i < j`` (sorted) whose grid
    cells touch. With ``cell_size >= 2 * max(radii)`` this is a superset of
    all overlapping pairs.
    """
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    centers = np.ascontiguousarray(centers, dtype=float).reshape(-1, 3)
    if len(centers) < 2:
        return np.empty((0, 2), dtype=np.int64)
    pairs = K.spatial_hash_pairs(centers, float(cell_size))
    if len(pairs) == 0:
        return pairs
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return pairs[order]


def default_cell_size(radii) -> float:
    return 2.0 * float(np.max(radii))


def _plane_arrays(world):
    if world.ground is None:
        return False, np.array([0.0, 0.0, 1.0]), 0.0
    return True, np.asarray(world.ground.normal, dtype=float), float(world.ground.offset)


def contact_rows(world, margin: float = DEFAULT_MARGIN, brute_force_limit: int = 64) -> np.ndarray:
    """Raw contact rows ``(kind, i, j, sphere_i, sphere_j)`` as used by the stepper."""
    has_plane, pn, pd = _plane_arrays(world)
    return K.collect_contacts(
        world.body_x, world.body_q, world.body_inv_mass, world.body_bound, world.body_sphere_start,
        world.body_sphere_count, world.sphere_offset, world.sphere_radius,
        world.particle_x, world.particle_inv_mass, world.particle_radius, world.particle_rod,
        world.particle_rod_index, has_plane, pn, pd, float(margin), int(brute_force_limit),
    )


def collect_collision_pairs(world, margin: float = DEFAULT_MARGIN, brute_force_limit: int = 64) -> list[ContactPair]:
    """All sphere-sphere and sphere-plane contacts within ``margin``.

    Rigid-body spheres are placed through their body pose. Spheres of one
    body, adjacent particles of one rod and pairs of two kinematic entities
    are excluded. The output is sorted by (kind, i, j, sphere_i, sphere_j).
    """
    if margin < 0:
        raise ValueError("margin must be non-negative")
    rows = contact_rows(world, margin, brute_force_limit)
    has_plane, pn, pd = _plane_arrays(world)
    if len(rows):
        rows = rows[np.lexsort(rows.T[::-1])]
    sw = np.empty((world.num_spheres, 3))
    K.sphere_world_centers(world.body_x, world.body_q, world.body_sphere_start, world.body_sphere_count,
                           world.sphere_offset, sw)
    pairs = []
    for row in rows:
        n, _gap, bi, bj = K.contact_geometry(row, sw, world.sphere_radius, world.particle_x,
                                             world.particle_radius, pn, pd)
        kind = int(row[0])
        i, j = int(row[1]), int(row[2])
        bi = np.array(bi)
        bj = np.array(bj)
        if kind in (K.KIND_BODY_PLANE, K.KIND_PARTICLE_PLANE):
            r_i = np.zeros(3)
        elif kind == K.KIND_PARTICLE_PARTICLE:
            r_i = bi - world.particle_x[i]
        else:
            r_i = bi - world.body_x[i]
        if kind in (K.KIND_RIGID_RIGID, K.KIND_BODY_PLANE):
            r_j = bj - world.body_x[j]
        else:
            r_j = bj - world.particle_x[j]
        pairs.append(ContactPair(
            kind=KIND_NAMES[kind], i=i, j=j, n=np.array(n), b_i=bi, b_j=bj, r_i=r_i, r_j=r_j,
            sphere_i=int(row[3]), sphere_j=int(row[4]), code=kind,
        ))
    return pairs
