"""The substep loop: collect contacts, predict, Jacobi-solve, update velocities."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ..math3d import DegenerateIncrementWarning
from . import _kernels as K
from .state import SimConfig, World

BRUTE_FORCE_ENTITY_LIMIT = 64


class SkippedConstraintWarning(RuntimeWarning):
    """A constraint with no finite-mass participant was skipped during a step."""


@dataclass
class ExternalForces:
    """Per-entity wrenches held constant over one step (world frame, SI units)."""

    body_force: np.ndarray
    body_torque: np.ndarray
    particle_force: np.ndarray

    @classmethod
    def zeros(cls, world: World) -> "ExternalForces":
        return cls(np.zeros((world.num_bodies, 3)), np.zeros((world.num_bodies, 3)),
                   np.zeros((world.num_particles, 3)))

    def __add__(self, other: "ExternalForces") -> "ExternalForces":
        return ExternalForces(self.body_force + other.body_force, self.body_torque + other.body_torque,
                              self.particle_force + other.particle_force)


def _plane(world: World):
    if world.ground is None:
        return False, np.array([0.0, 0.0, 1.0]), 0.0
    return True, np.asarray(world.ground.normal, dtype=float), float(world.ground.offset)


def _forces(world: World, external: ExternalForces | None):
    if external is None:
        external = ExternalForces.zeros(world)
    return (np.ascontiguousarray(external.body_force, dtype=float).reshape(world.num_bodies, 3),
            np.ascontiguousarray(external.body_torque, dtype=float).reshape(world.num_bodies, 3),
            np.ascontiguousarray(external.particle_force, dtype=float).reshape(world.num_particles, 3))


def predict_states(world: World, h: float, gravity=(0.0, 0.0, -9.81), external: ExternalForces | None = None):
    """Semi-implicit Euler prediction over ``h`` seconds.

    Dynamic entities get ``v += h (g + f/m)``, ``x += h v`` and
    ``q = normalize(q + h/2 [ω, 0] q)``; kinematic bodies jump to their
    targets. The pre-prediction state is cached on the world for
    :func:`update_velocities`.
    """
    if h <= 0:
        raise ValueError("substep duration must be positive")
    bf, bt, pf = _forces(world, external)
    prev = (np.empty_like(world.body_x), np.empty_like(world.body_q), np.empty_like(world.particle_x),
            np.empty_like(world.segment_q))
    K.predict(
        float(h), 1.0, np.asarray(gravity, dtype=float),
        world.body_x, world.body_v, world.body_q, world.body_w, world.body_inv_mass, world.body_inv_inertia,
        world.body_x.copy(), world.body_q.copy(), world.body_target_x, world.body_target_q, bf, bt,
        prev[0], prev[1],
        world.particle_x, world.particle_v, world.particle_inv_mass, pf, prev[2],
        world.segment_q, world.segment_w, world.segment_inv_inertia, prev[3],
    )
    world._prev_state = prev


def update_velocities(world: World, h: float, damping: float = 1.0):
    """Finite-difference velocities from the cached pre-prediction state, then damp."""
    prev = getattr(world, "_prev_state", None)
    if prev is None:
        raise RuntimeError("update_velocities needs a preceding predict_states call")
    K.update_velocities(
        float(h), float(damping),
        world.body_x, world.body_v, world.body_q, world.body_w, world.body_inv_mass, prev[0], prev[1],
        world.particle_x, world.particle_v, world.particle_inv_mass, prev[2],
        world.segment_q, world.segment_w, world.segment_inv_inertia, prev[3],
    )


def step(world: World, config: SimConfig | None = None, external_forces: ExternalForces | None = None):
    """Advance ``world`` by ``config.dt``.

    Kinematic bodies sweep linearly from their current pose to the target set
    with :meth:`World.set_kinematic_target`. External wrenches act during
    every prediction. Constraints without any finite-mass participant are
    skipped with a :class:`SkippedConstraintWarning` rather than aborting.
    """
    config = config or SimConfig()
    if world.num_bodies == 0 and world.num_particles == 0:
        world.time += config.dt
        return
    bf, bt, pf = _forces(world, external_forces)
    has_plane, pn, pd = _plane(world)
    skipped, degenerate = K.step_kernel(
        float(config.dt), int(config.num_substeps), int(config.solver_iterations),
        np.asarray(config.gravity, dtype=float), float(config.velocity_damping),
        float(config.effective_friction), float(config.contact_margin), BRUTE_FORCE_ENTITY_LIMIT,
        world.body_x, world.body_v, world.body_q, world.body_w, world.body_inv_mass, world.body_inv_inertia,
        world.body_bound, world.body_sphere_start, world.body_sphere_count,
        world.body_target_x, world.body_target_q, bf, bt,
        world.sphere_offset, world.sphere_radius,
        world.particle_x, world.particle_v, world.particle_inv_mass, world.particle_radius,
        world.particle_rod, world.particle_rod_index, pf,
        world.segment_q, world.segment_w, world.segment_inv_inertia, world.segment_p0, world.segment_p1,
        world.segment_rest_length,
        world.bend_s0, world.bend_s1, world.bend_rest, world.bend_stiffness,
        has_plane, pn, pd,
    )
    world.time += config.dt
    if skipped:
        warnings.warn(f"{skipped} singular constraint solves skipped", SkippedConstraintWarning, stacklevel=2)
    if degenerate:
        warnings.warn(f"{degenerate} degenerate quaternion updates ignored", DegenerateIncrementWarning,
                      stacklevel=2)
