"""State containers for the unified PBD world."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from ..math3d import quat_identity, quat_normalize, quat_to_matrix


@dataclass(frozen=True)
class GroundPlane:
    """Half-space ``normal · x >= offset``."""

    normal: tuple = (0.0, 0.0, 1.0)
    offset: float = 0.0

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        norm = np.linalg.norm(n)
        if not np.isfinite(norm) or norm == 0.0:
            raise ValueError("ground plane normal must be non-zero")
        object.__setattr__(self, "normal", tuple(float(v) for v in n / norm))

    def height(self, points):
        return np.asarray(points, dtype=float) @ np.asarray(self.normal) - self.offset


@dataclass
class ParticleState:
    mass: float
    position: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 0.005

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(3)
        if self.radius <= 0:
            raise ValueError("particle radius must be positive")
        if self.mass < 0:
            raise ValueError("particle mass must be non-negative")

    @property
    def inv_mass(self) -> float:
        """``1/mass``; a zero (or infinite) mass marks a kinematic particle."""
        return 0.0 if self.mass == 0.0 or np.isinf(self.mass) else 1.0 / self.mass

    @classmethod
    def kinematic(cls, position, radius=0.005):
        return cls(mass=np.inf, position=position, radius=radius)


@dataclass
class RigidBodyState:
    """One rigid object: COM pose, velocities, inertia and its collision spheres.

    ``inertia_body`` is about the center of mass in the body frame; the sphere
    offsets live in the same frame. ``mass = inf`` makes the body kinematic.
    """

    mass: float
    inertia_body: np.ndarray
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=quat_identity)
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sphere_offsets: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    sphere_radii: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.inertia_body = np.asarray(self.inertia_body, dtype=float).reshape(3, 3)
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.orientation = quat_normalize(np.asarray(self.orientation, dtype=float).reshape(4))
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(3)
        self.angular_velocity = np.asarray(self.angular_velocity, dtype=float).reshape(3)
        self.sphere_offsets = np.asarray(self.sphere_offsets, dtype=float).reshape(-1, 3)
        self.sphere_radii = np.broadcast_to(
            np.asarray(self.sphere_radii, dtype=float), (len(self.sphere_offsets),)
        ).copy()

    @property
    def kinematic(self) -> bool:
        return self.mass == 0.0 or np.isinf(self.mass)

    @property
    def inv_mass(self) -> float:
        return 0.0 if self.kinematic else 1.0 / self.mass

    @property
    def inv_inertia_body(self) -> np.ndarray:
        if self.kinematic:
            return np.zeros((3, 3))
        return np.linalg.inv(self.inertia_body)

    def inv_inertia_world(self) -> np.ndarray:
        r = quat_to_matrix(self.orientation)
        return r @ self.inv_inertia_body @ r.T

    @classmethod
    def kinematic_body(cls, position, orientation=None, sphere_offsets=None, sphere_radii=0.005):
        offsets = np.zeros((1, 3)) if sphere_offsets is None else sphere_offsets
        return cls(mass=np.inf, inertia_body=np.eye(3), position=position,
                   orientation=quat_identity() if orientation is None else orientation,
                   sphere_offsets=offsets, sphere_radii=sphere_radii)


@dataclass
class RodState:
    """A Cosserat rod: centerline particles plus one oriented frame per segment.

    ``rest_darboux`` holds Ω⁰ (1/m) for each adjacent segment pair.
    ``segment_inv_inertia`` is the scalar rotational inverse inertia used by
    the simplified rod constraints.
    """

    particles: list
    segment_orientations: np.ndarray
    segment_inv_inertia: np.ndarray
    rest_lengths: np.ndarray
    rest_darboux: np.ndarray
    radius: float
    segment_angular_velocities: np.ndarray | None = None
    bend_stiffness: float = 1.0

    def __post_init__(self):
        n = len(self.particles)
        self.segment_orientations = quat_normalize(np.asarray(self.segment_orientations, dtype=float).reshape(-1, 4))
        self.segment_inv_inertia = np.broadcast_to(
            np.asarray(self.segment_inv_inertia, dtype=float), (n - 1,)
        ).copy()
        self.rest_lengths = np.asarray(self.rest_lengths, dtype=float).reshape(-1)
        self.rest_darboux = np.asarray(self.rest_darboux, dtype=float).reshape(-1, 3)
        if self.segment_angular_velocities is None:
            self.segment_angular_velocities = np.zeros((n - 1, 3))
        problems = []
        if n < 2:
            problems.append("rod needs at least two particles")
        if len(self.segment_orientations) != n - 1:
            problems.append("segments.count must equal particles.count - 1")
        if len(self.rest_lengths) != n - 1:
            problems.append("one rest length per segment required")
        if len(self.rest_darboux) != max(n - 2, 0):
            problems.append("rest_darboux.count must equal segments.count - 1")
        if np.any(self.rest_lengths <= 0):
            problems.append("rest lengths must be positive")
        if not 0.0 < self.bend_stiffness <= 1.0:
            problems.append("bend_stiffness must lie in (0, 1]")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def num_segments(self) -> int:
        return len(self.particles) - 1

    def rest_average_length(self, pair: int) -> float:
        return 0.5 * (self.rest_lengths[pair] + self.rest_lengths[pair + 1])


@dataclass
class SimConfig:
    """Integrator settings. One call to :func:`step` advances ``dt`` seconds."""

    dt: float = 0.04
    num_substeps: int = 10
    solver_iterations: int = 10
    gravity: tuple = (0.0, 0.0, -9.81)
    velocity_damping: float = 0.999
    friction: float = 0.3
    friction_enabled: bool = True
    contact_margin: float = 5e-4

    def __post_init__(self):
        problems = []
        if not self.dt > 0:
            problems.append("dt must be positive")
        if self.num_substeps < 1:
            problems.append("num_substeps must be >= 1")
        if self.solver_iterations < 1:
            problems.append("solver_iterations must be >= 1")
        if not 0.0 <= self.velocity_damping <= 1.0:
            problems.append("velocity_damping must lie in [0, 1]")
        if self.friction < 0:
            problems.append("friction must be non-negative")
        if self.contact_margin < 0:
            problems.append("contact_margin must be non-negative")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def effective_friction(self) -> float:
        return self.friction if self.friction_enabled else 0.0


@dataclass
class DeltaAccumulator:
    """Per-entity delta sums and contribution counts for one Jacobi iteration."""

    particle_dx: np.ndarray
    particle_count: np.ndarray
    body_dx: np.ndarray
    body_dq: np.ndarray
    body_count: np.ndarray
    segment_dq: np.ndarray
    segment_count: np.ndarray

    @classmethod
    def zeros(cls, num_particles=0, num_bodies=0, num_segments=0):
        return cls(
            particle_dx=np.zeros((num_particles, 3)), particle_count=np.zeros(num_particles),
            body_dx=np.zeros((num_bodies, 3)), body_dq=np.zeros((num_bodies, 4)), body_count=np.zeros(num_bodies),
            segment_dq=np.zeros((num_segments, 4)), segment_count=np.zeros(num_segments),
        )

    def clear(self):
        for arr in (self.particle_dx, self.particle_count, self.body_dx, self.body_dq, self.body_count,
                    self.segment_dq, self.segment_count):
            arr[...] = 0.0


class World:
    """Struct-of-arrays store of every simulated entity.

    Bodies own contiguous runs of collision spheres; rods own contiguous runs
    of particles and segments. Entities are appended with the ``add_*``
    methods and addressed by the returned index.
    """

    def __init__(self, ground: GroundPlane | None = None):
        self.ground = ground
        self.body_names: list[str] = []
        self.rod_names: list[str] = []
        self.body_x = np.zeros((0, 3))
        self.body_v = np.zeros((0, 3))
        self.body_q = np.zeros((0, 4))
        self.body_w = np.zeros((0, 3))
        self.body_mass = np.zeros(0)
        self.body_inv_mass = np.zeros(0)
        self.body_inertia = np.zeros((0, 3, 3))
        self.body_inv_inertia = np.zeros((0, 3, 3))
        self.body_bound = np.zeros(0)
        self.body_sphere_start = np.zeros(0, dtype=np.int64)
        self.body_sphere_count = np.zeros(0, dtype=np.int64)
        self.body_target_x = np.zeros((0, 3))
        self.body_target_q = np.zeros((0, 4))
        self.sphere_offset = np.zeros((0, 3))
        self.sphere_radius = np.zeros(0)
        self.particle_x = np.zeros((0, 3))
        self.particle_v = np.zeros((0, 3))
        self.particle_mass = np.zeros(0)
        self.particle_inv_mass = np.zeros(0)
        self.particle_radius = np.zeros(0)
        self.particle_rod = np.zeros(0, dtype=np.int64)
        self.particle_rod_index = np.zeros(0, dtype=np.int64)
        self.segment_q = np.zeros((0, 4))
        self.segment_w = np.zeros((0, 3))
        self.segment_inv_inertia = np.zeros(0)
        self.segment_p0 = np.zeros(0, dtype=np.int64)
        self.segment_p1 = np.zeros(0, dtype=np.int64)
        self.segment_rest_length = np.zeros(0)
        self.bend_s0 = np.zeros(0, dtype=np.int64)
        self.bend_s1 = np.zeros(0, dtype=np.int64)
        self.bend_rest = np.zeros((0, 3))
        self.bend_stiffness = np.zeros(0)
        self.rod_particle_start: list[int] = []
        self.rod_segment_start: list[int] = []
        self.rod_bend_start: list[int] = []
        self.rod_radius: list[float] = []
        self.time = 0.0

    # --- sizes --------------------------------------------------------------------
    @property
    def num_bodies(self) -> int:
        return len(self.body_x)

    @property
    def num_particles(self) -> int:
        return len(self.particle_x)

    @property
    def num_segments(self) -> int:
        return len(self.segment_q)

    @property
    def num_rods(self) -> int:
        return len(self.rod_particle_start)

    @property
    def num_spheres(self) -> int:
        return len(self.sphere_radius) + self.num_particles

    # --- construction -------------------------------------------------------------
    def add_body(self, body: RigidBodyState, name: str | None = None) -> int:
        if len(body.sphere_offsets) == 0:
            raise ValueError("a rigid body needs at least one collision sphere")
        idx = self.num_bodies
        self.body_names.append(name or f"body{idx}")
        self.body_x = np.vstack([self.body_x, body.position])
        self.body_v = np.vstack([self.body_v, body.velocity])
        self.body_q = np.vstack([self.body_q, body.orientation])
        self.body_w = np.vstack([self.body_w, body.angular_velocity])
        self.body_mass = np.append(self.body_mass, body.mass)
        self.body_inv_mass = np.append(self.body_inv_mass, body.inv_mass)
        self.body_inertia = np.concatenate([self.body_inertia, body.inertia_body[None]])
        self.body_inv_inertia = np.concatenate([self.body_inv_inertia, body.inv_inertia_body[None]])
        bound = np.max(np.linalg.norm(body.sphere_offsets, axis=1) + body.sphere_radii)
        self.body_bound = np.append(self.body_bound, bound)
        self.body_sphere_start = np.append(self.body_sphere_start, len(self.sphere_radius))
        self.body_sphere_count = np.append(self.body_sphere_count, len(body.sphere_radii))
        self.sphere_offset = np.vstack([self.sphere_offset, body.sphere_offsets])
        self.sphere_radius = np.append(self.sphere_radius, body.sphere_radii)
        self.body_target_x = np.vstack([self.body_target_x, body.position])
        self.body_target_q = np.vstack([self.body_target_q, body.orientation])
        return idx

    def add_particle(self, particle: ParticleState, rod: int = -1, rod_index: int = -1) -> int:
        idx = self.num_particles
        self.particle_x = np.vstack([self.particle_x, particle.position])
        self.particle_v = np.vstack([self.particle_v, particle.velocity])
        self.particle_mass = np.append(self.particle_mass, particle.mass)
        self.particle_inv_mass = np.append(self.particle_inv_mass, particle.inv_mass)
        self.particle_radius = np.append(self.particle_radius, particle.radius)
        self.particle_rod = np.append(self.particle_rod, rod)
        self.particle_rod_index = np.append(self.particle_rod_index, rod_index)
        return idx

    def add_rod(self, rod: RodState, name: str | None = None) -> int:
        ridx = self.num_rods
        self.rod_names.append(name or f"rod{ridx}")
        p0 = self.num_particles
        s0 = self.num_segments
        self.rod_particle_start.append(p0)
        self.rod_segment_start.append(s0)
        self.rod_bend_start.append(len(self.bend_s0))
        self.rod_radius.append(float(rod.radius))
        for k, p in enumerate(rod.particles):
            self.add_particle(p, rod=ridx, rod_index=k)
        ns = rod.num_segments
        self.segment_q = np.vstack([self.segment_q, rod.segment_orientations])
        self.segment_w = np.vstack([self.segment_w, rod.segment_angular_velocities])
        self.segment_inv_inertia = np.append(self.segment_inv_inertia, rod.segment_inv_inertia)
        self.segment_p0 = np.append(self.segment_p0, p0 + np.arange(ns))
        self.segment_p1 = np.append(self.segment_p1, p0 + 1 + np.arange(ns))
        self.segment_rest_length = np.append(self.segment_rest_length, rod.rest_lengths)
        nbend = ns - 1
        self.bend_s0 = np.append(self.bend_s0, s0 + np.arange(nbend))
        self.bend_s1 = np.append(self.bend_s1, s0 + 1 + np.arange(nbend))
        rest_imag = np.array([0.5 * rod.rest_average_length(k) * rod.rest_darboux[k] for k in range(nbend)])
        self.bend_rest = np.vstack([self.bend_rest, rest_imag.reshape(-1, 3)])
        self.bend_stiffness = np.append(self.bend_stiffness, np.full(nbend, rod.bend_stiffness))
        return ridx

    # --- views ---------------------------------------------------------------------
    def body(self, i: int) -> RigidBodyState:
        start, count = self.body_sphere_start[i], self.body_sphere_count[i]
        return RigidBodyState(
            mass=self.body_mass[i], inertia_body=self.body_inertia[i].copy(), position=self.body_x[i].copy(),
            orientation=self.body_q[i].copy(), velocity=self.body_v[i].copy(),
            angular_velocity=self.body_w[i].copy(),
            sphere_offsets=self.sphere_offset[start:start + count].copy(),
            sphere_radii=self.sphere_radius[start:start + count].copy(),
        )

    def particle(self, i: int) -> ParticleState:
        return ParticleState(mass=self.particle_mass[i], position=self.particle_x[i].copy(),
                             velocity=self.particle_v[i].copy(), radius=self.particle_radius[i])

    def rod_slices(self, r: int):
        """``(particle_slice, segment_slice, bend_slice)`` of rod ``r``."""
        p_end = self.rod_particle_start[r + 1] if r + 1 < self.num_rods else self.num_particles
        s_end = self.rod_segment_start[r + 1] if r + 1 < self.num_rods else self.num_segments
        b_end = self.rod_bend_start[r + 1] if r + 1 < self.num_rods else len(self.bend_s0)
        return (slice(self.rod_particle_start[r], p_end), slice(self.rod_segment_start[r], s_end),
                slice(self.rod_bend_start[r], b_end))

    def rod(self, r: int) -> RodState:
        ps, ss, bs = self.rod_slices(r)
        lengths = self.segment_rest_length[ss]
        lavg = 0.5 * (lengths[:-1] + lengths[1:])
        return RodState(
            particles=[self.particle(i) for i in range(ps.start, ps.stop)],
            segment_orientations=self.segment_q[ss].copy(),
            segment_inv_inertia=self.segment_inv_inertia[ss].copy(),
            rest_lengths=lengths.copy(),
            rest_darboux=self.bend_rest[bs] * (2.0 / lavg)[:, None],
            radius=self.rod_radius[r],
            segment_angular_velocities=self.segment_w[ss].copy(),
            bend_stiffness=float(self.bend_stiffness[bs][0]) if bs.stop > bs.start else 1.0,
        )

    def body_index(self, name: str) -> int:
        return self.body_names.index(name)

    def rod_index(self, name: str) -> int:
        return self.rod_names.index(name)

    def sphere_centers(self, body: int) -> np.ndarray:
        from ..math3d import quat_rotate

        start, count = self.body_sphere_start[body], self.body_sphere_count[body]
        return self.body_x[body] + quat_rotate(self.body_q[body], self.sphere_offset[start:start + count])

    def set_kinematic_target(self, body: int, position, orientation=None):
        """Pose a kinematic body should reach at the end of the next step."""
        if self.body_inv_mass[body] != 0.0:
            raise ValueError(f"body {body} is not kinematic")
        self.body_target_x[body] = np.asarray(position, dtype=float)
        if orientation is not None:
            self.body_target_q[body] = quat_normalize(orientation)

    def teleport_kinematic(self, body: int, position, orientation=None):
        """Place a kinematic body immediately (no swept motion)."""
        self.set_kinematic_target(body, position, orientation)
        self.body_x[body] = self.body_target_x[body]
        self.body_q[body] = self.body_target_q[body]

    def kinetic_energy(self) -> float:
        e = 0.0
        dyn = self.body_inv_mass > 0
        if np.any(dyn):
            e += 0.5 * np.sum(self.body_mass[dyn] * np.sum(self.body_v[dyn] ** 2, axis=1))
            r = quat_to_matrix(self.body_q[dyn])
            iw = r @ self.body_inertia[dyn] @ np.transpose(r, (0, 2, 1))
            w = self.body_w[dyn]
            e += 0.5 * np.sum(np.einsum("bi,bij,bj->b", w, iw, w))
        pdyn = self.particle_inv_mass > 0
        if np.any(pdyn):
            e += 0.5 * np.sum(self.particle_mass[pdyn] * np.sum(self.particle_v[pdyn] ** 2, axis=1))
        sdyn = self.segment_inv_inertia > 0
        if np.any(sdyn):
            e += 0.5 * np.sum(np.sum(self.segment_w[sdyn] ** 2, axis=1) / self.segment_inv_inertia[sdyn])
        return float(e)

    def copy(self) -> "World":
        return copy.deepcopy(self)
