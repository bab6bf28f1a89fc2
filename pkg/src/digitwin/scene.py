"""Synthetic scene construction.

Objects are described by closed-form occupancy tests, filled with a regular
grid of equal spheres, and given mass properties by summing over those
spheres. Ropes come from a sampled centerline. Both kinds receive surface
splats whose colors follow a texture descriptor, anchored to the frames
that carry them during simulation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .math3d import quat_from_axis_angle, quat_identity, quat_multiply, quat_normalize, quat_rotate
from .pbd.constraints import compute_darboux
from .pbd.state import GroundPlane, ParticleState, RigidBodyState, RodState, SimConfig, World
from .splat import Camera, GaussianSet

SPHERE_RADIUS = 0.005
GRID_PITCH = 0.01
_FACE_DIRS = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=float)


class EmptyObjectError(ValueError):
    """No sphere center survived the occupancy and ground tests."""


class TooShortCurveError(ValueError):
    """The requested rope spacing is smaller than the rope diameter."""


class SceneValidationError(ValueError):
    """A scene description violates one or more invariants."""


# --- shapes ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    """Axis-aligned box centered at ``center`` in the object frame."""

    extents: tuple
    center: tuple = (0.0, 0.0, 0.0)

    def inside(self, p):
        half = 0.5 * np.asarray(self.extents, float)
        return np.all(np.abs(np.asarray(p) - np.asarray(self.center)) <= half + 1e-12, axis=-1)

    def bounds(self):
        half = 0.5 * np.asarray(self.extents, float)
        c = np.asarray(self.center, float)
        return c - half, c + half

    def validate(self):
        return [] if np.all(np.asarray(self.extents) >= 0) else ["box extents must be non-negative"]


@dataclass(frozen=True)
class Cylinder:
    """Cylinder along the object z axis."""

    radius: float
    height: float
    center: tuple = (0.0, 0.0, 0.0)

    def inside(self, p):
        d = np.asarray(p) - np.asarray(self.center)
        return (d[..., 0] ** 2 + d[..., 1] ** 2 <= self.radius**2 + 1e-12) & (np.abs(d[..., 2]) <= 0.5 * self.height
                                                                              + 1e-12)

    def bounds(self):
        c = np.asarray(self.center, float)
        half = np.array([self.radius, self.radius, 0.5 * self.height])
        return c - half, c + half

    def validate(self):
        return [] if self.radius >= 0 and self.height >= 0 else ["cylinder radius/height must be non-negative"]


@dataclass(frozen=True)
class UnionOfBoxes:
    boxes: tuple

    def inside(self, p):
        p = np.asarray(p)
        out = np.zeros(p.shape[:-1], dtype=bool)
        for b in self.boxes:
            out |= b.inside(p)
        return out

    def bounds(self):
        lo = np.min([b.bounds()[0] for b in self.boxes], axis=0)
        hi = np.max([b.bounds()[1] for b in self.boxes], axis=0)
        return lo, hi

    def validate(self):
        problems = [] if self.boxes else ["union needs at least one box"]
        for b in self.boxes:
            problems += b.validate()
        return problems


def t_shape(bar=(0.12, 0.03), stem=(0.03, 0.09), height=0.03) -> UnionOfBoxes:
    """A planar T: a bar along x on top (+y) of a stem along y, origin at the bounding-box center."""
    total_y = bar[1] + stem[1]
    bar_box = Box((bar[0], bar[1], height), (0.0, 0.5 * total_y - 0.5 * bar[1], 0.0))
    stem_box = Box((stem[0], stem[1], height), (0.0, -0.5 * total_y + 0.5 * stem[1], 0.0))
    return UnionOfBoxes((bar_box, stem_box))


# --- textures ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Texture:
    """Color source for splats.

    ``kind`` is ``"solid"`` (``colors[0]``), ``"checker"`` (alternating
    ``colors[0]``/``colors[1]`` on cubes of edge ``size`` in the object frame)
    or ``"palette"`` (one random color per sphere drawn with ``seed``).
    """

    kind: str = "checker"
    colors: tuple = ((0.9, 0.2, 0.1), (0.1, 0.3, 0.9))
    size: float = 0.02
    seed: int = 0

    def validate(self):
        problems = []
        if self.kind not in ("solid", "checker", "palette"):
            problems.append(f"unknown texture kind {self.kind!r}")
        cols = np.asarray(self.colors, float).reshape(-1, 3)
        if len(cols) == 0 or np.any((cols < 0) | (cols > 1)):
            problems.append("texture colors must be 0-1 RGB triples")
        if self.kind == "checker" and (len(cols) < 2 or self.size <= 0):
            problems.append("checker texture needs two colors and size > 0")
        return problems

    def color_at(self, local_points, sphere_ids):
        cols = np.asarray(self.colors, float).reshape(-1, 3)
        if self.kind == "solid":
            return np.tile(cols[0], (len(local_points), 1))
        if self.kind == "checker":
            cell = np.floor(np.asarray(local_points) / self.size + 1e-9).astype(np.int64).sum(axis=1)
            return cols[cell % 2]
        rng = np.random.default_rng(self.seed)
        palette = rng.uniform(0.05, 0.95, size=(int(np.max(sphere_ids)) + 1, 3))
        return palette[sphere_ids]


# --- specs --------------------------------------------------------------------------------


@dataclass
class ObjectSpec:
    name: str
    shape: object
    density: float = 500.0
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=quat_identity)
    texture: Texture = field(default_factory=Texture)

    def __post_init__(self):
        self.position = np.asarray(self.position, float).reshape(3)
        self.orientation = quat_normalize(np.asarray(self.orientation, float).reshape(4))

    def validate(self):
        problems = [] if self.density > 0 else [f"object {self.name}: density must be positive"]
        problems += [f"object {self.name}: {p}" for p in self.shape.validate() + self.texture.validate()]
        return problems


@dataclass
class RopeSpec:
    name: str
    centerline: np.ndarray
    radius: float = 0.005
    linear_density: float = 0.05
    segment_count: int = 15
    bend_stiffness: float = 1.0
    texture: Texture = field(default_factory=lambda: Texture(kind="checker", size=0.03))
    inv_inertia: float | None = None

    def __post_init__(self):
        self.centerline = np.asarray(self.centerline, float).reshape(-1, 3)

    def validate(self):
        problems = []
        if self.segment_count < 2:
            problems.append("segment_count must be >= 2")
        if self.radius <= 0:
            problems.append("radius must be positive")
        if self.linear_density <= 0:
            problems.append("linear density must be positive")
        if len(self.centerline) < 2 or np.any(np.linalg.norm(np.diff(self.centerline, axis=0), axis=1) <= 0):
            problems.append("centerline samples must be strictly ordered along arc length")
        if not 0 < self.bend_stiffness <= 1:
            problems.append("bend_stiffness must lie in (0, 1]")
        return [f"rope {self.name}: {p}" for p in problems + self.texture.validate()]


@dataclass
class PusherSpec:
    """Kinematic spherical pusher driven through time-stamped waypoints (linear interpolation)."""

    times: np.ndarray
    positions: np.ndarray
    radius: float = 0.01
    name: str = "pusher"

    def __post_init__(self):
        self.times = np.asarray(self.times, float).reshape(-1)
        self.positions = np.asarray(self.positions, float).reshape(-1, 3)

    def validate(self):
        problems = []
        if len(self.times) == 0 or len(self.times) != len(self.positions):
            problems.append("pusher script needs one position per timestamp")
        if np.any(np.diff(self.times) <= 0):
            problems.append("pusher script timestamps must be strictly increasing")
        if self.radius <= 0:
            problems.append("pusher radius must be positive")
        return problems

    def position_at(self, t: float) -> np.ndarray:
        return np.array([np.interp(t, self.times, self.positions[:, k]) for k in range(3)])


@dataclass
class SceneSpec:
    ground: GroundPlane | None = field(default_factory=GroundPlane)
    objects: list = field(default_factory=list)
    ropes: list = field(default_factory=list)
    pusher: PusherSpec | None = None
    cameras: list = field(default_factory=list)
    sim: dict = field(default_factory=dict)
    grid_pitch: float = GRID_PITCH
    sphere_radius: float = SPHERE_RADIUS
    splats_per_sphere: int = 4

    def validate(self):
        problems = []
        names = [o.name for o in self.objects] + [r.name for r in self.ropes]
        if self.pusher is not None:
            names.append(self.pusher.name)
            problems += self.pusher.validate()
        dup = sorted({n for n in names if names.count(n) > 1})
        if dup:
            problems.append(f"names must be unique: {dup}")
        for o in self.objects:
            problems += o.validate()
        for r in self.ropes:
            problems += r.validate()
        try:
            SimConfig(**self.sim)
        except (TypeError, ValueError) as exc:
            problems.append(f"sim: {exc}")
        if self.grid_pitch <= 0 or self.sphere_radius <= 0:
            problems.append("grid_pitch and sphere_radius must be positive")
        if self.splats_per_sphere < 1:
            problems.append("splats_per_sphere must be >= 1")
        return problems

    def check(self):
        problems = self.validate()
        if problems:
            raise SceneValidationError("; ".join(problems))
        return self

    def sim_config(self, **overrides) -> SimConfig:
        cfg = dict(self.sim)
        cfg.update(overrides)
        return SimConfig(**cfg)


# --- object construction ------------------------------------------------------------------


def fill_spheres(spec: ObjectSpec, grid_pitch: float = GRID_PITCH, radius: float = SPHERE_RADIUS,
                 ground: GroundPlane | None = None):
    """Regular grid of equal spheres inside the object's occupancy.

    The grid lives in the object frame and starts half a pitch inside the
    bounding-box minimum, so boxes whose extents are multiples of the pitch
    are tiled exactly. Centers below ``ground`` (after applying the object's
    initial pose) are dropped.

    Returns
    -------
    offsets : (N, 3) sphere centers in the object frame
    radii : (N,) sphere radii
    """
    if grid_pitch <= 0:
        raise ValueError("grid_pitch must be positive")
    lo, hi = spec.shape.bounds()
    ext = np.asarray(hi) - np.asarray(lo)
    counts = np.floor(ext / grid_pitch + 1e-9).astype(int)
    if np.any(counts <= 0):
        raise EmptyObjectError(f"object {spec.name!r} has no interior grid cell")
    axes = [lo[k] + grid_pitch * (np.arange(counts[k]) + 0.5) for k in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    pts = pts[spec.shape.inside(pts)]
    if ground is not None and len(pts):
        world = spec.position + quat_rotate(spec.orientation, pts)
        pts = pts[ground.height(world) >= -1e-12]
    if len(pts) == 0:
        raise EmptyObjectError(f"object {spec.name!r} produced no spheres")
    return pts, np.full(len(pts), float(radius))


def compute_mass_properties(offsets, radii, density: float):
    """Mass, center of mass and body inertia of a union of disjoint solid spheres."""
    offsets = np.asarray(offsets, float).reshape(-1, 3)
    radii = np.broadcast_to(np.asarray(radii, float), (len(offsets),))
    if len(offsets) == 0:
        raise EmptyObjectError("need at least one sphere")
    m = density * 4.0 / 3.0 * np.pi * radii**3
    mass = float(m.sum())
    com = (m[:, None] * offsets).sum(0) / mass
    d = offsets - com
    inertia = np.zeros((3, 3))
    inertia += np.eye(3) * np.sum(0.4 * m * radii**2)
    inertia += np.eye(3) * np.sum(m * np.sum(d * d, axis=1)) - np.einsum("n,ni,nj->ij", m, d, d)
    return mass, com, 0.5 * (inertia + inertia.T)


@dataclass
class BuiltObject:
    """A rigid body ready for a world, plus its frame bookkeeping."""

    body: RigidBodyState
    com_local: np.ndarray
    grid_offsets: np.ndarray


def build_object(spec: ObjectSpec, grid_pitch=GRID_PITCH, radius=SPHERE_RADIUS, ground=None,
                 density_scale: float = 1.0) -> BuiltObject:
    offsets, radii = fill_spheres(spec, grid_pitch, radius, ground)
    mass, com, inertia = compute_mass_properties(offsets, radii, spec.density * density_scale)
    body = RigidBodyState(mass=mass, inertia_body=inertia,
                          position=spec.position + quat_rotate(spec.orientation, com),
                          orientation=spec.orientation, sphere_offsets=offsets - com, sphere_radii=radii)
    return BuiltObject(body, com, offsets)


# --- ropes -----------------------------------------------------------------------------


def _min_rotation(a, b):
    """Shortest-arc quaternion taking unit vector ``a`` onto unit vector ``b``."""
    c = float(np.dot(a, b))
    if c < -1 + 1e-12:
        axis = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(axis) < 1e-6:
            axis = np.cross(a, [0.0, 1.0, 0.0])
        return quat_from_axis_angle(axis, np.pi)
    v = np.cross(a, b)
    return quat_normalize(np.array([v[0], v[1], v[2], 1.0 + c]))


def resample_curve(samples, count: int):
    """``count + 1`` points evenly spaced by arc length along a polyline."""
    samples = np.asarray(samples, float)
    seg = np.linalg.norm(np.diff(samples, axis=0), axis=1)
    s = np.r_[0.0, np.cumsum(seg)]
    if s[-1] <= 0:
        raise TooShortCurveError("curve has zero length")
    targets = np.linspace(0.0, s[-1], count + 1)
    return np.stack([np.interp(targets, s, samples[:, k]) for k in range(3)], -1), s[-1]


def discretize_rope(spec: RopeSpec) -> RodState:
    """Evenly spaced particles and parallel-transported segment frames along the centerline."""
    problems = spec.validate()
    if problems:
        raise SceneValidationError("; ".join(problems))
    pts, length = resample_curve(spec.centerline, spec.segment_count)
    if length / spec.segment_count < 2 * spec.radius:
        raise TooShortCurveError(
            f"rope {spec.name!r}: spacing {length / spec.segment_count:.4g} m < diameter {2 * spec.radius:.4g} m")
    d = np.diff(pts, axis=0)
    rest = np.linalg.norm(d, axis=1)
    tangents = d / rest[:, None]
    qs = [_min_rotation(np.array([0.0, 0.0, 1.0]), tangents[0])]
    for k in range(1, len(tangents)):
        qs.append(quat_multiply(_min_rotation(tangents[k - 1], tangents[k]), qs[-1]))
    qs = np.array(qs)
    share = np.zeros(len(pts))
    share[:-1] += 0.5 * rest
    share[1:] += 0.5 * rest
    masses = spec.linear_density * share
    particles = [ParticleState(mass=m, position=x, radius=spec.radius) for m, x in zip(masses, pts)]
    darboux = np.array([compute_darboux(qs[k], qs[k + 1], 0.5 * (rest[k] + rest[k + 1]))
                        for k in range(len(qs) - 1)]).reshape(-1, 3)
    if spec.inv_inertia is None:
        inv_inertia = 4.0 / (spec.linear_density * rest * rest**2)
    else:
        inv_inertia = np.full(len(rest), float(spec.inv_inertia))
    return RodState(particles=particles, segment_orientations=qs, segment_inv_inertia=inv_inertia,
                    rest_lengths=rest, rest_darboux=darboux, radius=spec.radius, bend_stiffness=spec.bend_stiffness)


# --- splats ---------------------------------------------------------------------------


def anchor_gaussians(gaussian_means, sphere_centers, chunk: int = 4096):
    """Nearest sphere center per splat (Euclidean); ties go to the lowest index."""
    g = np.asarray(gaussian_means, float).reshape(-1, 3)
    c = np.asarray(sphere_centers, float).reshape(-1, 3)
    if len(c) == 0:
        raise ValueError("need at least one sphere")
    out = np.empty(len(g), dtype=np.int64)
    for s in range(0, len(g), chunk):
        d2 = np.sum((g[s:s + chunk, None, :] - c[None]) ** 2, axis=-1)
        out[s:s + chunk] = np.argmin(d2, axis=1)
    return out


def _surface_faces(grid_offsets, pitch):
    """Per sphere, the list of face directions whose neighbor cell is empty."""
    keys = np.rint(grid_offsets / pitch * 2).astype(np.int64)
    occupied = {tuple(k) for k in keys}
    step = 2 * _FACE_DIRS.astype(np.int64)
    return [[f for f in range(6) if tuple(k + step[f]) not in occupied] for k in keys]


def _face_frame(f):
    n = _FACE_DIRS[f]
    return _min_rotation(np.array([0.0, 0.0, 1.0]), n)


def seed_object_gaussians(built: BuiltObject, texture: Texture, count_per_sphere: int = 4,
                          grid_pitch: float = GRID_PITCH, seed: int = 0, anchor_base: int = 0) -> GaussianSet:
    """Flat splats on the exposed faces of surface spheres.

    Each surface sphere emits ``count_per_sphere`` splats spread over its
    exposed faces, placed just inside the sphere surface with in-plane scale
    half the sphere radius. Offsets are stored relative to the sphere frame
    (sphere center, body orientation); anchors count from ``anchor_base``.
    """
    if count_per_sphere < 1:
        raise ValueError("count_per_sphere must be >= 1")
    rng = np.random.default_rng(seed)
    offsets = built.body.sphere_offsets
    radii = built.body.sphere_radii
    faces = _surface_faces(built.grid_offsets, grid_pitch)
    rows = []
    for s, fl in enumerate(faces):
        if not fl:
            continue
        r = radii[s]
        for k in range(count_per_sphere):
            f = fl[k % len(fl)]
            qf = _face_frame(f)
            jitter = rng.uniform(-0.4, 0.4, size=2) * r
            local = quat_rotate(qf, np.array([jitter[0], jitter[1], 0.8 * r]))
            rows.append((s, local, qf, r))
    if not rows:
        raise EmptyObjectError("object has no exposed surface")
    sid = np.array([r[0] for r in rows])
    local = np.array([r[1] for r in rows])
    relq = np.array([r[2] for r in rows])
    rad = np.array([r[3] for r in rows])
    body = built.body
    anchor_pos = body.position + quat_rotate(body.orientation, offsets)
    means = anchor_pos[sid] + quat_rotate(body.orientation, local)
    colors = texture.color_at(built.grid_offsets[sid] + local, sid)
    scales = np.stack([0.8 * rad, 0.8 * rad, 0.25 * rad], -1)
    return GaussianSet(means=means, quats=quat_multiply(np.tile(body.orientation, (len(sid), 1)), relq),
                       scales=scales, opacity=rng.uniform(0.7, 1.0, size=len(sid)), colors=colors,
                       anchor=anchor_base + sid, offset=local, rel_q=relq, particle=anchor_base + sid)


def seed_rope_gaussians(rod: RodState, texture: Texture, count_per_segment: int = 8, seed: int = 0,
                        anchor_base: int = 0, particle_base: int = 0) -> GaussianSet:
    """Splats around each rope segment, carried by the segment frame.

    The segment frame is centered at the segment midpoint with ``d₃`` along
    the segment. Each splat also records the closer end particle, which is
    where its share of the correction force goes.
    """
    rng = np.random.default_rng(seed)
    xs = np.array([p.position for p in rod.particles])
    rows = []
    for k in range(rod.num_segments):
        l = rod.rest_lengths[k]
        for j in range(count_per_segment):
            phi = 2 * np.pi * ((0.618 * j + rng.uniform(0.0, 0.1)) % 1.0)
            t = (j + 0.5) / count_per_segment - 0.5
            local = np.array([0.8 * rod.radius * np.cos(phi), 0.8 * rod.radius * np.sin(phi), t * l])
            rel = quat_from_axis_angle([0, 0, 1], phi)
            rows.append((k, local, rel, 0 if t < 0 else 1, t))
    seg = np.array([r[0] for r in rows])
    local = np.array([r[1] for r in rows])
    relq = np.array([r[2] for r in rows])
    end = np.array([r[3] for r in rows])
    mid = 0.5 * (xs[:-1] + xs[1:])
    q = rod.segment_orientations[seg]
    means = mid[seg] + quat_rotate(q, local)
    arc = np.r_[0.0, np.cumsum(rod.rest_lengths)]
    along = 0.5 * (arc[seg] + arc[seg + 1]) + local[:, 2]
    colors = texture.color_at(np.stack([along, np.zeros_like(along), np.zeros_like(along)], -1), seg)
    r = rod.radius
    scales = np.tile([0.5 * r, 0.5 * r, max(0.5 * r, 0.35 * float(np.mean(rod.rest_lengths)) / 2)], (len(seg), 1))
    return GaussianSet(means=means, quats=quat_multiply(q, relq), scales=scales,
                       opacity=rng.uniform(0.7, 1.0, size=len(seg)), colors=colors, anchor=anchor_base + seg,
                       offset=local, rel_q=relq, particle=particle_base + seg + end)


def seed_gaussians(spec, count_per_sphere: int = 4, seed: int = 0, grid_pitch: float = GRID_PITCH,
                   radius: float = SPHERE_RADIUS, ground: GroundPlane | None = None) -> GaussianSet:
    """Surface splats for an :class:`ObjectSpec` or :class:`RopeSpec` in its initial pose."""
    if count_per_sphere < 1:
        raise ValueError("count_per_sphere must be >= 1")
    if isinstance(spec, RopeSpec):
        return seed_rope_gaussians(discretize_rope(spec), spec.texture, count_per_sphere, seed)
    built = build_object(spec, grid_pitch, radius, ground)
    return seed_object_gaussians(built, spec.texture, count_per_sphere, grid_pitch, seed)


# --- whole scenes ------------------------------------------------------------------------


@dataclass
class SceneInstance:
    """A built world plus the splats and anchor bookkeeping that ride on it.

    Anchor frames are numbered body spheres first (global sphere index),
    then rod segments. ``units`` lists one correction unit per rigid object
    and per rod segment as ``(kind, entity index)`` with kind ``"body"`` or
    ``"segment"``.
    """

    world: World
    gaussians: GaussianSet
    spec: SceneSpec
    object_bodies: list
    rod_indices: list
    pusher_body: int | None
    object_gaussians: dict

    @property
    def num_sphere_anchors(self) -> int:
        return len(self.world.sphere_radius)

    def anchor_frames(self, world: World | None = None):
        """World positions and orientations of all anchor frames."""
        w = self.world if world is None else world
        pos = np.empty((len(w.sphere_radius) + w.num_segments, 3))
        quat = np.empty((len(pos), 4))
        for b in range(w.num_bodies):
            s = slice(w.body_sphere_start[b], w.body_sphere_start[b] + w.body_sphere_count[b])
            pos[s] = w.sphere_centers(b)
            quat[s] = w.body_q[b]
        ns = len(w.sphere_radius)
        pos[ns:] = 0.5 * (w.particle_x[w.segment_p0] + w.particle_x[w.segment_p1])
        quat[ns:] = w.segment_q
        return pos, quat

    def posed_gaussians(self, world: World | None = None) -> GaussianSet:
        pos, quat = self.anchor_frames(world)
        return self.gaussians.place(pos, quat)

    def pusher_target(self, t: float):
        return None if self.spec.pusher is None else self.spec.pusher.position_at(t)


def build_scene(spec: SceneSpec, density_scale: float = 1.0, bend_stiffness_delta: float = 0.0,
                seed: int = 0) -> SceneInstance:
    """Instantiate a world (and splats) from a scene description.

    ``density_scale`` and ``bend_stiffness_delta`` perturb physical
    parameters, used to build a mismatched ground-truth twin.
    """
    spec.check()
    world = World(spec.ground)
    parts = []
    bodies = []
    for k, obj in enumerate(spec.objects):
        built = build_object(obj, spec.grid_pitch, spec.sphere_radius, spec.ground, density_scale)
        b = world.add_body(built.body, obj.name)
        bodies.append(b)
        parts.append(seed_object_gaussians(built, obj.texture, spec.splats_per_sphere, spec.grid_pitch,
                                           seed=seed + 7919 * k, anchor_base=int(world.body_sphere_start[b])))
    rods = []
    rod_parts = []
    for k, rope in enumerate(spec.ropes):
        rod = discretize_rope(rope)
        rod.bend_stiffness = float(np.clip(rod.bend_stiffness + bend_stiffness_delta, 1e-3, 1.0))
        for p in rod.particles:
            p.mass *= density_scale
        rod.segment_inv_inertia /= density_scale
        r = world.add_rod(rod, rope.name)
        rods.append(r)
        rod_parts.append((rod, rope, r, k))
    pusher = None
    if spec.pusher is not None:
        pusher = world.add_body(RigidBodyState.kinematic_body(spec.pusher.position_at(0.0),
                                                              sphere_radii=spec.pusher.radius), spec.pusher.name)
    ns = len(world.sphere_radius)
    for rod, rope, r, k in rod_parts:
        p_slice, s_slice, _ = world.rod_slices(r)
        parts.append(seed_rope_gaussians(rod, rope.texture, 2 * spec.splats_per_sphere, seed=seed + 104729 * (k + 1),
                                         anchor_base=ns + s_slice.start, particle_base=p_slice.start))
    counts = [len(p) for p in parts]
    names = [o.name for o in spec.objects] + [r.name for r in spec.ropes]
    starts = np.r_[0, np.cumsum(counts)]
    groups = {n: np.arange(starts[i], starts[i + 1]) for i, n in enumerate(names)}
    return SceneInstance(world, GaussianSet.concatenate(parts), spec, bodies, rods, pusher, groups)


# --- serialization ---------------------------------------------------------------------


def _shape_to_dict(shape):
    if isinstance(shape, Box):
        return {"type": "box", "extents": list(shape.extents), "center": list(shape.center)}
    if isinstance(shape, Cylinder):
        return {"type": "cylinder", "radius": shape.radius, "height": shape.height, "center": list(shape.center)}
    return {"type": "union", "boxes": [_shape_to_dict(b) for b in shape.boxes]}


def _shape_from_dict(d, where):
    kind = d.get("type")
    if kind == "box":
        return Box(tuple(map(float, d["extents"])), tuple(map(float, d.get("center", (0, 0, 0)))))
    if kind == "cylinder":
        return Cylinder(float(d["radius"]), float(d["height"]), tuple(map(float, d.get("center", (0, 0, 0)))))
    if kind == "union":
        return UnionOfBoxes(tuple(_shape_from_dict(b, where) for b in d["boxes"]))
    if kind == "t_shape":
        return t_shape(tuple(d.get("bar", (0.12, 0.03))), tuple(d.get("stem", (0.03, 0.09))),
                       float(d.get("height", 0.03)))
    raise SceneValidationError(f"{where}.shape.type: unknown shape {kind!r}")


def _texture_from_dict(d):
    d = d or {}
    return Texture(kind=d.get("kind", "checker"),
                   colors=tuple(tuple(map(float, c)) for c in d.get("colors", Texture().colors)),
                   size=float(d.get("size", 0.02)), seed=int(d.get("seed", 0)))


def _texture_to_dict(t: Texture):
    return {"kind": t.kind, "colors": [list(c) for c in t.colors], "size": t.size, "seed": t.seed}


def camera_from_dict(d, where="camera"):
    res = d.get("resolution", [160, 120])
    kw = dict(width=int(res[0]), height=int(res[1]), name=d.get("name", where))
    if "near" in d:
        kw["near"] = float(d["near"])
    if "far" in d:
        kw["far"] = float(d["far"])
    if "look_at" in d:
        la = d["look_at"]
        return Camera.look_at(la["eye"], la["target"], la.get("up", (0, 0, 1)),
                              fov_y=float(la.get("fov_y", np.deg2rad(50.0))), **kw)
    return Camera(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
                  rotation=d.get("rotation", np.eye(3)), translation=d.get("translation", np.zeros(3)), **kw)


def camera_to_dict(c: Camera):
    return {"name": c.name, "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy, "resolution": [c.width, c.height],
            "rotation": c.rotation.tolist(), "translation": c.translation.tolist(), "near": c.near, "far": c.far}


def scene_from_dict(d) -> SceneSpec:
    """Build a :class:`SceneSpec` from a parsed key-value tree (see ``docs/scene_format.md``)."""
    if not isinstance(d, dict):
        raise SceneValidationError("scene: expected a mapping at top level")
    try:
        g = d.get("ground", {"normal": [0, 0, 1], "offset": 0.0})
        ground = None if g is None else GroundPlane(tuple(g.get("normal", (0, 0, 1))), float(g.get("offset", 0.0)))
        objects = []
        for i, o in enumerate(d.get("objects", []) or []):
            where = f"objects[{i}]"
            objects.append(ObjectSpec(
                name=str(o["name"]), shape=_shape_from_dict(o["shape"], where), density=float(o.get("density", 500)),
                position=o.get("position", [0, 0, 0]), orientation=_orientation(o),
                texture=_texture_from_dict(o.get("texture"))))
        ropes = []
        for i, r in enumerate(d.get("ropes", []) or []):
            ropes.append(RopeSpec(
                name=str(r["name"]), centerline=_centerline(r, f"ropes[{i}]"), radius=float(r.get("radius", 0.005)),
                linear_density=float(r.get("linear_density", 0.05)), segment_count=int(r.get("segment_count", 15)),
                bend_stiffness=float(r.get("bend_stiffness", 1.0)),
                texture=_texture_from_dict(r.get("texture", {"kind": "checker", "size": 0.03})),
                inv_inertia=r.get("inv_inertia")))
        pusher = None
        if d.get("pusher"):
            p = d["pusher"]
            script = p.get("script", [])
            pusher = PusherSpec(times=[float(s["t"]) for s in script], positions=[s["position"] for s in script],
                                radius=float(p.get("radius", 0.01)), name=str(p.get("name", "pusher")))
        cameras = _cameras_from(d.get("cameras", []) or [])
        spec = SceneSpec(ground=ground, objects=objects, ropes=ropes, pusher=pusher, cameras=cameras,
                         sim=dict(d.get("sim", {}) or {}), grid_pitch=float(d.get("grid_pitch", GRID_PITCH)),
                         sphere_radius=float(d.get("sphere_radius", SPHERE_RADIUS)),
                         splats_per_sphere=int(d.get("splats_per_sphere", 4)))
    except KeyError as exc:
        raise SceneValidationError(f"missing required field {exc}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, SceneValidationError):
            raise
        raise SceneValidationError(str(exc)) from None
    return spec.check()


def _cameras_from(c):
    if isinstance(c, dict) and "ring" in c:
        r = c["ring"]
        res = r.get("resolution", [160, 120])
        return ring_cameras(r.get("target", (0, 0, 0)), float(r.get("distance", 0.45)),
                            np.deg2rad(float(r.get("elevation_deg", 50.0))), int(r.get("count", 3)),
                            int(res[0]), int(res[1]), np.deg2rad(float(r.get("fov_y_deg", 50.0))),
                            np.deg2rad(float(r.get("yaw0_deg", -90.0))))
    if not isinstance(c, list):
        raise SceneValidationError("cameras: expected a list or a {ring: ...} mapping")
    return [camera_from_dict(x, f"cameras[{i}]") for i, x in enumerate(c)]


def _orientation(o):
    if "orientation" in o:
        return o["orientation"]
    return quat_from_axis_angle([0, 0, 1], float(o.get("yaw", 0.0)))


def _centerline(r, where):
    if "centerline" in r:
        return r["centerline"]
    if "line" in r:
        a, b = np.asarray(r["line"]["start"], float), np.asarray(r["line"]["end"], float)
        return np.linspace(a, b, 2)
    if "arc" in r:
        a = r["arc"]
        ang = np.linspace(float(a.get("start_angle", 0.0)), float(a["end_angle"]), 200)
        c = np.asarray(a["center"], float)
        return c + float(a["radius"]) * np.stack([np.cos(ang), np.sin(ang), np.zeros_like(ang)], -1)
    raise SceneValidationError(f"{where}: needs one of centerline/line/arc")


def scene_to_dict(spec: SceneSpec) -> dict:
    out = {
        "ground": None if spec.ground is None else {"normal": list(spec.ground.normal), "offset": spec.ground.offset},
        "grid_pitch": spec.grid_pitch, "sphere_radius": spec.sphere_radius,
        "splats_per_sphere": spec.splats_per_sphere,
        "objects": [{"name": o.name, "shape": _shape_to_dict(o.shape), "density": o.density,
                     "position": o.position.tolist(), "orientation": o.orientation.tolist(),
                     "texture": _texture_to_dict(o.texture)} for o in spec.objects],
        "ropes": [{"name": r.name, "centerline": r.centerline.tolist(), "radius": r.radius,
                   "linear_density": r.linear_density, "segment_count": r.segment_count,
                   "bend_stiffness": r.bend_stiffness, "texture": _texture_to_dict(r.texture),
                   **({} if r.inv_inertia is None else {"inv_inertia": r.inv_inertia})} for r in spec.ropes],
        "cameras": [camera_to_dict(c) for c in spec.cameras],
        "sim": dict(spec.sim),
    }
    if spec.pusher is not None:
        out["pusher"] = {"name": spec.pusher.name, "radius": spec.pusher.radius,
                         "script": [{"t": float(t), "position": p.tolist()}
                                    for t, p in zip(spec.pusher.times, spec.pusher.positions)]}
    return out


def load_scene(path) -> SceneSpec:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SceneValidationError(f"{path}: {exc}") from None
    return scene_from_dict(data)


def _plain(x):
    """Recursively turn numpy scalars and arrays into built-in types for YAML."""
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, np.ndarray)):
        return [_plain(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def save_scene(spec: SceneSpec, path) -> None:
    Path(path).write_text(yaml.safe_dump(_plain(scene_to_dict(spec)), sort_keys=False))


def ring_cameras(target, distance=0.45, elevation=np.deg2rad(50.0), count=3, width=160, height=120,
                 fov_y=np.deg2rad(50.0), yaw0=np.deg2rad(-90.0)):
    """``count`` cameras evenly spaced in azimuth around ``target``."""
    target = np.asarray(target, float)
    cams = []
    for k in range(count):
        yaw = yaw0 + 2 * np.pi * k / count
        eye = target + distance * np.array([np.cos(elevation) * np.cos(yaw), np.cos(elevation) * np.sin(yaw),
                                            np.sin(elevation)])
        cams.append(Camera.look_at(eye, target, width=width, height=height, fov_y=fov_y, name=f"cam{k}"))
    return cams
