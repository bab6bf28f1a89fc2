"""Photometric pose correction and the prediction-correction tracking step.

A correction unit is either one rigid object or one rod segment. Each unit
owns an SE(3) increment (translation plus rotation vector, rotation about
the unit's pivot) that is fitted to the observed images with a few Adam
steps, then converted into per-particle forces that pull the simulation
toward the observation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .math3d import geodesic_angle, quat_from_rotvec, quat_to_matrix
from .pbd.engine import ExternalForces, step
from .pbd.state import SimConfig, World
from .splat import Camera, GaussianSet, _t, camera_depth, render, render_torch

CORRECTION_DEDICATED = "dedicated"
CORRECTION_FOLDED = "folded"


class EmptyMaskError(ValueError):
    """No camera sees any tracked pixel."""


@dataclass
class CorrectionGains:
    """Gains of the correction loop.

    ``k_p`` converts mean splat displacement (m) into force (N) per particle.
    """

    k_p: float = 0.25
    lr_translation: float = 1e-3
    lr_rotation: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    steps: int = 6

    def __post_init__(self):
        problems = []
        if self.k_p < 0:
            problems.append("k_p must be non-negative")
        if self.steps < 1:
            problems.append("steps must be >= 1")
        if self.lr_translation <= 0 or self.lr_rotation <= 0:
            problems.append("learning rates must be positive")
        if problems:
            raise ValueError("; ".join(problems))


@dataclass
class CorrectionUnit:
    """``kind`` is ``"body"`` (entity = body index) or ``"segment"`` (entity = segment index)."""

    kind: str
    entity: int
    gaussians: np.ndarray


@dataclass
class CorrectionTransform:
    """One SE(3) increment per unit, applied about each unit's pivot."""

    translation: np.ndarray
    rotvec: np.ndarray
    pivot: np.ndarray

    def __post_init__(self):
        self.translation = np.asarray(self.translation, float).reshape(-1, 3)
        self.rotvec = _wrap_rotvec(np.asarray(self.rotvec, float).reshape(-1, 3))
        self.pivot = np.asarray(self.pivot, float).reshape(-1, 3)

    @classmethod
    def identity(cls, pivots) -> "CorrectionTransform":
        pivots = np.asarray(pivots, float).reshape(-1, 3)
        return cls(np.zeros_like(pivots), np.zeros_like(pivots), pivots)

    def __len__(self):
        return len(self.translation)

    def rotation(self) -> np.ndarray:
        return quat_to_matrix(quat_from_rotvec(self.rotvec))

    def apply(self, points, unit_of) -> np.ndarray:
        """Transform ``points`` by the increment of their unit (``unit_of < 0`` leaves them)."""
        points = np.asarray(points, float)
        out = points.copy()
        sel = unit_of >= 0
        u = unit_of[sel]
        r = self.rotation()[u]
        c = self.pivot[u]
        out[sel] = c + np.einsum("nij,nj->ni", r, points[sel] - c) + self.translation[u]
        return out


def _wrap_rotvec(rv):
    th = np.linalg.norm(rv, axis=-1, keepdims=True)
    over = th[..., 0] >= np.pi
    if np.any(over):
        rv = rv.copy()
        axis = rv[over] / th[over]
        wrapped = np.mod(th[over] + np.pi, 2 * np.pi) - np.pi
        rv[over] = axis * wrapped
    return rv


@dataclass
class Observation:
    """Per-camera images ``(H, W, 3)`` and boolean masks ``(H, W)``."""

    images: list
    masks: list
    timestamp: float = 0.0

    def __post_init__(self):
        self.images = [np.asarray(im, float) for im in self.images]
        self.masks = [np.asarray(m, bool) for m in self.masks]
        if len(self.images) != len(self.masks):
            raise ValueError("one mask per image required")
        for im, m in zip(self.images, self.masks):
            if im.shape[:2] != m.shape:
                raise ValueError("mask resolution must equal image resolution")


# --- loss -----------------------------------------------------------------------------


def photometric_loss(rendered, observed: Observation) -> float:
    """Masked mean squared RGB error, averaged over cameras with a non-empty mask.

    ``rendered`` is a list of :class:`~digitwin.splat.RenderedImage` or RGB
    arrays, one per camera.
    """
    total, used = 0.0, 0
    for r, im, m in zip(rendered, observed.images, observed.masks):
        rgb = getattr(r, "rgb", r)
        if rgb.shape != im.shape:
            raise ValueError("rendered and observed resolutions differ")
        if not m.any():
            continue
        total += float(np.mean((rgb[m] - im[m]) ** 2))
        used += 1
    if used == 0:
        raise EmptyMaskError("object not visible in any camera")
    return total / used


# --- differentiable transform ------------------------------------------------------------


def _skew_t(w):
    z = torch.zeros_like(w[..., 0])
    return torch.stack([z, -w[..., 2], w[..., 1], w[..., 2], z, -w[..., 0], -w[..., 1], w[..., 0], z],
                       -1).reshape(w.shape[:-1] + (3, 3))


def rotvec_to_matrix_torch(w):
    th2 = (w * w).sum(-1)
    small = th2 < 1e-10
    th = torch.sqrt(torch.where(small, torch.ones_like(th2), th2))
    a = torch.where(small, 1 - th2 / 6, torch.sin(th) / th)
    b = torch.where(small, 0.5 - th2 / 24, (1 - torch.cos(th)) / torch.where(small, torch.ones_like(th2), th2))
    k = _skew_t(w)
    eye = torch.eye(3, dtype=w.dtype).expand(k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def rotvec_to_quat_torch(w):
    th2 = (w * w).sum(-1)
    small = th2 < 1e-10
    th = torch.sqrt(torch.where(small, torch.ones_like(th2), th2))
    s = torch.where(small, 0.5 - th2 / 48, torch.sin(0.5 * th) / th)
    c = torch.where(small, 1 - th2 / 8, torch.cos(0.5 * th))
    return torch.cat([s[..., None] * w, c[..., None]], -1)


def quat_product_torch(a, b):
    ax, ay, az, aw = a.unbind(-1)
    bx, by, bz, bw = b.unbind(-1)
    return torch.stack([
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ], -1)


def _transformed(means, quats, unit_of, pivots, trans, rotvec):
    sel = torch.as_tensor(np.nonzero(unit_of >= 0)[0])
    u = torch.as_tensor(unit_of[unit_of >= 0])
    r = rotvec_to_matrix_torch(rotvec)[u]
    qr = rotvec_to_quat_torch(rotvec)[u]
    c = pivots[u]
    m_sel = c + (r @ (means[sel] - c)[..., None])[..., 0] + trans[u]
    q_sel = quat_product_torch(qr, quats[sel])
    return means.index_copy(0, sel, m_sel), quats.index_copy(0, sel, q_sel)


class PhotometricObjective:
    """Masked photometric loss of the transformed splats, differentiable in the SE(3) parameters.

    The compositing order is frozen at the untransformed pose: the depth
    sort is treated as a constant, so the loss is smooth in the pose
    parameters and matches its own autodiff gradient everywhere.
    """

    def __init__(self, gaussians: GaussianSet, unit_of, pivots, cameras, observation: Observation,
                 background=(0.0, 0.0, 0.0)):
        self.unit_of = np.asarray(unit_of, np.int64)
        self.cams = [(c, _t(im), torch.as_tensor(m), camera_depth(gaussians.means, c))
                     for c, im, m in zip(cameras, observation.images, observation.masks) if m.any()]
        if not self.cams:
            raise EmptyMaskError("object not visible in any camera")
        self.means = _t(gaussians.means)
        self.quats = _t(gaussians.quats)
        self.scales = _t(gaussians.scales)
        self.opacity = _t(gaussians.opacity)
        self.colors = _t(gaussians.colors)
        self.pivots = _t(pivots).reshape(-1, 3)
        self.background = background

    def __call__(self, trans, rotvec):
        m, q = _transformed(self.means, self.quats, self.unit_of, self.pivots, trans, rotvec)
        total = 0.0
        for cam, im, mask, depth in self.cams:
            rgb, _ = render_torch(m, q, self.scales, self.opacity, self.colors, cam, self.background, depth)
            total = total + ((rgb[mask] - im[mask]) ** 2).mean()
        return total / len(self.cams)

    def value(self, trans, rotvec) -> float:
        with torch.no_grad():
            return float(self(_t(trans), _t(rotvec)))

    def gradient(self, trans, rotvec):
        t = _t(trans).clone().requires_grad_(True)
        w = _t(rotvec).clone().requires_grad_(True)
        loss = self(t, w)
        if not loss.requires_grad:
            return float(loss), np.zeros(t.shape), np.zeros(w.shape)
        loss.backward()
        return float(loss.detach()), t.grad.numpy().copy(), w.grad.numpy().copy()


def optimize_pose(gaussians: GaussianSet, unit_of, pivots, cameras, observation: Observation,
                  gains: CorrectionGains | None = None, background=(0.0, 0.0, 0.0)):
    """Fit per-unit SE(3) increments with Adam.

    Returns ``(transform, loss_before, loss_after)``. The result is the
    best iterate seen, so it is never worse than the identity.
    """
    gains = gains or CorrectionGains()
    objective = PhotometricObjective(gaussians, unit_of, pivots, cameras, observation, background)
    n = len(np.asarray(pivots).reshape(-1, 3))
    t = torch.zeros(n, 3, dtype=torch.float64, requires_grad=True)
    w = torch.zeros(n, 3, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([{"params": [t], "lr": gains.lr_translation}, {"params": [w], "lr": gains.lr_rotation}],
                           betas=(gains.beta1, gains.beta2))
    history = []
    for _ in range(gains.steps):
        opt.zero_grad()
        loss = objective(t, w)
        history.append((float(loss.detach()), t.detach().numpy().copy(), w.detach().numpy().copy()))
        if not loss.requires_grad:
            # no splat reaches a masked pixel: the loss is flat in the pose
            break
        loss.backward()
        opt.step()
    with torch.no_grad():
        history.append((float(objective(t, w)), t.detach().numpy().copy(), w.detach().numpy().copy()))
    before = history[0][0]
    best = min(range(len(history)), key=lambda k: (history[k][0], k))
    _, bt, bw = history[best]
    return CorrectionTransform(bt, bw, pivots), before, history[best][0]


# --- wrench -------------------------------------------------------------------------------


@dataclass
class Wrench:
    """Per-particle forces and per-unit aggregates."""

    particle_ids: np.ndarray
    particle_forces: np.ndarray
    unit_force: np.ndarray
    unit_torque: np.ndarray


def correction_wrench(transform: CorrectionTransform, gaussians: GaussianSet, unit_of, k_p: float,
                      centers) -> Wrench:
    """Per-particle force ``K_p Σ_j (T μ_j − μ_j) / N_i`` and per-unit ``f = Σ f_i``, ``τ = Σ r_i × f_i``.

    ``gaussians.particle`` says which particle each splat belongs to;
    ``centers`` gives the moment reference (center of mass) of each unit and
    ``r_i`` runs from it to the mean transformed position of particle ``i``'s
    splats.
    """
    unit_of = np.asarray(unit_of, np.int64)
    sel = np.nonzero(unit_of >= 0)[0]
    moved = transform.apply(gaussians.means, unit_of)
    disp = moved[sel] - gaussians.means[sel]
    pid = gaussians.particle[sel]
    uid = unit_of[sel]
    keys = np.stack([uid, pid], -1)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    counts = np.bincount(inv, minlength=len(uniq)).astype(float)
    dsum = np.zeros((len(uniq), 3))
    np.add.at(dsum, inv, disp)
    psum = np.zeros((len(uniq), 3))
    np.add.at(psum, inv, moved[sel])
    f = k_p * dsum / counts[:, None]
    r = psum / counts[:, None] - np.asarray(centers, float)[uniq[:, 0]]
    nu = len(transform)
    uf = np.zeros((nu, 3))
    ut = np.zeros((nu, 3))
    np.add.at(uf, uniq[:, 0], f)
    np.add.at(ut, uniq[:, 0], np.cross(r, f))
    # a particle shared by two rod segments receives both contributions
    pids, pinv = np.unique(uniq[:, 1], return_inverse=True)
    pf = np.zeros((len(pids), 3))
    np.add.at(pf, pinv.reshape(-1), f)
    return Wrench(pids, pf, uf, ut)


# --- tracking -------------------------------------------------------------------------------


@dataclass
class FrameDiagnostics:
    frame: int
    time: float
    loss_before: float = float("nan")
    loss_after: float = float("nan")
    force_norm: float = 0.0
    torque_norm: float = 0.0
    corrected: bool = False
    timings: dict = field(default_factory=dict)


class Tracker:
    """Prediction-correction loop for one twin.

    Parameters
    ----------
    instance : SceneInstance
        Twin world plus its splats.
    cameras : list of Camera
    gains : CorrectionGains
    config : SimConfig
    mode : {"dedicated", "folded"}
        ``"dedicated"`` re-runs the frame from the pre-prediction state with
        the correction forces added; ``"folded"`` keeps the prediction and
        adds the forces to the next frame's step instead.
    correct : bool
        ``False`` gives the prediction-only baseline.
    """

    def __init__(self, instance, cameras, gains: CorrectionGains | None = None, config: SimConfig | None = None,
                 mode: str = CORRECTION_DEDICATED, correct: bool = True):
        if mode not in (CORRECTION_DEDICATED, CORRECTION_FOLDED):
            raise ValueError(f"unknown correction mode {mode!r}")
        self.instance = instance
        self.cameras = list(cameras)
        self.gains = gains or CorrectionGains()
        self.config = config or SimConfig()
        self.mode = mode
        self.correct = correct
        self.frame = 0
        self.units = build_units(instance)
        self._rod_particles = {int(p) for u in self.units if u.kind == "segment"
                               for p in instance.gaussians.particle[u.gaussians]}
        self._pending: ExternalForces | None = None

    @property
    def world(self) -> World:
        return self.instance.world

    def unit_layout(self, world: World):
        """``(unit_of, pivots)`` for the current world state."""
        n = len(self.instance.gaussians)
        unit_of = np.full(n, -1, np.int64)
        pivots = np.zeros((len(self.units), 3))
        for k, u in enumerate(self.units):
            unit_of[u.gaussians] = k
            if u.kind == "body":
                pivots[k] = world.body_x[u.entity]
            else:
                pivots[k] = 0.5 * (world.particle_x[world.segment_p0[u.entity]]
                                   + world.particle_x[world.segment_p1[u.entity]])
        return unit_of, pivots

    def _set_kinematics(self, world: World, t: float):
        pos = self.instance.pusher_target(t)
        if pos is not None:
            world.set_kinematic_target(self.instance.pusher_body, pos)

    def step(self, observation: Observation | None) -> FrameDiagnostics:
        """Advance the twin by one frame, correcting toward ``observation``."""
        world = self.world
        t_next = world.time + self.config.dt
        diag = FrameDiagnostics(self.frame + 1, t_next)
        clock = time.perf_counter()
        predicted = world.copy()
        self._set_kinematics(predicted, t_next)
        step(predicted, self.config, self._pending)
        diag.timings["predict"] = time.perf_counter() - clock
        self._pending = None
        if not self.correct or observation is None or not self.units:
            self.instance.world = predicted
            self.frame += 1
            return diag
        clock = time.perf_counter()
        posed = self.instance.posed_gaussians(predicted)
        unit_of, pivots = self.unit_layout(predicted)
        diag.timings["render"] = time.perf_counter() - clock
        clock = time.perf_counter()
        try:
            transform, before, after = optimize_pose(posed, unit_of, pivots, self.cameras, observation, self.gains)
        except EmptyMaskError:
            diag.timings["optimize"] = time.perf_counter() - clock
            self.instance.world = predicted
            self.frame += 1
            return diag
        diag.timings["optimize"] = time.perf_counter() - clock
        diag.loss_before, diag.loss_after = before, after
        clock = time.perf_counter()
        centers = self._unit_centers(predicted)
        wrench = correction_wrench(transform, posed, unit_of, self.gains.k_p, centers)
        ext = self._external(wrench, predicted)
        diag.force_norm = float(np.linalg.norm(wrench.unit_force))
        diag.torque_norm = float(np.linalg.norm(wrench.unit_torque))
        diag.timings["wrench"] = time.perf_counter() - clock
        clock = time.perf_counter()
        if self.mode == CORRECTION_DEDICATED:
            self._set_kinematics(world, t_next)
            step(world, self.config, ext)
        else:
            self.instance.world = predicted
            self._pending = ext
        diag.timings["step"] = time.perf_counter() - clock
        diag.corrected = True
        self.frame += 1
        return diag

    def _unit_centers(self, world: World):
        c = np.zeros((len(self.units), 3))
        for k, u in enumerate(self.units):
            if u.kind == "body":
                c[k] = world.body_x[u.entity]
            else:
                c[k] = 0.5 * (world.particle_x[world.segment_p0[u.entity]] + world.particle_x[world.segment_p1[u.entity]])
        return c

    def _external(self, wrench: Wrench, world: World) -> ExternalForces:
        ext = ExternalForces.zeros(world)
        for k, u in enumerate(self.units):
            if u.kind == "body":
                ext.body_force[u.entity] += wrench.unit_force[k]
                ext.body_torque[u.entity] += wrench.unit_torque[k]
        # body splats carry sphere ids, rod splats carry particle ids
        for pid, f in zip(wrench.particle_ids, wrench.particle_forces):
            if int(pid) in self._rod_particles:
                ext.particle_force[pid] += f
        return ext


def build_units(instance) -> list[CorrectionUnit]:
    """One unit per dynamic rigid object and per rod segment that owns splats."""
    units = []
    g = instance.gaussians
    w = instance.world
    for name, idx in instance.object_gaussians.items():
        if name in w.body_names:
            b = w.body_index(name)
            if w.body_inv_mass[b] > 0 and len(idx):
                units.append(CorrectionUnit("body", b, np.asarray(idx)))
    ns = len(w.sphere_radius)
    for r in instance.rod_indices:
        _, ss, _ = w.rod_slices(r)
        for s in range(ss.start, ss.stop):
            idx = np.nonzero(g.anchor == ns + s)[0]
            if len(idx):
                units.append(CorrectionUnit("segment", s, idx))
    return units


# --- observation and metrics ---------------------------------------------------------------


def observe(instance, cameras, names=None, timestamp: float = 0.0, threshold: float = 0.5) -> Observation:
    """Render the scene and the tracked-object mask from each camera.

    ``names`` selects the objects/ropes whose silhouette forms the mask
    (default: all of them).
    """
    posed = instance.posed_gaussians()
    names = list(instance.object_gaussians) if names is None else list(names)
    idx = np.concatenate([instance.object_gaussians[n] for n in names]) if names else np.zeros(0, np.int64)
    tracked = posed.subset(np.sort(idx))
    images, masks = [], []
    for cam in cameras:
        images.append(render(posed, cam).rgb)
        masks.append(render(tracked, cam).alpha > threshold)
    return Observation(images, masks, timestamp)


def iou(a, b) -> float:
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


@dataclass
class Metrics:
    translation_error: dict
    rotation_error: dict
    iou: dict


def metrics(twin, truth, cameras, threshold: float = 0.5) -> Metrics:
    """Per-object COM distance and geodesic angle; per-rope silhouette IoU averaged over cameras."""
    tw, gw = twin.world, truth.world
    te, re, ious = {}, {}, {}
    for name in twin.object_gaussians:
        if name in tw.body_names:
            b, c = tw.body_index(name), gw.body_index(name)
            te[name] = float(np.linalg.norm(tw.body_x[b] - gw.body_x[c]))
            re[name] = float(geodesic_angle(tw.body_q[b], gw.body_q[c]))
    if twin.rod_indices:
        tp, gp = twin.posed_gaussians(), truth.posed_gaussians()
        for name in tw.rod_names:
            idx_t = twin.object_gaussians[name]
            idx_g = truth.object_gaussians[name]
            vals = [iou(render(tp.subset(idx_t), cam).alpha > threshold,
                        render(gp.subset(idx_g), cam).alpha > threshold) for cam in cameras]
            ious[name] = float(np.mean(vals))
    return Metrics(te, re, ious)
