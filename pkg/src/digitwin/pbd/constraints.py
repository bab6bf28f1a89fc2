"""Constraint projections: the generic Lagrange step and its specialised forms.

The specialised solvers evaluate the same numba formulas the stepper uses
(:mod:`digitwin.pbd._kernels`) on single constraints and accumulate into a
:class:`DeltaAccumulator`, which makes them directly comparable against
:func:`generic_project`.

Sign convention: every update moves along the constraint-decreasing
direction of the generic projection. For contacts with ``C = n·(b_j - b_i)``
and ``n`` pointing from ``i`` to ``j`` that means ``i`` moves along ``-n`` and
``j`` along ``+n`` when penetrating.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..math3d import quat_conjugate, quat_product
from . import _kernels as K
from .state import DeltaAccumulator, ParticleState, RigidBodyState, RodState

SINGULAR_CONDITION = 1e12


class SingularConstraintError(ValueError):
    """The weighted Gram matrix of a constraint is (numerically) singular."""


@dataclass
class PairDeltas:
    """Corrections produced by one two-entity constraint solve."""

    dx_i: np.ndarray
    dtheta_i: np.ndarray
    dx_j: np.ndarray
    dtheta_j: np.ndarray
    dq_i: np.ndarray
    dq_j: np.ndarray
    lam: float

    @classmethod
    def zero(cls):
        z = np.zeros(3)
        return cls(z, z, z, z, np.zeros(4), np.zeros(4), 0.0)


def generic_project(constraint, gradients, inverse_masses):
    """One Lagrange-multiplier projection of a (scalar or vector) constraint.

    Parameters
    ----------
    constraint : float or (m,) array
        Constraint value ``C(p)``.
    gradients : sequence of (m, n_k) arrays
        ``∇_{p_k} C`` for each participating state block.
    inverse_masses : sequence of (n_k, n_k) arrays
        Inverse mass / inertia block ``W_k``.

    Returns
    -------
    list of (n_k,) arrays
        ``Δp_k = W_k (∇_{p_k} C)ᵀ λ`` with
        ``λ = -(Σ_k ∇C W_k ∇Cᵀ)^{-1} C``.
    """
    c = np.atleast_1d(np.asarray(constraint, dtype=float))
    m = len(c)
    grads = [np.asarray(g, dtype=float).reshape(m, -1) for g in gradients]
    ws = [np.atleast_2d(np.asarray(w, dtype=float)) for w in inverse_masses]
    gram = np.zeros((m, m))
    for g, w in zip(grads, ws):
        gram += g @ w @ g.T
    if not np.any(gram) or np.linalg.cond(gram) > SINGULAR_CONDITION:
        raise SingularConstraintError("constraint system is singular (all participants kinematic?)")
    lam = -np.linalg.solve(gram, c)
    return [w @ g.T @ lam for g, w in zip(grads, ws)]


def generalized_inverse_mass(body: RigidBodyState, r, n) -> float:
    """``m⁻¹ + (r×n)ᵀ I⁻¹ (r×n)`` with the world-frame inverse inertia."""
    if body.kinematic:
        return 0.0
    rn = np.cross(r, n)
    return float(body.inv_mass + rn @ body.inv_inertia_world() @ rn)


def _body_args(body: RigidBodyState | None):
    if body is None or body.kinematic:
        return 0.0, (0.0, 0.0, 0.0, 1.0), K.ZERO33
    return body.inv_mass, tuple(body.orientation), tuple(_t(row) for row in body.inv_inertia_world())


def _t(v):
    return tuple(float(x) for x in v)


def _contact(gap, n, r_i, r_j, body_i, body_j, particle_j=None):
    im_i, qi, Ii = _body_args(body_i)
    if particle_j is not None:
        im_j, qj, Ij = particle_j.inv_mass, (0.0, 0.0, 0.0, 1.0), K.ZERO33
    else:
        im_j, qj, Ij = _body_args(body_j)
    n, r_i, r_j = _t(n), _t(r_i), _t(r_j)
    w_i = K.generalized_inverse_mass(im_i, Ii, r_i, n)
    w_j = K.generalized_inverse_mass(im_j, Ij, r_j, n)
    if gap >= 0.0 or w_i + w_j <= 0.0:
        return PairDeltas.zero()
    p = gap / (w_i + w_j)
    dxi, dthi, dxj, dthj = K.pair_deltas(p, n, r_i, r_j, im_i, Ii, im_j, Ij)
    dthi, dthj = np.array(dthi), np.array(dthj)
    dq_i = 0.5 * quat_product(np.append(dthi, 0.0), np.array(qi))
    dq_j = 0.5 * quat_product(np.append(dthj, 0.0), np.array(qj))
    return PairDeltas(np.array(dxi), dthi, np.array(dxj), dthj, dq_i, dq_j, p)


def _accumulate_body(acc, idx, dx, dq):
    if idx < 0:
        return
    acc.body_dx[idx] += dx
    acc.body_dq[idx] += dq
    acc.body_count[idx] += 1


def solve_rigid_contact(pair, bodies, acc: DeltaAccumulator | None = None) -> PairDeltas:
    """Rigid-rigid non-penetration ``C = n·(b_j - b_i) >= 0``.

    ``bodies[pair.i]`` and ``bodies[pair.j]`` are the two bodies; an index of
    -1 stands for the static ground plane. Inactive (``C >= 0``) contacts
    contribute nothing.
    """
    body_i = bodies[pair.i] if pair.i >= 0 else None
    body_j = bodies[pair.j] if pair.j >= 0 else None
    gap = float(np.dot(pair.n, np.asarray(pair.b_j) - np.asarray(pair.b_i)))
    d = _contact(gap, pair.n, pair.r_i, pair.r_j, body_i, body_j)
    if acc is not None and d.lam != 0.0:
        if body_i is not None and not body_i.kinematic:
            _accumulate_body(acc, pair.i, d.dx_i, d.dq_i)
        if body_j is not None and not body_j.kinematic:
            _accumulate_body(acc, pair.j, d.dx_j, d.dq_j)
    return d


def solve_rigid_particle_contact(pair, body: RigidBodyState | None, particle: ParticleState,
                                 acc: DeltaAccumulator | None = None) -> PairDeltas:
    """Rigid body ``i`` against particle ``j``: ``C = n·(x_j - b_i) - r_j >= 0``.

    ``b_i`` is the contact point on the body surface and ``n`` points from the
    body toward the particle. The particle's generalized inverse mass is its
    plain inverse mass and it receives no orientation update. ``body=None``
    means the ground plane.
    """
    gap = float(np.dot(pair.n, particle.position - np.asarray(pair.b_i))) - particle.radius
    d = _contact(gap, pair.n, pair.r_i, np.zeros(3), body, None, particle_j=particle)
    if acc is not None and d.lam != 0.0:
        if body is not None and not body.kinematic:
            _accumulate_body(acc, pair.i, d.dx_i, d.dq_i)
        if particle.inv_mass > 0:
            acc.particle_dx[pair.j] += d.dx_j
            acc.particle_count[pair.j] += 1
    return d


def director(q) -> np.ndarray:
    """Third director ``d3 = R(q) e3``."""
    x, y, z, w = q
    return np.array([2.0 * (x * z + w * y), 2.0 * (y * z - w * x), w * w - x * x - y * y + z * z])


def shear_stretch_violation(rod: RodState, seg: int) -> np.ndarray:
    a, b = rod.particles[seg], rod.particles[seg + 1]
    return (b.position - a.position) / rod.rest_lengths[seg] - director(rod.segment_orientations[seg])


def solve_shear_stretch(seg_index: int, rod: RodState, acc: DeltaAccumulator | None = None):
    """Shear-stretch projection of one rod segment.

    Returns ``(dx_a, dx_b, dq)``; the deltas are added to ``acc`` (indexed by
    rod-local particle and segment numbers) when given.
    """
    a, b = rod.particles[seg_index], rod.particles[seg_index + 1]
    dxa, dxb, dq, _c, ok = K.shear_stretch_deltas(
        _t(a.position), _t(b.position), _t(rod.segment_orientations[seg_index]), a.inv_mass, b.inv_mass,
        float(rod.segment_inv_inertia[seg_index]), float(rod.rest_lengths[seg_index]),
    )
    dxa, dxb, dq = np.array(dxa), np.array(dxb), np.array(dq)
    if acc is not None and ok:
        for idx, p, dx in ((seg_index, a, dxa), (seg_index + 1, b, dxb)):
            if p.inv_mass > 0:
                acc.particle_dx[idx] += dx
                acc.particle_count[idx] += 1
        if rod.segment_inv_inertia[seg_index] > 0:
            acc.segment_dq[seg_index] += dq
            acc.segment_count[seg_index] += 1
    return dxa, dxb, dq


def compute_darboux(q_i, q_j, l_avg: float) -> np.ndarray:
    """Discrete Darboux vector ``(2/l) Im(q̄_i q_j)`` (units 1/m)."""
    if l_avg <= 0:
        raise ValueError("average segment length must be positive")
    return (2.0 / l_avg) * quat_product(quat_conjugate(q_i), q_j)[:3]


def bend_twist_violation(rod: RodState, pair: int) -> np.ndarray:
    rest = 0.5 * rod.rest_average_length(pair) * rod.rest_darboux[pair]
    om = quat_product(quat_conjugate(rod.segment_orientations[pair]), rod.segment_orientations[pair + 1])[:3]
    cm, cp = om - rest, om + rest
    return cp if cp @ cp < cm @ cm else cm


def solve_bend_twist(pair_index: int, rod: RodState, acc: DeltaAccumulator | None = None):
    """Bend-twist projection between segments ``pair_index`` and ``pair_index + 1``.

    Returns ``(dq_i, dq_j)``.
    """
    i, j = pair_index, pair_index + 1
    rest = 0.5 * rod.rest_average_length(pair_index) * rod.rest_darboux[pair_index]
    dqi, dqj, _c, ok = K.bend_twist_deltas(
        _t(rod.segment_orientations[i]), _t(rod.segment_orientations[j]), _t(rest),
        float(rod.segment_inv_inertia[i]), float(rod.segment_inv_inertia[j]), float(rod.bend_stiffness),
    )
    dqi, dqj = np.array(dqi), np.array(dqj)
    if acc is not None and ok:
        acc.segment_dq[i] += dqi
        acc.segment_dq[j] += dqj
        acc.segment_count[i] += 1
        acc.segment_count[j] += 1
    return dqi, dqj
