"""Independent reference projections and random configuration generators.

Every oracle builds the constraint gradient itself and calls the generic
Lagrange projection; none of them touches the specialised solver formulas.
"""

import numpy as np
from scipy.spatial.transform import Rotation

from digitwin.collision import ContactPair
from digitwin.math3d import quat_conjugate, quat_product
from digitwin.pbd import ParticleState, RigidBodyState, RodState, generic_project


def numeric_jacobian(f, x, h=1e-4):
    """Central differences; exact up to rounding for polynomials of degree <= 2."""
    x = np.asarray(x, dtype=float)
    cols = []
    for k in range(len(x)):
        e = np.zeros_like(x)
        e[k] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def director(q):
    # third column of the rotation matrix written as a homogeneous quadratic
    x, y, z, w = q
    return np.array([2 * (x * z + w * y), 2 * (y * z - w * x), w * w - x * x - y * y + z * z])


def contact_oracle(inv_mi, inv_ii, ri, inv_mj, inv_ij, rj, n, c):
    """Generic projection of ``C = n·(b_j - b_i)`` over (x, θ) of both bodies."""
    grads = [-n, -np.cross(ri, n), n, np.cross(rj, n)]
    ws = [inv_mi * np.eye(3), inv_ii, inv_mj * np.eye(3), inv_ij]
    return generic_project(c, grads, ws)


def shear_oracle(xa, xb, q, wa, wb, wq, rest):
    c = (xb - xa) / rest - director(q)
    jq = -numeric_jacobian(director, q)
    grads = [-np.eye(3) / rest, np.eye(3) / rest, jq]
    ws = [wa * np.eye(3), wb * np.eye(3), wq * np.eye(4)]
    return generic_project(c, grads, ws)


def bend_constraint(qi, qj, rest_imag):
    om = quat_product(quat_conjugate(qi), qj)[:3]
    cm, cp = om - rest_imag, om + rest_imag
    return (cp, 1.0) if cp @ cp < cm @ cm else (cm, -1.0)


def bend_oracle(qi, qj, rest_imag, wi, wj):
    c, sgn = bend_constraint(qi, qj, rest_imag)
    fi = lambda q: quat_product(quat_conjugate(q), qj)[:3] + sgn * rest_imag  # noqa: E731
    fj = lambda q: quat_product(quat_conjugate(qi), q)[:3] + sgn * rest_imag  # noqa: E731
    grads = [numeric_jacobian(fi, qi), numeric_jacobian(fj, qj)]
    return generic_project(c, grads, [wi * np.eye(4), wj * np.eye(4)])


def rel_err(a, b):
    a = np.concatenate([np.ravel(v) for v in a])
    b = np.concatenate([np.ravel(v) for v in b])
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def random_body(rng, kinematic=False):
    mass = np.inf if kinematic else rng.uniform(0.05, 2.0)
    half = rng.uniform(0.01, 0.1, size=3)
    inertia = np.diag([half[1] ** 2 + half[2] ** 2, half[0] ** 2 + half[2] ** 2, half[0] ** 2 + half[1] ** 2])
    m = 1.0 if kinematic else mass
    r = Rotation.random(random_state=rng).as_matrix()
    # a random principal frame makes the body-frame inertia non-diagonal
    return RigidBodyState(mass=mass, inertia_body=m / 3 * r @ inertia @ r.T,
                          position=rng.normal(size=3) * 0.1,
                          orientation=Rotation.random(random_state=rng).as_quat())


def random_rigid_pair(rng, kinematic_i=False):
    bi = random_body(rng, kinematic_i)
    bj = random_body(rng)
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)
    r_i = rng.normal(size=3) * 0.05
    r_j = rng.normal(size=3) * 0.05
    b_i = bi.position + r_i
    b_j = b_i - rng.uniform(1e-5, 5e-3) * n
    bj.position = b_j - r_j
    pair = ContactPair(kind="rigid-rigid", i=0, j=1, n=n, b_i=b_i, b_j=b_j, r_i=r_i, r_j=r_j)
    return pair, [bi, bj]


def random_rigid_particle(rng, kinematic_body=False):
    body = random_body(rng, kinematic_body)
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)
    r_i = rng.normal(size=3) * 0.05
    b_i = body.position + r_i
    radius = rng.uniform(0.002, 0.02)
    x = b_i + (radius - rng.uniform(1e-5, 5e-3)) * n
    particle = ParticleState(mass=rng.uniform(0.001, 0.5), position=x, radius=radius)
    pair = ContactPair(kind="rigid-particle", i=0, j=0, n=n, b_i=b_i, b_j=x - radius * n, r_i=r_i,
                       r_j=-radius * n)
    return pair, body, particle


def random_rod(rng, num_particles=3, kinematic_first=False):
    """A small rod with perturbed positions and frames (rest data random too)."""
    rest = rng.uniform(0.01, 0.1, size=num_particles - 1)
    xs = np.cumsum(np.vstack([np.zeros(3), rng.normal(size=(num_particles - 1, 3)) * 0.05]), axis=0)
    particles = [ParticleState(mass=np.inf if (kinematic_first and k == 0) else rng.uniform(0.001, 0.1),
                               position=x) for k, x in enumerate(xs)]
    qs = Rotation.random(num_particles - 1, random_state=rng).as_quat()
    return RodState(particles=particles, segment_orientations=qs,
                    segment_inv_inertia=rng.uniform(10.0, 1e4, size=num_particles - 1),
                    rest_lengths=rest, rest_darboux=rng.normal(size=(num_particles - 2, 3)) * 5.0, radius=0.005)
