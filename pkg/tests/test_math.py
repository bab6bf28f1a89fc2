import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from digitwin.math3d import (
    DegenerateIncrementWarning,
    Pose,
    apply_angular_delta,
    geodesic_angle,
    quat_conjugate,
    quat_from_axis_angle,
    quat_from_rotvec,
    quat_identity,
    quat_multiply,
    quat_rotate,
    quat_to_matrix,
    quat_to_rotvec,
    wrap_angle,
    yaw_of,
)

unit_quats = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(
    lambda v: np.linalg.norm(v) > 0.1
).map(lambda v: np.asarray(v) / np.linalg.norm(v))
vectors = st.lists(st.floats(-10, 10), min_size=3, max_size=3).map(np.asarray)

Z90 = quat_from_axis_angle([0, 0, 1], np.pi / 2)


def test_identity_is_neutral():
    q = quat_from_axis_angle([1, 2, 3], 0.7)
    np.testing.assert_allclose(quat_multiply(quat_identity(), q), q, atol=1e-15)


def test_inverse_gives_identity():
    q = quat_from_axis_angle([1, -2, 0.5], 2.1)
    np.testing.assert_allclose(quat_multiply(q, quat_conjugate(q)), quat_identity(), atol=1e-15)


def test_two_quarter_turns_make_half_turn():
    # oracle: composition of rotation matrices
    m = Rotation.from_euler("z", 90, degrees=True).as_matrix()
    expected = Rotation.from_matrix(m @ m).as_quat()
    got = quat_multiply(Z90, Z90)
    assert geodesic_angle(got, expected) < 1e-12
    np.testing.assert_allclose(np.abs(got), [0, 0, 1, 0], atol=1e-12)


def test_rotate_examples():
    np.testing.assert_allclose(quat_rotate(quat_identity(), [1, 0, 0]), [1, 0, 0])
    np.testing.assert_allclose(quat_rotate(Z90, [1, 0, 0]), [0, 1, 0], atol=1e-15)
    np.testing.assert_allclose(quat_rotate(quat_from_axis_angle([1, 1, 0], 1.0), np.zeros(3)), np.zeros(3))


def test_rotate_matches_scipy_matrix():
    rng = np.random.default_rng(0)
    q = Rotation.random(50, random_state=1).as_quat()
    v = rng.normal(size=(50, 3))
    np.testing.assert_allclose(quat_rotate(q, v), Rotation.from_quat(q).apply(v), atol=1e-12)
    np.testing.assert_allclose(quat_to_matrix(q), Rotation.from_quat(q).as_matrix(), atol=1e-12)


def test_angular_delta_zero_increment():
    q = quat_from_axis_angle([0, 1, 0], 0.3)
    np.testing.assert_allclose(apply_angular_delta(q, np.zeros(4)), q)


def test_angular_delta_small_rotation_is_second_order():
    for theta in (1e-2, 1e-3):
        dq = 0.5 * np.array([theta, 0, 0, 0.0])
        got = apply_angular_delta(quat_identity(), dq)
        err = geodesic_angle(got, quat_from_rotvec([theta, 0, 0]))
        assert err <= theta**2


def test_angular_delta_degenerate_warns():
    q = quat_from_axis_angle([0, 0, 1], 1.0)
    with pytest.warns(DegenerateIncrementWarning):
        out = apply_angular_delta(q, -q)
    np.testing.assert_array_equal(out, q)


def test_angular_delta_sign_flip_is_not_degenerate():
    # q - 2q = -q has unit norm: same rotation, no warning
    q = quat_from_axis_angle([0, 0, 1], 1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        out = apply_angular_delta(q, -2 * q)
    assert geodesic_angle(out, q) < 1e-12


def test_geodesic_examples():
    q = quat_from_axis_angle([1, 1, 1], 0.4)
    assert geodesic_angle(q, q) == pytest.approx(0, abs=1e-12)
    assert geodesic_angle(q, -q) == pytest.approx(0, abs=1e-12)
    assert geodesic_angle(quat_identity(), Z90) == pytest.approx(np.pi / 2, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(unit_quats, unit_quats, unit_quats)
def test_multiply_associative(a, b, c):
    np.testing.assert_allclose(quat_multiply(quat_multiply(a, b), c), quat_multiply(a, quat_multiply(b, c)),
                               atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(unit_quats, unit_quats, vectors)
def test_rotation_composition(a, b, v):
    lhs = quat_rotate(quat_multiply(a, b), v)
    rhs = quat_rotate(a, quat_rotate(b, v))
    np.testing.assert_allclose(lhs, rhs, atol=1e-9 * (1 + np.linalg.norm(v)))
    assert np.linalg.norm(quat_rotate(a, v)) == pytest.approx(np.linalg.norm(v), abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(unit_quats, unit_quats, unit_quats)
def test_geodesic_is_metric(a, b, c):
    ab, ba = geodesic_angle(a, b), geodesic_angle(b, a)
    assert 0 <= ab <= np.pi + 1e-12
    assert ab == pytest.approx(ba, abs=1e-9)
    assert geodesic_angle(a, -a) < 1e-6
    assert geodesic_angle(a, c) <= ab + geodesic_angle(b, c) + 1e-9


def test_rotvec_roundtrip_and_yaw():
    rv = np.array([0.1, -0.4, 0.9])
    np.testing.assert_allclose(quat_to_rotvec(quat_from_rotvec(rv)), rv, atol=1e-12)
    np.testing.assert_allclose(quat_from_rotvec(rv), Rotation.from_rotvec(rv).as_quat(), atol=1e-12)
    assert yaw_of(quat_from_axis_angle([0, 0, 1], 2.5)) == pytest.approx(2.5)
    assert wrap_angle(3 * np.pi) == pytest.approx(np.pi)
    assert wrap_angle(-np.pi) == pytest.approx(np.pi)


def test_pose_compose_inverse():
    a = Pose([1, 2, 3], quat_from_axis_angle([0, 1, 1], 0.8))
    b = Pose([-0.5, 0, 0.2], quat_from_axis_angle([1, 0, 0], -1.1))
    p = np.array([0.3, -0.2, 0.7])
    np.testing.assert_allclose(a.compose(b).apply(p), a.apply(b.apply(p)), atol=1e-12)
    np.testing.assert_allclose(a.inverse().apply(a.apply(p)), p, atol=1e-12)


def test_no_warning_for_regular_update():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        apply_angular_delta(quat_identity(), np.array([0.01, 0, 0, 0]))
