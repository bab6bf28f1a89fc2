import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

import _oracle_render as oracle
from digitwin.math3d import quat_from_axis_angle, quat_to_matrix
from digitwin.splat import (
    Camera,
    Gaussian3D,
    GaussianSet,
    MissingAnchorError,
    camera_depth,
    covariance,
    decode_ppm,
    encode_ppm,
    project_gaussian,
    project_gaussians,
    render,
    render_torch,
    transform_gaussians,
    truncated_kernel,
)


def axis_camera(width=32, height=24, f=40.0):
    # camera at the origin looking down +z (world = camera frame)
    return Camera(fx=f, fy=f, cx=(width - 1) / 2, cy=(height - 1) / 2, width=width, height=height)


def splat(mean, scale=0.01, opacity=1.0, color=(1, 0, 0), quat=None):
    return Gaussian3D(mean=mean, orientation=np.array([0, 0, 0, 1.0]) if quat is None else quat,
                      scale=np.broadcast_to(scale, 3), opacity=opacity, color=color)


def random_set(rng, n, center=(0, 0, 0.5), spread=0.05):
    return GaussianSet(
        means=np.asarray(center) + rng.uniform(-spread, spread, (n, 3)),
        quats=Rotation.random(n, random_state=rng).as_quat(),
        scales=rng.uniform(0.003, 0.015, (n, 3)),
        opacity=rng.uniform(0.3, 1.0, n),
        colors=rng.uniform(0, 1, (n, 3)),
        anchor=rng.integers(0, 3, n),
    )


# --- kernel --------------------------------------------------------------------------------


def test_kernel_is_gaussian_inside_two_sigma_and_zero_beyond_three():
    m = torch.tensor([0.0, 1.0, 3.99, 9.0, 12.0], dtype=torch.float64)
    k = truncated_kernel(m).numpy()
    np.testing.assert_allclose(k[:3], np.exp(-0.5 * m[:3].numpy()), rtol=0, atol=1e-15)
    assert k[3] == 0.0 and k[4] == 0.0


def test_kernel_has_continuous_slope():
    m = torch.linspace(0.0, 9.5, 20001, dtype=torch.float64, requires_grad=True)
    k = truncated_kernel(m)
    (g,) = torch.autograd.grad(k.sum(), m)
    jumps = np.abs(np.diff(g.numpy()))
    assert jumps.max() < 1e-3
    assert np.all(np.diff(k.detach().numpy()) <= 1e-15)


# --- covariance ----------------------------------------------------------------------------


def test_covariance_examples():
    np.testing.assert_array_equal(covariance([0, 0, 0, 1.0], [1, 1, 1]), np.eye(3))
    np.testing.assert_array_equal(covariance([0, 0, 0, 1.0], [2, 1, 1]), np.diag([4.0, 1, 1]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_covariance_eigenvalues_preserved(seed):
    rng = np.random.default_rng(seed)
    q = Rotation.random(random_state=rng).as_quat()
    s = rng.uniform(0.1, 3.0, 3)
    c = covariance(q, s)
    np.testing.assert_allclose(c, c.T, atol=1e-14)
    np.testing.assert_allclose(np.linalg.eigvalsh(c), np.sort(s**2), rtol=1e-10)


def test_covariance_rotated_2_1_1():
    q = Rotation.from_rotvec([0.3, -1.1, 0.7]).as_quat()
    np.testing.assert_allclose(np.linalg.eigvalsh(covariance(q, [2, 1, 1])), [1, 1, 4], rtol=1e-12)


# --- projection ----------------------------------------------------------------------------


def test_on_axis_projects_to_principal_point():
    cam = axis_camera()
    uv, cov2, depth = project_gaussian(splat([0, 0, 0.7]), cam)
    np.testing.assert_allclose(uv, [cam.cx, cam.cy], atol=1e-12)
    assert depth == pytest.approx(0.7)


def test_isotropic_footprint_similar_triangles():
    cam = axis_camera(f=120.0)
    s, d = 0.004, 0.6
    _, cov2, _ = project_gaussian(splat([0, 0, d], scale=s), cam)
    np.testing.assert_allclose(cov2, (120.0 * s / d) ** 2 * np.eye(2), rtol=1e-12)


def test_behind_camera_and_far_are_culled():
    cam = axis_camera()
    assert project_gaussian(splat([0, 0, -0.5]), cam) is None
    assert project_gaussian(splat([0, 0, 20.0]), cam) is None
    assert project_gaussian(splat([5.0, 0, 0.5]), cam) is None


def test_projection_matches_reference():
    rng = np.random.default_rng(4)
    cam = Camera.look_at([0.3, -0.2, 0.4], [0, 0, 0], width=64, height=48)
    gs = random_set(rng, 20, center=(0, 0, 0), spread=0.05)
    uv, cov2, z, vis = project_gaussians(gs, cam)
    assert vis.all()
    for i in range(len(gs)):
        ruv, rcov, rz = oracle.project(gs.means[i], gs.quats[i], gs.scales[i], cam)
        np.testing.assert_allclose(uv[i], ruv, rtol=1e-9)
        np.testing.assert_allclose(cov2[i], rcov, rtol=1e-6)
        assert z[i] == pytest.approx(rz, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_projected_covariance_is_spd(seed):
    rng = np.random.default_rng(seed)
    cam = Camera.look_at(rng.normal(size=3) * 0.3 + [0, 0, 0.5], [0, 0, 0], width=40, height=30)
    _, cov2, _, vis = project_gaussians(random_set(rng, 10, center=(0, 0, 0)), cam)
    for c in cov2[vis]:
        np.testing.assert_allclose(c, c.T, atol=1e-9 * np.abs(c).max())
        assert np.linalg.eigvalsh(c).min() > 0


# --- rendering -----------------------------------------------------------------------------


def test_no_gaussians_gives_background():
    img = render(GaussianSet.empty(), axis_camera(), background=(0.2, 0.3, 0.4))
    np.testing.assert_array_equal(img.rgb, np.broadcast_to([0.2, 0.3, 0.4], img.rgb.shape))
    np.testing.assert_array_equal(img.alpha, 0.0)


def test_single_opaque_splat_center_pixel_is_its_color():
    cam = axis_camera(width=31, height=21)
    # principal point is exactly pixel (15, 10)
    img = render(GaussianSet.from_list([splat([0, 0, 0.5], color=(0.25, 0.5, 0.75))]), cam, (0.9, 0.9, 0.9))
    np.testing.assert_array_equal(img.rgb[10, 15], [0.25, 0.5, 0.75])
    assert img.alpha[10, 15] == 1.0


def test_single_splat_closed_form_off_center():
    cam = axis_camera(width=31, height=21, f=50.0)
    s, d, a = 0.01, 0.5, 0.7
    sigma_px = 50.0 * s / d
    img = render(GaussianSet.from_list([splat([0, 0, d], scale=s, opacity=a, color=(1, 1, 1))]), cam)
    for du, dv in [(0, 0), (1, 0), (1, 1), (0, 1)]:
        m = (du**2 + dv**2) / sigma_px**2
        assert m < 4.0
        assert img.rgb[10 + dv, 15 + du, 0] == pytest.approx(a * np.exp(-0.5 * m), abs=1e-12)


def test_two_splat_hand_composition():
    cam = axis_camera(width=31, height=21, f=50.0)
    c1, c2, bg = np.array([1.0, 0.2, 0.1]), np.array([0.1, 0.3, 0.9]), np.array([0.05, 0.05, 0.05])
    a1, a2 = 0.6, 0.8
    near = splat([0, 0, 0.5], scale=0.01, opacity=a1, color=c1)
    # second splat 1 px to the right of the centre pixel, farther away; its own sigma is 0.8 px
    far = splat([0.6 / 50.0, 0, 0.6], scale=0.0096, opacity=a2, color=c2)
    img = render(GaussianSet.from_list([far, near]), cam, bg)
    h1 = a1
    # local-affine footprint of an isotropic splat at (x, 0, z): var_u = (f s / z)^2 (1 + (x / z)^2)
    var_u = 0.8**2 * (1 + (0.012 / 0.6) ** 2)
    h2 = a2 * np.exp(-0.5 * 1.0 / var_u)
    expected = c1 * h1 + c2 * h2 * (1 - h1) + bg * (1 - h1) * (1 - h2)
    np.testing.assert_allclose(img.rgb[10, 15], expected, atol=1e-12)


def test_render_matches_brute_force_reference():
    rng = np.random.default_rng(9)
    cam = Camera.look_at([0.25, -0.15, 0.3], [0, 0, 0], width=24, height=18, fov_y=np.deg2rad(40))
    gs = random_set(rng, 25, center=(0, 0, 0), spread=0.04)
    img = render(gs, cam, (0.1, 0.2, 0.3))
    ref_rgb, ref_alpha = oracle.render(gs, cam, (0.1, 0.2, 0.3))
    np.testing.assert_allclose(img.rgb, ref_rgb, atol=1e-6)
    np.testing.assert_allclose(img.alpha, ref_alpha, atol=1e-6)


def test_depth_ties_broken_by_index():
    cam = axis_camera(width=31, height=21)
    a = splat([0, 0, 0.5], opacity=0.5, color=(1, 0, 0))
    b = splat([0, 0, 0.5], opacity=0.5, color=(0, 0, 1))
    ab = render(GaussianSet.from_list([a, b]), cam).rgb[10, 15]
    ba = render(GaussianSet.from_list([b, a]), cam).rgb[10, 15]
    np.testing.assert_allclose(ab, [0.5, 0, 0.25])
    np.testing.assert_allclose(ba, [0.25, 0, 0.5])


def test_order_key_overrides_depth():
    cam = axis_camera(width=31, height=21)
    red = splat([0, 0, 0.5], opacity=0.5, color=(1, 0, 0))
    blue = splat([0, 0, 0.6], opacity=0.5, color=(0, 0, 1))
    gs = GaussianSet.from_list([red, blue])
    by_depth = render(gs, cam).rgb[10, 15]
    np.testing.assert_allclose(by_depth, [0.5, 0, 0.25])
    rgb, _ = render_torch(torch.as_tensor(gs.means), torch.as_tensor(gs.quats), torch.as_tensor(gs.scales),
                          torch.as_tensor(gs.opacity), torch.as_tensor(gs.colors), cam, order_key=[1.0, 0.0])
    np.testing.assert_allclose(rgb.numpy()[10, 15], [0.25, 0, 0.5])
    # the actual depths as key reproduce the default order exactly
    rgb, _ = render_torch(torch.as_tensor(gs.means), torch.as_tensor(gs.quats), torch.as_tensor(gs.scales),
                          torch.as_tensor(gs.opacity), torch.as_tensor(gs.colors), cam,
                          order_key=camera_depth(gs.means, cam))
    assert rgb.numpy().tobytes() == render(gs, cam).rgb.tobytes()


def test_fixed_order_is_continuous_across_a_depth_swap():
    cam = axis_camera(width=31, height=21)
    gs = GaussianSet.from_list([splat([0, 0, 0.5], opacity=0.5, color=(1, 0, 0)),
                                splat([0, 0, 0.5 + 1e-7], opacity=0.5, color=(0, 0, 1))])
    key = camera_depth(gs.means, cam)
    near = gs.copy()
    near.means[1, 2] -= 2e-7

    def center(g, order_key=None):
        rgb, _ = render_torch(*(torch.as_tensor(a) for a in (g.means, g.quats, g.scales, g.opacity, g.colors)),
                              cam, order_key=order_key)
        return rgb.numpy()[10, 15]

    assert np.abs(center(near) - center(gs)).max() > 0.2
    assert np.abs(center(near, key) - center(gs, key)).max() < 1e-9


def test_render_is_deterministic():
    rng = np.random.default_rng(1)
    cam = Camera.look_at([0.3, 0.1, 0.4], [0, 0, 0])
    gs = random_set(rng, 300, center=(0, 0, 0))
    assert render(gs, cam).rgb.tobytes() == render(gs, cam).rgb.tobytes()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_channels_stay_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    cam = Camera.look_at(rng.normal(size=3) * 0.2 + [0, 0, 0.4], [0, 0, 0], width=40, height=30)
    img = render(random_set(rng, 40, center=(0, 0, 0)), cam, rng.uniform(0, 1, 3))
    assert img.rgb.min() >= 0 and img.rgb.max() <= 1
    assert img.alpha.min() >= 0 and img.alpha.max() <= 1


def test_equivariance_exact_transform_is_bitwise():
    rng = np.random.default_rng(2)
    # camera looking straight down with a signed-permutation rotation and dyadic offset
    cam = Camera(100.0, 100.0, 32.0, 24.0, 64, 48, np.diag([1.0, -1.0, -1.0]), [0.0, 0.0, 0.5])
    gs = _anchored(random_set(rng, 400, center=(0, 0, 0.02)))
    gs.means = np.round(gs.means * 2**16) / 2**16
    # a dyadic shift keeps every sum in the transform and the camera update exact
    t = np.array([0.125, -0.0625, 0.25])
    moved = transform_gaussians(gs, [np.eye(3)], [t])
    a = render(gs, cam)
    b = render(moved, cam.moved(np.eye(3), t))
    assert a.alpha.max() > 0.5
    assert a.rgb.tobytes() == b.rgb.tobytes()
    assert a.alpha.tobytes() == b.alpha.tobytes()


def _anchored(gs):
    out = gs.copy()
    out.anchor[:] = 0
    return out


def test_equivariance_generic_transform_ppm_identical():
    rng = np.random.default_rng(3)
    cam = Camera.look_at([0.3, -0.25, 0.35], [0, 0, 0.02], width=64, height=48)
    gs = _anchored(random_set(rng, 400, center=(0, 0, 0.02)))
    rot = Rotation.from_rotvec([0.2, -0.4, 0.9])
    t = np.array([0.031, -0.017, 0.008])
    moved = transform_gaussians(gs, [rot.as_matrix()], [t])
    a = render(gs, cam)
    b = render(moved, cam.moved(rot.as_matrix(), t))
    diff = np.abs(a.rgb - b.rgb).max()
    print(f"generic rigid transform: float max |Δ| = {diff:.3e}")
    assert diff < 1e-9
    assert a.to_ppm() == b.to_ppm()


# --- transform_gaussians --------------------------------------------------------------------


def test_transform_identity_and_translation():
    rng = np.random.default_rng(5)
    gs = random_set(rng, 30)
    same = transform_gaussians(gs, np.tile(np.eye(3), (3, 1, 1)), np.zeros((3, 3)))
    np.testing.assert_allclose(same.means, gs.means, atol=0)
    np.testing.assert_allclose(same.quats, gs.quats, atol=1e-15)
    t = np.array([0.1, -0.2, 0.3])
    shifted = transform_gaussians(gs, np.tile([0, 0, 0, 1.0], (3, 1)), np.tile(t, (3, 1)))
    np.testing.assert_allclose(shifted.means, gs.means + t, atol=1e-15)
    np.testing.assert_allclose(covariance(shifted.quats, shifted.scales), covariance(gs.quats, gs.scales), atol=1e-18)
    np.testing.assert_array_equal(shifted.colors, gs.colors)
    np.testing.assert_array_equal(shifted.opacity, gs.opacity)


def test_transform_rotation_is_isometry_within_anchor():
    rng = np.random.default_rng(6)
    gs = random_set(rng, 40)
    q = quat_from_axis_angle([0, 0, 1], np.pi / 2)
    out = transform_gaussians(gs, np.tile(q, (3, 1)), rng.normal(size=(3, 3)) * 0.0)
    d0 = np.linalg.norm(gs.means[:, None] - gs.means[None], axis=-1)
    d1 = np.linalg.norm(out.means[:, None] - out.means[None], axis=-1)
    np.testing.assert_allclose(d1, d0, atol=1e-12)
    np.testing.assert_allclose(quat_to_matrix(out.quats), quat_to_matrix(q) @ quat_to_matrix(gs.quats), atol=1e-12)


def test_transform_missing_anchor():
    gs = random_set(np.random.default_rng(0), 5)
    gs.anchor[:] = 7
    with pytest.raises(MissingAnchorError):
        transform_gaussians(gs, np.tile(np.eye(3), (2, 1, 1)), np.zeros((2, 3)))
    gs.anchor[:] = -1
    with pytest.raises(MissingAnchorError):
        transform_gaussians(gs, {0: np.eye(3)}, {0: np.zeros(3)})


def test_place_carries_splats_with_anchor():
    gs = GaussianSet(means=np.zeros((2, 3)), quats=np.tile([0, 0, 0, 1.0], (2, 1)), scales=np.full((2, 3), 0.01),
                     opacity=[1, 1], colors=np.ones((2, 3)), anchor=[0, 1], offset=[[0.1, 0, 0], [0, 0.2, 0]])
    q = quat_from_axis_angle([0, 0, 1], np.pi / 2)
    placed = gs.place([[1, 0, 0], [0, 0, 1]], [q, [0, 0, 0, 1]])
    np.testing.assert_allclose(placed.means, [[1, 0.1, 0], [0, 0.2, 1]], atol=1e-15)
    np.testing.assert_allclose(placed.quats[0], q)


# --- validation and image format ---------------------------------------------------------------


@pytest.mark.parametrize("kw", [dict(scale=[0.0, 1, 1]), dict(opacity=0.0), dict(opacity=1.5),
                                dict(color=[1.2, 0, 0])])
def test_gaussian_validation(kw):
    base = dict(mean=[0, 0, 0], scale=[1, 1, 1], opacity=1.0, color=[0, 0, 0])
    base.update(kw)
    with pytest.raises(ValueError):
        Gaussian3D(**base)


@pytest.mark.parametrize("kw", [dict(fx=0.0), dict(near=1.0, far=0.5)])
def test_camera_validation(kw):
    base = dict(fx=10.0, fy=10.0, cx=5, cy=5, width=10, height=10)
    base.update(kw)
    with pytest.raises(ValueError):
        Camera(**base)


def test_ppm_layout_and_roundtrip():
    rgb = np.zeros((2, 3, 3))
    rgb[0, 0] = [1.0, 0.5, 0.0]
    rgb[1, 2] = [0.2, 0.4, 0.6]
    blob = encode_ppm(rgb)
    assert blob.startswith(b"P6\n3 2\n255\n")
    body = blob[len(b"P6\n3 2\n255\n"):]
    assert len(body) == 18
    assert body[:3] == bytes([255, 128, 0])
    assert body[-3:] == bytes([51, 102, 153])
    np.testing.assert_allclose(decode_ppm(blob), np.rint(rgb * 255) / 255)


def test_copy_does_not_share_memory():
    gs = random_set(np.random.default_rng(0), 5)
    cp = gs.copy()
    cp.means[0] += 1.0
    cp.colors[1] = 0.0
    assert not np.array_equal(cp.means, gs.means)
    assert not np.array_equal(cp.colors, gs.colors)
