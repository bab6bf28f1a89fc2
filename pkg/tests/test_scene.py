import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from digitwin.math3d import quat_from_axis_angle
from digitwin.pbd.constraints import bend_twist_violation, shear_stretch_violation
from digitwin.pbd.state import GroundPlane
from digitwin.scene import (Box, Cylinder, EmptyObjectError, ObjectSpec, PusherSpec, RopeSpec, SceneSpec,
                            SceneValidationError, Texture, TooShortCurveError, anchor_gaussians, build_object,
                            build_scene, compute_mass_properties, discretize_rope, fill_spheres, load_scene,
                            ring_cameras, save_scene, scene_from_dict, scene_to_dict, seed_gaussians, t_shape)
from digitwin.splat import Camera, render

# --- fill_spheres -------------------------------------------------------------------------


def _grid_count(extents, pitch):
    # centers sit at (k + 1/2) pitch from the box corner; count those strictly inside
    return int(np.prod([sum(1 for k in range(1000) if (k + 0.5) * pitch < e) for e in extents]))


def test_cube_fills_with_64_spheres():
    offs, radii = fill_spheres(ObjectSpec("c", Box((0.04, 0.04, 0.04))), 0.01)
    assert len(offs) == 64 == _grid_count((0.04, 0.04, 0.04), 0.01)
    assert np.all(radii == 0.005)


@pytest.mark.parametrize("extents", [(0.06, 0.04, 0.04), (0.03, 0.05, 0.02), (0.1, 0.01, 0.03)])
def test_box_counts_match_counting_oracle(extents):
    offs, _ = fill_spheres(ObjectSpec("b", Box(extents)), 0.01)
    assert len(offs) == _grid_count(extents, 0.01)


def test_t_shape_count_is_sum_of_its_bars():
    # at 1.5 cm pitch both bars are whole numbers of cells
    offs, _ = fill_spheres(ObjectSpec("t", t_shape()), 0.015)
    assert len(offs) == 8 * 2 * 2 + 2 * 6 * 2


def test_cylinder_centers_inside_radius():
    offs, _ = fill_spheres(ObjectSpec("c", Cylinder(0.03, 0.02)), 0.01)
    assert len(offs) > 0
    assert np.all(np.hypot(offs[:, 0], offs[:, 1]) < 0.03)


def test_zero_extent_box_is_empty_object():
    with pytest.raises(EmptyObjectError):
        fill_spheres(ObjectSpec("z", Box((0.04, 0.0, 0.04))), 0.01)


def test_ground_discards_centers_below_plane():
    spec = ObjectSpec("b", Box((0.04, 0.04, 0.04)), position=[0, 0, 0.0])
    offs, _ = fill_spheres(spec, 0.01, ground=GroundPlane())
    assert len(offs) == 32
    assert np.all(offs[:, 2] > 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(-20, 20), st.integers(-20, 20), st.integers(-20, 20))
def test_count_invariant_under_pitch_translation(i, j, k):
    pitch = 0.01
    shape = t_shape()
    base = len(fill_spheres(ObjectSpec("t", shape), pitch)[0])
    moved = ObjectSpec("t", t_shape(), position=np.array([i, j, k]) * pitch)
    assert len(fill_spheres(moved, pitch)[0]) == base


# --- mass properties ---------------------------------------------------------------------


def test_single_sphere_mass_and_inertia():
    mass, com, inertia = compute_mass_properties([[0.1, -0.2, 0.3]], [0.005], 1000.0)
    assert mass == pytest.approx(5.235987756e-4, rel=1e-9)
    np.testing.assert_allclose(com, [0.1, -0.2, 0.3])
    np.testing.assert_allclose(inertia, 0.4 * mass * 0.005**2 * np.eye(3), rtol=1e-12, atol=1e-20)


def test_symmetric_pair_com_at_origin():
    _, com, _ = compute_mass_properties([[0.02, 0.01, -0.03], [-0.02, -0.01, 0.03]], [0.005, 0.005], 700.0)
    np.testing.assert_allclose(com, 0.0, atol=1e-15)


def test_cube_inertia_close_to_solid_cube():
    offs, radii = fill_spheres(ObjectSpec("c", Box((0.04, 0.04, 0.04))), 0.01)
    mass, com, inertia = compute_mass_properties(offs, radii, 1000.0)
    exact = mass / 12 * (0.04**2 + 0.04**2)
    np.testing.assert_allclose(np.diag(inertia), exact, rtol=0.10)
    np.testing.assert_allclose(inertia - np.diag(np.diag(inertia)), 0.0, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(10.0, 5000.0))
def test_doubling_density_scales_mass_and_inertia(seed, rho):
    rng = np.random.default_rng(seed)
    offs = rng.uniform(-0.05, 0.05, size=(rng.integers(1, 30), 3))
    radii = rng.uniform(0.002, 0.008, size=len(offs))
    m1, c1, i1 = compute_mass_properties(offs, radii, rho)
    m2, c2, i2 = compute_mass_properties(offs, radii, 2 * rho)
    assert m2 == 2 * m1
    np.testing.assert_array_equal(c2, c1)
    np.testing.assert_array_equal(i2, 2 * i1)
    assert np.all(np.linalg.eigvalsh(i1) > 0)
    np.testing.assert_array_equal(i1, i1.T)


# --- ropes ---------------------------------------------------------------------------------


def test_straight_rope():
    rod = discretize_rope(RopeSpec("r", [[0, 0, 0], [1, 0, 0]], segment_count=10))
    xs = np.array([p.position for p in rod.particles])
    assert len(xs) == 11
    np.testing.assert_allclose(np.diff(xs[:, 0]), 0.1, atol=1e-15)
    np.testing.assert_allclose(rod.segment_orientations, np.tile(rod.segment_orientations[0], (10, 1)), atol=1e-15)
    np.testing.assert_allclose(rod.rest_darboux, 0.0, atol=1e-12)


def test_rope_masses_follow_linear_density():
    rod = discretize_rope(RopeSpec("r", [[0, 0, 0], [0.3, 0, 0]], linear_density=0.05, segment_count=6))
    masses = np.array([p.mass for p in rod.particles])
    assert masses.sum() == pytest.approx(0.05 * 0.3, rel=1e-12)
    assert masses[0] == pytest.approx(0.5 * masses[1], rel=1e-12)


def test_quarter_arc_darboux_matches_curvature():
    radius = 0.2
    ang = np.linspace(0, np.pi / 2, 400)
    line = radius * np.stack([np.cos(ang), np.sin(ang), np.zeros_like(ang)], -1)
    rod = discretize_rope(RopeSpec("arc", line, segment_count=20))
    mags = np.linalg.norm(rod.rest_darboux, axis=1)
    np.testing.assert_allclose(mags, 1 / radius, rtol=0.05)
    np.testing.assert_allclose(mags, mags.mean(), rtol=1e-3)


def test_too_short_curve():
    with pytest.raises(TooShortCurveError):
        discretize_rope(RopeSpec("r", [[0, 0, 0], [0.01, 0, 0]], radius=0.005, segment_count=5))


def test_rope_validation():
    with pytest.raises(SceneValidationError):
        discretize_rope(RopeSpec("r", [[0, 0, 0], [0.5, 0, 0]], segment_count=1))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 25))
def test_rope_rest_state_satisfies_constraints(seed, count):
    rng = np.random.default_rng(seed)
    # smooth random space curve: a few low-frequency harmonics
    s = np.linspace(0, 1, 300)
    coef = rng.normal(scale=0.05, size=(3, 3))
    line = np.stack([0.5 * s + sum(coef[k, 0] * np.sin((k + 1) * np.pi * s) for k in range(3)),
                     sum(coef[k, 1] * np.sin((k + 1) * np.pi * s) for k in range(3)),
                     sum(coef[k, 2] * np.sin((k + 1) * np.pi * s) for k in range(3))], -1)
    rod = discretize_rope(RopeSpec("r", line, radius=0.002, segment_count=count))
    for k in range(rod.num_segments):
        assert np.linalg.norm(shear_stretch_violation(rod, k)) < 1e-9
    for k in range(rod.num_segments - 1):
        assert np.linalg.norm(bend_twist_violation(rod, k)) < 1e-9


# --- anchoring ---------------------------------------------------------------------------


def test_anchor_at_center_and_ties():
    centers = np.array([[0.0, 0, 0], [0.02, 0, 0], [0.01, 0.03, 0]])
    assert anchor_gaussians([[0.02, 0, 0]], centers)[0] == 1
    assert anchor_gaussians([[0.01, 0, 0]], centers)[0] == 0


def test_anchor_matches_kdtree():
    rng = np.random.default_rng(11)
    centers = rng.uniform(-0.1, 0.1, size=(300, 3))
    pts = rng.uniform(-0.12, 0.12, size=(5000, 3))
    _, ref = cKDTree(centers).query(pts)
    np.testing.assert_array_equal(anchor_gaussians(pts, centers, chunk=777), ref)


def test_object_splats_store_anchor_frame_offsets():
    spec = ObjectSpec("b", Box((0.04, 0.03, 0.02)), position=[0.1, 0.0, 0.05],
                      orientation=quat_from_axis_angle([0.3, 1, 0.2], 0.7))
    built = build_object(spec)
    gs = seed_gaussians(spec, count_per_sphere=3, seed=2)
    centers = built.body.position + Rotation.from_quat(built.body.orientation).apply(built.body.sphere_offsets)
    rebuilt = centers[gs.anchor] + Rotation.from_quat(built.body.orientation).apply(gs.offset)
    np.testing.assert_allclose(rebuilt, gs.means, atol=1e-14)
    # the stored anchor is always the nearest sphere
    np.testing.assert_array_equal(anchor_gaussians(gs.means, centers), gs.anchor)


# --- splat seeding ---------------------------------------------------------------------------


def test_one_sphere_object_single_splat():
    spec = ObjectSpec("dot", Box((0.01, 0.01, 0.01)))
    for seed in range(20):
        gs = seed_gaussians(spec, count_per_sphere=1, seed=seed)
        assert len(gs) == 1
        assert np.linalg.norm(gs.means[0]) < 0.005


def test_splat_constructor_invariants():
    gs = seed_gaussians(ObjectSpec("t", t_shape(), texture=Texture("palette", seed=4)), count_per_sphere=4)
    assert np.all((gs.opacity > 0.5) & (gs.opacity <= 1))
    assert np.all(gs.scales > 0)
    rope = seed_gaussians(RopeSpec("r", [[0, 0, 0], [0.3, 0, 0]]), count_per_sphere=4)
    assert np.all((rope.opacity > 0.5) & (rope.opacity <= 1)) and np.all(rope.scales > 0)


def test_seeding_is_deterministic():
    spec = ObjectSpec("b", Box((0.06, 0.04, 0.04)))
    a, b = seed_gaussians(spec, 4, seed=9), seed_gaussians(spec, 4, seed=9)
    for f in ("means", "quats", "scales", "opacity", "colors", "anchor"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


def test_checker_top_view_shows_two_colors():
    spec = ObjectSpec("b", Box((0.06, 0.06, 0.02)), texture=Texture("checker", ((1, 0, 0), (0, 0, 1)), 0.02))
    gs = seed_gaussians(spec, 4)
    cam = Camera.look_at([0, 0, 0.3], [0, 0, 0], up=(0, 1, 0), width=80, height=60)
    img = render(gs, cam)
    fg = img.rgb[img.alpha > 0.9]
    reds = np.count_nonzero((fg[:, 0] > 0.6) & (fg[:, 2] < 0.4))
    blues = np.count_nonzero((fg[:, 2] > 0.6) & (fg[:, 0] < 0.4))
    assert reds > 20 and blues > 20


# --- scenes ------------------------------------------------------------------------------------


def _scene():
    return SceneSpec(
        objects=[ObjectSpec("box", Box((0.06, 0.04, 0.04)), position=[0, 0, 0.02])],
        ropes=[RopeSpec("rope", [[-0.1, 0.1, 0.005], [0.1, 0.1, 0.005]], segment_count=8)],
        pusher=PusherSpec([0.0, 1.0], [[-0.08, 0, 0.02], [-0.02, 0, 0.02]]),
        cameras=ring_cameras([0, 0, 0.02], count=2, width=40, height=30))


def test_build_scene_layout():
    inst = build_scene(_scene())
    w = inst.world
    assert w.body_names == ["box", "pusher"]
    assert inst.pusher_body == 1 and w.body_inv_mass[1] == 0
    assert set(inst.object_gaussians) == {"box", "rope"}
    np.testing.assert_allclose(inst.posed_gaussians().means, inst.gaussians.means, atol=1e-14)
    np.testing.assert_allclose(inst.pusher_target(0.5), [-0.05, 0, 0.02])


def test_posed_splats_follow_a_moved_body():
    inst = build_scene(_scene())
    w = inst.world
    rot = Rotation.from_rotvec([0.1, -0.3, 0.5])
    t = np.array([0.02, -0.01, 0.03])
    c0 = w.body_x[0].copy()
    idx = inst.object_gaussians["box"]
    before = inst.posed_gaussians().means[idx]
    w.body_x[0] = c0 + t
    w.body_q[0] = (rot * Rotation.from_quat(w.body_q[0])).as_quat()
    after = inst.posed_gaussians().means[idx]
    np.testing.assert_allclose(after, rot.apply(before - c0) + c0 + t, atol=1e-12)


def test_density_perturbation():
    a, b = build_scene(_scene()), build_scene(_scene(), density_scale=1.2)
    assert b.world.body_inv_mass[0] == pytest.approx(a.world.body_inv_mass[0] / 1.2, rel=1e-12)
    np.testing.assert_array_equal(a.gaussians.means, b.gaussians.means)


def test_validation_lists_every_problem():
    spec = SceneSpec(objects=[ObjectSpec("a", Box((0.04, 0.04, 0.04)), density=-1.0),
                              ObjectSpec("a", Box((0.04, 0.04, 0.04)))],
                     pusher=PusherSpec([0.0, 0.0], [[0, 0, 0], [1, 0, 0]]))
    with pytest.raises(SceneValidationError) as exc:
        build_scene(spec)
    msg = str(exc.value)
    assert "density" in msg and "unique" in msg and "strictly increasing" in msg


def test_yaml_round_trip(tmp_path):
    spec = _scene()
    path = tmp_path / "scene.yaml"
    save_scene(spec, path)
    again = load_scene(path)
    assert scene_to_dict(again) == scene_to_dict(spec)
    a, b = build_scene(spec), build_scene(again)
    np.testing.assert_array_equal(a.gaussians.means, b.gaussians.means)


def test_scene_from_dict_shorthands():
    d = yaml.safe_load("""
objects:
  - name: t
    shape: {type: t_shape}
    position: [0, 0, 0.015]
    yaw: 0.5
ropes:
  - name: r
    arc: {center: [0, 0, 0.005], radius: 0.2, start_angle: 0, end_angle: 1.0}
    segment_count: 10
cameras:
  ring: {target: [0, 0, 0], count: 3, resolution: [32, 24]}
""")
    spec = scene_from_dict(d)
    assert len(spec.cameras) == 3 and spec.cameras[0].width == 32
    np.testing.assert_allclose(spec.objects[0].orientation, quat_from_axis_angle([0, 0, 1], 0.5))


def test_scene_from_dict_reports_bad_shape():
    with pytest.raises(SceneValidationError, match="objects\\[0\\].shape.type"):
        scene_from_dict({"objects": [{"name": "x", "shape": {"type": "cone"}}]})
    with pytest.raises(SceneValidationError, match="missing required field"):
        scene_from_dict({"objects": [{"shape": {"type": "box", "extents": [0.1, 0.1, 0.1]}}]})


def test_build_is_deterministic():
    a, b = build_scene(_scene(), seed=3), build_scene(_scene(), seed=3)
    np.testing.assert_array_equal(a.gaussians.means, b.gaussians.means)
    np.testing.assert_array_equal(a.gaussians.colors, b.gaussians.colors)
    np.testing.assert_array_equal(a.world.body_x, b.world.body_x)
