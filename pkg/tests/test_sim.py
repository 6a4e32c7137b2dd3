import numpy as np
import pytest

from voxfuse.geometry import Pose, SensorModel, apply_pose
from voxfuse.sim import (
    Box,
    Cylinder,
    NoiseConfig,
    Plane,
    Scene,
    Sphere,
    generate_trajectory,
    icosphere,
    load_scene,
    perturb_pose,
    random_room_scene,
    raycast_scan,
    save_scene,
)


def test_primitive_sdfs_exact():
    s = Sphere(np.array([1.0, 0.0, 0.0]), 0.5)
    assert abs(s.sdf(np.array([[2.0, 0.0, 0.0]]))[0] - 0.5) < 1e-12
    b = Box(np.zeros(3), np.array([1.0, 1.0, 1.0]))
    assert abs(b.sdf(np.array([[2.0, 0.0, 0.0]]))[0] - 1.0) < 1e-12
    assert abs(b.sdf(np.array([[0.0, 0.0, 0.0]]))[0] + 1.0) < 1e-12
    c = Cylinder(np.zeros(3), 1.0, 1.0)
    assert abs(c.sdf(np.array([[2.0, 0.0, 0.0]]))[0] - 1.0) < 1e-12
    p = Plane(np.zeros(3), np.array([0.0, 0.0, 1.0]))
    assert abs(p.sdf(np.array([[0.0, 0.0, 2.0]]))[0] - 2.0) < 1e-12
    assert p.sdf(np.array([[0.0, 0.0, -1.0]]))[0] < 0


def test_icosphere_vertices_on_sphere_and_area():
    mesh = icosphere(np.array([1.0, 2.0, 3.0]), 0.4, 5)
    radii = np.linalg.norm(mesh.vertices - np.array([1.0, 2.0, 3.0]), axis=1)
    assert np.max(np.abs(radii - 0.4)) < 1e-9
    exact = 4 * np.pi * 0.4 ** 2
    assert abs(mesh.area() - exact) / exact < 1e-3


def test_primitive_meshes_on_surface():
    prims = [
        Sphere(np.array([0.5, 0.5, 0.5]), 0.3),
        Box(np.array([2.0, 0.0, 0.3]), np.array([0.3, 0.2, 0.3])),
        Cylinder(np.array([0.0, 2.0, 0.5]), 0.25, 0.5),
    ]
    for prim in prims:
        mesh = prim.mesh()
        assert np.max(np.abs(prim.sdf(mesh.vertices))) < 1e-9


def test_random_scene_mesh_sdf_agreement():
    for seed in range(3):
        scene = random_room_scene(seed)
        assert scene.verify(tol=1e-6) < 1e-6


def test_scene_yaml_roundtrip(tmp_path):
    scene = random_room_scene(7)
    path = tmp_path / "scene.yaml"
    save_scene(path, scene)
    back = load_scene(path)
    assert len(back.primitives) == len(scene.primitives)
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 5, size=(200, 3))
    assert np.max(np.abs(back.sdf(pts) - scene.sdf(pts))) < 1e-9


def test_raycast_empty_scene_empty_cloud():
    scene = Scene([Sphere(np.array([100.0, 0.0, 0.0]), 0.1)], np.zeros(3), np.ones(3))
    sensor = SensorModel(width=8, height=6, max_range=5.0)
    cloud = raycast_scan(scene, Pose.identity(), sensor)
    assert cloud.shape == (0, 3)


def test_raycast_plane_matches_closed_form():
    # sensor 2 m from an infinite wall, facing it along +x
    scene = Scene([Plane(np.array([2.0, 0.0, 0.0]), np.array([-1.0, 0.0, 0.0]),
                         extent_u=50, extent_v=50)],
                  np.zeros(3), np.array([2.0, 1.0, 1.0]))
    sensor = SensorModel(width=16, height=12, fov_x=np.deg2rad(60), fov_y=np.deg2rad(45),
                         max_range=10.0)
    cloud = raycast_scan(scene, Pose.identity(), sensor)
    dirs = sensor.ray_directions()
    assert len(cloud) == len(dirs)
    # depth along each ray is 2 / cos(angle to +x); returned points are the
    # sensor-frame intersections, so simply check x == 2
    assert np.max(np.abs(cloud[:, 0] - 2.0)) < 1e-4
    expected_range = 2.0 / dirs[:, 0]
    assert np.max(np.abs(np.linalg.norm(cloud, axis=1) - expected_range)) < 1e-4


def test_raycast_sphere_nearest_depth():
    scene = Scene([Sphere(np.array([3.0, 0.0, 0.0]), 1.0)], np.zeros(3), np.ones(3))
    sensor = SensorModel(width=9, height=9, fov_x=np.deg2rad(10), fov_y=np.deg2rad(10),
                         max_range=10.0)
    cloud = raycast_scan(scene, Pose.identity(), sensor)
    assert len(cloud) > 0
    depths = np.linalg.norm(cloud, axis=1)
    assert abs(depths.min() - 2.0) < 1e-4


def test_raycast_respects_max_range():
    scene = Scene([Plane(np.array([5.0, 0.0, 0.0]), np.array([-1.0, 0.0, 0.0]))],
                  np.zeros(3), np.array([5.0, 1.0, 1.0]))
    sensor = SensorModel(width=8, height=8, max_range=3.0)
    cloud = raycast_scan(scene, Pose.identity(), sensor)
    assert len(cloud) == 0


def test_perturb_pose_zero_noise_identity():
    pose = Pose(np.eye(3), np.array([1.0, 2.0, 3.0]))
    out = perturb_pose(pose, NoiseConfig(sigma_t=0.0), 5)
    assert np.array_equal(out.rotation, pose.rotation)
    assert np.array_equal(out.translation, pose.translation)


def test_perturb_pose_statistics():
    # empirical std of injected x-offsets within 3% over 10k frames
    pose = Pose.identity()
    noise = NoiseConfig(sigma_t=0.075, seed=3)
    dxs = np.array([
        perturb_pose(pose, noise, i).translation[0] for i in range(10000)
    ])
    assert abs(dxs.std() - 0.075) / 0.075 < 0.03
    assert abs(dxs.mean()) < 0.0025


def test_perturb_pose_deterministic():
    pose = Pose.identity()
    noise = NoiseConfig(sigma_t=0.05, sigma_yaw=0.02, seed=11)
    a = perturb_pose(pose, noise, 42)
    b = perturb_pose(pose, noise, 42)
    assert np.array_equal(a.rotation, b.rotation)
    assert np.array_equal(a.translation, b.translation)
    c = perturb_pose(pose, noise, 43)
    assert not np.array_equal(a.translation, c.translation)


def test_perturb_pose_yaw_keeps_rotation_valid():
    rng = np.random.default_rng(4)
    q = rng.normal(size=(3, 3))
    u, _, vt = np.linalg.svd(q)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    pose = Pose(r, np.zeros(3))
    out = perturb_pose(pose, NoiseConfig(sigma_t=0.1, sigma_yaw=0.1, seed=0), 3)
    assert np.max(np.abs(out.rotation.T @ out.rotation - np.eye(3))) < 1e-9


def test_trajectory_single_and_orbit():
    scene = random_room_scene(1)
    single = generate_trajectory(scene, 1, "orbit", seed=0)
    assert len(single) == 1
    assert scene.sdf(single[0].translation[None])[0] > 0.2

    orbit = generate_trajectory(scene, 8, "orbit", seed=0)
    assert len(orbit) == 8
    center = scene.center()
    angles = [np.arctan2(p.translation[1] - center[1], p.translation[0] - center[0])
              for p in orbit]
    steps = np.diff(np.unwrap(angles))
    assert np.max(np.abs(steps - steps[0])) < 1e-6  # equal by construction


def test_trajectory_alternating_steps():
    scene = random_room_scene(2)
    poses = generate_trajectory(scene, 8, "orbit-alt", seed=5)
    center = scene.center()
    angles = [np.arctan2(p.translation[1] - center[1], p.translation[0] - center[0])
              for p in poses]
    steps = np.abs(np.diff(np.unwrap(angles)))
    ratio = steps[1] / steps[0]
    assert ratio > 2.0 or 1 / ratio > 2.0  # alternating small/large


def test_trajectory_lawnmower_collision_free():
    scene = random_room_scene(3)
    poses = generate_trajectory(scene, 9, "lawnmower", seed=0)
    assert len(poses) == 9
    for p in poses:
        assert scene.sdf(p.translation[None])[0] > 0.2


def test_trajectory_coverage_of_visible_surface():
    scene = random_room_scene(4, n_objects=4)
    sensor = SensorModel(width=96, height=72, fov_x=np.deg2rad(100),
                         fov_y=np.deg2rad(80), max_range=8.0)
    poses = generate_trajectory(scene, 16, "orbit", seed=0)
    clouds = [apply_pose(raycast_scan(scene, p, sensor), p) for p in poses]
    samples = np.vstack([c for c in clouds if len(c)])

    from voxfuse.metrics import sample_surface, nearest_neighbor_distances
    gt = scene.ground_truth_mesh()
    gt_pts = sample_surface(gt, 4000, seed=0)
    d = nearest_neighbor_distances(gt_pts, samples)
    coverage = float(np.mean(d < 0.05))
    assert coverage >= 0.9


def test_noise_config_validation():
    with pytest.raises(ValueError):
        NoiseConfig(sigma_t=-0.1)
