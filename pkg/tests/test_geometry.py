import numpy as np
import pytest

from voxfuse.geometry import (
    GridSpec,
    Pose,
    ScanFrame,
    SensorModel,
    apply_pose,
    frustum_voxels,
    partition_scan,
    queries_per_voxel_edge,
    read_ply_points,
    read_trajectory,
    write_ply_points,
    write_trajectory,
)


def random_pose(rng):
    q = rng.normal(size=(3, 3))
    u, _, vt = np.linalg.svd(q)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return Pose(r, rng.normal(size=3))


def test_pose_validation():
    with pytest.raises(ValueError, match="orthonormal"):
        Pose(np.eye(3) * 2.0, np.zeros(3))
    flip = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(ValueError, match="determinant"):
        Pose(flip, np.zeros(3))


def test_apply_pose_identity_and_translation():
    cloud = np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]])
    assert np.array_equal(apply_pose(cloud, Pose.identity()), cloud)
    shifted = apply_pose(np.zeros((1, 3)), Pose(np.eye(3), np.array([1.0, 2.0, 3.0])))
    assert np.array_equal(shifted[0], [1.0, 2.0, 3.0])


def test_apply_pose_inverse_roundtrip():
    rng = np.random.default_rng(0)
    cloud = rng.normal(size=(50, 3))
    pose = random_pose(rng)
    back = apply_pose(apply_pose(cloud, pose), pose.inverse())
    assert np.max(np.abs(back - cloud)) < 1e-6


def test_grid_spec_defaults_and_validation():
    spec = GridSpec(d_v=0.5, d_i=0.7)
    assert abs(spec.d_q - 0.6) < 1e-12
    assert spec.depth == 2
    with pytest.raises(ValueError, match="exceed"):
        GridSpec(d_v=1.0, d_i=0.9)
    with pytest.raises(ValueError, match="2\\^depth"):
        GridSpec(encoder_grid_res=15, latent_res=4)
    assert queries_per_voxel_edge(GridSpec(d_v=0.5, d_i=0.7), 100.0) == 60
    assert queries_per_voxel_edge(GridSpec(d_v=1.0, d_i=1.2), 100.0) == 110


def test_voxel_index_roundtrip():
    spec = GridSpec(d_v=0.5, d_i=0.7)
    for idx in [(0, 0, 0), (3, -2, 7), (-5, -5, -5)]:
        center = spec.voxel_center(idx)
        assert tuple(spec.world_to_index(center[None])[0]) == idx


def test_partition_point_at_voxel_center():
    spec = GridSpec(d_v=1.0, d_i=1.2)
    parts = partition_scan(np.array([[0.5, 0.5, 0.5]]), spec)
    assert list(parts) == [(0, 0, 0)]
    assert np.allclose(parts[(0, 0, 0)][0], [0.5, 0.5, 0.5])


def test_partition_corner_point_owned_by_eight():
    spec = GridSpec(d_v=1.0, d_i=1.2)
    parts = partition_scan(np.array([[1.0, 1.0, 1.0]]), spec)
    assert len(parts) == 8
    expected = {(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)}
    assert set(parts) == expected


def brute_force_owners(point, spec, index_range=4):
    owners = []
    h = spec.d_i / 2.0
    for i in range(-index_range, index_range + 1):
        for j in range(-index_range, index_range + 1):
            for k in range(-index_range, index_range + 1):
                c = (np.array([i, j, k]) + 0.5) * spec.d_v
                if np.all(point >= c - h) and np.all(point < c + h):
                    owners.append((i, j, k))
    return set(owners)


def test_partition_matches_bruteforce_containment():
    spec = GridSpec(d_v=1.0, d_i=1.2)
    rng = np.random.default_rng(1)
    pts = rng.uniform(-2, 2, size=(1000, 3))
    parts = partition_scan(pts, spec)
    ownership = {}
    for vox, local in parts.items():
        ownership[vox] = len(local)
    brute = {}
    for p in pts:
        for vox in brute_force_owners(p, spec):
            brute[vox] = brute.get(vox, 0) + 1
    assert ownership == brute


def test_partition_local_coords_in_unit_cube_and_duplication():
    spec = GridSpec(d_v=0.5, d_i=0.7)
    rng = np.random.default_rng(2)
    pts = rng.uniform(-1, 1, size=(500, 3))
    parts = partition_scan(pts, spec)
    total = 0
    for local in parts.values():
        assert local.min() >= 0.0 and local.max() <= 1.0
        total += len(local)
    assert total >= 500  # duplication only, never loss


def test_partition_translation_covariance():
    spec = GridSpec(d_v=0.5, d_i=0.7)
    rng = np.random.default_rng(3)
    pts = rng.uniform(0, 1.5, size=(200, 3))
    base = partition_scan(pts, spec)
    shifted = partition_scan(pts + np.array([spec.d_v, 0.0, 0.0]), spec)
    assert set(shifted) == {(i + 1, j, k) for (i, j, k) in base}
    for (i, j, k), local in base.items():
        assert np.allclose(shifted[(i + 1, j, k)], local, atol=1e-9)


def test_partition_empty_cloud():
    assert partition_scan(np.zeros((0, 3)), GridSpec()) == {}


def test_frustum_zero_fov_axis_only():
    spec = GridSpec(d_v=1.0, d_i=1.2)
    sensor = SensorModel(kind="pinhole", fov_x=0.0, fov_y=0.0, max_range=3.5)
    pose = Pose(np.eye(3), np.array([0.5, 0.5, 0.5]))
    vox = frustum_voxels(pose, sensor, 3.5, spec)
    assert all(j == 0 and k == 0 for (_, j, k) in vox)
    assert {(0, 0, 0), (1, 0, 0), (2, 0, 0), (3, 0, 0)} <= vox


def test_frustum_tiny_range_single_voxel():
    spec = GridSpec(d_v=1.0, d_i=1.2)
    sensor = SensorModel(kind="pinhole", fov_x=np.deg2rad(60), fov_y=np.deg2rad(45),
                         max_range=0.4)
    pose = Pose(np.eye(3), np.array([0.5, 0.5, 0.5]))
    vox = frustum_voxels(pose, sensor, 0.4, spec)
    assert vox == {(0, 0, 0)}


def test_frustum_superset_of_dense_ray_sampling():
    spec = GridSpec(d_v=1.0, d_i=1.2)
    sensor = SensorModel(kind="pinhole", width=33, height=33,
                         fov_x=np.deg2rad(90), fov_y=np.deg2rad(90), max_range=2.0)
    pose = Pose(np.eye(3), np.zeros(3))
    vox = frustum_voxels(pose, sensor, 2.0, spec)
    assert {(0, 0, 0), (1, 0, 0)} <= vox
    dirs = sensor.ray_directions()
    covered = set()
    for t in np.linspace(0.0, 2.0, 64):
        pts = pose.translation + t * dirs
        for row in np.floor(pts / spec.d_v).astype(np.int64):
            covered.add(tuple(int(v) for v in row))
    assert covered <= vox


def test_frustum_spherical_ball():
    spec = GridSpec(d_v=1.0, d_i=1.2)
    sensor = SensorModel(kind="spherical", max_range=1.2)
    pose = Pose(np.eye(3), np.array([0.5, 0.5, 0.5]))
    vox = frustum_voxels(pose, sensor, 1.2, spec)
    assert (0, 0, 0) in vox and (1, 0, 0) in vox and (-1, 0, 0) in vox
    assert (2, 0, 0) not in vox


def test_ply_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(37, 3))
    path = tmp_path / "cloud.ply"
    write_ply_points(path, pts)
    back = read_ply_points(path)
    assert back.shape == pts.shape
    assert np.max(np.abs(back - pts)) < 1e-5


def test_trajectory_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    poses = [random_pose(rng) for _ in range(4)]
    path = tmp_path / "traj.txt"
    write_trajectory(path, poses)
    back = read_trajectory(path)
    assert len(back) == 4
    for a, b in zip(poses, back):
        assert np.max(np.abs(a.rotation - b.rotation)) < 1e-7
        assert np.max(np.abs(a.translation - b.translation)) < 1e-7


def test_scan_frame_validates_points():
    with pytest.raises(ValueError, match="finite"):
        ScanFrame(0, np.array([[np.nan, 0, 0]]), Pose.identity())
