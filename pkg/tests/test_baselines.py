import numpy as np
import pytest

from voxfuse.baselines import TsdfConfig, TsdfMap, calibrate_tau, static_fusion_baseline
from voxfuse.geometry import GridSpec, Pose, ScanFrame, SensorModel
from voxfuse.latent_map import IntegrationPolicy
from voxfuse.mesh import TriangleMesh
from voxfuse.networks import ModelBundle
from voxfuse.sim import Plane, Scene, raycast_scan


@pytest.fixture(scope="module")
def bundle():
    return ModelBundle.initialize(seed=11)


def wall_scene(x=2.0):
    return Scene([Plane(np.array([x, 0.0, 0.0]), np.array([-1.0, 0.0, 0.0]),
                        extent_u=20, extent_v=20)],
                 np.array([0.0, -2.0, -2.0]), np.array([x, 2.0, 2.0]))


def dense_wall_frame(x=2.0, index=0):
    scene = wall_scene(x)
    sensor = SensorModel(width=48, height=36, fov_x=np.deg2rad(70),
                         fov_y=np.deg2rad(55), max_range=8.0)
    cloud = raycast_scan(scene, Pose.identity(), sensor)
    return ScanFrame(index, cloud, Pose.identity())


def test_tsdf_config_validation():
    assert TsdfConfig(voxel_size=0.02).truncation == pytest.approx(0.08)
    with pytest.raises(ValueError, match="truncation"):
        TsdfConfig(voxel_size=0.1, truncation=0.05)


def test_tsdf_plane_zero_crossing_accuracy():
    cfg = TsdfConfig(voxel_size=0.05)
    tsdf = TsdfMap(np.array([0.0, -1.5, -1.5]), np.array([3.0, 1.5, 1.5]), cfg)
    tsdf.integrate(dense_wall_frame())
    mesh = tsdf.mesh()
    assert not mesh.is_empty()
    assert np.max(np.abs(mesh.vertices[:, 0] - 2.0)) < cfg.voxel_size / 2


def test_tsdf_values_bounded_by_truncation():
    cfg = TsdfConfig(voxel_size=0.05)
    tsdf = TsdfMap(np.array([0.0, -1.5, -1.5]), np.array([3.0, 1.5, 1.5]), cfg)
    tsdf.integrate(dense_wall_frame())
    assert tsdf.values.max() <= cfg.truncation + 1e-12
    assert tsdf.values.min() >= -cfg.truncation - 1e-12


def test_tsdf_idempotent_average():
    cfg = TsdfConfig(voxel_size=0.05)
    tsdf = TsdfMap(np.array([0.0, -1.5, -1.5]), np.array([3.0, 1.5, 1.5]), cfg)
    frame = dense_wall_frame()
    tsdf.integrate(frame)
    first = tsdf.values.copy()
    tsdf.integrate(frame)
    assert np.max(np.abs(tsdf.values - first)) < 1e-7


def test_tsdf_conflicting_scans_average_crossing():
    cfg = TsdfConfig(voxel_size=0.04)
    tsdf = TsdfMap(np.array([0.0, -1.5, -1.5]), np.array([3.0, 1.5, 1.5]), cfg)
    tsdf.integrate(dense_wall_frame(x=1.0, index=0))
    tsdf.integrate(dense_wall_frame(x=1.1, index=1))
    mesh = tsdf.mesh()
    assert not mesh.is_empty()
    # zero crossing near the average wall position
    central = mesh.vertices[
        (np.abs(mesh.vertices[:, 1]) < 0.5) & (np.abs(mesh.vertices[:, 2]) < 0.5)
    ]
    assert abs(central[:, 0].mean() - 1.05) < cfg.voxel_size / 2


def test_static_fusion_empty_accumulation(bundle):
    spec = GridSpec(d_v=1.0, d_i=1.2)
    mesh, nmap = static_fusion_baseline([], bundle, spec)
    assert mesh.is_empty()
    assert len(nmap) == 0


def test_static_fusion_encodes_each_voxel_once(bundle):
    spec = GridSpec(d_v=1.0, d_i=1.2)
    rng = np.random.default_rng(0)
    frames = [ScanFrame(i, rng.uniform(0.0, 2.0, size=(400, 3)), Pose.identity())
              for i in range(3)]
    policy = IntegrationPolicy(min_update_fraction=0.0, input_subsample_fraction=1.0)
    mesh, nmap = static_fusion_baseline(frames, bundle, spec, policy)
    assert len(nmap) > 0
    assert all(cell.count == 1 for cell in nmap.cells.values())


def test_calibrate_tau_single_candidate(bundle):
    from voxfuse.latent_map import NeuralMap
    nmap = NeuralMap(GridSpec(d_v=1.0, d_i=1.2))
    tau, sweep = calibrate_tau(nmap, bundle, TriangleMesh.empty(), [0.3])
    assert tau == 0.3


def test_calibrate_tau_degenerate_map_errors(bundle):
    from voxfuse.latent_map import NeuralMap
    spec = GridSpec(d_v=1.0, d_i=1.2)
    nmap = NeuralMap(spec)
    nmap.allocate((0, 0, 0))  # allocated but empty: always free
    quad = TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]],
                                 dtype=np.float64),
                        np.array([[0, 1, 2], [0, 2, 3]]))
    with pytest.raises(ValueError, match="no occupied"):
        calibrate_tau(nmap, bundle, quad, [0.05, 0.2, 0.5],
                      region=(np.zeros(3), np.ones(3)))
