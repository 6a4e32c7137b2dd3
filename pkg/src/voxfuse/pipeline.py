"""End-to-end runs: simulate scans, map them, extract, evaluate, compare.

The comparison protocol mirrors the robustness study: the same seeded scans
(exact measurements, Gaussian-perturbed poses) are fed to the incremental
latent-fusion pipeline, the classical TSDF baseline, and the static
accumulate-then-encode ablation, and each reconstruction is scored against
the scene's analytic ground-truth mesh.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .baselines import TsdfConfig, TsdfMap, static_fusion_baseline
from .extract import CodeCache, ExtractionConfig, extract_grid, map_bounds, marching_cubes
from .geometry import ScanFrame
from .latent_map import IntegrationPolicy, NeuralMap, integrate
from .metrics import MetricConfig, compute_metrics
from .sim import NoiseConfig, generate_trajectory, perturb_pose, raycast_scan


def simulate_frames(scene, poses, sensor, noise=None, attach_sensor=True):
    """Scan from the TRUE poses, then attach (possibly noise-corrupted)
    poses to the frames: measurements stay exact, only the pose estimate
    degrades."""
    noise = noise or NoiseConfig()
    frames = []
    for i, true_pose in enumerate(poses):
        cloud = raycast_scan(scene, true_pose, sensor)
        pose = perturb_pose(true_pose, noise, i)
        frames.append(ScanFrame(i, cloud, pose,
                                sensor=sensor if attach_sensor else None))
    return frames


@dataclass
class MappingTiming:
    per_frame_seconds: list = field(default_factory=list)

    @property
    def mean_seconds(self):
        return float(np.mean(self.per_frame_seconds)) if self.per_frame_seconds else 0.0

    @property
    def frames_per_second(self):
        m = self.mean_seconds
        return 1.0 / m if m > 0 else float("inf")


def run_neural_mapping(frames, bundle, spec, policy=None):
    """Stream frames through integrate; returns the map and per-frame timing."""
    nmap = NeuralMap(spec)
    timing = MappingTiming()
    policy = policy or IntegrationPolicy()
    for frame in frames:
        nmap, report = integrate(nmap, frame, bundle.encoder, bundle.enc_cfg, policy)
        timing.per_frame_seconds.append(report.seconds)
    return nmap, timing


def extract_scene_mesh(nmap, bundle, extraction=None, region=None):
    """Occupancy grid + mesh for a mapped scene; reports decode throughput."""
    extraction = extraction or ExtractionConfig()
    cache = CodeCache(nmap, bundle, use_fusion_network=extraction.use_fusion_network)
    if region is None:
        region = map_bounds(nmap)
    t0 = time.perf_counter()
    grid = extract_grid(nmap, cache, region, bundle, extraction)
    seconds = time.perf_counter() - t0
    n_observed = sum(1 for c in nmap.cells.values() if c.count > 0)
    voxels_per_second = n_observed / seconds if seconds > 0 else float("inf")
    mesh = marching_cubes(grid, iso=extraction.tau_occ)
    return mesh, grid, {"extract_seconds": seconds, "voxels_per_second": voxels_per_second,
                        "observed_voxels": n_observed}


def run_tsdf_mapping(frames, bounds_lo, bounds_hi, config=None):
    tsdf = TsdfMap(bounds_lo, bounds_hi, config)
    timing = MappingTiming()
    for frame in frames:
        t0 = time.perf_counter()
        tsdf.integrate(frame)
        timing.per_frame_seconds.append(time.perf_counter() - t0)
    return tsdf, timing


@dataclass
class CompareSettings:
    sigmas: tuple = (0.0, 0.025, 0.05, 0.075)
    seeds: tuple = (0,)
    n_frames: int = 32
    scene_seed: int = 100
    n_objects: int = None
    noise_seed: int = 1000
    methods: tuple = ("ours", "tsdf", "static")


def compare_methods(scene, sensor, bundle, spec, settings, policy=None,
                    extraction=None, tsdf_config=None, metric_config=None,
                    trajectory_style="orbit"):
    """Run {ours, tsdf, static} x sigma x seed on identically seeded scans.

    Returns (rows, timing_rows): metric rows are fully deterministic under
    fixed seeds; wall-clock timings are reported separately.
    """
    policy = policy or IntegrationPolicy()
    extraction = extraction or ExtractionConfig()
    tsdf_config = tsdf_config or TsdfConfig()
    metric_config = metric_config or MetricConfig()
    gt = scene.ground_truth_mesh()
    margin = spec.d_q
    region = (np.asarray(scene.bounds_lo) - margin, np.asarray(scene.bounds_hi) + margin)

    rows = []
    timing_rows = []
    for seed in settings.seeds:
        poses = generate_trajectory(scene, settings.n_frames, trajectory_style, seed=seed)
        for sigma in settings.sigmas:
            noise = NoiseConfig(sigma_t=sigma, seed=settings.noise_seed + seed)
            frames = simulate_frames(scene, poses, sensor, noise)
            for method in settings.methods:
                t0 = time.perf_counter()
                if method == "ours":
                    nmap, timing = run_neural_mapping(frames, bundle, spec, policy)
                    mesh, _, stats = extract_scene_mesh(nmap, bundle, extraction, region)
                    fps = timing.frames_per_second
                    vps = stats["voxels_per_second"]
                    voxel_size = spec.d_v
                elif method == "tsdf":
                    tsdf, timing = run_tsdf_mapping(frames, region[0], region[1], tsdf_config)
                    mesh = tsdf.mesh()
                    fps = timing.frames_per_second
                    vps = float("nan")
                    voxel_size = tsdf_config.voxel_size
                elif method == "static":
                    mesh, _ = static_fusion_baseline(frames, bundle, spec, policy,
                                                     extraction, region)
                    fps = float("nan")
                    vps = float("nan")
                    voxel_size = spec.d_v
                else:
                    raise ValueError(f"unknown method {method!r}")
                rep = compute_metrics(mesh, gt, metric_config)
                rows.append({
                    "scene_seed": settings.scene_seed,
                    "seed": seed,
                    "sigma_t": sigma,
                    "method": method,
                    "voxel_size": voxel_size,
                    "accuracy": rep.accuracy,
                    "completeness": rep.completeness,
                    "recall": rep.recall,
                    "recall_no_floor": rep.recall_no_floor,
                })
                timing_rows.append({
                    "seed": seed,
                    "sigma_t": sigma,
                    "method": method,
                    "total_seconds": time.perf_counter() - t0,
                    "integrate_fps": fps,
                    "decode_voxels_per_second": vps,
                })
    return rows, timing_rows


CSV_COLUMNS = ["scene_seed", "seed", "sigma_t", "method", "voxel_size",
               "accuracy", "completeness", "recall", "recall_no_floor"]
TIMING_COLUMNS = ["seed", "sigma_t", "method", "total_seconds", "integrate_fps",
                  "decode_voxels_per_second"]


def format_csv(rows, columns):
    """Deterministic CSV text: fixed column order, repr-stable floats."""
    lines = [",".join(columns)]
    for row in rows:
        cells = []
        for col in columns:
            v = row[col]
            if isinstance(v, float):
                cells.append(f"{v:.6g}")
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
