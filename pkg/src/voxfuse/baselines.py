"""Classical TSDF baseline, the static accumulate-then-encode ablation, and
occupancy-threshold calibration."""

from dataclasses import dataclass

import numpy as np

from .extract import CodeCache, ExtractionConfig, extract_grid, map_bounds, marching_cubes
from .geometry import apply_pose, partition_scan
from .latent_map import NeuralMap, VoxelCell
from .mesh import TriangleMesh, marching_cubes_field
from .metrics import compute_metrics
from .networks import encode


@dataclass
class TsdfConfig:
    voxel_size: float = 0.04
    truncation: float = None  # default 4 * voxel_size

    def __post_init__(self):
        if self.truncation is None:
            self.truncation = 4.0 * self.voxel_size
        if self.truncation < self.voxel_size:
            raise ValueError("truncation must be at least one voxel")


class TsdfMap:
    """Dense truncated signed-distance map fused by constant-weight running
    averages (weight 1 per observation)."""

    def __init__(self, bounds_lo, bounds_hi, config=None):
        self.config = config or TsdfConfig()
        vs = self.config.voxel_size
        self.origin = np.asarray(bounds_lo, dtype=np.float64)
        extent = np.asarray(bounds_hi, dtype=np.float64) - self.origin
        self.dims = np.maximum(np.ceil(extent / vs).astype(int) + 1, 2)
        self.values = np.zeros(tuple(self.dims), dtype=np.float64)
        self.weights = np.zeros(tuple(self.dims), dtype=np.float64)

    def integrate(self, frame):
        """Update voxels along each measured ray within +-truncation of the
        hit with the clamped projective signed distance."""
        if len(frame.points) == 0:
            return self
        cfg = self.config
        world = apply_pose(frame.points, frame.pose)
        origin = frame.pose.translation
        rays = world - origin
        depths = np.linalg.norm(rays, axis=1)
        valid = depths > 1e-9
        rays = rays[valid] / depths[valid, None]
        depths = depths[valid]

        step = cfg.voxel_size / 2.0
        n_steps = int(np.ceil(2.0 * cfg.truncation / step)) + 1
        offsets = np.linspace(-cfg.truncation, cfg.truncation, n_steps)
        # sample points along each ray around its hit; sdf = depth - t
        t = depths[:, None] + offsets[None, :]
        keep = t > 1e-6
        pos = origin + t[..., None] * rays[:, None, :]
        sdf = np.clip(depths[:, None] - t, -cfg.truncation, cfg.truncation)

        idx = np.round((pos - self.origin) / cfg.voxel_size).astype(np.int64)
        inb = keep & np.all((idx >= 0) & (idx < self.dims), axis=-1)
        idx = idx[inb]
        vals = sdf[inb]
        flat = (idx[:, 0] * self.dims[1] + idx[:, 1]) * self.dims[2] + idx[:, 2]
        ncell = int(np.prod(self.dims))
        sums = np.bincount(flat, weights=vals, minlength=ncell).reshape(self.values.shape)
        counts = np.bincount(flat, minlength=ncell).reshape(self.values.shape).astype(np.float64)
        new_w = self.weights + counts
        touched = counts > 0
        self.values[touched] = (
            self.values[touched] * self.weights[touched] + sums[touched]
        ) / new_w[touched]
        self.weights = new_w
        return self

    def mesh(self):
        """Zero-crossing surface; voxels never observed are treated unknown."""
        return marching_cubes_field(self.values, 0.0, self.origin,
                                    self.config.voxel_size,
                                    known=self.weights > 0, inside="below")


def static_fusion_baseline(frames, bundle, spec, policy=None, extraction=None,
                           region=None):
    """Accumulate every (subsampled) scan first, encode each voxel once from
    the full accumulation, then decode and mesh. No latent-space fusion: the
    decode path sees the raw single encode of each voxel."""
    from .latent_map import IntegrationPolicy

    policy = policy or IntegrationPolicy()
    clouds = []
    for frame in frames:
        if len(frame.points) == 0:
            continue
        world = apply_pose(frame.points, frame.pose)
        n_keep = max(1, int(round(policy.input_subsample_fraction * len(world))))
        if n_keep < len(world):
            rng = np.random.default_rng([policy.seed, frame.index])
            keep = np.sort(rng.choice(len(world), size=n_keep, replace=False))
            world = world[keep]
        clouds.append(world)
    nmap = NeuralMap(spec)
    if not clouds:
        return TriangleMesh.empty(), nmap
    accumulated = np.vstack(clouds)
    parts = partition_scan(accumulated, spec)
    for vox in sorted(parts):
        code = encode(parts[vox], bundle.encoder, bundle.enc_cfg)
        nmap.cells[vox] = VoxelCell(code.data.astype(np.float32), 1)
    nmap.stats.scans_integrated = len(clouds)
    nmap.stats.voxels_allocated = nmap.stats.voxels_updated = len(parts)

    extraction = extraction or ExtractionConfig()
    cfg = ExtractionConfig(
        tau_occ=extraction.tau_occ,
        query_density=extraction.query_density,
        interpolate_boundaries=extraction.interpolate_boundaries,
        blend_space=extraction.blend_space,
        use_fusion_network=False,
    )
    cache = CodeCache(nmap, bundle, use_fusion_network=False)
    if region is None:
        region = map_bounds(nmap)
    grid = extract_grid(nmap, cache, region, bundle, cfg)
    return marching_cubes(grid, iso=cfg.tau_occ), nmap


def calibrate_tau(nmap, bundle, gt_mesh, candidate_taus, extraction=None,
                  region=None, metric_config=None):
    """Sweep occupancy thresholds and pick the recall-maximizing one whose
    accuracy stays within 1.5x the sweep's best accuracy.

    Returns (best_tau, sweep) where sweep rows are dicts with tau, recall,
    accuracy, completeness. Raises when no candidate produces any occupied
    prediction.
    """
    taus = sorted(float(t) for t in candidate_taus)
    if not taus:
        raise ValueError("calibrate_tau: no candidate thresholds")
    if len(taus) == 1:
        return taus[0], [{"tau": taus[0]}]
    extraction = extraction or ExtractionConfig()
    cache = CodeCache(nmap, bundle, use_fusion_network=extraction.use_fusion_network)
    if region is None:
        region = map_bounds(nmap)
    grid = extract_grid(nmap, cache, region, bundle, extraction)

    sweep = []
    for tau in taus:
        mesh = marching_cubes(grid, iso=tau)
        if mesh.is_empty():
            sweep.append({"tau": tau, "recall": 0.0, "accuracy": float("nan"),
                          "completeness": float("inf"), "empty": True})
            continue
        rep = compute_metrics(mesh, gt_mesh, metric_config)
        sweep.append({"tau": tau, "recall": rep.recall, "accuracy": rep.accuracy,
                      "completeness": rep.completeness, "empty": False})
    usable = [row for row in sweep if not row["empty"]]
    if not usable:
        raise ValueError("calibrate_tau: no occupied predictions at any tau")
    best_acc = min(row["accuracy"] for row in usable)
    admissible = [row for row in usable if row["accuracy"] <= 1.5 * best_acc]
    best = max(admissible, key=lambda row: row["recall"])
    return best["tau"], sweep
