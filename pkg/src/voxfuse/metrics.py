"""Reconstruction metrics: accuracy, completeness, recall.

accuracy   = mean distance from points sampled on the predicted mesh to the
             ground-truth surface (lower is better)
completeness = mean distance from ground-truth samples to the predicted
             surface (lower is better)
recall     = fraction of ground-truth samples within tau_r of the predicted
             surface (higher is better; the safe-navigation proxy)
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


@dataclass
class MetricConfig:
    n_samples: int = 10000
    tau_r: float = 0.05
    exclude_floor_margin: float = 0.05  # crop gt samples below floor+margin for recall*
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 100:
            raise ValueError("n_samples must be at least 100")
        if self.tau_r <= 0:
            raise ValueError("tau_r must be positive")


@dataclass
class MetricsReport:
    accuracy: float
    completeness: float
    recall: float
    recall_no_floor: float
    n_pred_samples: int
    n_gt_samples: int

    def as_dict(self):
        return {
            "accuracy": self.accuracy,
            "completeness": self.completeness,
            "recall": self.recall,
            "recall_no_floor": self.recall_no_floor,
        }


def sample_surface(mesh, n, seed=0):
    """Area-weighted uniform surface samples via barycentric coordinates."""
    if mesh.is_empty():
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.triangle_areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero total area")
    tri_idx = rng.choice(len(areas), size=n, p=areas / total)
    corners = mesh.corners()[tri_idx]
    u = rng.uniform(size=n)
    v = rng.uniform(size=n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    return corners[:, 0] + u[:, None] * (corners[:, 1] - corners[:, 0]) \
        + v[:, None] * (corners[:, 2] - corners[:, 0])


def nearest_neighbor_distances(points, ref_points):
    """Distance from each point to the nearest reference point."""
    if len(ref_points) == 0:
        return np.full(len(points), np.inf)
    tree = cKDTree(np.asarray(ref_points))
    d, _ = tree.query(np.asarray(points))
    return d


def _point_triangle_dist_sq(p, a, b, c):
    """Exact squared point-triangle distance for row-aligned [M, 3] arrays."""
    v0 = b - a
    v1 = c - a
    v2 = p - a
    d00 = np.einsum("ij,ij->i", v0, v0)
    d01 = np.einsum("ij,ij->i", v0, v1)
    d11 = np.einsum("ij,ij->i", v1, v1)
    d20 = np.einsum("ij,ij->i", v2, v0)
    d21 = np.einsum("ij,ij->i", v2, v1)
    denom = d00 * d11 - d01 * d01
    safe = denom > 1e-30
    inv = np.where(safe, denom, 1.0)
    bv = (d11 * d20 - d01 * d21) / inv
    bw = (d00 * d21 - d01 * d20) / inv
    inside = safe & (bv >= 0) & (bw >= 0) & (bv + bw <= 1)
    proj = a + bv[:, None] * v0 + bw[:, None] * v1
    face = np.einsum("ij,ij->i", p - proj, p - proj)

    def seg_sq(s0, edge):
        ee = np.einsum("ij,ij->i", edge, edge)
        t = np.einsum("ij,ij->i", p - s0, edge) / np.where(ee > 1e-30, ee, 1.0)
        t = np.clip(t, 0.0, 1.0)
        t = np.where(ee > 1e-30, t, 0.0)
        q = s0 + t[:, None] * edge
        return np.einsum("ij,ij->i", p - q, p - q)

    best = np.minimum(seg_sq(a, v0), seg_sq(a, v1))
    best = np.minimum(best, seg_sq(b, c - b))
    return np.where(inside, np.minimum(face, best), best)


def point_to_mesh_distance(points, mesh, brute_force=False):
    """Exact minimal point-triangle distance per point.

    A centroid KD-tree prunes candidate triangles; the pruning bound
    (nearest-centroid distance plus the largest centroid-to-vertex radius)
    guarantees the accelerated result equals the brute-force minimum.
    """
    if mesh.is_empty():
        raise ValueError("cannot measure distance to an empty mesh")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    corners = mesh.corners()
    n_tri = len(corners)

    if brute_force or n_tri <= 32:
        out = np.empty(len(pts))
        for i, p in enumerate(pts):
            prow = np.broadcast_to(p, (n_tri, 3))
            d2 = _point_triangle_dist_sq(prow, corners[:, 0], corners[:, 1], corners[:, 2])
            out[i] = np.sqrt(d2.min())
        return out

    centroids = corners.mean(axis=1)
    rmax = float(np.sqrt(((corners - centroids[:, None, :]) ** 2).sum(axis=2).max()))
    tree = cKDTree(centroids)
    _, nearest = tree.query(pts)
    near_c = corners[nearest]
    upper = np.sqrt(_point_triangle_dist_sq(pts, near_c[:, 0], near_c[:, 1], near_c[:, 2]))
    candidate_lists = tree.query_ball_point(pts, upper + rmax + 1e-12)

    flat_pts = []
    flat_tris = []
    offsets = [0]
    for i, cand in enumerate(candidate_lists):
        flat_tris.extend(cand)
        flat_pts.extend([i] * len(cand))
        offsets.append(len(flat_tris))
    flat_tris = np.asarray(flat_tris, dtype=np.int64)
    flat_pts = np.asarray(flat_pts, dtype=np.int64)
    tri = corners[flat_tris]
    d2 = _point_triangle_dist_sq(pts[flat_pts], tri[:, 0], tri[:, 1], tri[:, 2])
    out = np.minimum.reduceat(d2, offsets[:-1])
    return np.sqrt(out)


def compute_metrics(pred, gt, config=None):
    """Accuracy / completeness / recall between predicted and ground-truth
    meshes. An empty prediction reports accuracy NaN (undefined),
    completeness inf, and recall 0."""
    config = config or MetricConfig()
    if gt.is_empty():
        raise ValueError("ground-truth mesh is empty")
    gt_samples = sample_surface(gt, config.n_samples, seed=config.seed)
    if pred.is_empty():
        above = gt_samples[:, 2] > gt.vertices[:, 2].min() + config.exclude_floor_margin
        return MetricsReport(float("nan"), float("inf"), 0.0, 0.0,
                             0, len(gt_samples))
    pred_samples = sample_surface(pred, config.n_samples, seed=config.seed)
    acc = float(point_to_mesh_distance(pred_samples, gt).mean())
    d_gt = point_to_mesh_distance(gt_samples, pred)
    comp = float(d_gt.mean())
    recall = float(np.mean(d_gt <= config.tau_r))
    floor_z = gt.vertices[:, 2].min() + config.exclude_floor_margin
    above = gt_samples[:, 2] > floor_z
    recall_nf = float(np.mean(d_gt[above] <= config.tau_r)) if above.any() else recall
    return MetricsReport(acc, comp, recall, recall_nf, len(pred_samples), len(gt_samples))
