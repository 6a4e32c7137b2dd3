"""Point clouds, rigid poses, voxel indexing, and the scan partition.

World space is partitioned into voxels of side d_v; voxel (i, j, k) occupies
[i*d_v, (i+1)*d_v) x ... and gathers input points from a larger cube of side
d_i centered on the voxel, so neighbouring voxels see overlapping context.
Local coordinates normalize that input cube to [0, 1]^3.
"""

from dataclasses import dataclass

import numpy as np

ORTHO_TOL = 1e-6


def as_cloud(points):
    """Validate an [N, 3] float64 point array (all coordinates finite)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return pts.reshape(0, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"point cloud must be [N, 3], got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud contains non-finite coordinates")
    return pts


@dataclass(frozen=True)
class Pose:
    """Rigid transform: p_world = rotation @ p + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(r.T @ r - np.eye(3)).max()
        if err > ORTHO_TOL:
            raise ValueError(f"rotation not orthonormal (|R^T R - I| = {err:.2e})")
        if abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise ValueError(f"rotation determinant {np.linalg.det(r):.6f} != +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity():
        return Pose(np.eye(3), np.zeros(3))

    def inverse(self):
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other):
        """self applied after other: (self * other)(p) = self(other(p))."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)


def apply_pose(cloud, pose):
    """Transform a sensor-frame cloud into the world frame."""
    pts = as_cloud(cloud)
    return pts @ pose.rotation.T + pose.translation


@dataclass(frozen=True)
class GridSpec:
    """Geometry of the voxel map and its encoder/latent grids.

    d_v: voxel side (m); d_i: input-volume side (m, > d_v); d_q: query-volume
    side (m, defaults to d_v + (d_i - d_v) * 0.5); encoder_grid_res: cells per
    axis of the point-pooling grid; latent_res/latent_channels: latent code
    shape; query_density: occupancy query points per meter per axis.
    """

    d_v: float = 0.5
    d_i: float = 0.7
    d_q: float = None
    encoder_grid_res: int = 16
    latent_res: int = 4
    latent_channels: int = 32
    query_density: float = 20.0

    def __post_init__(self):
        if self.d_q is None:
            object.__setattr__(self, "d_q", self.d_v + (self.d_i - self.d_v) * 0.5)
        if not (self.d_v > 0 and self.d_i > 0 and self.d_q > 0):
            raise ValueError("grid dimensions must be positive")
        if self.d_i <= self.d_v:
            raise ValueError(f"d_i ({self.d_i}) must exceed d_v ({self.d_v})")
        if not (self.d_v <= self.d_q <= self.d_i):
            raise ValueError(f"d_q ({self.d_q}) must lie in [d_v, d_i]")
        ratio = self.encoder_grid_res / self.latent_res
        depth = int(round(np.log2(ratio)))
        if self.latent_res * 2 ** depth != self.encoder_grid_res or depth < 1:
            raise ValueError(
                f"encoder_grid_res ({self.encoder_grid_res}) must be "
                f"latent_res ({self.latent_res}) * 2^depth"
            )
        object.__setattr__(self, "depth", depth)

    def voxel_center(self, index):
        return (np.asarray(index, dtype=np.float64) + 0.5) * self.d_v

    def world_to_index(self, points):
        pts = as_cloud(points)
        return np.floor(pts / self.d_v).astype(np.int64)


def queries_per_voxel_edge(spec, density=None):
    """Query lattice nodes per voxel edge when sampling the query volume."""
    d = spec.query_density if density is None else density
    return int(round(spec.d_q * d))


def _axis_candidate_range(coords, half, d_v):
    """Per-axis inclusive index range [lo, hi] of cubes of half-size `half`
    centered on voxel centers that contain the coordinate, with closed-lower /
    open-upper faces."""
    hi = np.floor((coords + half) / d_v - 0.5).astype(np.int64)
    lo = np.floor((coords - half) / d_v - 0.5).astype(np.int64) + 1
    return lo, hi


def owning_voxels(points, side, d_v):
    """Indices (point row, voxel index triple) of every cube of side `side`
    (centered on voxel centers) containing each point."""
    pts = as_cloud(points)
    n = pts.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 3), dtype=np.int64)
    half = side / 2.0
    lo, hi = _axis_candidate_range(pts, half, d_v)
    counts = hi - lo + 1
    max_c = counts.max(axis=0)
    rows = []
    vox = []
    for dx in range(max_c[0]):
        ix = lo[:, 0] + dx
        okx = dx < counts[:, 0]
        for dy in range(max_c[1]):
            iy = lo[:, 1] + dy
            oky = okx & (dy < counts[:, 1])
            if not oky.any():
                continue
            for dz in range(max_c[2]):
                iz = lo[:, 2] + dz
                ok = oky & (dz < counts[:, 2])
                if not ok.any():
                    continue
                idx = np.flatnonzero(ok)
                rows.append(idx)
                vox.append(np.stack([ix[idx], iy[idx], iz[idx]], axis=1))
    rows = np.concatenate(rows)
    vox = np.concatenate(vox, axis=0)
    return rows, vox


def partition_scan(cloud, spec):
    """Split a world-frame cloud into per-voxel local clouds.

    A point belongs to every voxel whose input volume (side d_i) contains it;
    with d_i > d_v a point near a shared corner is duplicated into up to 8
    voxels. Local coordinates normalize the input volume to [0, 1]^3.
    Returns {(i, j, k): [M, 3] float64} with keys in sorted order.
    """
    pts = as_cloud(cloud)
    rows, vox = owning_voxels(pts, spec.d_i, spec.d_v)
    if rows.size == 0:
        return {}
    centers = (vox + 0.5) * spec.d_v
    local = (pts[rows] - (centers - spec.d_i / 2.0)) / spec.d_i
    local = np.clip(local, 0.0, 1.0)
    order = np.lexsort((rows, vox[:, 2], vox[:, 1], vox[:, 0]))
    vox = vox[order]
    local = local[order]
    boundaries = np.flatnonzero(np.r_[True, np.any(np.diff(vox, axis=0) != 0, axis=1)])
    out = {}
    for s, e in zip(boundaries, np.r_[boundaries[1:], len(vox)]):
        out[tuple(int(v) for v in vox[s])] = local[s:e]
    return out


@dataclass
class SensorModel:
    """Range sensor description. `pinhole` looks along +x with the image
    plane spanned by -y (right) and -z (down); `spherical` sweeps azimuth
    over full circle and elevation over fov_y."""

    kind: str = "pinhole"
    width: int = 64
    height: int = 48
    fov_x: float = np.deg2rad(90.0)
    fov_y: float = np.deg2rad(70.0)
    max_range: float = 6.0

    def __post_init__(self):
        if self.kind not in ("pinhole", "spherical"):
            raise ValueError(f"unknown sensor kind {self.kind!r}")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")
        if self.width < 2 or self.height < 2:
            raise ValueError("sensor resolution must be at least 2x2")

    def ray_directions(self):
        """Unit ray directions in the sensor frame, [H*W, 3]."""
        if self.kind == "pinhole":
            tx = np.tan(self.fov_x / 2.0)
            ty = np.tan(self.fov_y / 2.0)
            ys = np.linspace(-tx, tx, self.width)
            zs = np.linspace(ty, -ty, self.height)
            yy, zz = np.meshgrid(ys, zs)
            dirs = np.stack([np.ones_like(yy), yy, zz], axis=-1).reshape(-1, 3)
        else:
            az = np.linspace(-np.pi, np.pi, self.width, endpoint=False)
            el = np.linspace(-self.fov_y / 2.0, self.fov_y / 2.0, self.height)
            aa, ee = np.meshgrid(az, el)
            dirs = np.stack(
                [np.cos(ee) * np.cos(aa), np.cos(ee) * np.sin(aa), np.sin(ee)], axis=-1
            ).reshape(-1, 3)
        return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def frustum_voxels(pose, sensor, max_range, spec):
    """Conservative superset of voxel indices intersecting the sensor's view
    volume truncated at max_range."""
    if max_range <= 0:
        raise ValueError("max_range must be positive")
    origin = pose.translation
    d_v = spec.d_v

    if sensor.kind == "spherical":
        lo = np.floor((origin - max_range) / d_v).astype(np.int64)
        hi = np.floor((origin + max_range) / d_v).astype(np.int64)
        out = set()
        r2 = max_range * max_range
        for i in range(lo[0], hi[0] + 1):
            for j in range(lo[1], hi[1] + 1):
                for k in range(lo[2], hi[2] + 1):
                    bmin = np.array([i, j, k]) * d_v
                    nearest = np.clip(origin, bmin, bmin + d_v)
                    if np.sum((nearest - origin) ** 2) <= r2:
                        out.add((i, j, k))
        return out

    # Pinhole: test candidate voxels against the frustum's bounding planes.
    # A box is kept unless all 8 corners lie strictly outside one plane,
    # which may over-include near edges but never misses an intersection.
    axis = pose.rotation @ np.array([1.0, 0.0, 0.0])
    tx = np.tan(sensor.fov_x / 2.0)
    ty = np.tan(sensor.fov_y / 2.0)

    if tx < 1e-12 and ty < 1e-12:
        # Degenerate frustum: cover the optical-axis segment only.
        ts = np.arange(0.0, max_range + d_v / 4.0, d_v / 4.0)
        samples = origin + np.minimum(ts, max_range)[:, None] * axis
        return {tuple(int(v) for v in row) for row in np.floor(samples / d_v).astype(np.int64)}
    corners_s = np.array(
        [[1.0, sy * tx, sz * ty] for sy in (-1, 1) for sz in (-1, 1)]
    )
    corners_w = origin + max_range * (corners_s @ pose.rotation.T)
    hull = np.vstack([origin, corners_w])
    lo = np.floor(hull.min(axis=0) / d_v).astype(np.int64)
    hi = np.floor(hull.max(axis=0) / d_v).astype(np.int64)

    planes = [(axis, float(axis @ origin))]  # behind the apex
    far_n = -axis
    planes.append((far_n, float(far_n @ (origin + axis * max_range))))
    # side planes from adjacent corner-direction pairs (normals point inward)
    dir_w = corners_s @ pose.rotation.T
    side_pairs = [(0, 1), (1, 3), (3, 2), (2, 0)]
    for a, b in side_pairs:
        n = np.cross(dir_w[a], dir_w[b])
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            continue  # degenerate (zero field of view)
        n = n / norm
        if n @ axis < 0:
            n = -n
        planes.append((n, float(n @ origin)))

    ii, jj, kk = np.meshgrid(
        np.arange(lo[0], hi[0] + 1),
        np.arange(lo[1], hi[1] + 1),
        np.arange(lo[2], hi[2] + 1),
        indexing="ij",
    )
    idx = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
    bmin = idx * d_v
    keep = np.ones(len(idx), dtype=bool)
    corner_offsets = np.array(
        [[a, b, c] for a in (0, 1) for b in (0, 1) for c in (0, 1)], dtype=np.float64
    ) * d_v
    for n, off in planes:
        dists = (bmin[:, None, :] + corner_offsets[None, :, :]) @ n - off
        keep &= ~np.all(dists < -1e-12, axis=1)
    return {tuple(int(v) for v in row) for row in idx[keep]}


# ---------------------------------------------------------------------------
# file I/O


def write_ply_points(path, points):
    pts = as_cloud(points)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(pts)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("end_header\n")
        for p in pts:
            fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n")


def read_ply_points(path):
    with open(path) as fh:
        line = fh.readline().strip()
        if line != "ply":
            raise ValueError(f"{path}: not a PLY file")
        n = None
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: missing end_header")
            line = line.strip()
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            elif line == "end_header":
                break
        if n is None:
            raise ValueError(f"{path}: no vertex element")
        pts = np.loadtxt(fh, max_rows=n, dtype=np.float64) if n else np.zeros((0, 3))
    return as_cloud(pts.reshape(-1, 3)[:, :3] if n else pts)


def write_trajectory(path, poses):
    """One line per frame: 12 numbers, row-major [R | T]."""
    with open(path, "w") as fh:
        for pose in poses:
            mat = np.hstack([pose.rotation, pose.translation[:, None]])
            fh.write(" ".join(f"{v:.9f}" for v in mat.reshape(-1)) + "\n")


def read_trajectory(path):
    poses = []
    with open(path) as fh:
        for line in fh:
            vals = np.array([float(v) for v in line.split()])
            if vals.size == 0:
                continue
            if vals.size != 12:
                raise ValueError(f"{path}: trajectory line needs 12 numbers, got {vals.size}")
            mat = vals.reshape(3, 4)
            # re-orthonormalize to absorb text round-off
            u, _, vt = np.linalg.svd(mat[:, :3])
            r = u @ vt
            if np.linalg.det(r) < 0:
                u[:, -1] *= -1
                r = u @ vt
            poses.append(Pose(r, mat[:, 3]))
    return poses


@dataclass
class ScanFrame:
    """One timestamped point cloud (sensor frame) with its sensor pose."""

    index: int
    points: np.ndarray
    pose: Pose
    timestamp: float = 0.0
    sensor: SensorModel = None

    def __post_init__(self):
        self.points = as_cloud(self.points)
