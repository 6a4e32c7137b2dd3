"""The dynamic neural map: sparse per-voxel fusion state and scan integration.

Each allocated voxel stores the running SUM of the latent codes encoded from
every scan that contributed points to it, plus the contribution count. The
fused code served to readers is fusion_net(sum / count); memory per voxel is
constant no matter how many scans arrived.
"""

import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .geometry import GridSpec, apply_pose, frustum_voxels, partition_scan
from .networks import code_shape, encode, fuse


@dataclass
class VoxelCell:
    z_sum: np.ndarray  # running sum of latent codes, [C, L, L, L] float32
    count: int = 0     # number of scans that updated this cell


@dataclass
class IntegrationPolicy:
    """Input thinning knobs: keep `input_subsample_fraction` of each scan,
    and skip encoding a voxel whose local cloud holds fewer than
    `min_update_fraction` of the (subsampled) scan."""

    min_update_fraction: float = 0.01
    input_subsample_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.min_update_fraction <= 1.0):
            raise ValueError("min_update_fraction must be in [0, 1]")
        if not (0.0 < self.input_subsample_fraction <= 1.0):
            raise ValueError("input_subsample_fraction must be in (0, 1]")


@dataclass
class MapStats:
    scans_integrated: int = 0
    voxels_allocated: int = 0
    voxels_updated: int = 0


@dataclass
class IntegrationReport:
    frame_index: int
    n_points: int
    n_subsampled: int
    updated: list = field(default_factory=list)
    allocated: list = field(default_factory=list)
    skipped: list = field(default_factory=list)  # below the update gate
    seconds: float = 0.0


class NeuralMap:
    """Dynamically growing sparse map from voxel index to fusion state."""

    def __init__(self, spec=None):
        self.spec = spec or GridSpec()
        self.cells = {}
        self.stats = MapStats()

    def __len__(self):
        return len(self.cells)

    def allocate(self, index):
        cell = self.cells.get(index)
        if cell is None:
            shape = (
                self.spec.latent_channels,
                self.spec.latent_res,
                self.spec.latent_res,
                self.spec.latent_res,
            )
            cell = VoxelCell(np.zeros(shape, dtype=np.float32), 0)
            self.cells[index] = cell
            self.stats.voxels_allocated += 1
        return cell

    def state(self, index):
        """'unknown' | 'free' (allocated, no measurements) | 'observed'."""
        cell = self.cells.get(index)
        if cell is None:
            return "unknown"
        return "free" if cell.count == 0 else "observed"


def integrate(nmap, frame, encoder_params, enc_cfg, policy=None):
    """Fold one scan into the map.

    World-transforms the cloud, subsamples it, allocates frustum and
    point-containing voxels, and for every voxel whose local cloud passes the
    update gate adds encode(local cloud) to its running sum. Returns the
    updated map and a report of updated/allocated/skipped voxels.
    """
    if encoder_params is None:
        raise ValueError("integrate: encoder parameters are not loaded")
    policy = policy or IntegrationPolicy()
    t0 = time.perf_counter()
    report = IntegrationReport(frame.index, len(frame.points), 0)

    if frame.sensor is not None:
        for vox in sorted(frustum_voxels(frame.pose, frame.sensor, frame.sensor.max_range,
                                         nmap.spec)):
            nmap.allocate(vox)
            report.allocated.append(vox)

    if len(frame.points) == 0:
        nmap.stats.scans_integrated += 1
        report.seconds = time.perf_counter() - t0
        return nmap, report

    world = apply_pose(frame.points, frame.pose)
    n = len(world)
    n_keep = max(1, int(round(policy.input_subsample_fraction * n)))
    if n_keep < n:
        rng = np.random.default_rng([policy.seed, frame.index])
        keep = np.sort(rng.choice(n, size=n_keep, replace=False))
        world = world[keep]
    report.n_subsampled = len(world)

    parts = partition_scan(world, nmap.spec)
    gate = policy.min_update_fraction * len(world)
    for vox in sorted(parts):
        local = parts[vox]
        nmap.allocate(vox)
        if len(local) >= gate and len(local) > 0:
            code = encode(local, encoder_params, enc_cfg)
            cell = nmap.cells[vox]
            cell.z_sum = cell.z_sum + code.data.astype(np.float32)
            cell.count += 1
            nmap.stats.voxels_updated += 1
            report.updated.append(vox)
        else:
            report.skipped.append(vox)

    nmap.stats.scans_integrated += 1
    report.seconds = time.perf_counter() - t0
    return nmap, report


def mean_code(nmap, index):
    """Average latent code of a voxel (None when unknown or never updated)."""
    cell = nmap.cells.get(index)
    if cell is None or cell.count == 0:
        return None
    return Tensor((cell.z_sum / cell.count).astype(np.float32))


def fused_code(nmap, index, fusion_params, fus_cfg):
    """Fusion-corrected code of a voxel, or None for unknown/free voxels
    (callers treat a None from an allocated voxel as free space)."""
    mean = mean_code(nmap, index)
    if mean is None:
        return None
    return fuse(mean, fusion_params, fus_cfg)


# ---------------------------------------------------------------------------
# snapshot file format
#
# Little-endian binary:
#   magic "VXFMAP01" | u16 version
#   GridSpec: 4 doubles (d_v, d_i, d_q, query_density) + 3 i32 (R, L, C)
#   stats: 3 i64 | u64 n_cells
#   per cell: 3 i64 index | i64 count | raw float32 z_sum

_MAGIC = b"VXFMAP01"
_VERSION = 1


def save_map(path, nmap):
    spec = nmap.spec
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<H", _VERSION))
        fh.write(struct.pack("<4d3i", spec.d_v, spec.d_i, spec.d_q, spec.query_density,
                             spec.encoder_grid_res, spec.latent_res, spec.latent_channels))
        fh.write(struct.pack("<3q", nmap.stats.scans_integrated,
                             nmap.stats.voxels_allocated, nmap.stats.voxels_updated))
        fh.write(struct.pack("<Q", len(nmap.cells)))
        for index in sorted(nmap.cells):
            cell = nmap.cells[index]
            fh.write(struct.pack("<3q", *index))
            fh.write(struct.pack("<q", cell.count))
            fh.write(cell.z_sum.astype("<f4", copy=False).tobytes())


def _read_exact(fh, n):
    raw = fh.read(n)
    if len(raw) != n:
        raise ValueError("truncated map snapshot")
    return raw


def load_map(path):
    """Restore a map snapshot; cells round-trip bit-exactly."""
    with open(path, "rb") as fh:
        if _read_exact(fh, len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a map snapshot (bad magic)")
        (version,) = struct.unpack("<H", _read_exact(fh, 2))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported snapshot version {version}")
        d_v, d_i, d_q, density, r, l, c = struct.unpack("<4d3i", _read_exact(fh, 44))
        spec = GridSpec(d_v=d_v, d_i=d_i, d_q=d_q, encoder_grid_res=r,
                        latent_res=l, latent_channels=c, query_density=density)
        nmap = NeuralMap(spec)
        scans, alloc, updated = struct.unpack("<3q", _read_exact(fh, 24))
        (n_cells,) = struct.unpack("<Q", _read_exact(fh, 8))
        nbytes = c * l ** 3 * 4
        cells = {}
        for _ in range(n_cells):
            index = struct.unpack("<3q", _read_exact(fh, 24))
            (count,) = struct.unpack("<q", _read_exact(fh, 8))
            z = np.frombuffer(_read_exact(fh, nbytes), dtype="<f4").reshape(c, l, l, l)
            cells[index] = VoxelCell(z.copy(), count)
        nmap.cells = cells
        nmap.stats = MapStats(scans, alloc, updated)
    return nmap
