"""Decode the neural map into occupancy: point queries, dense grids, meshes.

Every allocated voxel owns a query volume (cube of side d_q >= d_v centered
on it). Because neighbouring query volumes overlap, a point can be decoded
under several voxels; the results are blended with separable per-axis tent
weights that are 1 inside a voxel's core (inner cube of side 2*d_v - d_q)
and fall linearly to 0 at its query-volume face, normalized over owners. A
point with no allocated owner is unknown; one whose owners all have zero
measurements is free.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .geometry import owning_voxels
from .latent_map import fused_code, mean_code
from .mesh import marching_cubes_field
from .networks import decode, decode_logits

UNKNOWN, FREE, OCCUPIED = 0, 1, 2

_EPS = 1e-12


@dataclass
class ExtractionConfig:
    tau_occ: float = 0.05
    query_density: float = None       # points per meter per axis; None -> spec's
    interpolate_boundaries: bool = True
    blend_space: str = "probability"  # or "logit" (ablation)
    use_fusion_network: bool = True   # False decodes raw averaged codes

    def __post_init__(self):
        if not (0.0 < self.tau_occ < 1.0):
            raise ValueError("tau_occ must be in (0, 1)")
        if self.blend_space not in ("probability", "logit"):
            raise ValueError(f"unknown blend_space {self.blend_space!r}")

    def density(self, spec):
        d = self.query_density if self.query_density is not None else spec.query_density
        if d * spec.d_v < 2.0:
            raise ValueError("query_density must give at least 2 nodes per voxel edge")
        return d


@dataclass
class OccupancyGrid:
    """Lattice of query results: per node a state (unknown/free/occupied) and
    the decoded probability (0 where never decoded)."""

    origin: np.ndarray
    spacing: float
    states: np.ndarray  # uint8 [nx, ny, nz]
    probs: np.ndarray   # float32 [nx, ny, nz]

    @property
    def shape(self):
        return self.states.shape

    def node_coords(self, axis):
        return self.origin[axis] + self.spacing * np.arange(self.states.shape[axis])


class CodeCache:
    """Lazily computed per-voxel decoded codes for one map snapshot."""

    def __init__(self, nmap, model, use_fusion_network=True):
        self.nmap = nmap
        self.model = model
        self.use_fusion = use_fusion_network
        self._codes = {}

    def get(self, index):
        if index in self._codes:
            return self._codes[index]
        if self.use_fusion:
            code = fused_code(self.nmap, index, self.model.fusion, self.model.fus_cfg)
        else:
            code = mean_code(self.nmap, index)
        self._codes[index] = code
        return code


def _axis_tent(offsets, d_v, d_q):
    """Weight of a voxel for points offset from its center along one axis."""
    q_half = d_q / 2.0
    c_half = d_v - d_q / 2.0
    if q_half - c_half <= _EPS:  # d_q == d_v: constant weight inside
        return np.ones_like(offsets)
    a = np.abs(offsets)
    w = (q_half - a) / (q_half - c_half)
    return np.clip(w, 0.0, 1.0)


def _decode_under_voxel(nmap, cache, model, index, points_world, blend_space):
    """Decode world points under one voxel's code; returns values in the
    chosen blend space."""
    spec = nmap.spec
    center = spec.voxel_center(index)
    local = (points_world - (center - spec.d_i / 2.0)) / spec.d_i
    code = cache.get(index)
    if blend_space == "logit":
        vals = decode_logits(code, local, model.decoder, model.dec_cfg).data
    else:
        vals = decode(code, local, model.decoder, model.dec_cfg).data
    return vals.astype(np.float64)


def query_points(nmap, cache, points, model, config=None):
    """Classify world points -> (states uint8 [M], probabilities float32 [M]).

    probability is 0 where the state is unknown or never-decoded free.
    """
    config = config or ExtractionConfig()
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    m = len(pts)
    spec = nmap.spec
    own_side = spec.d_q if config.interpolate_boundaries else spec.d_v
    rows, vox = owning_voxels(pts, own_side, spec.d_v)

    allocated = np.zeros(m, dtype=bool)
    wsum = np.zeros(m)
    wval = np.zeros(m)
    eqsum = np.zeros(m)
    eqcnt = np.zeros(m, dtype=np.int64)

    if rows.size:
        order = np.lexsort((rows, vox[:, 2], vox[:, 1], vox[:, 0]))
        rows, vox = rows[order], vox[order]
        bounds = np.flatnonzero(np.r_[True, np.any(np.diff(vox, axis=0) != 0, axis=1)])
        for s, e in zip(bounds, np.r_[bounds[1:], len(vox)]):
            index = tuple(int(v) for v in vox[s])
            cell = nmap.cells.get(index)
            if cell is None:
                continue
            pr = rows[s:e]
            allocated[pr] = True
            if cell.count == 0:
                continue
            sub = pts[pr]
            vals = _decode_under_voxel(nmap, cache, model, index, sub, config.blend_space)
            offs = sub - spec.voxel_center(index)
            w = (_axis_tent(offs[:, 0], spec.d_v, own_side)
                 * _axis_tent(offs[:, 1], spec.d_v, own_side)
                 * _axis_tent(offs[:, 2], spec.d_v, own_side))
            wsum[pr] += w
            wval[pr] += w * vals
            eqsum[pr] += vals
            eqcnt[pr] += 1

    states = np.full(m, UNKNOWN, dtype=np.uint8)
    probs = np.zeros(m, dtype=np.float32)
    states[allocated] = FREE
    observed = eqcnt > 0
    blended = np.zeros(m)
    strong = observed & (wsum > _EPS)
    weak = observed & ~strong  # owners exist but all tent weights vanished
    blended[strong] = wval[strong] / wsum[strong]
    blended[weak] = eqsum[weak] / eqcnt[weak]
    if config.blend_space == "logit":
        vals = np.full(m, -np.inf)
        vals[observed] = blended[observed]
        p = 1.0 / (1.0 + np.exp(-np.clip(vals, -500, 500)))
    else:
        p = blended
    probs[observed] = p[observed].astype(np.float32)
    states[observed & (p >= config.tau_occ)] = OCCUPIED
    return states, probs


def query_probability(nmap, cache, point, model, config=None):
    """Single-point query -> ("unknown", None) | ("free", p) | ("occupied", p)."""
    states, probs = query_points(nmap, cache, np.asarray(point).reshape(1, 3), model, config)
    if states[0] == UNKNOWN:
        return "unknown", None
    return ("occupied" if states[0] == OCCUPIED else "free"), float(probs[0])


def map_bounds(nmap, margin=None):
    """World AABB covering every allocated voxel's query volume."""
    if not nmap.cells:
        return np.zeros(3), np.zeros(3)
    idx = np.array(sorted(nmap.cells), dtype=np.float64)
    centers = (idx + 0.5) * nmap.spec.d_v
    half = (margin if margin is not None else nmap.spec.d_q / 2.0)
    return centers.min(axis=0) - half, centers.max(axis=0) + half


def extract_grid(nmap, cache, region, model, config=None):
    """Decode a world-space box into an OccupancyGrid.

    The lattice spacing is 1/query_density; every node is labeled exactly as
    query_points would, but work is batched per voxel so each allocated,
    observed voxel is decoded once over the nodes inside its query volume.
    """
    config = config or ExtractionConfig()
    spec = nmap.spec
    spacing = 1.0 / config.density(spec)
    lo = np.asarray(region[0], dtype=np.float64)
    hi = np.asarray(region[1], dtype=np.float64)
    n = np.floor((hi - lo) / spacing + 1e-9).astype(int) + 1
    if np.any(hi - lo <= 0):
        return OccupancyGrid(lo, spacing, np.zeros((0, 0, 0), dtype=np.uint8),
                             np.zeros((0, 0, 0), dtype=np.float32))

    own_side = spec.d_q if config.interpolate_boundaries else spec.d_v
    half = own_side / 2.0
    nx, ny, nz = int(n[0]), int(n[1]), int(n[2])
    allocated = np.zeros((nx, ny, nz), dtype=bool)
    wsum = np.zeros((nx, ny, nz))
    wval = np.zeros((nx, ny, nz))
    eqsum = np.zeros((nx, ny, nz))
    eqcnt = np.zeros((nx, ny, nz), dtype=np.int32)

    def node_range(c, lo_a, n_a):
        # node i at lo_a + i*spacing inside [c - half, c + half)
        i0 = int(np.ceil((c - half - lo_a) / spacing - 1e-9))
        i1 = int(np.floor((c + half - lo_a) / spacing - 1e-9))
        return max(i0, 0), min(i1, n_a - 1)

    for index in sorted(nmap.cells):
        cell = nmap.cells[index]
        center = spec.voxel_center(index)
        spans = []
        ok = True
        for a in range(3):
            r = node_range(center[a], lo[a], int(n[a]))
            if r[0] > r[1]:
                ok = False
                break
            spans.append(r)
        if not ok:
            continue
        (x0, x1), (y0, y1), (z0, z1) = spans
        allocated[x0:x1 + 1, y0:y1 + 1, z0:z1 + 1] = True
        if cell.count == 0:
            continue
        xs = lo[0] + spacing * np.arange(x0, x1 + 1)
        ys = lo[1] + spacing * np.arange(y0, y1 + 1)
        zs = lo[2] + spacing * np.arange(z0, z1 + 1)
        gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
        pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
        vals = _decode_under_voxel(nmap, cache, model, index, pts, config.blend_space)
        vals = vals.reshape(gx.shape)
        w = (_axis_tent(xs - center[0], spec.d_v, own_side)[:, None, None]
             * _axis_tent(ys - center[1], spec.d_v, own_side)[None, :, None]
             * _axis_tent(zs - center[2], spec.d_v, own_side)[None, None, :])
        sl = np.s_[x0:x1 + 1, y0:y1 + 1, z0:z1 + 1]
        wsum[sl] += w
        wval[sl] += w * vals
        eqsum[sl] += vals
        eqcnt[sl] += 1

    states = np.full((nx, ny, nz), UNKNOWN, dtype=np.uint8)
    probs = np.zeros((nx, ny, nz), dtype=np.float32)
    states[allocated] = FREE
    observed = eqcnt > 0
    blended = np.zeros((nx, ny, nz))
    strong = observed & (wsum > _EPS)
    weak = observed & ~strong
    blended[strong] = wval[strong] / wsum[strong]
    blended[weak] = eqsum[weak] / eqcnt[weak]
    if config.blend_space == "logit":
        p = np.zeros((nx, ny, nz))
        p[observed] = 1.0 / (1.0 + np.exp(-np.clip(blended[observed], -500, 500)))
    else:
        p = blended
    probs[observed] = p[observed].astype(np.float32)
    states[observed & (p >= config.tau_occ)] = OCCUPIED
    return OccupancyGrid(lo, spacing, states, probs)


def marching_cubes(grid, iso=None, tau_occ=0.05):
    """Triangle mesh of the occupied region of an OccupancyGrid. Unknown
    nodes are treated as outside and cells touching them are skipped."""
    if iso is None:
        iso = tau_occ
    if min(grid.shape) < 2:
        raise ValueError("occupancy grid needs at least 2 nodes per axis")
    known = grid.states != UNKNOWN
    return marching_cubes_field(grid.probs.astype(np.float64), iso, grid.origin,
                                grid.spacing, known=known, inside="above")


# ---------------------------------------------------------------------------
# occupancy-grid file format: 2-bit states + 16-bit quantized probabilities

_MAGIC = b"VXFOCC01"
_VERSION = 1


def save_grid(path, grid):
    states = grid.states.reshape(-1)
    pad = (-len(states)) % 4
    padded = np.concatenate([states, np.zeros(pad, dtype=np.uint8)])
    packed = (padded[0::4] | (padded[1::4] << 2) | (padded[2::4] << 4)
              | (padded[3::4] << 6)).astype(np.uint8)
    quant = np.round(grid.probs.reshape(-1) * 65535.0).astype("<u2")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<H", _VERSION))
        fh.write(struct.pack("<3d", *grid.origin))
        fh.write(struct.pack("<d", grid.spacing))
        fh.write(struct.pack("<3i", *grid.shape))
        fh.write(packed.tobytes())
        fh.write(quant.tobytes())


def load_grid(path):
    """Restore an occupancy grid; probabilities carry 1/65535 quantization."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not an occupancy grid file")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported grid version {version}")
        origin = np.array(struct.unpack("<3d", fh.read(24)))
        (spacing,) = struct.unpack("<d", fh.read(8))
        shape = struct.unpack("<3i", fh.read(12))
        count = shape[0] * shape[1] * shape[2]
        n_packed = (count + 3) // 4
        packed = np.frombuffer(fh.read(n_packed), dtype=np.uint8)
        quant = np.frombuffer(fh.read(2 * count), dtype="<u2")
        if packed.size != n_packed or quant.size != count:
            raise ValueError(f"{path}: truncated occupancy grid")
    unpacked = np.empty(n_packed * 4, dtype=np.uint8)
    unpacked[0::4] = packed & 3
    unpacked[1::4] = (packed >> 2) & 3
    unpacked[2::4] = (packed >> 4) & 3
    unpacked[3::4] = (packed >> 6) & 3
    states = unpacked[:count].reshape(shape)
    probs = (quant.astype(np.float32) / 65535.0).reshape(shape)
    return OccupancyGrid(origin, spacing, states, probs)
