"""Triangle meshes, marching cubes over scalar lattices, and PLY export."""

import struct
from dataclasses import dataclass

import numpy as np

from .mc_tables import CORNER_OFFSETS, EDGE_ENDPOINTS, EDGE_TABLE, TRI_TABLE

_EDGE_TABLE = np.asarray(EDGE_TABLE, dtype=np.int32)
_TRI_TABLE = np.asarray(TRI_TABLE, dtype=np.int32)
_CORNERS = np.asarray(CORNER_OFFSETS, dtype=np.int64)

DEGENERATE_AREA = 1e-12


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # [V, 3] float64, meters
    triangles: np.ndarray  # [T, 3] int64 vertex indices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise ValueError("triangle indices out of range")

    @property
    def n_triangles(self):
        return len(self.triangles)

    def is_empty(self):
        return self.triangles.size == 0

    def corners(self):
        """Triangle corner positions, [T, 3, 3]."""
        return self.vertices[self.triangles]

    def triangle_areas(self):
        c = self.corners()
        cross = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        return 0.5 * np.linalg.norm(cross, axis=1)

    def area(self):
        return float(self.triangle_areas().sum())

    def signed_volume(self):
        c = self.corners()
        return float(np.einsum("ij,ij->i", c[:, 0], np.cross(c[:, 1], c[:, 2])).sum() / 6.0)

    @staticmethod
    def empty():
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @staticmethod
    def concatenate(meshes):
        meshes = [m for m in meshes if not m.is_empty()]
        if not meshes:
            return TriangleMesh.empty()
        verts = []
        tris = []
        offset = 0
        for m in meshes:
            verts.append(m.vertices)
            tris.append(m.triangles + offset)
            offset += len(m.vertices)
        return TriangleMesh(np.vstack(verts), np.vstack(tris))


def marching_cubes_field(values, iso, origin, spacing, known=None, inside="below"):
    """Extract the iso-surface of a scalar lattice as a triangle mesh.

    values: [nx, ny, nz] lattice samples; node (i, j, k) sits at
    origin + (i, j, k) * spacing. `inside="below"` treats values < iso as
    interior (signed-distance convention); `inside="above"` treats
    values >= iso as interior (occupancy convention). Cells touching a node
    with known=False are skipped entirely, so no surface is produced against
    unobserved space. Degenerate triangles are dropped.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 3:
        raise ValueError(f"lattice must be 3-D, got shape {v.shape}")
    if min(v.shape) < 2:
        raise ValueError("lattice needs at least 2 nodes per axis")
    if inside == "above":
        v = -v
        iso = -iso
    elif inside != "below":
        raise ValueError(f"unknown inside convention {inside!r}")
    origin = np.asarray(origin, dtype=np.float64)
    nx, ny, nz = v.shape

    def corner_view(arr, off):
        a, b, c = off
        return arr[a:nx - 1 + a, b:ny - 1 + b, c:nz - 1 + c]

    cube_idx = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int32)
    for w, off in enumerate(_CORNERS):
        cube_idx |= (corner_view(v, off) < iso).astype(np.int32) << w
    active = _EDGE_TABLE[cube_idx] != 0
    if known is not None:
        k = np.asarray(known, dtype=bool)
        cell_known = np.ones_like(active)
        for off in _CORNERS:
            cell_known &= corner_view(k, off)
        active &= cell_known
    ci, cj, ck = np.nonzero(active)
    if ci.size == 0:
        return TriangleMesh.empty()
    cases = cube_idx[ci, cj, ck]
    cell = np.stack([ci, cj, ck], axis=1)

    corner_vals = np.empty((8, ci.size))
    for w, off in enumerate(_CORNERS):
        corner_vals[w] = v[ci + off[0], cj + off[1], ck + off[2]]
    corner_pos = origin + (cell[None, :, :] + _CORNERS[:, None, :]) * spacing

    edge_pos = np.empty((12, ci.size, 3))
    for e, (a, b) in enumerate(EDGE_ENDPOINTS):
        v0, v1 = corner_vals[a], corner_vals[b]
        delta = v1 - v0
        t = np.where(np.abs(delta) < 1e-30, 0.5, (iso - v0) / np.where(delta == 0, 1.0, delta))
        edge_pos[e] = corner_pos[a] + t[:, None] * (corner_pos[b] - corner_pos[a])

    tri_rows = _TRI_TABLE[cases]
    cell_ids = np.arange(ci.size)
    tris = []
    for t0 in range(0, 15, 3):
        emitted = tri_rows[:, t0] >= 0
        if not emitted.any():
            break
        sel = cell_ids[emitted]
        e = tri_rows[emitted, t0:t0 + 3]
        tris.append(np.stack(
            [edge_pos[e[:, 0], sel], edge_pos[e[:, 1], sel], edge_pos[e[:, 2], sel]],
            axis=1,
        ))
    tri_pts = np.concatenate(tris, axis=0)
    cross = np.cross(tri_pts[:, 1] - tri_pts[:, 0], tri_pts[:, 2] - tri_pts[:, 0])
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    tri_pts = tri_pts[areas > DEGENERATE_AREA]
    n = len(tri_pts)
    return TriangleMesh(tri_pts.reshape(-1, 3), np.arange(3 * n, dtype=np.int64).reshape(-1, 3))


# ---------------------------------------------------------------------------
# PLY export / import


def write_ply_mesh(path, mesh, binary=True):
    header = (
        "ply\n"
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0\n"
        f"element vertex {len(mesh.vertices)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element face {len(mesh.triangles)}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    if binary:
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(mesh.vertices.astype("<f4").tobytes())
            faces = np.empty(len(mesh.triangles), dtype=[("n", "u1"), ("idx", "<i4", 3)])
            faces["n"] = 3
            faces["idx"] = mesh.triangles
            fh.write(faces.tobytes())
    else:
        with open(path, "w") as fh:
            fh.write(header)
            for p in mesh.vertices:
                fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n")
            for t in mesh.triangles:
                fh.write(f"3 {t[0]} {t[1]} {t[2]}\n")


def read_ply_mesh(path):
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        fmt = None
        n_vert = n_face = 0
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: missing end_header")
            token = line.strip().split()
            if not token:
                continue
            if token[0] == b"format":
                fmt = token[1].decode()
            elif token[0] == b"element":
                if token[1] == b"vertex":
                    n_vert = int(token[2])
                elif token[1] == b"face":
                    n_face = int(token[2])
            elif token[0] == b"end_header":
                break
        if fmt == "binary_little_endian":
            verts = np.frombuffer(fh.read(12 * n_vert), dtype="<f4").reshape(n_vert, 3)
            faces = np.frombuffer(
                fh.read(13 * n_face), dtype=[("n", "u1"), ("idx", "<i4", 3)]
            )
            tris = faces["idx"].astype(np.int64)
        elif fmt == "ascii":
            verts = np.zeros((n_vert, 3))
            for i in range(n_vert):
                verts[i] = [float(x) for x in fh.readline().split()[:3]]
            tris = np.zeros((n_face, 3), dtype=np.int64)
            for i in range(n_face):
                parts = fh.readline().split()
                if int(parts[0]) != 3:
                    raise ValueError(f"{path}: only triangle faces supported")
                tris[i] = [int(x) for x in parts[1:4]]
        else:
            raise ValueError(f"{path}: unsupported PLY format {fmt}")
    return TriangleMesh(np.asarray(verts, dtype=np.float64), tris)
