"""Synthetic scenes, simulated range scanning, trajectories, pose noise.

Scenes are unions of analytic primitives. Each primitive carries an exact
signed-distance evaluator (negative inside) and a triangle-mesh ground
truth whose vertices lie exactly on the zero level set. Room shells use
single-sided planes so the ground-truth mesh contains only surface a sensor
inside the room can see. Scanning sphere-traces one ray per sensor pixel;
measurements are exact — pose perturbation is the only injected error
source.
"""

import math
from dataclasses import dataclass

import numpy as np
import yaml

from .geometry import Pose, SensorModel, apply_pose
from .mesh import TriangleMesh

TRACE_TOL = 1e-5
TRACE_STEPS = 256
MIN_CLEARANCE = 0.2  # sensor origins must keep this SDF clearance (m)


# ---------------------------------------------------------------------------
# primitives


@dataclass
class Sphere:
    center: np.ndarray
    radius: float

    def sdf(self, p):
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius

    def mesh(self, subdivisions=5):
        return icosphere(np.asarray(self.center, dtype=np.float64), self.radius,
                         subdivisions)

    def to_dict(self):
        return {"type": "sphere", "center": [float(v) for v in self.center],
                "radius": float(self.radius)}


@dataclass
class Box:
    center: np.ndarray
    half_extents: np.ndarray

    def sdf(self, p):
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def mesh(self):
        c = np.asarray(self.center, dtype=np.float64)
        h = np.asarray(self.half_extents, dtype=np.float64)
        corners = c + h * np.array(
            [[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)],
            dtype=np.float64,
        )
        # faces as corner-index quads (outward winding), split into triangles
        quads = [
            (0, 1, 3, 2), (4, 6, 7, 5),  # -x, +x
            (0, 4, 5, 1), (2, 3, 7, 6),  # -y, +y
            (0, 2, 6, 4), (1, 5, 7, 3),  # -z, +z
        ]
        tris = []
        for a, b, cc, d in quads:
            tris.append([a, b, cc])
            tris.append([a, cc, d])
        return TriangleMesh(corners, np.array(tris))

    def to_dict(self):
        return {"type": "box", "center": [float(v) for v in self.center],
                "half_extents": [float(v) for v in self.half_extents]}


@dataclass
class Cylinder:
    """Axis-aligned (z) cylinder."""

    center: np.ndarray
    radius: float
    half_height: float
    segments: int = 64

    def sdf(self, p):
        d = p - np.asarray(self.center)
        radial = np.linalg.norm(d[..., :2], axis=-1) - self.radius
        axial = np.abs(d[..., 2]) - self.half_height
        q = np.stack([radial, axial], axis=-1)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def mesh(self):
        c = np.asarray(self.center, dtype=np.float64)
        n = self.segments
        ang = 2 * np.pi * np.arange(n) / n
        ring = np.column_stack([np.cos(ang), np.sin(ang)]) * self.radius
        bot = np.column_stack([ring, np.full(n, -self.half_height)]) + c
        top = np.column_stack([ring, np.full(n, self.half_height)]) + c
        verts = [bot, top, (c + [0, 0, -self.half_height])[None], (c + [0, 0, self.half_height])[None]]
        verts = np.vstack(verts)
        cb, ct = 2 * n, 2 * n + 1
        tris = []
        for i in range(n):
            j = (i + 1) % n
            tris.append([i, j, n + i])          # side lower
            tris.append([j, n + j, n + i])      # side upper
            tris.append([cb, j, i])             # bottom cap (faces -z)
            tris.append([ct, n + i, n + j])     # top cap (faces +z)
        return TriangleMesh(verts, np.array(tris))

    def to_dict(self):
        return {"type": "cylinder", "center": [float(v) for v in self.center],
                "radius": float(self.radius), "half_height": float(self.half_height)}


@dataclass
class Plane:
    """Single-sided half-space: solid behind the (inward-pointing) normal.
    The ground-truth mesh is the rectangle spanned by `extent_u` along the
    tangent `u_dir` and `extent_v` along normal x u, centered on `point`."""

    point: np.ndarray
    normal: np.ndarray
    extent_u: float = 5.0
    extent_v: float = 5.0
    u_dir: np.ndarray = None

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        self.normal = n / np.linalg.norm(n)
        self.point = np.asarray(self.point, dtype=np.float64)
        if self.u_dir is not None:
            self.u_dir = np.asarray(self.u_dir, dtype=np.float64)

    def basis(self):
        n = self.normal
        if self.u_dir is not None:
            u = self.u_dir - (self.u_dir @ n) * n
        else:
            helper = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
            u = np.cross(n, helper)
        u = u / np.linalg.norm(u)
        v = np.cross(n, u)
        return u, v

    def sdf(self, p):
        return (p - self.point) @ self.normal

    def mesh(self):
        u, v = self.basis()
        a = self.point - u * self.extent_u - v * self.extent_v
        b = self.point + u * self.extent_u - v * self.extent_v
        c = self.point + u * self.extent_u + v * self.extent_v
        d = self.point - u * self.extent_u + v * self.extent_v
        return TriangleMesh(np.stack([a, b, c, d]), np.array([[0, 1, 2], [0, 2, 3]]))

    def to_dict(self):
        out = {"type": "plane", "point": [float(v) for v in self.point],
               "normal": [float(v) for v in self.normal],
               "extent_u": float(self.extent_u), "extent_v": float(self.extent_v)}
        if self.u_dir is not None:
            out["u_dir"] = [float(v) for v in self.u_dir]
        return out


def icosphere(center, radius, subdivisions):
    """Icosahedron subdivided toward a sphere; every vertex lies on it."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    base = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    base /= np.linalg.norm(base[0])
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    tris = base[faces]  # triangle soup [T, 3, 3] on the unit sphere
    for _ in range(subdivisions):
        a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]

        def mid(p, q):
            m = 0.5 * (p + q)
            return m / np.linalg.norm(m, axis=1, keepdims=True)

        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        tris = np.concatenate([
            np.stack([a, ab, ca], axis=1),
            np.stack([ab, b, bc], axis=1),
            np.stack([ca, bc, c], axis=1),
            np.stack([ab, bc, ca], axis=1),
        ])
    verts = (center + radius * tris.reshape(-1, 3))
    return TriangleMesh(verts, np.arange(len(verts)).reshape(-1, 3))


# ---------------------------------------------------------------------------
# scenes


@dataclass
class Scene:
    primitives: list
    bounds_lo: np.ndarray
    bounds_hi: np.ndarray

    def sdf(self, points):
        p = np.asarray(points, dtype=np.float64)
        vals = np.stack([prim.sdf(p) for prim in self.primitives], axis=0)
        return vals.min(axis=0)

    def ground_truth_mesh(self):
        return TriangleMesh.concatenate([prim.mesh() for prim in self.primitives])

    def center(self):
        return 0.5 * (np.asarray(self.bounds_lo) + np.asarray(self.bounds_hi))

    def verify(self, tol=1e-6):
        """Check mesh/SDF agreement: ground-truth vertices on the level set."""
        mesh = self.ground_truth_mesh()
        worst = float(np.abs(self.sdf(mesh.vertices)).max())
        if worst >= tol:
            raise AssertionError(f"scene mesh/SDF disagreement: |sdf| up to {worst:.2e}")
        return worst

    def to_dict(self):
        return {
            "bounds_lo": [float(v) for v in self.bounds_lo],
            "bounds_hi": [float(v) for v in self.bounds_hi],
            "primitives": [p.to_dict() for p in self.primitives],
        }


_PRIM_TYPES = {}


def _register(name, fn):
    _PRIM_TYPES[name] = fn


_register("sphere", lambda d: Sphere(np.array(d["center"]), d["radius"]))
_register("box", lambda d: Box(np.array(d["center"]), np.array(d["half_extents"])))
_register("cylinder", lambda d: Cylinder(np.array(d["center"]), d["radius"], d["half_height"]))
_register("plane", lambda d: Plane(np.array(d["point"]), np.array(d["normal"]),
                                   d.get("extent_u", 5.0), d.get("extent_v", 5.0),
                                   np.array(d["u_dir"]) if "u_dir" in d else None))


def save_scene(path, scene):
    with open(path, "w") as fh:
        yaml.safe_dump(scene.to_dict(), fh, sort_keys=True)


def load_scene(path):
    with open(path) as fh:
        data = yaml.safe_load(fh)
    prims = []
    for d in data["primitives"]:
        kind = d.get("type")
        if kind not in _PRIM_TYPES:
            raise ValueError(f"{path}: unknown primitive type {kind!r}")
        prims.append(_PRIM_TYPES[kind](d))
    return Scene(prims, np.array(data["bounds_lo"]), np.array(data["bounds_hi"]))


def random_room_scene(seed, n_objects=None):
    """Axis-aligned room (floor + 4 walls) with 3-10 boxes/spheres/cylinders
    standing on the floor, mutually separated."""
    rng = np.random.default_rng(seed)
    room_x = rng.uniform(4.0, 5.5)
    room_y = rng.uniform(3.5, 5.0)
    room_z = rng.uniform(2.3, 2.7)
    lo = np.array([0.0, 0.0, 0.0])
    hi = np.array([room_x, room_y, room_z])
    cx, cy = room_x / 2.0, room_y / 2.0

    hz = room_z / 2
    prims = [
        Plane([cx, cy, 0.0], [0, 0, 1], extent_u=cx, extent_v=cy, u_dir=[1, 0, 0]),
        Plane([0.0, cy, hz], [1, 0, 0], extent_u=cy, extent_v=hz, u_dir=[0, 1, 0]),
        Plane([room_x, cy, hz], [-1, 0, 0], extent_u=cy, extent_v=hz, u_dir=[0, 1, 0]),
        Plane([cx, 0.0, hz], [0, 1, 0], extent_u=cx, extent_v=hz, u_dir=[1, 0, 0]),
        Plane([cx, room_y, hz], [0, -1, 0], extent_u=cx, extent_v=hz, u_dir=[1, 0, 0]),
    ]

    n = n_objects if n_objects is not None else int(rng.integers(3, 11))
    placed = []  # (xy, clearance radius)
    margin = 0.6
    for _ in range(n):
        kind = rng.choice(["box", "sphere", "cylinder"])
        for _attempt in range(50):
            x = rng.uniform(margin, room_x - margin)
            y = rng.uniform(margin, room_y - margin)
            if kind == "box":
                h = rng.uniform(0.15, 0.4, size=3)
                h[2] = rng.uniform(0.2, 0.6)
                rad = float(np.hypot(h[0], h[1]))
                prim = Box(np.array([x, y, h[2]]), h)
            elif kind == "sphere":
                r = rng.uniform(0.18, 0.35)
                rad = r
                prim = Sphere(np.array([x, y, r]), r)
            else:
                r = rng.uniform(0.15, 0.3)
                hh = rng.uniform(0.3, 0.7)
                rad = r
                prim = Cylinder(np.array([x, y, hh]), r, hh)
            if all(np.hypot(x - px, y - py) > rad + prad + 0.25 for px, py, prad in placed):
                placed.append((x, y, rad))
                prims.append(prim)
                break
    return Scene(prims, lo, hi)


# ---------------------------------------------------------------------------
# scanning


def raycast_scan(scene, true_pose, sensor):
    """Sphere-trace one ray per pixel; returns hit points in the SENSOR frame.
    Hits beyond max_range are discarded."""
    dirs = sensor.ray_directions() @ true_pose.rotation.T
    origin = true_pose.translation
    n = len(dirs)
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    limit = sensor.max_range + 0.5
    for _ in range(TRACE_STEPS):
        if not active.any():
            break
        p = origin + t[active, None] * dirs[active]
        s = scene.sdf(p)
        newly_hit = s < TRACE_TOL
        idx = np.flatnonzero(active)
        hit[idx[newly_hit]] = True
        t[idx] += np.maximum(s, 0.0)
        still = ~newly_hit & (t[idx] <= limit)
        active[idx] = still
    hit &= t <= sensor.max_range
    if not hit.any():
        return np.zeros((0, 3))
    world = origin + t[hit, None] * dirs[hit]
    return (world - origin) @ true_pose.rotation


def perturb_pose(true_pose, noise, frame_index):
    """Gaussian pose corruption: translation noise on x/y (optionally z) and
    optional yaw; deterministic under (noise.seed, frame_index)."""
    rng = np.random.default_rng([int(noise.seed), int(frame_index)])
    dx = rng.normal(0.0, noise.sigma_t)
    dy = rng.normal(0.0, noise.sigma_t)
    dz = rng.normal(0.0, noise.sigma_tz)
    dyaw = rng.normal(0.0, noise.sigma_yaw)
    translation = true_pose.translation + np.array([dx, dy, dz])
    rotation = true_pose.rotation
    if noise.sigma_yaw > 0:
        cy, sy = np.cos(dyaw), np.sin(dyaw)
        rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
        rotation = rz @ rotation
        u, _, vt = np.linalg.svd(rotation)
        rotation = u @ vt
        if np.linalg.det(rotation) < 0:
            u[:, -1] *= -1
            rotation = u @ vt
    return Pose(rotation, translation)


@dataclass
class NoiseConfig:
    sigma_t: float = 0.0    # std (m) on T_x and T_y
    sigma_tz: float = 0.0   # optional std (m) on T_z
    sigma_yaw: float = 0.0  # optional std (rad) around z
    seed: int = 0

    def __post_init__(self):
        if min(self.sigma_t, self.sigma_tz, self.sigma_yaw) < 0:
            raise ValueError("noise stds must be non-negative")


# ---------------------------------------------------------------------------
# trajectories


def _look_at(eye, target):
    f = np.asarray(target, dtype=np.float64) - np.asarray(eye, dtype=np.float64)
    norm = np.linalg.norm(f)
    if norm < 1e-9:
        raise ValueError("look-at target coincides with eye")
    f = f / norm
    up = np.array([0.0, 0.0, 1.0])
    if abs(f @ up) > 0.999:
        up = np.array([1.0, 0.0, 0.0])
    y = np.cross(up, f)
    y /= np.linalg.norm(y)
    z = np.cross(f, y)
    return Pose(np.column_stack([f, y, z]), np.asarray(eye, dtype=np.float64))


def generate_trajectory(scene, n_frames, style="orbit", seed=0, step_pattern=None):
    """Collision-free sensor poses covering the scene.

    orbit: poses on a circle around the scene center, looking inward and
    slightly down; consecutive angular steps are equal unless `step_pattern`
    (a sequence of relative step sizes, e.g. (1, 3)) alternates them.
    lawnmower: serpentine sweep at fixed height looking along the travel
    direction.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    rng = np.random.default_rng(seed)
    center = scene.center()
    extent = np.asarray(scene.bounds_hi) - np.asarray(scene.bounds_lo)
    height = float(np.clip(0.62 * extent[2], 0.4, extent[2] - 0.3))
    target = center.copy()
    target[2] = 0.35 * extent[2]

    poses = []
    if style in ("orbit", "orbit-alt"):
        if style == "orbit-alt" and step_pattern is None:
            step_pattern = (1.0, 3.0)
        if step_pattern:
            pattern = np.array([step_pattern[i % len(step_pattern)] for i in range(n_frames)],
                               dtype=np.float64)
            steps = pattern / pattern.sum() * 2 * np.pi
            angles = np.concatenate([[0.0], np.cumsum(steps)[:-1]]) + rng.uniform(0, 2 * np.pi)
        else:
            angles = 2 * np.pi * np.arange(n_frames) / n_frames + rng.uniform(0, 2 * np.pi)
        radius = 0.33 * min(extent[0], extent[1])
        for ang in angles:
            placed = False
            for shrink in (1.0, 0.8, 0.65, 0.5, 1.2):
                eye = center + np.array(
                    [radius * shrink * np.cos(ang), radius * shrink * np.sin(ang), 0.0])
                eye[2] = height
                if scene.sdf(eye[None])[0] > MIN_CLEARANCE:
                    poses.append(_look_at(eye, target))
                    placed = True
                    break
            if not placed:
                raise RuntimeError(f"cannot place collision-free orbit pose at angle {ang:.2f}")
    elif style == "lawnmower":
        rows = max(1, int(math.ceil(math.sqrt(n_frames))))
        cols = int(math.ceil(n_frames / rows))
        margin = 0.8
        xs = np.linspace(scene.bounds_lo[0] + margin, scene.bounds_hi[0] - margin, cols)
        ys = np.linspace(scene.bounds_lo[1] + margin, scene.bounds_hi[1] - margin, rows)
        k = 0
        for r, y in enumerate(ys):
            row_xs = xs if r % 2 == 0 else xs[::-1]
            for x in row_xs:
                if k >= n_frames:
                    break
                eye = np.array([x, y, height])
                if scene.sdf(eye[None])[0] <= MIN_CLEARANCE:
                    raise RuntimeError(f"cannot place collision-free lawnmower pose at {eye}")
                poses.append(_look_at(eye, target))
                k += 1
    else:
        raise ValueError(f"unknown trajectory style {style!r}")
    return poses
