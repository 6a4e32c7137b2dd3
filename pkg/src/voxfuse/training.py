"""Two-stage training.

Stage 1 jointly trains encoder and decoder with occupancy supervision on
procedural shape patches: unions of half-spaces (walls/floors) and simple
solids clipped to the unit cube, the same kind of local geometry a map
voxel's input volume sees. Labels come from the shapes' analytic signed
distance.

Stage 2 freezes encoder and decoder and trains the fusion network
self-supervised on synthetic scan sequences: for each voxel touched by a
sequence the running mean of its per-scan codes must map to the code of the
accumulated cloud, in latent space (feature alignment) and through the
decoder at sampled query points (reconstruction of logits).
"""

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, Tensor, adam_step, ops
from .geometry import GridSpec, apply_pose, partition_scan
from .latent_map import IntegrationPolicy
from .networks import code_shape, decode_logits, encode, fuse
from .sim import generate_trajectory, random_room_scene, raycast_scan


class TrainingDiverged(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class TrainReport:
    seed: int
    config_hash: str
    epoch_losses: list = field(default_factory=list)
    wall_seconds: float = 0.0
    extra: dict = field(default_factory=dict)


def _config_hash(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# stage 1: procedural shape patches


@dataclass
class ShapeSample:
    surface_points: np.ndarray       # [N, 3] in [0, 1]^3, encoder input
    query_points: np.ndarray         # [Q, 3] in [0, 1]^3
    labels: np.ndarray               # [Q] float32, 1 = inside
    surface_pool: np.ndarray = None  # full surface sample pool for augmentation


def _dihedral_xy(points, op):
    """One of the 8 symmetries of the unit cube about the z axis (4 rotations
    x optional x-mirror); labels are invariant under them."""
    p = points.copy()
    if op >= 4:
        p[:, 0] = 1.0 - p[:, 0]
    rot = op % 4
    for _ in range(rot):
        x = p[:, 0].copy()
        p[:, 0] = p[:, 1]
        p[:, 1] = 1.0 - x
    return p


class _HalfSpace:
    def __init__(self, point, normal):
        self.point = np.asarray(point, dtype=np.float64)
        n = np.asarray(normal, dtype=np.float64)
        self.normal = n / np.linalg.norm(n)

    def sdf(self, p):
        return (p - self.point) @ self.normal

    def surface(self, rng, n):
        pts = rng.uniform(size=(4 * n, 3))
        proj = pts - np.outer(self.sdf(pts), self.normal)
        keep = np.all((proj >= 0.0) & (proj <= 1.0), axis=1)
        proj = proj[keep][:n]
        return proj, np.broadcast_to(self.normal, proj.shape)


class _Ball:
    def __init__(self, center, radius):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = radius

    def sdf(self, p):
        return np.linalg.norm(p - self.center, axis=-1) - self.radius

    def surface(self, rng, n):
        dirs = rng.normal(size=(n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return self.center + self.radius * dirs, dirs


class _Cuboid:
    def __init__(self, center, half):
        self.center = np.asarray(center, dtype=np.float64)
        self.half = np.asarray(half, dtype=np.float64)

    def sdf(self, p):
        q = np.abs(p - self.center) - self.half
        return (np.linalg.norm(np.maximum(q, 0.0), axis=-1)
                + np.minimum(np.max(q, axis=-1), 0.0))

    def surface(self, rng, n):
        h = self.half
        areas = np.array([h[1] * h[2], h[1] * h[2], h[0] * h[2], h[0] * h[2],
                          h[0] * h[1], h[0] * h[1]])
        face = rng.choice(6, size=n, p=areas / areas.sum())
        uv = rng.uniform(-1.0, 1.0, size=(n, 2))
        pts = np.empty((n, 3))
        normals = np.zeros((n, 3))
        for f in range(6):
            m = face == f
            axis, sign = f // 2, 1.0 if f % 2 else -1.0
            others = [a for a in range(3) if a != axis]
            pts[m, axis] = self.center[axis] + sign * h[axis]
            pts[m, others[0]] = self.center[others[0]] + uv[m, 0] * h[others[0]]
            pts[m, others[1]] = self.center[others[1]] + uv[m, 1] * h[others[1]]
            normals[m, axis] = sign
        return pts, normals


class _Rod:
    """Vertical cylinder."""

    def __init__(self, center, radius, half_height):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = radius
        self.half_height = half_height

    def sdf(self, p):
        d = p - self.center
        radial = np.linalg.norm(d[..., :2], axis=-1) - self.radius
        axial = np.abs(d[..., 2]) - self.half_height
        q = np.stack([radial, axial], axis=-1)
        return (np.linalg.norm(np.maximum(q, 0.0), axis=-1)
                + np.minimum(np.max(q, axis=-1), 0.0))

    def surface(self, rng, n):
        side_area = 2 * np.pi * self.radius * 2 * self.half_height
        cap_area = 2 * np.pi * self.radius ** 2
        n_side = int(round(n * side_area / (side_area + cap_area)))
        ang = rng.uniform(0, 2 * np.pi, size=n)
        pts = np.empty((n, 3))
        normals = np.zeros((n, 3))
        pts[:n_side, 0] = self.center[0] + self.radius * np.cos(ang[:n_side])
        pts[:n_side, 1] = self.center[1] + self.radius * np.sin(ang[:n_side])
        pts[:n_side, 2] = self.center[2] + rng.uniform(-1, 1, n_side) * self.half_height
        normals[:n_side, 0] = np.cos(ang[:n_side])
        normals[:n_side, 1] = np.sin(ang[:n_side])
        r = self.radius * np.sqrt(rng.uniform(size=n - n_side))
        sign = np.where(rng.uniform(size=n - n_side) < 0.5, -1.0, 1.0)
        pts[n_side:, 0] = self.center[0] + r * np.cos(ang[n_side:])
        pts[n_side:, 1] = self.center[1] + r * np.sin(ang[n_side:])
        pts[n_side:, 2] = self.center[2] + sign * self.half_height
        normals[n_side:, 2] = sign
        return pts, normals


# Half-spaces (walls/floors) are labeled as thin solid slabs: a bare plane of
# scan points carries no clue which side is solid, so unbounded solid labels
# are unlearnable, while a symmetric shell is. Closed primitives stay fully
# solid. The shell thickness is a realistic wall thickness in input-volume
# units (0.07 m at d_i = 0.7 m).
WALL_SHELL_HALF = 0.05


def _occupied(prims, p):
    occ = np.zeros(len(p), dtype=bool)
    for pr in prims:
        if isinstance(pr, _HalfSpace):
            occ |= np.abs(pr.sdf(p)) <= WALL_SHELL_HALF
        else:
            occ |= pr.sdf(p) <= 0.0
    return occ


def sample_shape(seed, uniform_query_fraction=0.7, n_queries=384,
                 one_sided_probability=0.7):
    """One procedural training patch in the unit cube."""
    rng = np.random.default_rng(seed)
    prims = []
    if rng.uniform() < 0.6:  # floor
        prims.append(_HalfSpace([0.5, 0.5, rng.uniform(0.05, 0.45)], [0, 0, -1]))
    if rng.uniform() < 0.45 or not prims:  # wall
        ang = rng.uniform(0, 2 * np.pi) if rng.uniform() < 0.5 else \
            rng.choice([0, np.pi / 2, np.pi, 3 * np.pi / 2])
        normal = -np.array([np.cos(ang), np.sin(ang), 0.0])
        offset = rng.uniform(0.05, 0.45)
        point = np.array([0.5, 0.5, 0.5]) - normal * offset
        prims.append(_HalfSpace(point, normal))
    for _ in range(rng.integers(0, 3)):
        kind = rng.choice(["ball", "cuboid", "rod"])
        center = rng.uniform(-0.05, 1.05, size=3)
        if kind == "ball":
            prims.append(_Ball(center, rng.uniform(0.1, 0.32)))
        elif kind == "cuboid":
            prims.append(_Cuboid(center, rng.uniform(0.08, 0.3, size=3)))
        else:
            prims.append(_Rod(center, rng.uniform(0.08, 0.25), rng.uniform(0.15, 0.45)))

    # union surface: per-primitive samples, dropped when inside another
    budget = int(np.exp(rng.uniform(np.log(48), np.log(900))))
    pts_all = []
    nrm_all = []
    for pr in prims:
        pts, nrm = pr.surface(rng, budget)
        keep = np.all((pts >= 0.0) & (pts <= 1.0), axis=1)
        pts, nrm = pts[keep], nrm[keep]
        if len(prims) > 1 and len(pts):
            others = [q for q in prims if q is not pr]
            keep = ~_occupied(others, pts)
            pts, nrm = pts[keep], nrm[keep]
        pts_all.append(pts)
        nrm_all.append(nrm)
    surface = np.vstack(pts_all)
    normals = np.vstack(nrm_all)
    if len(surface) < 8:
        return sample_shape(seed + 90001, uniform_query_fraction, n_queries,
                            one_sided_probability)

    if rng.uniform() < one_sided_probability:
        view = rng.normal(size=3)
        view /= np.linalg.norm(view)
        facing = normals @ view < -0.15
        if facing.sum() >= 8:
            surface = surface[facing]
    pool = surface
    n_keep = min(len(surface), int(np.exp(rng.uniform(np.log(24), np.log(420)))))
    surface = surface[rng.choice(len(surface), size=n_keep, replace=False)]

    n_uni = int(round(uniform_query_fraction * n_queries))
    queries = [rng.uniform(size=(n_uni, 3))]
    if n_queries - n_uni > 0:
        anchors = pool[rng.choice(len(pool), size=n_queries - n_uni)]
        near = np.clip(anchors + rng.normal(0, 0.07, size=anchors.shape), 0.0, 1.0)
        queries.append(near)
    queries = np.vstack(queries)
    labels = _occupied(prims, queries).astype(np.float32)
    return ShapeSample(surface, queries, labels, surface_pool=pool)


def generate_shape_dataset(n, seed, uniform_query_fraction=0.7):
    return [sample_shape(int(s), uniform_query_fraction)
            for s in np.random.default_rng(seed).integers(0, 2 ** 31, size=n)]


def train_stage1(samples, bundle, epochs=12, lr=1.5e-3, seed=0, augment=True,
                 log_every=0):
    """Joint encoder/decoder training with BCE on occupancy labels.

    With augment=True every presentation of a shape applies a random z-axis
    cube symmetry and redraws the encoder input from the shape's surface
    pool, so the 200-shape corpus covers orientations and densities."""
    if not samples:
        raise ValueError("train_stage1: empty dataset")
    rng = np.random.default_rng(seed)
    cfg_hash = _config_hash({"epochs": epochs, "lr": lr, "n": len(samples),
                             "enc": str(bundle.enc_cfg), "dec": str(bundle.dec_cfg)})
    report = TrainReport(seed=seed, config_hash=cfg_hash)
    t0 = time.perf_counter()
    for epoch in range(epochs):
        order = rng.permutation(len(samples))
        total = 0.0
        for si in order:
            s = samples[si]
            pts, queries, labels = s.surface_points, s.query_points, s.labels
            if augment:
                if s.surface_pool is not None and len(s.surface_pool):
                    n = min(len(s.surface_pool),
                            int(np.exp(rng.uniform(np.log(24), np.log(420)))))
                    pts = s.surface_pool[rng.choice(len(s.surface_pool), size=n,
                                                    replace=False)]
                op = int(rng.integers(8))
                pts = _dihedral_xy(pts, op)
                queries = _dihedral_xy(queries, op)
            with Graph() as g:
                code = encode(pts, bundle.encoder, bundle.enc_cfg)
                logits = decode_logits(code, queries, bundle.decoder, bundle.dec_cfg)
                loss = ops.bce_with_logits(logits, Tensor(labels, dtype=logits.dtype))
                val = loss.item()
                if not np.isfinite(val):
                    report.wall_seconds = time.perf_counter() - t0
                    raise TrainingDiverged(
                        f"stage-1 loss became {val} at epoch {epoch}", report)
                g.backward(loss)
                grads = {}
                for ps in (bundle.encoder, bundle.decoder):
                    for name, p in ps.items():
                        grads[name] = g.grad(p)
                adam_step(bundle.encoder,
                          {n: grads[n] for n in bundle.encoder.names()}, lr)
                adam_step(bundle.decoder,
                          {n: grads[n] for n in bundle.decoder.names()}, lr)
            total += val
        report.epoch_losses.append(total / len(samples))
        if log_every and (epoch + 1) % log_every == 0:
            print(f"stage1 epoch {epoch + 1}/{epochs}: bce {report.epoch_losses[-1]:.4f}")
    report.wall_seconds = time.perf_counter() - t0
    return report


def classification_accuracy(bundle, samples):
    """Fraction of stored analytic query labels matched at threshold 0.5."""
    correct = 0
    total = 0
    for s in samples:
        code = encode(s.surface_points, bundle.encoder, bundle.enc_cfg)
        logits = decode_logits(code, s.query_points, bundle.decoder, bundle.dec_cfg)
        pred = logits.data >= 0.0  # sigmoid(logit) >= 0.5
        correct += int((pred == (s.labels > 0.5)).sum())
        total += len(s.labels)
    return correct / max(total, 1)


# ---------------------------------------------------------------------------
# stage 2: latent fusion


def compute_target_code(local_clouds, encoder_params, enc_cfg):
    """Code of the accumulated observations: encode the concatenation of all
    per-scan local clouds of one voxel in a single pass."""
    clouds = [np.asarray(c).reshape(-1, 3) for c in local_clouds if len(c)]
    if not clouds:
        raise ValueError("compute_target_code: empty accumulation")
    return encode(np.vstack(clouds), encoder_params, enc_cfg)


@dataclass
class FusionExample:
    """One voxel of one training sequence, with frozen-network quantities
    precomputed: the running mean of its per-scan codes, the accumulated
    target code, and the target logits at fixed query points."""

    mean_code: np.ndarray
    target_code: np.ndarray
    queries: np.ndarray
    target_logits: np.ndarray
    n_scans: int


@dataclass
class FusionSequence:
    """Per-voxel local clouds of one synthetic 8-scan sequence."""

    voxel_clouds: dict    # VoxelIndex -> list of local clouds (one per touching scan)
    n_frames: int


def build_fusion_sequence(scene, sensor, spec, n_frames=8, seed=0,
                          subsample_fraction=0.10):
    """Scan a scene with alternating small/large viewpoint steps and gather
    each voxel's per-scan local clouds."""
    poses = generate_trajectory(scene, n_frames, "orbit-alt", seed=seed)
    rng = np.random.default_rng([seed, 171])
    voxel_clouds = {}
    for pose in poses:
        cloud = raycast_scan(scene, pose, sensor)
        if len(cloud) == 0:
            continue
        world = apply_pose(cloud, pose)
        n_keep = max(1, int(round(subsample_fraction * len(world))))
        if n_keep < len(world):
            keep = np.sort(rng.choice(len(world), size=n_keep, replace=False))
            world = world[keep]
        for vox, local in partition_scan(world, spec).items():
            voxel_clouds.setdefault(vox, []).append(local)
    return FusionSequence(voxel_clouds, n_frames)


def build_fusion_examples(sequence, bundle, n_queries=512, seed=0,
                          max_per_sequence=None):
    """Precompute frozen-network quantities for every voxel of a sequence."""
    rng = np.random.default_rng([seed, 313])
    voxels = sorted(sequence.voxel_clouds)
    if max_per_sequence is not None and len(voxels) > max_per_sequence:
        chosen = rng.choice(len(voxels), size=max_per_sequence, replace=False)
        voxels = [voxels[i] for i in sorted(chosen)]
    examples = []
    for vox in voxels:
        clouds = sequence.voxel_clouds[vox]
        codes = [encode(c, bundle.encoder, bundle.enc_cfg).data for c in clouds]
        mean = np.mean(codes, axis=0, dtype=np.float64).astype(np.float32)
        target = compute_target_code(clouds, bundle.encoder, bundle.enc_cfg)
        queries = rng.uniform(size=(n_queries, 3)).astype(np.float32)
        tlog = decode_logits(target, queries, bundle.decoder, bundle.dec_cfg)
        examples.append(FusionExample(mean, target.data.astype(np.float32),
                                      queries, tlog.data.astype(np.float32),
                                      len(codes)))
    return examples


def fusion_loss(examples, bundle, include_parts=False):
    """Total stage-2 loss over a batch of voxels: feature alignment (mean
    over voxels of the summed elementwise L1 between fused and target codes)
    plus reconstruction (mean over voxels and query points of the L1 between
    decoder logits under the two codes). Gradients reach the fusion
    parameters only; encoder/decoder stay frozen."""
    if not examples:
        raise ValueError("fusion_loss: empty batch")
    nv = len(examples)
    fea_terms = []
    rec_terms = []
    for ex in examples:
        fused = fuse(Tensor(ex.mean_code), bundle.fusion, bundle.fus_cfg)
        fea_terms.append(ops.l1_loss(fused, Tensor(ex.target_code), reduction="sum"))
        logits = decode_logits(fused, ex.queries, bundle.decoder, bundle.dec_cfg)
        rec_terms.append(
            ops.l1_loss(logits, Tensor(ex.target_logits), reduction="sum"))
    fea = fea_terms[0]
    for t in fea_terms[1:]:
        fea = ops.add(fea, t)
    rec = rec_terms[0]
    for t in rec_terms[1:]:
        rec = ops.add(rec, t)
    n_q = examples[0].queries.shape[0]
    fea = ops.mul(fea, 1.0 / nv)
    rec = ops.mul(rec, 1.0 / (nv * n_q))
    total = ops.add(fea, rec)
    if include_parts:
        return total, fea, rec
    return total


def eval_fusion(examples, bundle, use_fusion_network=True):
    """Mean L_fea and L_rec over examples, with the trained fusion network or
    the identity (plain averaging) baseline."""
    fea_sum = 0.0
    rec_sum = 0.0
    for ex in examples:
        if use_fusion_network:
            fused = fuse(Tensor(ex.mean_code), bundle.fusion, bundle.fus_cfg)
        else:
            fused = Tensor(ex.mean_code)
        fea_sum += float(np.abs(fused.data - ex.target_code).sum())
        logits = decode_logits(fused, ex.queries, bundle.decoder, bundle.dec_cfg)
        rec_sum += float(np.abs(logits.data - ex.target_logits).mean())
    n = max(len(examples), 1)
    return fea_sum / n, rec_sum / n


def train_stage2(bundle, scene_seeds, sensor, spec=None, epochs=20, lr=1e-3,
                 batch_size=8, n_frames=8, seed=0, n_queries=512,
                 max_voxels_per_scene=40, log_every=0):
    """Self-supervised fusion training on synthetic scan sequences.

    Encoder and decoder are frozen (set non-trainable); only the fusion
    parameters receive Adam updates.
    """
    spec = spec or GridSpec()
    bundle.encoder.set_trainable(False)
    bundle.decoder.set_trainable(False)
    examples = []
    for s in scene_seeds:
        scene = random_room_scene(int(s))
        seq = build_fusion_sequence(scene, sensor, spec, n_frames=n_frames, seed=int(s))
        examples.extend(build_fusion_examples(seq, bundle, n_queries=n_queries,
                                              seed=int(s),
                                              max_per_sequence=max_voxels_per_scene))
    if not examples:
        raise ValueError("train_stage2: no voxels produced by the scene generator")

    rng = np.random.default_rng(seed)
    cfg_hash = _config_hash({"epochs": epochs, "lr": lr, "batch": batch_size,
                             "scenes": list(map(int, scene_seeds)),
                             "fus": str(bundle.fus_cfg)})
    report = TrainReport(seed=seed, config_hash=cfg_hash,
                         extra={"n_examples": len(examples)})
    t0 = time.perf_counter()
    for epoch in range(epochs):
        order = rng.permutation(len(examples))
        total = 0.0
        fea_total = 0.0
        rec_total = 0.0
        n_batches = 0
        for b0 in range(0, len(order), batch_size):
            batch = [examples[i] for i in order[b0:b0 + batch_size]]
            with Graph() as g:
                loss, fea, rec = fusion_loss(batch, bundle, include_parts=True)
                val = loss.item()
                if not np.isfinite(val):
                    report.wall_seconds = time.perf_counter() - t0
                    raise TrainingDiverged(
                        f"stage-2 loss became {val} at epoch {epoch}", report)
                g.backward(loss)
                grads = {name: g.grad(p) for name, p in bundle.fusion.items()}
                adam_step(bundle.fusion, grads, lr)
            total += val
            fea_total += fea.item()
            rec_total += rec.item()
            n_batches += 1
        report.epoch_losses.append(total / n_batches)
        report.extra.setdefault("fea_losses", []).append(fea_total / n_batches)
        report.extra.setdefault("rec_losses", []).append(rec_total / n_batches)
        if log_every and (epoch + 1) % log_every == 0:
            print(f"stage2 epoch {epoch + 1}/{epochs}: total {report.epoch_losses[-1]:.4f}")
    report.wall_seconds = time.perf_counter() - t0
    return report, examples
