"""Differentiable operations over Tensors.

Every op computes its forward value eagerly with numpy and, when a Graph is
active and any input is tracked, records a closure that maps the output
gradient to input gradients. Ops preserve the input dtype (float32 or
float64).
"""

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .tensor import Tensor, active_graph


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _record(out, parents, grad_fn):
    g = active_graph()
    if g is None:
        return out
    idxs = [g.index_of(p) for p in parents]
    if all(i is None for i in idxs):
        return out
    g.record(out, idxs, grad_fn)
    return out


def _unbroadcast(grad, shape):
    # Sum a broadcasted gradient back down to the original shape.
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / dense algebra


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    out = Tensor(a.data + b.data)
    ash, bsh = a.shape, b.shape

    def grad_fn(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _record(out, (a, b), grad_fn)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    out = Tensor(a.data - b.data)
    ash, bsh = a.shape, b.shape

    def grad_fn(g):
        return _unbroadcast(g, ash), -_unbroadcast(g, bsh)

    return _record(out, (a, b), grad_fn)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(out, (a, b), grad_fn)


def neg(a):
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D tensors")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dims differ: {a.shape[1]} vs {b.shape[0]}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def grad_fn(g):
        return g @ bd.T, ad.T @ g

    return _record(out, (a, b), grad_fn)


def linear(x, w, b):
    """x[N, K] @ w[M, K]^T + b[M] -> [N, M]."""
    if x.data.ndim != 2:
        raise ValueError(f"linear input must be 2-D, got shape {x.shape}")
    if w.shape[1] != x.shape[1]:
        raise ValueError(f"linear weight in-dim {w.shape[1]} != input dim {x.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ValueError(f"linear bias shape {b.shape} != ({w.shape[0]},)")
    out = Tensor(x.data @ w.data.T + b.data)
    xd, wd = x.data, w.data

    def grad_fn(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _record(out, (x, w, b), grad_fn)


def relu(x):
    out = Tensor(np.maximum(x.data, 0))
    xd = x.data

    def grad_fn(g):
        return (g * (xd > 0),)

    return _record(out, (x,), grad_fn)


def sigmoid(x):
    s = expit(x.data)
    out = Tensor(s)

    def grad_fn(g):
        return (g * s * (1.0 - s),)

    return _record(out, (x,), grad_fn)


def reshape(x, shape):
    out = Tensor(x.data.reshape(shape))
    orig = x.shape

    def grad_fn(g):
        return (g.reshape(orig),)

    return _record(out, (x,), grad_fn)


def concat(parts, axis=0):
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(parts), grad_fn)


def sum(x):
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))
    shape = x.shape

    def grad_fn(g):
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)

    return _record(out, (x,), grad_fn)


def mean(x):
    n = x.size
    out = Tensor(np.asarray(x.data.mean(), dtype=x.dtype))
    shape = x.shape

    def grad_fn(g):
        return (np.broadcast_to(g / n, shape).astype(g.dtype, copy=True),)

    return _record(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# losses


def l1_loss(a, b, reduction="mean"):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    if a.shape != b.shape:
        raise ValueError(f"l1_loss shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    total = np.abs(diff).sum()
    if reduction == "mean":
        scale = 1.0 / max(diff.size, 1)
    elif reduction == "sum":
        scale = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    out = Tensor(np.asarray(total * scale, dtype=a.dtype))

    def grad_fn(g):
        base = g * scale * np.sign(diff)
        return base, -base

    return _record(out, (a, b), grad_fn)


def bce_with_logits(logits, targets, reduction="mean"):
    """Numerically stable binary cross entropy on logits; never exponentiates
    a large positive value. Targets are treated as constants."""
    targets = _as_tensor(targets, like=logits)
    if logits.shape != targets.shape:
        raise ValueError(f"bce shape mismatch: {logits.shape} vs {targets.shape}")
    z, t = logits.data, targets.data
    elem = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    if reduction == "mean":
        scale = 1.0 / max(z.size, 1)
    elif reduction == "sum":
        scale = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    out = Tensor(np.asarray(elem.sum() * scale, dtype=logits.dtype))

    def grad_fn(g):
        return g * scale * (expit(z) - t), None

    return _record(out, (logits, targets), grad_fn)


# ---------------------------------------------------------------------------
# 3-D convolution
#
# Forward correlations run as tensordot over zero-copy sliding-window views;
# the scatter-shaped terms (transposed-conv forward, strided-conv input
# gradient) run as one flat bincount over a cached index map. Both paths are
# deterministic.


@lru_cache(maxsize=128)
def _scatter_index(target_spatial, out_spatial, k, stride, channels):
    """Channel-major flat indices scattering [k^3, n_pos] contribution blocks
    (positions spaced by `stride`) into a target volume."""
    dt, ht, wt = target_spatial
    do, ho, wo = out_spatial
    base = (
        (np.arange(do) * stride)[:, None, None] * (ht * wt)
        + (np.arange(ho) * stride)[None, :, None] * wt
        + (np.arange(wo) * stride)[None, None, :]
    ).reshape(-1)
    off = (
        np.arange(k)[:, None, None] * (ht * wt)
        + np.arange(k)[None, :, None] * wt
        + np.arange(k)[None, None, :]
    ).reshape(-1)
    idx = off[:, None] + base[None, :]
    npix = dt * ht * wt
    return (np.arange(channels)[:, None, None] * npix + idx[None]).ravel(), npix


def _windows(vol, k, stride):
    """Zero-copy [C, D', H', W', k, k, k] view of all kernel windows."""
    win = sliding_window_view(vol, (k, k, k), axis=(1, 2, 3))
    if stride > 1:
        win = win[:, ::stride, ::stride, ::stride]
    return win


def _scatter_bincount(contrib, target_shape, out_spatial, k, stride):
    """Adjoint of the window gather: accumulate contribution blocks onto the
    target volume."""
    channels = target_shape[0]
    big, npix = _scatter_index(target_shape[1:], out_spatial, k, stride, channels)
    flat = np.bincount(big, weights=contrib.ravel(), minlength=channels * npix)
    return flat.reshape(target_shape)


def conv3d(x, w, b, stride=1, padding=0):
    """Cross-correlation of x[C_in, D, H, W] with w[C_out, C_in, k, k, k]."""
    xd, wd, bd = x.data, w.data, b.data
    if xd.ndim != 4:
        raise ValueError(f"conv3d input must be [C,D,H,W], got shape {x.shape}")
    if wd.ndim != 5:
        raise ValueError(f"conv3d weight must be 5-D, got shape {w.shape}")
    cout, cin, k = wd.shape[0], wd.shape[1], wd.shape[2]
    if wd.shape[2:] != (k, k, k):
        raise ValueError(f"conv3d kernel must be cubic, got {wd.shape[2:]}")
    if k % 2 != 1:
        raise ValueError(f"conv3d kernel size must be odd, got {k}")
    if cin != xd.shape[0]:
        raise ValueError(f"conv3d channel mismatch: weight C_in={cin}, input C={xd.shape[0]}")
    if bd.shape != (cout,):
        raise ValueError(f"conv3d bias shape {b.shape} != ({cout},)")
    if padding:
        xp = np.pad(xd, ((0, 0),) + ((padding, padding),) * 3)
    else:
        xp = xd
    if min(xp.shape[1:]) < k:
        raise ValueError(f"conv3d: padded extent {min(xp.shape[1:])} smaller than kernel {k}")
    win = _windows(xp, k, stride)
    out3 = np.tensordot(wd, win, axes=([1, 2, 3, 4], [0, 4, 5, 6]))
    out_sp = out3.shape[1:]
    out = Tensor(out3 + bd[:, None, None, None])

    def grad_fn(g):
        gb = g.sum(axis=(1, 2, 3))
        gw = np.tensordot(g, win, axes=([1, 2, 3], [1, 2, 3]))
        if stride == 1 and padding <= k - 1:
            # stride-1 input gradient: correlate g with the flipped kernel
            q = k - 1 - padding
            gp = np.pad(g, ((0, 0),) + ((q, q),) * 3) if q else g
            gwin = _windows(gp, k, 1)
            wflip = wd[:, :, ::-1, ::-1, ::-1]
            gx = np.tensordot(wflip, gwin, axes=([0, 2, 3, 4], [0, 4, 5, 6]))
        else:
            g2 = g.reshape(cout, -1)
            contrib = wd.reshape(cout, -1).T @ g2  # [C_in * k^3, n_out]
            gxp = _scatter_bincount(contrib, xp.shape, out_sp, k, stride)
            p = padding
            gx = gxp[:, p:-p, p:-p, p:-p] if p else gxp
        return np.ascontiguousarray(gx).astype(xd.dtype, copy=False), gw, gb

    return _record(out, (x, w, b), grad_fn)


def transposed_conv3d(x, w, b, stride=2, padding=1):
    """Transposed convolution of x[C_in, D, H, W] with w[C_in, C_out, k, k, k];
    output spatial extent is (D - 1) * stride - 2 * padding + k. Exactly the
    adjoint of conv3d with the same kernel array."""
    xd, wd, bd = x.data, w.data, b.data
    if xd.ndim != 4:
        raise ValueError(f"transposed_conv3d input must be [C,D,H,W], got {x.shape}")
    cin, cout, k = wd.shape[0], wd.shape[1], wd.shape[2]
    if wd.shape[2:] != (k, k, k):
        raise ValueError(f"transposed_conv3d kernel must be cubic, got {wd.shape[2:]}")
    if cin != xd.shape[0]:
        raise ValueError(
            f"transposed_conv3d channel mismatch: weight C_in={cin}, input C={xd.shape[0]}"
        )
    if bd.shape != (cout,):
        raise ValueError(f"transposed_conv3d bias shape {b.shape} != ({cout},)")
    out_shape = tuple((s - 1) * stride - 2 * padding + k for s in xd.shape[1:])
    if any(s <= 0 for s in out_shape):
        raise ValueError(f"transposed_conv3d output extent not positive: {out_shape}")

    in_sp = xd.shape[1:]
    full = tuple((s - 1) * stride + k for s in in_sp)
    contrib = wd.reshape(cin, -1).T @ xd.reshape(cin, -1)  # [C_out * k^3, n_in]
    yfull = _scatter_bincount(contrib, (cout,) + full, in_sp, k, stride)
    p = padding
    y = yfull[:, p:-p, p:-p, p:-p] if p else yfull
    out = Tensor(np.ascontiguousarray(y).astype(xd.dtype, copy=False)
                 + bd[:, None, None, None])

    def grad_fn(g):
        gfull = np.pad(g, ((0, 0),) + ((p, p),) * 3) if p else g
        gwin = _windows(gfull, k, stride)  # [C_out, D, H, W, k, k, k]
        gx = np.tensordot(wd, gwin, axes=([1, 2, 3, 4], [0, 4, 5, 6]))
        gw = np.tensordot(xd, gwin, axes=([1, 2, 3], [1, 2, 3]))
        gb = g.sum(axis=(1, 2, 3))
        return np.ascontiguousarray(gx), gw, gb

    return _record(out, (x, w, b), grad_fn)


# ---------------------------------------------------------------------------
# point-cloud pooling and grid sampling


def _cell_indices(points, grid_res):
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"points must be [N, 3], got shape {points.shape}")
    if points.size and (points.min() < 0.0 or points.max() > 1.0):
        raise ValueError("scatter_pool: point coordinates outside [0, 1]^3; normalize first")
    cells = np.minimum((points * grid_res).astype(np.int64), grid_res - 1)
    flat = (cells[:, 0] * grid_res + cells[:, 1]) * grid_res + cells[:, 2]
    return flat


def scatter_pool(points, features, grid_res, mode="mean"):
    """Pool per-point features into an R^3 grid -> Tensor[F, R, R, R].

    Accumulation runs in a canonical order (cell index, then coordinates,
    then feature values) so the result is bit-identical under any
    permutation of the input rows. Empty cells are zero. Differentiable
    w.r.t. features only.
    """
    pts = points.data if isinstance(points, Tensor) else np.asarray(points)
    if mode not in ("mean", "max"):
        raise ValueError(f"unknown scatter_pool mode {mode!r}")
    feats = features.data
    n, f = feats.shape
    if pts.shape[0] != n:
        raise ValueError(f"scatter_pool: {pts.shape[0]} points vs {n} feature rows")
    r = int(grid_res)
    ncells = r ** 3
    flat = _cell_indices(pts, r)

    if n == 0:
        out = Tensor(np.zeros((f, r, r, r), dtype=feats.dtype))
        return _record(out, (features,), lambda g: (np.zeros_like(feats),))

    keys = tuple(feats[:, j] for j in range(f - 1, -1, -1))
    keys += (pts[:, 2], pts[:, 1], pts[:, 0], flat)
    perm = np.lexsort(keys)
    flat_s = flat[perm]
    feats_s = feats[perm]
    counts = np.bincount(flat_s, minlength=ncells)

    if mode == "mean":
        acc = np.zeros((ncells, f), dtype=feats.dtype)
        np.add.at(acc, flat_s, feats_s)
        nz = counts > 0
        acc[nz] /= counts[nz, None]
        out = Tensor(np.ascontiguousarray(acc.reshape(r, r, r, f).transpose(3, 0, 1, 2)))

        def grad_fn(g):
            gflat = g.reshape(f, ncells).T
            denom = np.maximum(counts[flat], 1)
            return (gflat[flat] / denom[:, None],)

        return _record(out, (features,), grad_fn)

    acc = np.full((ncells, f), -np.inf, dtype=feats.dtype)
    np.maximum.at(acc, flat_s, feats_s)
    empty = counts == 0
    acc[empty] = 0.0
    out = Tensor(np.ascontiguousarray(acc.reshape(r, r, r, f).transpose(3, 0, 1, 2)))
    starts = np.flatnonzero(np.r_[True, np.diff(flat_s) != 0])
    seg_cells = flat_s[starts]

    def grad_fn(g):
        # Route each cell's gradient to the first (canonical order) point
        # attaining the max.
        gflat = g.reshape(f, ncells).T
        gfeat = np.zeros_like(feats)
        pos_all = np.arange(n)
        for j in range(f):
            eq = feats_s[:, j] == acc[flat_s, j]
            pos = np.where(eq, pos_all, n)
            firsts = np.minimum.reduceat(pos, starts)
            valid = firsts < n
            winners = perm[firsts[valid]]
            gfeat[winners, j] = gflat[seg_cells[valid], j]
        return (gfeat,)

    return _record(out, (features,), grad_fn)


def trilinear_sample(grid, queries):
    """Sample grid[F, L, L, L] at queries[M, 3] in [0, 1]^3 -> Tensor[M, F].

    Align-corners convention: query 0 and 1 coincide with the first and last
    cell centers. Out-of-range queries are clamped to the boundary.
    Differentiable w.r.t. the grid.
    """
    gd = grid.data
    q = queries.data if isinstance(queries, Tensor) else np.asarray(queries)
    if gd.ndim != 4:
        raise ValueError(f"trilinear_sample grid must be [F,L,L,L], got {grid.shape}")
    f, l = gd.shape[0], gd.shape[1]
    if gd.shape[1:] != (l, l, l):
        raise ValueError(f"trilinear_sample grid must be cubic, got {gd.shape[1:]}")
    if l < 2:
        raise ValueError(f"trilinear_sample needs L >= 2, got {l}")
    if q.ndim != 2 or q.shape[1] != 3:
        raise ValueError(f"queries must be [M, 3], got shape {q.shape}")
    m = q.shape[0]
    u = np.clip(q, 0.0, 1.0) * (l - 1)
    i0 = np.minimum(u.astype(np.int64), l - 2)
    t = (u - i0).astype(gd.dtype)
    gflat = gd.reshape(f, -1)
    corner_idx = []
    corner_w = []
    for dx in (0, 1):
        wx = t[:, 0] if dx else 1.0 - t[:, 0]
        for dy in (0, 1):
            wy = t[:, 1] if dy else 1.0 - t[:, 1]
            for dz in (0, 1):
                wz = t[:, 2] if dz else 1.0 - t[:, 2]
                ci = ((i0[:, 0] + dx) * l + (i0[:, 1] + dy)) * l + (i0[:, 2] + dz)
                corner_idx.append(ci)
                corner_w.append(wx * wy * wz)
    out_data = np.zeros((m, f), dtype=gd.dtype)
    for ci, w in zip(corner_idx, corner_w):
        out_data += gflat[:, ci].T * w[:, None]
    out = Tensor(out_data)
    ncell = l ** 3

    def grad_fn(g):
        ggrid = np.zeros(f * ncell)
        chan = np.arange(f)[:, None]
        for ci, w in zip(corner_idx, corner_w):
            contrib = (g * w[:, None]).T  # [F, M]
            big = (chan * ncell + ci[None, :]).ravel()
            ggrid += np.bincount(big, weights=contrib.ravel(), minlength=f * ncell)
        return (ggrid.reshape(gd.shape).astype(gd.dtype), None)

    return _record(out, (grid, _as_tensor(q)), grad_fn)
