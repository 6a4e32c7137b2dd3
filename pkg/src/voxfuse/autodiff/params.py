"""Named learnable tensors, the Adam update, and checkpoint serialization."""

import json
import struct

import numpy as np

from .tensor import Tensor, FLOAT_DTYPES


class ParamSet:
    """Ordered map of named learnable tensors plus per-parameter Adam state
    (first/second moments and step count). Save/load round-trips are
    bit-exact."""

    def __init__(self, dtype=np.float32, trainable=True):
        self.dtype = np.dtype(dtype)
        if self.dtype not in FLOAT_DTYPES:
            raise ValueError(f"unsupported parameter dtype {dtype}")
        self.trainable = bool(trainable)
        self._params = {}
        self._m = {}
        self._v = {}
        self._steps = {}

    def add(self, name, value):
        if name in self._params:
            raise ValueError(f"parameter {name!r} already exists")
        arr = np.ascontiguousarray(np.asarray(value, dtype=self.dtype))
        self._params[name] = Tensor(arr, requires_grad=self.trainable)
        self._m[name] = np.zeros_like(arr)
        self._v[name] = np.zeros_like(arr)
        self._steps[name] = 0
        return self._params[name]

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def set_trainable(self, trainable):
        """Freeze or unfreeze every parameter. Frozen tensors never enter a
        graph as leaves, so their gradients stay exactly zero."""
        self.trainable = bool(trainable)
        for name, t in self._params.items():
            self._params[name] = Tensor(t.data, requires_grad=self.trainable)

    def astype(self, dtype):
        """Copy of this ParamSet at another precision (optimizer state cast too)."""
        out = ParamSet(dtype=dtype, trainable=self.trainable)
        for name, t in self._params.items():
            out.add(name, t.data.astype(out.dtype))
            out._m[name] = self._m[name].astype(out.dtype)
            out._v[name] = self._v[name].astype(out.dtype)
            out._steps[name] = self._steps[name]
        return out

    def _replace(self, name, data):
        self._params[name] = Tensor(
            np.ascontiguousarray(data.astype(self.dtype, copy=False)),
            requires_grad=self.trainable,
        )


def adam_step(params, grads, lr, betas=(0.9, 0.999), eps=1e-8):
    """One Adam update with bias correction. Parameters without a gradient
    entry are treated as having zero gradient (their moments still decay).
    Returns the updated ParamSet (mutated in place)."""
    b1, b2 = betas
    for name in params.names():
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        else:
            g = np.asarray(g, dtype=params.dtype)
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != param {name!r} {p.shape}")
        m = params._m[name] = b1 * params._m[name] + (1 - b1) * g
        v = params._v[name] = b2 * params._v[name] + (1 - b2) * g * g
        t = params._steps[name] = params._steps[name] + 1
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        params._replace(name, p.data - lr * m_hat / (np.sqrt(v_hat) + eps))
    return params


# ---------------------------------------------------------------------------
# checkpoint file format
#
# Little-endian binary:
#   magic "VXFCKPT1" | u32 version | u32 json_len | metadata JSON (utf-8)
#   u32 n_sections
#   per section: u32 name_len | name | u8 dtype tag (0=f32, 1=f64) | u32 n_params
#   per param:   u32 name_len | name | u32 rank | i64 shape... | raw values
#                | raw adam m | raw adam v | i64 step

_MAGIC = b"VXFCKPT1"
_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def _write_str(fh, s):
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def save_checkpoint(path, sections, metadata=None):
    """Write named ParamSets to `path`. `sections` maps section name (e.g.
    "encoder") to a ParamSet."""
    meta_raw = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(meta_raw)))
        fh.write(meta_raw)
        fh.write(struct.pack("<I", len(sections)))
        for sec_name, ps in sections.items():
            _write_str(fh, sec_name)
            fh.write(struct.pack("<BI", _DTYPE_TAGS[ps.dtype], len(ps)))
            for name, t in ps.items():
                _write_str(fh, name)
                fh.write(struct.pack("<I", t.data.ndim))
                fh.write(struct.pack(f"<{t.data.ndim}q", *t.data.shape))
                fh.write(t.data.tobytes())
                fh.write(ps._m[name].tobytes())
                fh.write(ps._v[name].tobytes())
                fh.write(struct.pack("<q", ps._steps[name]))


def _read_exact(fh, n):
    raw = fh.read(n)
    if len(raw) != n:
        raise ValueError("truncated checkpoint file")
    return raw


def _read_str(fh):
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    return _read_exact(fh, n).decode("utf-8")


def load_checkpoint(path):
    """Read a checkpoint -> (dict of section name -> ParamSet, metadata)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        version, meta_len = struct.unpack("<II", _read_exact(fh, 8))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        metadata = json.loads(_read_exact(fh, meta_len).decode("utf-8"))
        (n_sections,) = struct.unpack("<I", _read_exact(fh, 4))
        sections = {}
        for _ in range(n_sections):
            sec_name = _read_str(fh)
            tag, n_params = struct.unpack("<BI", _read_exact(fh, 5))
            if tag not in _TAG_DTYPES:
                raise ValueError(f"{path}: unknown dtype tag {tag}")
            dtype = _TAG_DTYPES[tag]
            ps = ParamSet(dtype=dtype)
            for _ in range(n_params):
                name = _read_str(fh)
                (rank,) = struct.unpack("<I", _read_exact(fh, 4))
                shape = struct.unpack(f"<{rank}q", _read_exact(fh, 8 * rank))
                count = int(np.prod(shape)) if rank else 1
                nbytes = count * dtype.itemsize
                data = np.frombuffer(_read_exact(fh, nbytes), dtype=dtype).reshape(shape)
                m = np.frombuffer(_read_exact(fh, nbytes), dtype=dtype).reshape(shape)
                v = np.frombuffer(_read_exact(fh, nbytes), dtype=dtype).reshape(shape)
                (step,) = struct.unpack("<q", _read_exact(fh, 8))
                ps.add(name, data.copy())
                ps._m[name] = m.copy()
                ps._v[name] = v.copy()
                ps._steps[name] = step
            sections[sec_name] = ps
    return sections, metadata
