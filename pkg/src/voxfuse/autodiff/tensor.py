"""Dense float tensors and the reverse-mode tape they record onto."""

import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_graph_stack = []


def active_graph():
    """Graph currently recording, or None when running in inference mode."""
    return _graph_stack[-1] if _graph_stack else None


class Tensor:
    """Immutable dense array of real scalars (float32 by default, float64 for
    gradient verification). Data is row-major; shape never changes after
    construction — reshape returns a new tensor viewing the same buffer.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"


class _Node:
    __slots__ = ("parents", "grad_fn")

    def __init__(self, parents, grad_fn):
        self.parents = parents
        self.grad_fn = grad_fn


class Graph:
    """Append-only tape of recorded operations.

    Ops append nodes in creation order, so parents always precede children
    and walking the tape backwards visits each node exactly once in reverse
    topological order. Gradients are zero-initialized and accumulated
    additively from every consumer. One graph per training step; graphs are
    not thread-safe.
    """

    def __init__(self):
        self._nodes = []
        self._index = {}
        self._alive = []
        self._grads = None

    def __enter__(self):
        _graph_stack.append(self)
        return self

    def __exit__(self, *exc):
        _graph_stack.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def index_of(self, t):
        """Node index of a tensor: its recorded node, a fresh leaf when the
        tensor requires grad, or None for constants."""
        idx = self._index.get(id(t))
        if idx is None and t.requires_grad:
            idx = len(self._nodes)
            self._nodes.append(_Node((), None))
            self._index[id(t)] = idx
            self._alive.append(t)
        return idx

    def record(self, out, parent_indices, grad_fn):
        idx = len(self._nodes)
        self._nodes.append(_Node(tuple(parent_indices), grad_fn))
        self._index[id(out)] = idx
        self._alive.append(out)

    def backward(self, loss):
        """Populate gradients of every recorded node reachable from `loss`."""
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        root = self._index.get(id(loss))
        if root is None:
            raise ValueError("loss was not recorded on this graph")
        grads = [None] * len(self._nodes)
        grads[root] = np.ones(loss.shape, dtype=loss.dtype)
        for i in range(root, -1, -1):
            gout = grads[i]
            node = self._nodes[i]
            if gout is None or node.grad_fn is None:
                continue
            contributions = node.grad_fn(gout)
            for p, contrib in zip(node.parents, contributions):
                if p is None or contrib is None:
                    continue
                if grads[p] is None:
                    grads[p] = contrib
                else:
                    grads[p] = grads[p] + contrib
        self._grads = grads

    def grad(self, t):
        """Gradient w.r.t. `t` from the last backward pass (zeros when `t`
        never influenced the loss)."""
        if self._grads is None:
            raise RuntimeError("grad() called before backward()")
        idx = self._index.get(id(t))
        if idx is None or self._grads[idx] is None:
            return np.zeros_like(t.data)
        return self._grads[idx]
