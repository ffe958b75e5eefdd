"""Minimal reverse-mode autodiff over dense arrays.

Just enough machinery to express the aggregation network, the compressor
decoder, and the metric losses: 2-D matmul, limited broadcasting
(matrix/row-vector/scalar), softmax and layer norm over the last axis,
row reductions, constant-sparse matmul, and a Chamfer terminal op.
Values are float64 throughout; checkpoints store float32.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ContractViolation, ParseError, ShapeError


class Tensor:
    """A node in the recorded computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ContractViolation(
                f"backward requires a scalar, got shape {self.data.shape}"
            )
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def item(self) -> float:
        return float(self.data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
        out.requires_grad = True
    return out


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (row-vector / scalar broadcasting)."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.array(g.sum())
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")

    def bwd(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bwd(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bwd(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bwd)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        a._accumulate(g * c)

    return _make(a.data * c, (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bwd)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {a.shape}")

    def bwd(g):
        a._accumulate(g.T)

    return _make(a.data.T, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        a._accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bwd)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def bwd(g):
        a._accumulate(g * mask)

    return _make(a.data * mask, (a,), bwd)


def sqrt(a, eps: float = 0.0) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data + eps)

    def bwd(g):
        a._accumulate(g * 0.5 / out)

    return _make(out, (a,), bwd)


def softmax_lastdim(a) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        a._accumulate(y * (g - dot))

    return _make(y, (a,), bwd)


def layer_norm_lastdim(a, eps: float = 1e-5) -> Tensor:
    """Normalize each row to mean 0 / variance 1 (no affine)."""
    a = _as_tensor(a)
    mean = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mean
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = centered * inv

    def bwd(g):
        a._accumulate(
            inv
            * (
                g
                - g.mean(axis=-1, keepdims=True)
                - y * (g * y).mean(axis=-1, keepdims=True)
            )
        )

    return _make(y, (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"slice_cols: expected 2-D, got {a.shape}")

    def bwd(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        a._accumulate(full)

    return _make(a.data[:, start:stop].copy(), (a,), bwd)


def reduce_max_over_points(a) -> Tensor:
    """Column-wise max over the point axis (axis 0) of an (N, D) matrix."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"reduce_max_over_points: expected 2-D, got {a.shape}")
    argmax = a.data.argmax(axis=0)

    def bwd(g):
        full = np.zeros_like(a.data)
        full[argmax, np.arange(a.shape[1])] = g
        a._accumulate(full)

    return _make(a.data[argmax, np.arange(a.shape[1])], (a,), bwd)


def mean_over_points(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"mean_over_points: expected 2-D, got {a.shape}")
    n = a.shape[0]

    def bwd(g):
        a._accumulate(np.broadcast_to(g / n, a.data.shape).copy())

    return _make(a.data.mean(axis=0), (a,), bwd)


def sum_all(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        a._accumulate(np.full_like(a.data, float(g)))

    return _make(a.data.sum(), (a,), bwd)


def sparse_matmul(s, a) -> Tensor:
    """``s @ a`` with a constant scipy sparse matrix ``s``."""
    a = _as_tensor(a)
    if a.data.ndim != 2 or s.shape[1] != a.shape[0]:
        raise ShapeError(f"sparse_matmul: incompatible shapes {s.shape} and {a.shape}")

    def bwd(g):
        a._accumulate(s.T @ g)

    return _make(np.asarray(s @ a.data), (a,), bwd)


def repeat_rows(a, factor: int) -> Tensor:
    """Repeat each row `factor` times: (N, D) -> (N*factor, D)."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"repeat_rows: expected 2-D, got {a.shape}")
    n = a.shape[0]

    def bwd(g):
        a._accumulate(g.reshape(n, factor, -1).sum(axis=1))

    return _make(np.repeat(a.data, factor, axis=0), (a,), bwd)


def clamp_row_norm(a, max_norm: float) -> Tensor:
    """Scale each row to norm <= max_norm (identity inside the ball)."""
    a = _as_tensor(a)
    norms = np.linalg.norm(a.data, axis=1, keepdims=True)
    safe = np.maximum(norms, 1e-30)
    factor = np.minimum(1.0, max_norm / safe)
    y = a.data * factor

    def bwd(g):
        over = (norms > max_norm).ravel()
        gx = g * factor
        if over.any():
            # for clamped rows: y = c * x / |x|; dy/dx = c/|x| (I - xx^T/|x|^2)
            x = a.data[over]
            nrm = norms[over]
            proj = (g[over] * x).sum(axis=1, keepdims=True) / (nrm**2)
            gx[over] = (max_norm / nrm) * (g[over] - x * proj)
        a._accumulate(gx)

    return _make(y, (a,), bwd)


def euclidean_distance(a, b, eps: float = 1e-12) -> Tensor:
    """||a - b||_2 between two equally-shaped vectors, as a scalar node."""
    diff = sub(a, b)
    return sqrt(sum_all(mul(diff, diff)), eps=eps)


def hinge(x) -> Tensor:
    """max(x, 0) on a scalar node."""
    return relu(x)


def l2_normalize(a, eps: float = 1e-30) -> Tensor:
    """Normalize a vector (1-D tensor) to unit Euclidean norm."""
    n = sqrt(sum_all(mul(a, a)), eps=eps)
    nv = float(n.data)

    def bwd(g):
        n._accumulate(np.asarray(-float(g) / nv**2))

    inv = _make(np.asarray(1.0 / nv), (n,), bwd)
    return mul(a, inv)


def chamfer_to(pred, target: np.ndarray) -> Tensor:
    """Symmetric mean nearest-neighbor distance between predicted points
    (differentiable, (M, 3)) and a constant target set (N, 3).

    Nearest-neighbor assignments are held fixed in the backward pass,
    which equals the true gradient away from assignment ties.
    """
    from scipy.spatial import cKDTree

    pred = _as_tensor(pred)
    p = pred.data
    t = np.asarray(target, dtype=np.float64)
    tree_t = cKDTree(t)
    d_pt, idx_pt = tree_t.query(p)
    tree_p = cKDTree(p)
    d_tp, idx_tp = tree_p.query(t)
    m, n = p.shape[0], t.shape[0]
    value = d_pt.mean() + d_tp.mean()

    def bwd(g):
        g = float(g)
        grad = np.zeros_like(p)
        diff = p - t[idx_pt]
        nrm = np.maximum(d_pt, 1e-30)[:, None]
        grad += g * diff / nrm / m
        diff2 = p[idx_tp] - t
        nrm2 = np.maximum(d_tp, 1e-30)[:, None]
        np.add.at(grad, idx_tp, g * diff2 / nrm2 / n)
        pred._accumulate(grad)

    return _make(np.asarray(value), (pred,), bwd)


class ParamStore:
    """Named trainable tensors with Adam state and per-parameter
    learning-rate multipliers."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.lr_mult: dict[str, float] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, array, lr_mult: float = 1.0) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        if lr_mult <= 0:
            raise ValueError(f"lr multiplier must be > 0, got {lr_mult}")
        t = Tensor(np.asarray(array, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        self.lr_mult[name] = float(lr_mult)
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self):
        return list(self.params)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def set_lr_mult(self, name: str, mult: float):
        if mult <= 0:
            raise ValueError(f"lr multiplier must be > 0, got {mult}")
        self.lr_mult[name] = float(mult)

    def snapshot(self) -> dict:
        return {k: t.data.copy() for k, t in self.params.items()}

    def restore(self, snap: dict):
        for k, arr in snap.items():
            self.params[k].data = arr.copy()

    def reset_opt_state(self):
        self.step_count = 0
        for k in self.params:
            self._m[k][...] = 0.0
            self._v[k][...] = 0.0


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One Adam update; parameters with no gradient are left untouched."""
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = p.grad
        if g is None:
            continue
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        step = lr * store.lr_mult[name] * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data -= step


_CKPT_MAGIC = b"AGGW"
_CKPT_VERSION = 1


def save_params(store: ParamStore, path) -> None:
    """"AGGW" checkpoint: (name, shape, f32 data, lr multiplier) records."""
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<II", _CKPT_VERSION, len(store.params)))
        for name, t in store.params.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", t.data.ndim))
            for d in t.data.shape:
                f.write(struct.pack("<I", d))
            f.write(t.data.astype("<f4").tobytes())
            f.write(struct.pack("<f", store.lr_mult[name]))


def load_params(path) -> ParamStore:
    data = Path(path).read_bytes()
    if data[:4] != _CKPT_MAGIC:
        raise ParseError(f"bad magic {data[:4]!r}", byte_offset=0)
    version, count = struct.unpack_from("<II", data, 4)
    if version != _CKPT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", byte_offset=4)
    off = 12
    store = ParamStore()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", data, off) if rank else ()
        off += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        (mult,) = struct.unpack_from("<f", data, off)
        off += 4
        store.add(name, arr.astype(np.float64), lr_mult=float(mult))
    return store


def finite_difference_check(loss_fn, store: ParamStore, eps: float = 1e-4,
                            param_names=None) -> dict[str, float]:
    """Max relative error between analytic and central-difference gradients.

    `loss_fn` must rebuild the graph from the current parameter values and
    return a scalar Tensor. Returns {param name: max relative error}.
    """
    store.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for k, t in store.params.items()}
    names = param_names if param_names is not None else store.names()
    errors = {}
    for name in names:
        p = store.params[name]
        flat = p.data.ravel()
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_fn().item()
            flat[i] = orig - eps
            lo = loss_fn().item()
            flat[i] = orig
            num[i] = (hi - lo) / (2 * eps)
        a = analytic[name].ravel()
        denom = np.maximum(np.abs(a), np.maximum(np.abs(num), 1e-6))
        errors[name] = float(np.max(np.abs(a - num) / denom)) if flat.size else 0.0
    return errors
