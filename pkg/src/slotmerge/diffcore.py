"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

The tape is define-by-run: every operation whose inputs require gradients
returns a ``Tensor`` holding a reference to its parents and a closure that
maps the output gradient to parent gradients. Node ids come from a
monotonically increasing counter, so sorting the reachable nodes by id gives
the order in which they were appended; ``backward`` walks that order in
reverse and visits each node exactly once.

Broadcasting follows numpy rules; gradients are summed back to the input
shape.
"""
from __future__ import annotations

import itertools
import os
import tempfile
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import CalibrationError, DimensionError, FormatError

_node_ids = itertools.count()


class Tensor:
    __array_priority__ = 100.0
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to the Tensor's reflected op
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = _parents
        self._backward = _backward
        self._id = next(_node_ids)
        self.grad = np.zeros_like(self.data) if (requires_grad and _backward is None) else None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad and self.is_leaf:
            self.grad = np.zeros_like(self.data)

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    # -- backward --------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf's ``grad``.

        ``grad`` defaults to ones for scalar outputs. Gradients of repeated
        calls add up, which is what makes ``backward(L1); backward(L2)`` equal
        ``backward(L1 + L2)``.
        """
        if not self.requires_grad:
            return
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise DimensionError(f"gradient shape {grad.shape} != output shape {self.shape}")
        if self.is_leaf:
            self.grad = self.grad + grad
            return
        nodes = Graph.from_output(self).nodes
        pending = {self._id: grad}
        for node in reversed(nodes):
            g = pending.pop(node._id, None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.is_leaf:
                    parent.grad = parent.grad + pg
                elif parent._id in pending:
                    pending[parent._id] = pending[parent._id] + pg
                else:
                    pending[parent._id] = pg


class Graph:
    """Append-ordered view of the operation records behind an output."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        seen = set()
        nodes = []
        stack = [out]
        while stack:
            t = stack.pop()
            if t._id in seen or t.is_leaf or not t.requires_grad:
                continue
            seen.add(t._id)
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._id)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def ops(self) -> list:
        return [n.op for n in self.nodes]


# ---------------------------------------------------------------------------
# helpers


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)
    return Tensor(data, op=op)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), backward, "mul")


def div(a, b, eps: float = 0.0) -> Tensor:
    """``a / (b + eps)``; callers pass the epsilon explicitly."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    ad = a.data
    denom = b.data + eps
    out = ad / denom

    def backward(g):
        ga = _unbroadcast(g / denom, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / denom, denom.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    keep = a.data > 0
    return _make(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,), "relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * g * x,), "square")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} to {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Swap the last two axes, or permute by ``axes``."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise DimensionError("transpose needs at least 2 dimensions")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, ts, backward, "concat")


def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data[index]

    basic = all(isinstance(k, (slice, int, type(Ellipsis), type(None)))
                for k in (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64), (a,), backward, "slice")


def masked_select(a, mask) -> Tensor:
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise DimensionError(f"mask shape {mask.shape} != tensor shape {a.shape}")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[mask] = g
        return (full,)

    return _make(a.data[mask], (a,), backward, "masked_select")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    out = np.broadcast_to(a.data, shape).copy()
    return _make(out, (a,), lambda g: (_unbroadcast(g, old),), "broadcast_to")


# ---------------------------------------------------------------------------
# linear algebra and normalisation


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, with batch broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # fold batch axes into rows: one large GEMM instead of many small ones
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(lead + (bd.shape[1],))

        def backward_folded(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), backward_folded, "matmul")
    try:
        out = ad @ bd
    except ValueError as exc:
        raise DimensionError(f"matmul: {exc}") from None

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Max-subtracted softmax; entries where ``mask`` is False get exactly 0."""
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=axis, keepdims=True)
    e = np.exp(z - zmax)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def layernorm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(f"layernorm affine shapes {gain.shape}/{bias.shape} != ({width},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centred = xd - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), backward, "layernorm")


# ---------------------------------------------------------------------------
# finite-difference checking


def gradcheck(f: Callable[[], Tensor], leaves: Iterable[Tensor], h: float = 1e-5, return_details: bool = False):
    """Worst relative error between analytic and central-difference gradients.

    ``f`` is re-evaluated with each leaf entry shifted by ``+h`` and ``-h``;
    the relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as the
    denominator.
    """
    leaves = list(leaves)
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise CalibrationError("gradcheck: loss is not finite")
    for leaf in leaves:
        leaf.grad = np.zeros_like(leaf.data)
    loss.backward()
    worst = 0.0
    details = []
    for li, leaf in enumerate(leaves):
        analytic = leaf.grad.copy()
        for idx in np.ndindex(leaf.shape):
            orig = leaf.data[idx]
            leaf.data[idx] = orig + h
            fp = float(f().data)
            leaf.data[idx] = orig - h
            fm = float(f().data)
            leaf.data[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise CalibrationError("gradcheck: perturbed loss is not finite")
            numeric = (fp - fm) / (2.0 * h)
            a = analytic[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if return_details:
                details.append((li, idx, a, numeric, err))
            worst = max(worst, err)
    if return_details:
        return worst, details
    return worst


# ---------------------------------------------------------------------------
# checkpoint container

CKPT_MAGIC = "DIFFCORE-CKPT v1"


def save_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    """Write named float64 arrays to ``path`` atomically.

    Layout: ASCII header lines (magic, ``meta``, ``tensor`` records, ``end``)
    followed by the concatenated little-endian float64 payloads. Offsets are
    byte positions inside the payload.
    """
    lines = [CKPT_MAGIC]
    for key, value in (meta or {}).items():
        key, value = str(key), str(value)
        if not key or any(c.isspace() for c in key) or "\n" in value:
            raise FormatError(f"invalid meta entry {key!r}")
        lines.append(f"meta {key} {value}")
    payload = []
    offset = 0
    for name, arr in arrays.items():
        if isinstance(arr, Tensor):
            arr = arr.data
        arr = np.asarray(arr, dtype="<f8")
        if not name or any(c.isspace() for c in name):
            raise FormatError(f"invalid tensor name {name!r}")
        dims = ",".join(str(d) for d in arr.shape) if arr.ndim else "-"
        lines.append(f"tensor {name} {dims} {offset}")
        raw = arr.tobytes()
        payload.append(raw)
        offset += len(raw)
    lines.append(f"end {offset}")
    blob = ("\n".join(lines) + "\n").encode("ascii") + b"".join(payload)
    _atomic_write(path, blob)


def load_arrays(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    arrays, meta = {}, {}
    pos = 0
    records = []
    total = None
    first = True
    while True:
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise FormatError("checkpoint header is truncated")
        try:
            line = blob[pos:nl].decode("ascii")
        except UnicodeDecodeError:
            raise FormatError("checkpoint header is not ASCII") from None
        pos = nl + 1
        if first:
            if line != CKPT_MAGIC:
                raise FormatError(f"unknown checkpoint header {line[:40]!r}")
            first = False
            continue
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
        elif kind == "tensor":
            parts = rest.split(" ")
            if len(parts) != 3:
                raise FormatError(f"bad tensor record {line!r}")
            name, dims, off = parts
            shape = () if dims == "-" else tuple(int(d) for d in dims.split(","))
            records.append((name, shape, int(off)))
        elif kind == "end":
            total = int(rest)
            break
        else:
            raise FormatError(f"bad header line {line!r}")
    body = blob[pos:]
    if len(body) != total:
        raise FormatError(f"checkpoint payload has {len(body)} bytes, header says {total}")
    for name, shape, off in records:
        n = int(np.prod(shape)) if shape else 1
        end = off + 8 * n
        if off < 0 or end > total:
            raise FormatError(f"tensor {name} lies outside the payload")
        arrays[name] = np.frombuffer(body[off:end], dtype="<f8").astype(np.float64).reshape(shape)
    return arrays, meta


def _atomic_write(path, blob: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
