"""Dense float64 arrays with reverse-mode automatic differentiation.

Small by design: row-major numpy storage, no views beyond slice/concat,
single-threaded graphs, insertion-order replay. Enough to train the
alignment module and run the frozen pieces.
"""

from __future__ import annotations

import struct

import numpy as np

__all__ = [
    "Tensor",
    "add",
    "backward_gradients",
    "concat",
    "cross_entropy",
    "embedding_lookup",
    "gelu",
    "layer_norm",
    "matmul",
    "mean",
    "mul",
    "relu",
    "reshape",
    "softmax",
    "sub",
    "sum_",
    "tensor_slice",
    "transpose",
    "uniform_init",
    "load_checkpoint",
    "save_checkpoint",
]


class ShapeError(ValueError):
    pass


class Tensor:
    """A node in the computation graph.

    `data` is always a float64 ndarray. Gradients accumulate into `.grad`
    only when `requires_grad` is set; frozen parameters and constants pass
    gradients through without storing them.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        flag = ", trainable" if self.requires_grad else ""
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{flag}{label})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tensor_slice(self, key)

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.data.shape}")
        return float(self.data)

    def backward(self):
        """Reverse-mode sweep from this scalar node."""
        if self.data.size != 1:
            raise ShapeError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        order = _toposort(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _toposort(root):
    """Iterative post-order topological sort, reversed for the backward pass."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return reversed(order)


def backward_gradients(loss, params):
    """Run backward from `loss` and return {name: grad} for trainable params.

    Frozen parameters (requires_grad False) never appear in the map.
    """
    for p in params.values():
        p.grad = None
    loss.backward()
    return {
        name: p.grad for name, p in params.items() if p.requires_grad and p.grad is not None
    }


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    # reduce a broadcasted gradient back to the operand's shape
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor(out_data, parents=(a, b), backward=backward)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return Tensor(out_data, parents=(a, b), backward=backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return Tensor(out_data, parents=(a, b), backward=backward)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul dimension mismatch: {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if b.data.ndim > 1 else np.outer(g, b.data)
        gb = np.swapaxes(a.data, -1, -2) @ g if a.data.ndim > 1 else np.outer(a.data, g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return Tensor(out_data, parents=(a, b), backward=backward)


def transpose(a, axes):
    a = _as_tensor(a)
    out_data = np.transpose(a.data, axes)
    inverse = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return Tensor(out_data, parents=(a,), backward=backward)


def reshape(a, shape):
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.data.shape),)

    return Tensor(out_data, parents=(a,), backward=backward)


def tensor_slice(a, key):
    a = _as_tensor(a)
    out_data = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return Tensor(out_data, parents=(a,), backward=backward)


def concat(tensors, axis):
    tensors = [_as_tensor(t) for t in tensors]
    ranks = {t.data.ndim for t in tensors}
    if len(ranks) != 1:
        raise ShapeError(f"concat rank mismatch: {[t.data.shape for t in tensors]}")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out_data, parents=tuple(tensors), backward=backward)


def mean(a, axis, keepdims=False):
    a = _as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / out_data.size

    def backward(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape) / count,)

    return Tensor(out_data, parents=(a,), backward=backward)


def sum_(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return Tensor(out_data, parents=(a,), backward=backward)


def softmax(a, axis):
    a = _as_tensor(a)
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    return Tensor(out_data, parents=(a,), backward=backward)


def relu(a):
    a = _as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        return (g * (a.data > 0.0),)

    return Tensor(out_data, parents=(a,), backward=backward)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    # tanh approximation; smooth everywhere, which keeps finite-difference
    # gradient checks honest
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        dt = (1.0 - t**2) * dinner
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return Tensor(out_data, parents=(a,), backward=backward)


def layer_norm(a, gain, bias, eps=1e-6):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out_data = gain.data * xhat + bias.data

    def backward(g):
        d = a.data.shape[-1]
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        dgain = _unbroadcast(g * xhat, gain.data.shape)
        dbias = _unbroadcast(g, bias.data.shape)
        return dx, dgain, dbias

    return Tensor(out_data, parents=(a, gain, bias), backward=backward)


def embedding_lookup(table, ids):
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    out_data = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return Tensor(out_data, parents=(table,), backward=backward)


def cross_entropy(logits, targets, mask):
    """Mean negative log-probability over masked rows.

    `targets` are class indices (length T), `mask` selects the supervised
    rows. Gradient is the classic softmax-minus-onehot, zeroed elsewhere.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    t, k = logits.data.shape
    if targets.shape != (t,) or mask.shape != (t,):
        raise ShapeError(
            f"cross_entropy: logits {logits.data.shape} vs targets {targets.shape} "
            f"vs mask {mask.shape}"
        )
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= k:
        raise ValueError(f"targets out of range [0, {k})")
    if not mask.any():
        raise ValueError("cross_entropy: mask selects no positions")
    m = logits.data.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits.data - m).sum(axis=1))
    nll = lse - logits.data[np.arange(t), targets]
    n_sup = int(mask.sum())
    out_data = nll[mask].sum() / n_sup

    def backward(g):
        probs = np.exp(logits.data - lse[:, None])
        probs[np.arange(t), targets] -= 1.0
        probs[~mask] = 0.0
        return (g * probs / n_sup,)

    return Tensor(out_data, parents=(logits,), backward=backward)


def uniform_init(rng, shape, fan_in, requires_grad=True, name=None):
    """Uniform in +-1/sqrt(fan_in); the one initializer used everywhere."""
    bound = 1.0 / np.sqrt(fan_in)
    data = rng.uniform(-bound, bound, size=shape)
    return Tensor(data, requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# Checkpoint format: magic "ITCK", version u32, count u32, then per parameter
# (name length u16, UTF-8 name, rank u32, dims u32 x rank, f64 LE payload).
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"ITCK"
_CKPT_VERSION = 1


def save_checkpoint(path, params):
    """Write {name: Tensor} to `path`; names sorted for byte-stable output."""
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(params)))
        for name in sorted(params):
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(params[name].data, dtype="<f8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Read a checkpoint back as {name: ndarray}."""
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            n = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(dims)
            out[name] = data.astype(np.float64)
    return out
