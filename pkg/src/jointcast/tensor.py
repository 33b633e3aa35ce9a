"""Dense float64 arrays with reverse-mode automatic differentiation.

Every forward pass in the package is built from the operations defined
here, so all gradients can be verified with :func:`grad_check`.  The tape is
dynamic: each call builds a fresh graph of :class:`Value` nodes.
"""
from __future__ import annotations

import contextlib
import json
import struct
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

FORMAT_VERSION = 1

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Value:
    """A node in the computation graph holding a float64 array."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Value":
        return Value(self.data)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Value(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return vsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _node(data, parents: Sequence[Value], backward_fn, op: str) -> Value:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Value(data, True, tuple(parents), backward_fn, op)
    return Value(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), bw, "add")


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), bw, "sub")


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out = a.data * b.data

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _node(out, (a, b), bw, "mul")


def div(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / b.data ** 2, b.shape))

    return _node(out, (a, b), bw, "div")


def power(a: Value, exponent: float) -> Value:
    a = as_value(a)
    out = a.data ** exponent

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _node(out, (a,), bw, "pow")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x: Value) -> Value:
    x = as_value(x)
    s = _sigmoid(x.data)

    def bw(g):
        return (g * s * (1.0 - s),)

    return _node(s, (x,), bw, "sigmoid")


def tanh(x: Value) -> Value:
    x = as_value(x)
    t = np.tanh(x.data)

    def bw(g):
        return (g * (1.0 - t * t),)

    return _node(t, (x,), bw, "tanh")


def leaky_relu(x: Value, alpha: float = 0.2) -> Value:
    x = as_value(x)
    pos = x.data >= 0
    out = np.where(pos, x.data, alpha * x.data)

    def bw(g):
        return (np.where(pos, g, alpha * g),)

    return _node(out, (x,), bw, "leaky_relu")


def activation(x: Value, kind: str, alpha: float = 0.2) -> Value:
    """Apply ``sigmoid``, ``tanh`` or ``leaky_relu`` elementwise."""
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "leaky_relu":
        if not 0.0 < alpha < 1.0:
            raise ConfigError(f"leaky_relu alpha must lie in (0, 1), got {alpha}")
        return leaky_relu(x, alpha)
    raise ContractError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- structural

def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                # fold all leading axes of a into the row dimension
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _node(out, (a, b), bw, "matmul")


def vsum(x: Value, axis=None, keepdims: bool = False) -> Value:
    x = as_value(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), bw, "sum")


def mean(x: Value, axis=None, keepdims: bool = False) -> Value:
    x = as_value(x)
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return vsum(x, axis, keepdims) * (1.0 / count)


def reshape(x: Value, shape: tuple) -> Value:
    x = as_value(x)
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.shape),)

    return _node(out, (x,), bw, "reshape")


def transpose(x: Value, axes: tuple | None = None) -> Value:
    x = as_value(x)
    out = np.transpose(x.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return _node(out, (x,), bw, "transpose")


def concat(values: Sequence[Value], axis: int = -1) -> Value:
    values = [as_value(v) for v in values]
    out = np.concatenate([v.data for v in values], axis=axis)
    splits = np.cumsum([v.shape[axis] for v in values])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(values), bw, "concat")


def stack(values: Sequence[Value], axis: int = 0) -> Value:
    values = [as_value(v) for v in values]
    out = np.stack([v.data for v in values], axis=axis)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(out, tuple(values), bw, "stack")


def take(x: Value, idx, axis: int = 0) -> Value:
    """Gather entries of ``x`` along ``axis``; repeated indices accumulate grads."""
    x = as_value(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = np.take(x.data, idx, axis=axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(np.moveaxis(gx, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _node(out, (x,), bw, "take")


def index(x: Value, key) -> Value:
    x = as_value(x)
    out = x.data[key]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _node(np.array(out), (x,), bw, "index")


# ---------------------------------------------------------------- normalisers and losses

def softmax_rows(x: Value, mask: np.ndarray | None = None) -> Value:
    """Softmax over the last axis, restricted to ``mask`` entries when given.

    Rows whose mask is entirely false produce all-zero weights.
    """
    x = as_value(x)
    if mask is None:
        shifted = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=-1, keepdims=True)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        masked = np.where(mask, x.data, -np.inf)
        mx = masked.max(axis=-1, keepdims=True)
        mx = np.where(np.isfinite(mx), mx, 0.0)
        e = np.where(mask, np.exp(np.where(mask, x.data - mx, 0.0)), 0.0)
        s = e.sum(axis=-1, keepdims=True)
        out = e / np.where(s > 0, s, 1.0)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (x,), bw, "softmax")


def mse_loss(pred: Value, target) -> Value:
    """Mean of squared elementwise errors."""
    pred = as_value(pred)
    t = target.data if isinstance(target, Value) else np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise DimensionError(f"mse shape mismatch: {pred.shape} vs {t.shape}")
    diff = pred.data - t
    out = np.mean(diff * diff)
    n = diff.size

    def bw(g):
        return (g * 2.0 * diff / n,)

    return _node(out, (pred,), bw, "mse")


def bce_with_logits(logits: Value, labels) -> Value:
    """Mean binary cross-entropy on raw logits (log-sum-exp form)."""
    logits = as_value(logits)
    y = np.broadcast_to(np.asarray(labels, dtype=np.float64), logits.shape) \
        if np.ndim(labels) == 0 else np.asarray(labels, dtype=np.float64)
    if y.shape != logits.shape:
        raise DimensionError(f"bce shape mismatch: {logits.shape} vs {y.shape}")
    if logits.data.size == 0:
        raise ContractError("bce_with_logits on an empty batch")
    x = logits.data
    out = np.mean(np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x))))
    n = x.size

    def bw(g):
        return (g * (_sigmoid(x) - y) / n,)

    return _node(out, (logits,), bw, "bce")


def losses(kind: str, *args) -> Value:
    """Dispatch to ``mse`` (pred, target) or ``bce_with_logits`` (logits, labels)."""
    if kind == "mse":
        return mse_loss(*args)
    if kind == "bce_with_logits":
        return bce_with_logits(*args)
    raise ContractError(f"unknown loss {kind!r}")


# ---------------------------------------------------------------- backward

def _topo_order(root: Value) -> list[Value]:
    order: list[Value] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Value) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf.

    Intermediate gradients are recomputed from scratch on each call, so
    calling twice without zeroing exactly doubles the leaf gradients.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if loss._parents:
        loss.grad = np.ones_like(loss.data)


# ---------------------------------------------------------------- parameters

class ParamStore:
    """Named trainable parameters, iterated in sorted name order."""

    def __init__(self, params: Mapping[str, np.ndarray] | None = None):
        self._params: dict[str, Value] = {}
        for name, arr in (params or {}).items():
            self.add(name, arr)

    def add(self, name: str, array) -> Value:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        v = Value(np.array(array, dtype=np.float64), requires_grad=True)
        self._params[name] = v
        return v

    def __getitem__(self, name: str) -> Value:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._params))

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> list[tuple[str, Value]]:
        return [(n, self._params[n]) for n in sorted(self._params)]

    def num_parameters(self) -> int:
        return sum(v.data.size for v in self._params.values())

    def zero_grad(self) -> None:
        for v in self._params.values():
            v.grad = None

    def frozen(self) -> dict[str, Value]:
        """Constant copies sharing data; gradients do not reach the originals."""
        return {n: Value(v.data) for n, v in self._params.items()}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: v.data.copy() for n, v in self.items()}

    def load(self, arrays: Mapping[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ContractError(f"parameter mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != self._params[name].shape:
                raise DimensionError(
                    f"parameter {name!r}: stored shape {arr.shape} vs model shape {self._params[name].shape}")
            self._params[name].data = arr.copy()

    def subset(self, prefix: str) -> "ParamStore":
        """View of the parameters whose names start with ``prefix`` (shared Values)."""
        out = ParamStore()
        out._params = {n: v for n, v in self._params.items() if n.startswith(prefix)}
        return out

    def merged(self, other: "ParamStore") -> "ParamStore":
        out = ParamStore()
        for store in (self, other):
            for name, v in store.items():
                if name in out:
                    raise ContractError(f"duplicate parameter name {name!r}")
                out._params[name] = v
        return out


def sgd_step(params: ParamStore | Iterable[Value], lr: float) -> None:
    """theta <- theta - lr * grad, then zero the gradients."""
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    values = [v for _, v in params.items()] if isinstance(params, ParamStore) else list(params)
    for v in values:
        if v.grad is not None:
            v.data = v.data - lr * v.grad
        v.grad = None


def grad_check(f: Callable[[ParamStore], Value], params: ParamStore, h: float = 1e-5,
               return_details: bool = False):
    """Compare analytic gradients against central differences.

    Returns the worst relative error ``|a - n| / max(|a|, |n|, 1e-8)`` over
    every coordinate of every parameter (and, optionally, the per-parameter
    worst case).
    """
    if not h > 0:
        raise ConfigError(f"finite-difference step must be positive, got {h}")
    base = f(params)
    again = f(params)
    if base.data.tobytes() != again.data.tobytes():
        raise ContractError("objective is not deterministic: two baseline evaluations differ")
    params.zero_grad()
    backward(base)
    worst = 0.0
    details: dict[str, float] = {}
    for name, v in params.items():
        analytic = np.zeros_like(v.data) if v.grad is None else v.grad.copy()
        flat = v.data.reshape(-1)
        a_flat = analytic.reshape(-1)
        pworst = 0.0
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            fp = f(params).item()
            flat[k] = orig - h
            fm = f(params).item()
            flat[k] = orig
            numeric = (fp - fm) / (2.0 * h)
            denom = max(abs(a_flat[k]), abs(numeric), 1e-8)
            pworst = max(pworst, abs(a_flat[k] - numeric) / denom)
        details[name] = pworst
        worst = max(worst, pworst)
    params.zero_grad()
    return (worst, details) if return_details else worst


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path: str | Path, params: ParamStore, meta: dict | None = None) -> None:
    """Write ``[u64 header length][JSON header][float64 LE payload]``."""
    entries = {}
    chunks = []
    offset = 0
    for name, v in params.items():
        raw = np.ascontiguousarray(v.data, dtype="<f8").tobytes()
        entries[name] = {"shape": list(v.shape), "offset": offset}
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"format_version": FORMAT_VERSION, "params": entries,
                         "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint written by :func:`save_checkpoint`; returns (arrays, meta)."""
    blob = Path(path).read_bytes()
    (hlen,) = struct.unpack("<Q", blob[:8])
    header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint format {header.get('format_version')}")
    payload = blob[8 + hlen:]
    arrays = {}
    for name, e in header["params"].items():
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=e["offset"])
        arrays[name] = arr.reshape(e["shape"]).astype(np.float64)
    return arrays, header["meta"]
