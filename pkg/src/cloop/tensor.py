"""Minimal dense-tensor core with reverse-mode automatic differentiation.

Float64 everywhere. A global active Tape records primitive applications in
creation order, which is already a valid topological order; backward walks
it in reverse. With no tape active, the same primitives run forward-only,
which is the inference fast path.

Broadcasting is restricted: operands must have equal shapes, or one operand
may be a scalar or may omit leading batch dimensions (right-aligned match).
Anything else raises. Plain floats and numpy arrays passed to primitives are
treated as constants (no gradient).
"""
from __future__ import annotations

import contextlib
import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self.records: list[tuple[Tensor, callable]] = []
        self.param_cache: dict[tuple[int, str], Tensor] = {}

    def add(self, out: "Tensor", backward_fn) -> None:
        self.records.append((out, backward_fn))

    def backward(self, loss: "Tensor", store: "ParamStore | None" = None):
        """Backpropagate from a scalar loss; optionally collect store gradients.

        Unreachable parameters get zero gradients.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self.records):
            if out.grad is not None:
                fn(out.grad)
        if store is None:
            return None
        grads = {}
        for name in store.names():
            t = self.param_cache.get((id(store), name))
            if t is not None and t.grad is not None:
                grads[name] = t.grad
            else:
                grads[name] = np.zeros_like(store[name])
        return grads


@contextlib.contextmanager
def tape():
    global _ACTIVE_TAPE
    prev = _ACTIVE_TAPE
    _ACTIVE_TAPE = Tape()
    try:
        yield _ACTIVE_TAPE
    finally:
        _ACTIVE_TAPE = prev


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, rg={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))

def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _ACTIVE_TAPE is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE_TAPE.add(out, backward_fn)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _check_pair(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or a.data.size == 1 or b.data.size == 1:
        return
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(small) != len(big) and big[len(big) - len(small):] == small:
        return
    raise ValueError(f"{op}: incompatible shapes {sa} and {sb} "
                     "(equal, scalar, or right-aligned suffix only)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(extra)))
    # remaining mismatches can only be size-1 scalar operands
    if g.shape != tuple(shape):
        g = g.sum().reshape(shape)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair("add", a, b)
    out = Tensor(a.data + b.data)

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))
    return _record(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair("sub", a, b)
    out = Tensor(a.data - b.data)

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))
    return _record(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair("mul", a, b)
    out = Tensor(a.data * b.data)

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))
    return _record(out, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    if len(sa) < 2 or len(sb) < 2:
        raise ValueError(f"matmul: operands must be at least 2-D, got {sa} and {sb}")
    if not (len(sb) == 2 or sa[:-2] == sb[:-2]):
        raise ValueError(f"matmul: unsupported batching {sa} @ {sb} "
                         "(2-D right operand or equal leading dims)")
    if sa[-1] != sb[-2]:
        raise ValueError(f"matmul: inner dimensions disagree, {sa} @ {sb}")
    out = Tensor(np.matmul(a.data, b.data))

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        if len(sb) == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
        _accum(a, ga)
        _accum(b, gb)
    return _record(out, (a, b), backward)


def concat(parts: list, axis: int = -1) -> Tensor:
    ts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            _accum(t, piece)
    return _record(out, tuple(ts), backward)


def slice_(t: Tensor, key) -> Tensor:
    t = _as_tensor(t)
    out = Tensor(t.data[key])

    def backward(g):
        dx = np.zeros_like(t.data)
        dx[key] += g
        _accum(t, dx)
    return _record(out, (t,), backward)


def reshape(t: Tensor, shape) -> Tensor:
    t = _as_tensor(t)
    out = Tensor(t.data.reshape(shape))

    def backward(g):
        _accum(t, g.reshape(t.data.shape))
    return _record(out, (t,), backward)


def transpose(t: Tensor, axes) -> Tensor:
    t = _as_tensor(t)
    out = Tensor(np.transpose(t.data, axes))
    inv = np.argsort(axes)

    def backward(g):
        _accum(t, np.transpose(g, inv))
    return _record(out, (t,), backward)


def gather(t: Tensor, indices, axis: int = 0) -> Tensor:
    """np.take along one axis with a constant integer index array."""
    t = _as_tensor(t)
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % t.data.ndim
    out = Tensor(np.take(t.data, idx, axis=axis))

    def backward(g):
        dx = np.zeros_like(t.data)
        np.add.at(dx, (slice(None),) * axis + (idx,), g)
        _accum(t, dx)
    return _record(out, (t,), backward)


def sum_(t: Tensor, axis: int | None = None) -> Tensor:
    t = _as_tensor(t)
    out = Tensor(np.sum(t.data, axis=axis))

    def backward(g):
        if axis is None:
            _accum(t, np.broadcast_to(g, t.data.shape).copy())
        else:
            _accum(t, np.broadcast_to(np.expand_dims(g, axis), t.data.shape).copy())
    return _record(out, (t,), backward)


def mean(t: Tensor, axis: int | None = None) -> Tensor:
    t = _as_tensor(t)
    n = t.data.size if axis is None else t.data.shape[axis]
    out = Tensor(np.mean(t.data, axis=axis))

    def backward(g):
        if axis is None:
            _accum(t, np.broadcast_to(g / n, t.data.shape).copy())
        else:
            _accum(t, np.broadcast_to(np.expand_dims(g, axis) / n, t.data.shape).copy())
    return _record(out, (t,), backward)


def _elementwise(t, value, local_grad_fn):
    t = _as_tensor(t)
    out = Tensor(value)

    def backward(g):
        _accum(t, g * local_grad_fn())
    return _record(out, (t,), backward)


def relu(t) -> Tensor:
    t = _as_tensor(t)
    return _elementwise(t, np.maximum(t.data, 0.0), lambda: (t.data > 0).astype(np.float64))


def tanh(t) -> Tensor:
    t = _as_tensor(t)
    y = np.tanh(t.data)
    return _elementwise(t, y, lambda: 1.0 - y * y)


def sigmoid(t) -> Tensor:
    t = _as_tensor(t)
    # exp of a nonpositive argument only, so large |x| cannot overflow
    z = np.exp(-np.abs(t.data))
    y = np.where(t.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _elementwise(t, y, lambda: y * (1.0 - y))


def exp(t) -> Tensor:
    t = _as_tensor(t)
    y = np.exp(t.data)
    return _elementwise(t, y, lambda: y)


def log(t) -> Tensor:
    t = _as_tensor(t)
    return _elementwise(t, np.log(t.data), lambda: 1.0 / t.data)


def abs_(t) -> Tensor:
    t = _as_tensor(t)
    return _elementwise(t, np.abs(t.data), lambda: np.sign(t.data))


def softmax(t, axis: int = -1) -> Tensor:
    t = _as_tensor(t)
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(t, (g - dot) * y)
    return _record(out, (t,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then scale and shift with learnable vectors."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ValueError(f"layer_norm: gain/bias must have shape ({d},), "
                         f"got {gain.data.shape} and {bias.data.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = Tensor(xhat * gain.data + bias.data)

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=lead))
        _accum(bias, g.sum(axis=lead))
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv_std * (dxhat - m1 - xhat * m2))
    return _record(out, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# Parameters

def _name_rng(global_seed: int, name: str) -> np.random.Generator:
    digest = hashlib.sha256(name.encode()).digest()
    words = struct.unpack("<8I", digest)
    return np.random.default_rng([int(global_seed) & 0xFFFFFFFF, *words])


def xavier_uniform(shape, rng: np.random.Generator) -> np.ndarray:
    if len(shape) >= 2:
        fan_in, fan_out = shape[-2], shape[-1]
    else:
        fan_in = fan_out = shape[0]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class ParamStore:
    """Named float64 parameter tensors with name-seeded deterministic init.

    Initialization depends only on (seed, name, shape), never on creation
    order, so functionally-built models are reproducible.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._values: dict[str, np.ndarray] = {}

    def ensure(self, name: str, shape: tuple, init: str = "xavier") -> np.ndarray:
        """Get-or-create a parameter; shape must match on reuse."""
        if name in self._values:
            v = self._values[name]
            if v.shape != tuple(shape):
                raise ValueError(f"parameter {name!r} exists with shape {v.shape}, "
                                 f"requested {tuple(shape)}")
            return v
        if init == "xavier":
            v = xavier_uniform(tuple(shape), _name_rng(self.seed, name))
        elif init == "zeros":
            v = np.zeros(shape)
        elif init == "ones":
            v = np.ones(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        self._values[name] = v.astype(np.float64)
        return self._values[name]

    def tensor(self, name: str) -> Tensor:
        """Wrap a parameter for use in the active tape (one wrapper per tape)."""
        value = self._values[name]
        t = _ACTIVE_TAPE
        if t is None:
            return Tensor(value)
        key = (id(self), name)
        cached = t.param_cache.get(key)
        if cached is None:
            cached = Tensor(value, requires_grad=True)
            t.param_cache[key] = cached
        return cached

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        v = np.asarray(value, dtype=np.float64)
        if name in self._values and self._values[name].shape != v.shape:
            raise ValueError(f"parameter {name!r}: shape change "
                             f"{self._values[name].shape} -> {v.shape}")
        self._values[name] = v

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> list[str]:
        return sorted(self._values)

    def items(self):
        for name in self.names():
            yield name, self._values[name]

    def size(self) -> int:
        return sum(v.size for v in self._values.values())

    def copy(self) -> "ParamStore":
        out = ParamStore(self.seed)
        out._values = {k: v.copy() for k, v in self._values.items()}
        return out

    # -- weights file: magic, u64 header length, JSON header, raw payload --
    MAGIC = b"CLWT\x00\x01"

    def save(self, path: str) -> None:
        entries, payload, offset = [], [], 0
        for name, v in self.items():
            raw = np.ascontiguousarray(v, dtype="<f8").tobytes()
            entries.append({"name": name, "shape": list(v.shape),
                            "dtype": "<f8", "offset": offset})
            payload.append(raw)
            offset += len(raw)
        header = json.dumps({"seed": self.seed, "tensors": entries},
                            sort_keys=True).encode()
        with open(path, "wb") as f:
            f.write(self.MAGIC)
            f.write(struct.pack("<Q", len(header)))
            f.write(header)
            for raw in payload:
                f.write(raw)

    @classmethod
    def load(cls, path: str) -> "ParamStore":
        with open(path, "rb") as f:
            magic = f.read(len(cls.MAGIC))
            if magic != cls.MAGIC:
                raise ValueError(f"{path}: not a weights file (bad magic {magic!r})")
            (hlen,) = struct.unpack("<Q", f.read(8))
            header = json.loads(f.read(hlen).decode())
            payload = f.read()
        store = cls(header.get("seed", 0))
        for e in header["tensors"]:
            n = int(np.prod(e["shape"])) if e["shape"] else 1
            raw = payload[e["offset"]:e["offset"] + 8 * n]
            v = np.frombuffer(raw, dtype=e["dtype"]).astype(np.float64)
            store._values[e["name"]] = v.reshape(e["shape"]).copy()
        return store


# ---------------------------------------------------------------------------
# Gradient checking

@dataclass
class GradCheckReport:
    max_rel_err: float
    per_param: dict
    worst_param: str
    entries_checked: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def grad_check(f, store: ParamStore, eps: float = 1e-5,
               entries_per_param: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of scalar f(store) to central differences.

    entries_per_param caps how many scalar entries are probed per parameter
    tensor (seeded sample); None probes every entry.
    """
    with tape() as tp:
        loss = f(store)
        grads = tp.backward(loss, store)
    rng = np.random.default_rng(seed)
    per_param, worst_name, worst = {}, "", 0.0
    checked = 0
    for name in store.names():
        v, g = store[name], grads[name]
        n = v.size
        if entries_per_param is None or n <= entries_per_param:
            idxs = np.arange(n)
        else:
            idxs = rng.choice(n, size=entries_per_param, replace=False)
        local = 0.0
        for i in idxs:
            orig = v.flat[i]
            v.flat[i] = orig + eps
            fp = float(f(store).data)
            v.flat[i] = orig - eps
            fm = float(f(store).data)
            v.flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            analytic = g.flat[i]
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
            local = max(local, rel)
            checked += 1
        per_param[name] = local
        if local >= worst:
            worst, worst_name = local, name
    return GradCheckReport(worst, per_param, worst_name, checked)
