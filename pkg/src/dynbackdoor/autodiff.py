"""Small reverse-mode differentiation engine over dense float64 arrays.

Operations executed inside an active :class:`Tape` are recorded in execution
order, which is already a topological order, so :meth:`Tape.backward` walks the
record once in reverse. Outside a tape the same functions just compute values,
which keeps inference cheap.

Layout convention: rows are batch items, so a dense layer computes
``act(X @ W + B)`` with ``W`` of shape ``(fan_in, fan_out)``.
"""

from __future__ import annotations

import json
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit as _expit

__all__ = [
    "Tensor",
    "Tape",
    "Gradients",
    "Adam",
    "AdamState",
    "LSTMParams",
    "AutodiffError",
    "DimensionError",
    "NonFiniteError",
    "DetachedError",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "sigmoid",
    "tanh",
    "relu",
    "activate",
    "linear_forward",
    "reshape",
    "transpose",
    "getitem",
    "concat",
    "stack",
    "inject",
    "gather",
    "sum_all",
    "mean_all",
    "mse_loss",
    "lstm_forward",
    "init_uniform",
    "save_checkpoint",
    "load_checkpoint",
    "parameter_checksum",
]


class AutodiffError(RuntimeError):
    pass


class DimensionError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


class DetachedError(AutodiffError, KeyError):
    pass


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        bad = int((~np.isfinite(arr)).sum())
        raise NonFiniteError(f"{bad} non-finite value(s) produced by {where}")


class Tensor:
    """A float64 array plus the flag saying whether gradients flow into it."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, name or "tensor construction")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------- tape

_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Gradients(Mapping):
    """Gradients keyed by tensor identity.

    Looking up a tensor that did not take part in the differentiated graph
    raises :class:`DetachedError` rather than silently returning zeros.
    """

    def __init__(self, grads: dict[int, np.ndarray], tensors: dict[int, Tensor], visits: int):
        self._grads = grads
        self._tensors = tensors
        self.visits = visits

    def __getitem__(self, t: Tensor) -> np.ndarray:
        key = id(t)
        if key not in self._tensors or self._tensors[key] is not t:
            raise DetachedError(f"{t!r} is not connected to the differentiated loss")
        g = self._grads.get(key)
        return np.zeros_like(t.data) if g is None else g

    def __contains__(self, t) -> bool:
        return isinstance(t, Tensor) and self._tensors.get(id(t)) is t

    def __iter__(self):
        return iter(self._tensors.values())

    def __len__(self) -> int:
        return len(self._tensors)


class Tape:
    """Records differentiable operations executed while it is active.

    Use as a context manager; tapes are thread-confined and may be nested,
    in which case only the innermost one records.
    """

    def __init__(self) -> None:
        self._nodes: list[_Node] = []
        self._produced: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self._nodes]

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward, op: str) -> None:
        self._nodes.append(_Node(out, inputs, backward, op))
        self._produced[id(out)] = out

    def backward(self, loss: Tensor) -> Gradients:
        if loss.data.size != 1:
            raise DimensionError(f"loss must be a scalar, got shape {loss.shape}")
        if self._produced.get(id(loss)) is not loss:
            raise DetachedError("loss was not produced on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        tensors: dict[int, Tensor] = {id(loss): loss}
        visits = 0
        for node in reversed(self._nodes):
            visits += 1
            g_out = grads.get(id(node.out))
            if g_out is None:
                continue
            for t in node.inputs:
                if t.requires_grad:
                    tensors.setdefault(id(t), t)
            in_grads = node.backward(g_out)
            for t, g in zip(node.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                _check_finite(g, f"backward of {node.op}")
                if g.shape != t.data.shape:
                    raise DimensionError(
                        f"backward of {node.op} gave gradient {g.shape} for value {t.data.shape}"
                    )
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        return Gradients(grads, tensors, visits)


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(out_data, op)
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = needs
    out.name = None
    if needs:
        tape.record(out, inputs, backward, op)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------- elementwise


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _expit(a.data)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "none": None}


def activate(x: Tensor, act: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[act]
    except KeyError:
        raise ValueError(f"unknown activation {act!r}") from None
    return x if fn is None else fn(x)


# ------------------------------------------------------------------ linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear_forward(W, B, X, act: str = "none") -> Tensor:
    """``act(X @ W + B)``; ``act`` is one of relu, sigmoid, tanh, none."""
    X, W = as_tensor(X), as_tensor(W)
    if X.ndim != 2 or W.ndim != 2 or X.shape[1] != W.shape[0]:
        raise DimensionError(f"linear: input {X.shape} incompatible with weight {W.shape}")
    B = as_tensor(B)
    if B.shape[-1] != W.shape[1]:
        raise DimensionError(f"linear: bias {B.shape} incompatible with weight {W.shape}")
    return activate(add(matmul(X, W), B), act)


# ------------------------------------------------------------------------- shaping


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _record(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    basic = _is_basic_index(index)

    def back(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _record(np.array(a.data[index], copy=True), (a,), back, "getitem")


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) for p in parts)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    n = len(ts)
    return _record(
        out,
        ts,
        lambda g: tuple(np.squeeze(part, axis=axis) for part in np.split(g, n, axis=axis)),
        "stack",
    )


def inject(base: np.ndarray, index: tuple, values, value_index: np.ndarray) -> Tensor:
    """Copy ``base`` and overwrite ``out[index] = values[value_index]``.

    ``base`` is a constant; gradients flow only into ``values``. One value may
    feed several positions (the same trigger entry placed in many windows), in
    which case its gradient is the sum over those positions. Positions in
    ``index`` must be distinct.
    """
    values = as_tensor(values)
    value_index = np.asarray(value_index, dtype=np.intp)
    out = np.array(base, dtype=np.float64, copy=True)
    out[index] = values.data.reshape(-1)[value_index]
    vshape = values.shape
    n = values.size

    def back(g):
        gv = np.bincount(value_index, weights=g[index], minlength=n)
        return (gv.reshape(vshape),)

    return _record(out, (values,), back, "inject")


def gather(a, index: tuple) -> Tensor:
    """Advanced-index read ``a[index]`` as a 1-D tensor."""
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _record(np.asarray(a.data[index], dtype=np.float64).reshape(-1), (a,), back, "gather")


# ----------------------------------------------------------------------- reductions


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _record(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.size
    return _record(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


def mse_loss(pred, target) -> Tensor:
    """Mean of squared elementwise differences."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    return _record(
        np.asarray(np.mean(diff * diff)),
        (pred, target),
        lambda g: (g * 2.0 * diff / n, -g * 2.0 * diff / n),
        "mse",
    )


# ----------------------------------------------------------------------------- LSTM


@dataclass
class LSTMParams:
    """Gate order along the last axis is input, forget, candidate, output."""

    W_x: Tensor  # (in, 4H)
    W_h: Tensor  # (H, 4H)
    b: Tensor  # (4H,)

    @property
    def hidden(self) -> int:
        return self.W_h.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_x.shape[0]


def lstm_forward(cell: LSTMParams, sequence) -> Tensor:
    """Run an LSTM from zero hidden and cell state and return all hidden states.

    ``sequence`` is a ``(T, B, in)`` tensor or a list of ``(B, in)`` tensors;
    the result has shape ``(T, B, H)``. Recorded as a single tape node whose
    backward pass is explicit backpropagation through time.
    """
    if isinstance(sequence, (list, tuple)):
        if not sequence:
            raise ValueError("lstm_forward: empty sequence")
        sequence = stack(sequence, axis=0)
    x = as_tensor(sequence)
    if x.ndim != 3 or x.shape[0] == 0:
        raise ValueError(f"lstm_forward: expected non-empty (T, B, in) input, got {x.shape}")
    T, B, d_in = x.shape
    if d_in != cell.input_dim:
        raise DimensionError(f"lstm_forward: input dim {d_in} != cell input dim {cell.input_dim}")
    H = cell.hidden
    if cell.W_x.shape[1] != 4 * H or cell.W_h.shape[1] != 4 * H or cell.b.shape != (4 * H,):
        raise DimensionError("lstm_forward: inconsistent gate dimensions")

    Wx, Wh, b = cell.W_x.data, cell.W_h.data, cell.b.data
    X = x.data
    zx = (X.reshape(T * B, d_in) @ Wx + b).reshape(T, B, 4 * H)
    gates = np.empty((T, B, 4 * H))
    cs = np.empty((T, B, H))
    tcs = np.empty((T, B, H))
    hs = np.empty((T, B, H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in range(T):
        z = zx[t] + h @ Wh if t else zx[t]
        gt = gates[t]
        gt[:, :2 * H] = _expit(z[:, :2 * H])
        gt[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
        gt[:, 3 * H:] = _expit(z[:, 3 * H:])
        c = gt[:, H:2 * H] * c + gt[:, :H] * gt[:, 2 * H:3 * H]
        cs[t] = c
        tcs[t] = np.tanh(c)
        h = gt[:, 3 * H:] * tcs[t]
        hs[t] = h

    def back(gH):
        dZ = np.empty((T, B, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            gt = gates[t]
            i, f, g, o = gt[:, :H], gt[:, H:2 * H], gt[:, 2 * H:3 * H], gt[:, 3 * H:]
            dh = gH[t] + dh_next
            dc = dh * o * (1.0 - tcs[t] ** 2) + dc_next
            dz = dZ[t]
            dz[:, :H] = dc * g * i * (1.0 - i)
            dz[:, H:2 * H] = (dc * cs[t - 1] * f * (1.0 - f)) if t else 0.0
            dz[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
            dz[:, 3 * H:] = dh * tcs[t] * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dz @ Wh.T
        flat = dZ.reshape(T * B, 4 * H)
        dX = (flat @ Wx.T).reshape(T, B, d_in)
        dWx = X.reshape(T * B, d_in).T @ flat
        dWh = hs[:-1].reshape((T - 1) * B, H).T @ dZ[1:].reshape((T - 1) * B, 4 * H) if T > 1 \
            else np.zeros_like(Wh)
        db = flat.sum(axis=0)
        return dX, dWx, dWh, db

    return _record(hs, (x, cell.W_x, cell.W_h, cell.b), back, "lstm")


# ----------------------------------------------------------------------- init, Adam


def init_uniform(rng: np.random.Generator, fan_in: int, shape: Sequence[int], name: str | None = None) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=tuple(shape)), requires_grad=True, name=name)


@dataclass
class AdamState:
    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """Adam with bias correction; weight decay is an L2 term added to the gradient."""

    def __init__(self, params: Mapping[str, Tensor], lr: float, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.state = AdamState(lr=lr, weight_decay=weight_decay, beta1=beta1, beta2=beta2, eps=eps)
        for k, p in self.params.items():
            self.state.m[k] = np.zeros_like(p.data)
            self.state.v[k] = np.zeros_like(p.data)

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        s = self.state
        for k, g in grads.items():
            if not np.isfinite(g).all():
                raise NonFiniteError(
                    f"non-finite gradient for parameter {k!r} at Adam step {s.step + 1} "
                    f"(max |finite| = {np.nanmax(np.abs(np.where(np.isfinite(g), g, np.nan)), initial=0.0):.3g})"
                )
        s.step += 1
        bc1 = 1.0 - s.beta1 ** s.step
        bc2 = 1.0 - s.beta2 ** s.step
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise DimensionError(f"gradient for {k!r} has shape {g.shape}, parameter {p.data.shape}")
            if s.weight_decay:
                g = g + s.weight_decay * p.data
            m = s.m[k]
            v = s.v[k]
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * (g * g)
            p.data = p.data - s.lr * (m / bc1) / (np.sqrt(v / bc2) + s.eps)


# ---------------------------------------------------------------------- checkpoints

_MAGIC = b"DBKP"
_VERSION = 1


def save_checkpoint(path: str | Path, params: Mapping[str, np.ndarray | Tensor], header: dict | None = None) -> None:
    """Write parameters in the flat binary checkpoint format.

    Layout, all integers little-endian::

        b"DBKP" | u32 version | u32 header_len | header JSON (utf-8)
        u32 n_params | per param: u32 name_len | name | u32 ndim | u64 dims[ndim] | f64 payload
    """
    head = json.dumps(header or {}, sort_keys=True).encode()
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(head)), head, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = params[name]
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8", order="C")
        key = name.encode()
        chunks.append(struct.pack("<I", len(key)) + key)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    header = json.loads(buf[pos:pos + hlen].decode())
    pos += hlen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + klen].decode()
        pos += klen
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    return params, header


def parameter_checksum(params: Iterable[Tensor] | Mapping[str, Tensor]) -> str:
    import hashlib

    h = hashlib.sha256()
    items = sorted(params.items()) if isinstance(params, Mapping) else enumerate(params)
    for k, p in items:
        h.update(str(k).encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
