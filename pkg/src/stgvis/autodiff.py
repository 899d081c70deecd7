"""Dense float64 tensors with a define-by-run tape and reverse-mode gradients.

Every operation in this module reads ``Tensor.data`` (a contiguous numpy
array), computes a fresh result array, and -- when a :class:`Tape` is active
and at least one input is tracked -- appends a backward rule to the tape.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(mul(x, x))
    >>> tape.backward(loss)
    >>> x.grad
    array([2., 4.])
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """n-d float64 array that can participate in a recorded computation."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self._tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
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
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise RuntimeError("tensor was not recorded on any tape")
        self._tape.backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: scale(self, -1.0)
    __getitem__ = lambda self, key: index(self, key)

    def sum(self, axis=None) -> "Tensor":
        return sum_(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return mean(self, axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Op:
    __slots__ = ("inputs", "out_id", "backward_fn")

    def __init__(self, inputs, out_id, backward_fn):
        self.inputs = inputs
        self.out_id = out_id
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations; rebuilt for every training step."""

    def __init__(self):
        self.ops: list[_Op] = []
        self.tensors: dict[int, Tensor] = {}
        self._next_id = 0

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.remove(self)

    def _register(self, t: Tensor) -> int:
        t.node_id = self._next_id
        t._tape = self
        self.tensors[self._next_id] = t
        self._next_id += 1
        return t.node_id

    def is_tracked(self, t: Tensor) -> bool:
        return t._tape is self or t.requires_grad

    def watch(self, t: Tensor) -> int:
        if t._tape is not self:
            self._register(t)
        return t.node_id

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> None:
        for t in inputs:
            if t.requires_grad or t._tape is self:
                self.watch(t)
        self._register(out)
        self.ops.append(_Op(tuple(inputs), out.node_id, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(x) into ``x.grad`` for every tensor on this tape."""
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for op in reversed(self.ops):
            g = grads.get(op.out_id)
            if g is None:
                continue
            in_grads = op.backward_fn(g)
            for t, gi in zip(op.inputs, in_grads):
                if gi is None or t._tape is not self:
                    continue
                prev = grads.get(t.node_id)
                grads[t.node_id] = gi if prev is None else prev + gi
        for nid, g in grads.items():
            t = self.tensors[nid]
            g = np.ascontiguousarray(g.reshape(t.shape))
            t.grad = g.copy() if t.grad is None else t.grad + g


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as an op result and record it if any input is tracked."""
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(tape.is_tracked(t) for t in inputs):
        tape.record(out, inputs, backward_fn)
    return out


def custom_op(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Public hook for layers that define their own backward rule.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    """
    return _emit(data, inputs, backward_fn)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shape mismatch for {kind}: {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    y = 1.0 / a.data
    return _emit(y, (a,), lambda g: (-g * y * y,))


def div(a, b) -> Tensor:
    return mul(a, reciprocal(b))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)
    return _emit(np.abs(a.data), (a,), lambda g: (g * s,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    m = a.data > 0
    # np.maximum keeps NaN visible instead of masking it to zero
    return _emit(np.maximum(a.data, 0.0), (a,), lambda g: (g * m,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit(y, (a,), lambda g: (g * y * (1.0 - y),))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _emit(y, (a,), lambda g: (g * y,))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is zero where clipping was active."""
    a = as_tensor(a)
    m = (a.data >= lo) & (a.data <= hi)
    return _emit(np.clip(a.data, lo, hi), (a,), lambda g: (g * m,))


_UNARY = {"abs": abs_, "relu": relu, "sigmoid": sigmoid}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by name; ``scale`` takes a python float as ``b``."""
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind == "scale":
        return scale(a, float(b))
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ----------------------------------------------------------------- reductions

def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(a.data.sum(axis=axis)), (a,), bw)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum_(a, axis), 1.0 / float(n))


# --------------------------------------------------------------- shape juggling

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts], axis)


def index(a, key) -> Tensor:
    """numpy-style indexing (basic or advanced); backward scatters with add.at."""
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return _emit(np.ascontiguousarray(a.data[key]), (a,), bw)


def gather_rows(a, idx) -> Tensor:
    """Rows ``a[idx]`` of a 2-d tensor; backward uses a bincount-style scatter."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]

    def bw(g):
        return (_scatter_rows(g, idx, n),)

    return _emit(a.data[idx], (a,), bw)


def _scatter_rows(src: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n,) + src.shape[1:])
    np.add.at(out, idx, src)
    return out


def scatter_add(src, idx, n: int) -> Tensor:
    """Row-sum ``src`` into ``n`` buckets given by ``idx`` (the transpose of gather_rows)."""
    src = as_tensor(src)
    idx = np.asarray(idx, dtype=np.int64)
    return _emit(_scatter_rows(src.data, idx, n), (src,), lambda g: (g[idx],))


def upsample_nearest(a, factor: int) -> Tensor:
    """Repeat the last two axes ``factor`` times each."""
    a = as_tensor(a)
    shape = a.shape
    out = np.repeat(np.repeat(a.data, factor, axis=-2), factor, axis=-1)

    def bw(g):
        g = g.reshape(shape[:-2] + (shape[-2], factor, shape[-1], factor))
        return (g.sum(axis=(-3, -1)),)

    return _emit(out, (a,), bw)


# -------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """numpy.matmul semantics for >= 2-d operands (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >= 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit(ad @ bd, (a, b), bw)


def _im2col(x: np.ndarray, k: int, stride: int, pad: int, h_out: int, w_out: int) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, : (h_out - 1) * stride + 1 : stride, : (w_out - 1) * stride + 1 : stride]
    # (C, H', W', k, k) -> (C*k*k, H'*W')
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(x.shape[0] * k * k, -1)


def conv2d(x, kernel, stride: int = 1, pad: int = 0, bias=None) -> Tensor:
    """Zero-padded 2-d cross-correlation of a ``C_in x H x W`` input."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects C x H x W input and 4-d kernel, got {x.shape}, {kernel.shape}")
    c_out, c_in, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d kernel must be square with odd size, got {k}x{k2}")
    if c_in != x.shape[0]:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    _, h, w = x.shape
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (w + 2 * pad - k) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise ValueError(f"conv2d output size {h_out}x{w_out} is not positive for input {x.shape}")
    cols = _im2col(x.data, k, stride, pad, h_out, w_out)
    wmat = kernel.data.reshape(c_out, -1)
    out = wmat @ cols
    inputs = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[:, None]
        inputs.append(bias)
    out = out.reshape(c_out, h_out, w_out)

    def bw(g):
        g2 = g.reshape(c_out, -1)
        gk = (g2 @ cols.T).reshape(kernel.shape)
        gcols = (wmat.T @ g2).reshape(c_in, k, k, h_out, w_out)
        gx = np.zeros((c_in, h + 2 * pad, w + 2 * pad))
        for dy in range(k):
            for dx in range(k):
                gx[:, dy : dy + stride * h_out : stride, dx : dx + stride * w_out : stride] += gcols[:, dy, dx]
        gx = gx[:, pad : pad + h, pad : pad + w]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return tuple(grads)

    return _emit(out, inputs, bw)


# ------------------------------------------------------------------ optimizer

class SGD:
    """Momentum SGD with step decay (x0.1 at each milestone)."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-2, momentum: float = 0.9,
                 milestones: Sequence[int] = ()):
        self.params = list(params)
        self.base_lr = lr
        self.momentum = momentum
        self.milestones = sorted(milestones)
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    @property
    def lr(self) -> float:
        passed = sum(1 for m in self.milestones if self.steps >= m)
        return self.base_lr * 0.1**passed

    def step(self) -> None:
        sgd_step(self.params, self.lr, self.momentum, self.velocity)
        self.steps += 1


def sgd_step(params: Sequence[Tensor], lr: float, momentum: float,
             velocity: list | None = None) -> list:
    """v <- momentum*v + grad; p <- p - lr*v; then zero the grads.

    Returns the velocity buffers (created as zeros when not given).
    """
    if velocity is None:
        velocity = [np.zeros_like(p.data) for p in params]
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name or p.shape} has no gradient")
    for p, v in zip(params, velocity):
        v *= momentum
        v += p.grad
        p.data = p.data - lr * v
        p.grad = None
    return velocity


# ----------------------------------------------------------------- checkpoint

CHECKPOINT_MAGIC = b"STGVISCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict[str, Tensor]) -> None:
    """Binary layout: magic, u32 version, u32 count, then per parameter
    u32 name length, utf-8 name, u32 ndim, u32 dims, little-endian f64 data."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name in sorted(params):
        arr = params[name].data
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = 8
    version, count = struct.unpack_from("<II", buf, pos)
    pos += 8
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(buf):
            raise ValueError(f"{path}: truncated data for parameter {name!r} at offset {pos}")
        out[name] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos).astype(np.float64).reshape(shape)
        pos += nbytes
    return out
