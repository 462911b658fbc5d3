"""Tape-based reverse-mode autodiff over float64 numpy arrays.

Only the handful of operations the four networks and the losses need are
provided. Ops record onto the innermost active :class:`Tape`; with no tape
active they run as plain forward computations.

    with Tape() as tape:
        y = conv2d(x, w, b, stride=1, padding=1)
        loss = mean(square(y))
    tape.backward(loss)
"""
from __future__ import annotations

import struct
import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Same storage, no gradient tracking."""
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

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

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.out = out
        self.inputs = tuple(inputs)
        self.backward = backward


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed ops; one backward pass consumes it."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse
            raise TapeError("tape stack corrupted (nested tapes exited out of order)")

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a consumed tape")
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


class no_tape:
    """Suspend recording (forward-only evaluation) inside an active tape."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        tape.record(out, inputs, backward)
        return out
    return Tensor(data)


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every requires-grad leaf recorded on ``tape``.

    Leaves that do not influence ``loss`` receive an exactly-zero gradient.
    Existing ``.grad`` values on those leaves are overwritten.
    """
    if tape.consumed:
        raise TapeError("backward called twice on the same tape")
    if loss.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    produced = {id(n.out) for n in tape.nodes}
    if id(loss) not in produced:
        raise TapeError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    for key, leaf in leaves.items():
        g = grads.get(key)
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=DTYPE).reshape(leaf.shape)
    tape.nodes = []
    tape.consumed = True


# ---------------------------------------------------------------------------
# elementwise and reductions


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit(a.data * b.data, (a, b), bw)


def square(x: Tensor) -> Tensor:
    return _emit(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _emit(np.abs(x.data), (x,), lambda g: (np.sign(x.data) * g,))


def sum(x: Tensor) -> Tensor:  # noqa: A001
    return _emit(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _emit(np.array(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, x.shape),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # multiply rather than select so NaN inputs stay NaN
    return _emit(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    # kink at 0 takes the negative-side slope
    scale = np.where(x.data > 0, 1.0, slope)
    return _emit(x.data * scale, (x,), lambda g: (g * scale,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))


# ---------------------------------------------------------------------------
# convolution and resampling


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and (Cout, Cin, kh, kw) kernel."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if cin != kcin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin} channels, kernel expects {kcin}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {cout} output channels")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    # channel-major (C, N, H, W) im2col: patch rows are contiguous per (cin, i, j)
    xc = np.zeros((cin, n, hp, wp))
    xc[:, :, padding:padding + h, padding:padding + w] = x.data.transpose(1, 0, 2, 3)
    win = sliding_window_view(xc, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 4, 5, 1, 2, 3)).reshape(cin * kh * kw, n * ho * wo)
    kmat = kernel.data.reshape(cout, -1)
    outc = kmat @ cols
    if bias is not None:
        outc += bias.data[:, None]
    out = np.ascontiguousarray(outc.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))

    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        gc = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, n * ho * wo)
        gk = (gc @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (kmat.T @ gc).reshape(cin, kh, kw, n, ho, wo)
            gxc = np.zeros((cin, n, hp, wp))
            hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gxc[:, :, i:i + hs:stride, j:j + ws:stride] += gcols[:, i, j]
            gx = gxc[:, :, padding:padding + h, padding:padding + w].transpose(1, 0, 2, 3)
        if bias is None:
            return gx, gk
        gb = gc.sum(axis=1) if bias.requires_grad else None
        return gx, gk, gb

    return _emit(out, inputs, bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the two trailing axes."""
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _emit(np.ascontiguousarray(out), (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def bw(g):
        return tuple(np.take(g, np.arange(a, b), axis=axis) for a, b in zip(bounds[:-1], bounds[1:]))

    return _emit(np.concatenate([x.data for x in xs], axis=axis), xs, bw)


def slice_batch(x: Tensor, start: int, stop: int) -> Tensor:
    """x[start:stop] along the leading axis."""
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _emit(x.data[start:stop].copy(), (x,), bw)


# ---------------------------------------------------------------------------
# normalisation and regularisation


class RunningStats:
    """Per-channel running mean/variance for batch norm (momentum 0.9)."""

    def __init__(self, channels: int, momentum: float = 0.9):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.momentum = momentum

    def update(self, batch_mean: np.ndarray, batch_var_unbiased: np.ndarray) -> None:
        m = self.momentum
        self.mean = m * self.mean + (1.0 - m) * batch_mean
        self.var = m * self.var + (1.0 - m) * batch_var_unbiased


BN_EPS = 1e-5


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mode: str = "train",
               running: RunningStats | None = None, update_stats: bool = True,
               eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalisation over (N, H, W).

    ``update_stats=False`` uses batch statistics without touching ``running``,
    so frozen networks leave their buffers untouched.
    """
    n, c, h, w = x.shape
    if mode == "eval":
        if running is None:
            raise ValueError("eval-mode batch_norm requires running statistics")
        inv = 1.0 / np.sqrt(running.var + eps)
        scale = (gamma.data * inv)[None, :, None, None]
        xhat = (x.data - running.mean[None, :, None, None]) * inv[None, :, None, None]
        out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

        def bw_eval(g):
            return g * scale, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return _emit(out, (x, gamma, beta), bw_eval)
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    m = n * h * w
    if m < 2:
        raise ValueError("train-mode batch_norm needs at least 2 values per channel")
    mu = x.data.mean(axis=(0, 2, 3))
    xc = x.data - mu[None, :, None, None]
    var = (xc * xc).mean(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    if running is not None and update_stats:
        running.update(mu, var * m / (m - 1))

    def bw(g):
        gg = g.sum(axis=(0, 2, 3))
        gxh = (g * xhat).sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            k = (gamma.data * inv / m)[None, :, None, None]
            gx = k * (m * g - gg[None, :, None, None] - xhat * gxh[None, :, None, None])
        return gx, gxh, gg

    return _emit(out, (x, gamma, beta), bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, mode: str = "train") -> Tensor:
    """Inverted dropout; identity in eval mode or when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= p) * (1.0 / (1.0 - p))
    return _emit(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# channel-wise probability ops


def softmax_channels(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _emit(s, (logits,), bw)


def log_softmax_channels(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)

    return _emit(out, (logits,), bw)


def take_channels(x: Tensor, index: np.ndarray) -> Tensor:
    """``out[n, h, w] = x[n, index[n, h, w], h, w]``."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != (x.shape[0],) + x.shape[2:]:
        raise ShapeError(f"index shape {idx.shape} incompatible with {x.shape}")
    picked = np.take_along_axis(x.data, idx[:, None], axis=1)[:, 0]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[:, None], g[:, None], axis=1)
        return (gx,)

    return _emit(picked, (x,), bw)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4) -> float:
    """Max relative error between the tape gradient and central differences."""
    x.requires_grad = True
    with Tape() as tape:
        y = f(x)
    backward(y, tape)
    analytic = x.grad.reshape(-1).copy()
    flat = x.data.reshape(-1)
    numeric = np.empty_like(analytic)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x).item()
        flat[i] = orig - eps
        fm = f(x).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * eps)
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# serialisation

MAGIC = b"SPGTENS1"


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def tensor_from_bytes(buf: bytes) -> Tensor:
    if buf[:8] != MAGIC:
        raise ValueError("not an SPGTENS1 tensor (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 8)
    dims = struct.unpack_from(f"<{rank}I", buf, 12)
    off = 12 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    if len(buf) - off != 8 * count:
        raise ValueError(f"payload length {len(buf) - off} does not match dims {dims}")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(dims).astype(DTYPE)
    return Tensor(data)
