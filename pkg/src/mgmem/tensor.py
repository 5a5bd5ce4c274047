"""Dense 4-axis tensors with taped reverse-mode differentiation.

Every activation and parameter is a (batch, rows, cols, channels) numpy
array wrapped in a :class:`Tensor`.  Running a forward pass inside
``with record() as tape`` appends each primitive application to the
tape; :func:`backward` then replays the tape once in reverse and returns
a gradient array for every trainable leaf that participated.  Outside a
``record()`` block the same primitives evaluate purely, with no graph
overhead, which is what evaluation and finite-difference probing use.

float32 is the training precision.  Build tensors as float64 when
feeding :func:`grad_check`; its tolerances are unreachable in single
precision.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate a primitive's contract."""


class NumericError(ArithmeticError):
    """Non-finite values where the contract requires finite ones."""


# Toggleable input-finiteness validation in conv2d/batchnorm/losses.
# Cheap relative to the matmuls, so it stays on by default.
FINITE_CHECKS = True


def _check_finite(a: np.ndarray, what: str) -> None:
    if FINITE_CHECKS and not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values in {what}")


class Tensor:
    """A 4-axis array, optionally attached to the active tape.

    ``trainable`` marks a leaf whose gradient :func:`backward` must
    report.  ``tape``/``nid`` are managed by the recording machinery and
    cleared when the tape is released.
    """

    __slots__ = ("data", "trainable", "name", "tape", "nid")

    def __init__(self, data, trainable: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are (batch, rows, cols, channels); got ndim={arr.ndim}")
        self.data = arr
        self.trainable = trainable
        self.name = name
        self.tape: Optional[Tape] = None
        self.nid: Optional[int] = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() requires a scalar tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A constant copy with no tape linkage (stops gradient flow)."""
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"


def tensor(values, dtype=np.float32, trainable: bool = False, name: Optional[str] = None) -> Tensor:
    """Build a Tensor from array-like data, enforcing the 4-axis layout."""
    arr = np.asarray(values, dtype=dtype)
    _check_finite(arr, "tensor() input")
    return Tensor(arr, trainable=trainable, name=name)


def zeros(batch: int, rows: int, cols: int, channels: int, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros((batch, rows, cols, channels), dtype=dtype))


@dataclass
class Kernel:
    """3x3 convolution weights (3, 3, cin, cout) plus optional bias (1, 1, 1, cout)."""

    w: Tensor
    b: Optional[Tensor] = None

    def __post_init__(self):
        kh, kw, _, cout = self.w.shape
        if (kh, kw) != (3, 3):
            raise ShapeError(f"kernels are 3x3; got {kh}x{kw}")
        if self.b is not None and self.b.shape != (1, 1, 1, cout):
            raise ShapeError(f"bias shape {self.b.shape} does not match cout={cout}")


@dataclass
class Node:
    """One recorded primitive application: op kind, input ids, backward rule."""

    op: str
    inputs: tuple[Optional[int], ...]
    backward: Optional[Callable[[np.ndarray, list], None]]


class Tape:
    """Ordered record of primitive applications for one backward sweep.

    Nodes are appended in forward execution order, so the list is
    topologically sorted by construction.  Leaves (trainable tensors
    lifted on first use) occupy nodes with no backward rule.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: list[Tensor] = []
        self._released = False

    def lift(self, t: Tensor) -> Optional[int]:
        """Node id for an input tensor; None for pure constants."""
        if self._released:
            raise RuntimeError("tape already consumed")
        if t.tape is self:
            return t.nid
        if t.tape is not None:
            raise RuntimeError("tensor belongs to a different tape")
        if not t.trainable:
            return None
        nid = len(self.nodes)
        self.nodes.append(Node("leaf", (), None))
        t.tape = self
        t.nid = nid
        self.leaves.append(t)
        return nid

    def emit(self, op: str, inputs: tuple[Optional[int], ...], out: np.ndarray,
             backward: Callable[[np.ndarray, list], None]) -> Tensor:
        if self._released:
            raise RuntimeError("tape already consumed")
        t = Tensor(out)
        t.tape = self
        t.nid = len(self.nodes)
        self.nodes.append(Node(op, inputs, backward))
        return t

    def release(self) -> None:
        """Drop the record and unlink every lifted leaf."""
        for t in self.leaves:
            t.tape = None
            t.nid = None
        self.nodes.clear()
        self.leaves.clear()
        self._released = True


_ACTIVE: Optional[Tape] = None


@contextmanager
def record():
    """Install a fresh tape as the active differentiation record."""
    global _ACTIVE
    if _ACTIVE is not None:
        raise RuntimeError("a differentiation record is already active")
    tape = Tape()
    _ACTIVE = tape
    try:
        yield tape
    finally:
        _ACTIVE = None


def _tape() -> Optional[Tape]:
    return _ACTIVE


def _acc(grads: list, nid: Optional[int], g: np.ndarray) -> None:
    if nid is None:
        return
    if grads[nid] is None:
        grads[nid] = g.copy() if not g.flags.owndata else g
    else:
        grads[nid] += g


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """One reverse sweep; returns grads keyed by trainable leaf Tensor.

    The tape is consumed: it is released before returning, so the same
    leaves can join a fresh record afterwards.
    """
    if loss.tape is not tape or loss.nid is None:
        raise ValueError("loss was not produced under this record")
    if loss.data.size != 1:
        raise ShapeError("loss must be scalar")
    grads: list[Optional[np.ndarray]] = [None] * len(tape.nodes)
    grads[loss.nid] = np.ones_like(loss.data)
    for nid in range(len(tape.nodes) - 1, -1, -1):
        node = tape.nodes[nid]
        if node.backward is None or grads[nid] is None:
            continue
        node.backward(grads[nid], grads)
    out: dict[Tensor, np.ndarray] = {}
    for leaf in tape.leaves:
        g = grads[leaf.nid]
        out[leaf] = g if g is not None else np.zeros_like(leaf.data)
    tape.release()
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _im2col(xpad: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Gather 3x3 patches of a padded map into (B, rows, cols, 9, C)."""
    b, _, _, c = xpad.shape
    # windows: (B, rows, cols, C, 3, 3) zero-copy view; reorder to put the
    # (di, dj) offsets before channels so the flat layout matches the
    # kernel's (3, 3, cin) raveling.
    win = np.lib.stride_tricks.sliding_window_view(xpad, (3, 3), axis=(1, 2))
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(
        b, rows, cols, 9, c)


def conv2d(x: Tensor, k: Kernel) -> Tensor:
    """Same-size 3x3 convolution with zero padding of width 1, stride 1."""
    b, rows, cols, cin = x.shape
    _, _, kcin, cout = k.w.shape
    if cin != kcin:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, kernel {kcin}")
    if rows < 1 or cols < 1:
        raise ShapeError("conv2d needs rows, cols >= 1")
    _check_finite(x.data, "conv2d input")
    xpad = np.zeros((b, rows + 2, cols + 2, cin), dtype=x.data.dtype)
    xpad[:, 1:-1, 1:-1, :] = x.data
    patches = _im2col(xpad, rows, cols).reshape(b * rows * cols, 9 * cin)
    wmat = k.w.data.reshape(9 * cin, cout)
    out = patches @ wmat
    if k.b is not None:
        out += k.b.data.reshape(cout)
    out = out.reshape(b, rows, cols, cout)

    tape = _tape()
    if tape is None:
        return Tensor(out)
    xi, wi = tape.lift(x), tape.lift(k.w)
    bi = tape.lift(k.b) if k.b is not None else None
    xdata, wdata = x.data, k.w.data

    def bwd(g: np.ndarray, grads: list) -> None:
        gflat = g.reshape(b * rows * cols, cout)
        if wi is not None:
            xp = np.zeros((b, rows + 2, cols + 2, cin), dtype=xdata.dtype)
            xp[:, 1:-1, 1:-1, :] = xdata
            pt = _im2col(xp, rows, cols).reshape(b * rows * cols, 9 * cin)
            _acc(grads, wi, (pt.T @ gflat).reshape(3, 3, cin, cout))
        if bi is not None:
            _acc(grads, bi, gflat.sum(axis=0).reshape(1, 1, 1, cout))
        if xi is not None:
            dcols = (gflat @ wmat.T).reshape(b, rows, cols, 9, cin)
            dxp = np.zeros((b, rows + 2, cols + 2, cin), dtype=g.dtype)
            kk = 0
            for di in range(3):
                for dj in range(3):
                    dxp[:, di:di + rows, dj:dj + cols, :] += dcols[:, :, :, kk, :]
                    kk += 1
            _acc(grads, xi, dxp[:, 1:-1, 1:-1, :])

    return tape.emit("conv2d", (xi, wi, bi), out, bwd)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2.  Ties route the gradient to the first
    maximal entry in row-major window order."""
    b, rows, cols, c = x.shape
    if rows % 2 or cols % 2:
        raise ShapeError(f"maxpool2 needs even rows/cols; got {rows}x{cols}")
    r2, c2 = rows // 2, cols // 2
    win = (x.data.reshape(b, r2, 2, c2, 2, c)
           .transpose(0, 1, 3, 5, 2, 4)
           .reshape(b, r2, c2, c, 4))
    idx = win.argmax(axis=4)
    out = np.take_along_axis(win, idx[..., None], axis=4)[..., 0]

    tape = _tape()
    if tape is None:
        return Tensor(out)
    xi = tape.lift(x)

    def bwd(g: np.ndarray, grads: list) -> None:
        if xi is None:
            return
        dwin = np.zeros((b, r2, c2, c, 4), dtype=g.dtype)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=4)
        dx = (dwin.reshape(b, r2, c2, c, 2, 2)
              .transpose(0, 1, 4, 2, 5, 3)
              .reshape(b, rows, cols, c))
        _acc(grads, xi, dx)

    return tape.emit("maxpool2", (xi,), out, bwd)


def upsample2(x: Tensor) -> Tensor:
    """2x nearest-neighbor upsampling; backward sums each 2x2 block."""
    b, rows, cols, c = x.shape
    out = x.data.repeat(2, axis=1).repeat(2, axis=2)

    tape = _tape()
    if tape is None:
        return Tensor(out)
    xi = tape.lift(x)

    def bwd(g: np.ndarray, grads: list) -> None:
        if xi is None:
            return
        _acc(grads, xi, g.reshape(b, rows, 2, cols, 2, c).sum(axis=(2, 4)))

    return tape.emit("upsample2", (xi,), out, bwd)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Stack tensors along the channel axis, in list order."""
    if not xs:
        raise ShapeError("concat_channels needs a non-empty list")
    if len(xs) == 1:
        return xs[0]
    first = xs[0].shape[:3]
    for t in xs[1:]:
        if t.shape[:3] != first:
            raise ShapeError(f"concat_channels spatial mismatch: {t.shape[:3]} vs {first}")
    out = np.concatenate([t.data for t in xs], axis=3)

    tape = _tape()
    if tape is None:
        return Tensor(out)
    ids = tuple(tape.lift(t) for t in xs)
    widths = [t.shape[3] for t in xs]

    def bwd(g: np.ndarray, grads: list) -> None:
        start = 0
        for nid, width in zip(ids, widths):
            _acc(grads, nid, g[:, :, :, start:start + width])
            start += width

    return tape.emit("concat", ids, out, bwd)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Channel range [start, stop); backward zero-fills the complement."""
    _, _, _, c = x.shape
    if not (0 <= start < stop <= c):
        raise ShapeError(f"slice_channels [{start}:{stop}) out of range for {c} channels")
    out = x.data[:, :, :, start:stop].copy()

    tape = _tape()
    if tape is None:
        return Tensor(out)
    xi = tape.lift(x)

    def bwd(g: np.ndarray, grads: list) -> None:
        if xi is None:
            return
        dx = np.zeros(x.shape, dtype=g.dtype)
        dx[:, :, :, start:stop] = g
        _acc(grads, xi, dx)

    return tape.emit("slice", (xi,), out, bwd)


def _binary_op(op: str, a: Tensor, b: Tensor, out: np.ndarray,
               da: Callable[[np.ndarray], np.ndarray],
               db: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    tape = _tape()
    if tape is None:
        return Tensor(out)
    ai, bi = tape.lift(a), tape.lift(b)

    def bwd(g: np.ndarray, grads: list) -> None:
        if ai is not None:
            _acc(grads, ai, da(g))
        if bi is not None:
            _acc(grads, bi, db(g))

    return tape.emit(op, (ai, bi), out, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _binary_op("add", a, b, a.data + b.data, lambda g: g, lambda g: g)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"hadamard shape mismatch: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _binary_op("hadamard", a, b, ad * bd, lambda g: g * bd, lambda g: g * ad)


def _unary_op(op: str, x: Tensor, out: np.ndarray,
              dx: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    tape = _tape()
    if tape is None:
        return Tensor(out)
    xi = tape.lift(x)

    def bwd(g: np.ndarray, grads: list) -> None:
        if xi is not None:
            _acc(grads, xi, dx(g))

    return tape.emit(op, (xi,), out, bwd)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _unary_op("sigmoid", x, out, lambda g: g * out * (1.0 - out))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _unary_op("tanh", x, out, lambda g: g * (1.0 - out * out))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    mask = x.data > 0
    return _unary_op("relu", x, out, lambda g: g * mask)


def scale(x: Tensor, alpha: float) -> Tensor:
    return _unary_op("scale", x, x.data * alpha, lambda g: g * alpha)


def scale_channels(x: Tensor, v: Tensor) -> Tensor:
    """Multiply each channel by a per-channel factor v of shape (1,1,1,C)."""
    _, _, _, c = x.shape
    if v.shape != (1, 1, 1, c):
        raise ShapeError(f"scale_channels factor shape {v.shape}, want (1,1,1,{c})")
    out = x.data * v.data

    tape = _tape()
    if tape is None:
        return Tensor(out)
    xi, vi = tape.lift(x), tape.lift(v)
    xdata, vdata = x.data, v.data

    def bwd(g: np.ndarray, grads: list) -> None:
        if xi is not None:
            _acc(grads, xi, g * vdata)
        if vi is not None:
            _acc(grads, vi, (g * xdata).sum(axis=(0, 1, 2), keepdims=True))

    return tape.emit("scale_channels", (xi, vi), out, bwd)


def sum_all(x: Tensor) -> Tensor:
    """Reduce to a scalar (1,1,1,1) tensor by summation."""
    out = x.data.sum().reshape(1, 1, 1, 1)

    tape = _tape()
    if tape is None:
        return Tensor(out)
    xi = tape.lift(x)

    def bwd(g: np.ndarray, grads: list) -> None:
        if xi is not None:
            _acc(grads, xi, np.full(x.shape, g.reshape(()), dtype=g.dtype))

    return tape.emit("sum_all", (xi,), out, bwd)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Flatten (rows, cols, channels) and apply a dense map.

    ``w`` is (1, 1, features, out) with features = rows*cols*channels,
    ``b`` is (1, 1, 1, out).  Output is (batch, 1, 1, out).
    """
    bsz, rows, cols, c = x.shape
    feats = rows * cols * c
    if w.shape[:2] != (1, 1) or w.shape[2] != feats:
        raise ShapeError(f"affine weight shape {w.shape}, want (1,1,{feats},k)")
    k = w.shape[3]
    if b.shape != (1, 1, 1, k):
        raise ShapeError(f"affine bias shape {b.shape}, want (1,1,1,{k})")
    xflat = x.data.reshape(bsz, feats)
    wmat = w.data.reshape(feats, k)
    out = (xflat @ wmat + b.data.reshape(k)).reshape(bsz, 1, 1, k)

    tape = _tape()
    if tape is None:
        return Tensor(out)
    xi, wi, bi = tape.lift(x), tape.lift(w), tape.lift(b)

    def bwd(g: np.ndarray, grads: list) -> None:
        gflat = g.reshape(bsz, k)
        if xi is not None:
            _acc(grads, xi, (gflat @ wmat.T).reshape(bsz, rows, cols, c))
        if wi is not None:
            _acc(grads, wi, (xflat.T @ gflat).reshape(1, 1, feats, k))
        if bi is not None:
            _acc(grads, bi, gflat.sum(axis=0).reshape(1, 1, 1, k))

    return tape.emit("affine", (xi, wi, bi), out, bwd)


def crop_center(x: Tensor, rows: int, cols: int) -> Tensor:
    """Center crop of the spatial axes; backward re-inserts into zeros."""
    b, h, w, c = x.shape
    if rows > h or cols > w:
        raise ShapeError(f"crop {rows}x{cols} larger than input {h}x{w}")
    r0, c0 = (h - rows) // 2, (w - cols) // 2
    out = x.data[:, r0:r0 + rows, c0:c0 + cols, :].copy()

    tape = _tape()
    if tape is None:
        return Tensor(out)
    xi = tape.lift(x)

    def bwd(g: np.ndarray, grads: list) -> None:
        if xi is None:
            return
        dx = np.zeros((b, h, w, c), dtype=g.dtype)
        dx[:, r0:r0 + rows, c0:c0 + cols, :] = g
        _acc(grads, xi, dx)

    return tape.emit("crop", (xi,), out, bwd)


@dataclass
class NormState:
    """Per-channel batch normalization parameters and running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.9
    training: bool = True

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("batchnorm eps must be positive")
        if np.any(self.running_var < 0):
            raise ValueError("running variance must be non-negative")

    @classmethod
    def create(cls, channels: int, dtype=np.float32, eps: float = 1e-5,
               momentum: float = 0.9) -> "NormState":
        return cls(
            gamma=Tensor(np.ones((1, 1, 1, channels), dtype=dtype), trainable=True),
            beta=Tensor(np.zeros((1, 1, 1, channels), dtype=dtype), trainable=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            eps=eps,
            momentum=momentum,
        )


def batchnorm(x: Tensor, s: NormState) -> Tensor:
    """Normalize per channel over (batch, rows, cols), then scale and shift.

    Training mode uses batch statistics and folds them into the running
    estimates; eval mode normalizes with the running estimates.
    """
    b, rows, cols, c = x.shape
    if s.gamma.shape[3] != c:
        raise ShapeError(f"batchnorm channels {s.gamma.shape[3]} vs input {c}")
    n = b * rows * cols
    if n == 0:
        raise ShapeError("batchnorm needs a non-empty batch/spatial extent")
    _check_finite(x.data, "batchnorm input")

    if s.training:
        mean = x.data.mean(axis=(0, 1, 2))
        var = x.data.var(axis=(0, 1, 2))
        s.running_mean = s.momentum * s.running_mean + (1.0 - s.momentum) * mean
        s.running_var = s.momentum * s.running_var + (1.0 - s.momentum) * var
    else:
        mean = s.running_mean
        var = s.running_var
    inv = 1.0 / np.sqrt(var + s.eps)
    xhat = (x.data - mean) * inv
    out = xhat * s.gamma.data + s.beta.data

    tape = _tape()
    if tape is None:
        return Tensor(out)
    xi, gi, bi = tape.lift(x), tape.lift(s.gamma), tape.lift(s.beta)
    gamma = s.gamma.data
    training = s.training

    def bwd(g: np.ndarray, grads: list) -> None:
        if gi is not None:
            _acc(grads, gi, (g * xhat).sum(axis=(0, 1, 2), keepdims=True))
        if bi is not None:
            _acc(grads, bi, g.sum(axis=(0, 1, 2), keepdims=True))
        if xi is not None:
            dxhat = g * gamma
            if training:
                term = dxhat - dxhat.mean(axis=(0, 1, 2)) - xhat * (dxhat * xhat).mean(axis=(0, 1, 2))
                _acc(grads, xi, term * inv)
            else:
                _acc(grads, xi, dxhat * inv)

    return tape.emit("batchnorm", (xi, gi, bi), out, bwd)


def bce_logits_loss(logits: Tensor, target: Tensor) -> Tensor:
    """Pixel-wise binary cross-entropy from logits.

    Numerically stable log-sum-exp form; the result sums over pixels and
    averages over the batch, returned as a scalar tensor.
    """
    if logits.shape != target.shape:
        raise ShapeError(f"loss shape mismatch: {logits.shape} vs {target.shape}")
    y = target.data
    if np.any((y != 0) & (y != 1)):
        raise ValueError("targets must be 0 or 1")
    z = logits.data
    _check_finite(z, "loss logits")
    b = z.shape[0]
    perpix = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = (perpix.sum() / b).reshape(1, 1, 1, 1)

    tape = _tape()
    if tape is None:
        return Tensor(out)
    zi = tape.lift(logits)

    def bwd(g: np.ndarray, grads: list) -> None:
        if zi is None:
            return
        p = np.empty_like(z)
        pos = z >= 0
        p[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        p[~pos] = ez / (1.0 + ez)
        _acc(grads, zi, (p - y) * (g.reshape(()) / b))

    return tape.emit("bce", (zi,), out, bwd)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-4) -> float:
    """Max relative error between taped gradients and central differences.

    ``f`` must be a pure composition of the primitives above, returning a
    scalar tensor.  All ``inputs`` must be trainable float64 tensors; each
    coordinate is probed with step ``h``.
    """
    if not (1e-4 <= h <= 1e-2):
        raise ValueError("step h must lie in [1e-4, 1e-2]")
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        if not t.trainable:
            raise ValueError("grad_check inputs must be trainable")

    with record() as tape:
        loss = f(*inputs)
    if loss.data.size != 1:
        raise ShapeError("grad_check function must return a scalar")
    if not np.isfinite(loss.data.reshape(())):
        raise NumericError("non-finite function value in grad_check")
    grads = backward(tape, loss)

    worst = 0.0
    for t in inputs:
        analytic = grads[t].reshape(-1)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*inputs).item()
            flat[i] = orig - h
            fm = f(*inputs).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("non-finite function value in grad_check")
            numeric = (fp - fm) / (2.0 * h)
            err = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
