"""Dense (batch, channel, height, width) tensors with reverse-mode autodiff.

Every value in the package is a 4-d :class:`Tensor`. Operations execute
eagerly on numpy arrays; when a :class:`Tape` is active and an operand is
tracked (watched, or itself produced by a tracked op), the operation appends
a node holding the backward rule. ``backward`` replays the node list in
reverse and accumulates gradients for every watched tensor.

Convolutions lower to im2col/col2im (numba) plus BLAS matmuls. Gradients are
accumulated in a fixed order, so results are reproducible bit for bit for a
fixed BLAS thread count.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .errors import ConfigurationError, DimensionError, StateError, UsageError

PRECISIONS = {"single": np.float32, "double": np.float64}
_PRECISION_NAMES = {np.dtype(np.float32): "single", np.dtype(np.float64): "double"}

_ids = itertools.count(1)

# Innermost active tape last. Tapes are confined to one thread by contract.
_TAPE_STACK: list["Tape"] = []


class Tensor:
    """Immutable dense 4-d array. ``data`` is C-contiguous float32/float64."""

    __slots__ = ("data", "tid")

    def __init__(self, data: np.ndarray):
        self.data = data
        self.tid = next(_ids)

    @classmethod
    def from_array(cls, array, precision: str | None = None) -> "Tensor":
        """Build a tensor from array-like data, validating the contract.

        The array must be 4-d with all elements finite. ``precision``
        selects single or double storage; by default float64 input stays
        double and everything else becomes single.
        """
        arr = np.asarray(array)
        if arr.ndim != 4:
            raise DimensionError(
                f"tensor data must be 4-d (N, C, H, W), got shape {arr.shape}")
        if precision is None:
            precision = "double" if arr.dtype == np.float64 else "single"
        if precision not in PRECISIONS:
            raise UsageError(f"unknown precision {precision!r}")
        arr = np.ascontiguousarray(arr, dtype=PRECISIONS[precision])
        if not np.all(np.isfinite(arr)):
            raise UsageError("tensor data contains NaN or Inf")
        return cls(arr)

    @classmethod
    def zeros(cls, shape, precision: str = "single") -> "Tensor":
        return cls(np.zeros(shape, dtype=PRECISIONS[precision]))

    @classmethod
    def full(cls, shape, value: float, precision: str = "single") -> "Tensor":
        return cls(np.full(shape, value, dtype=PRECISIONS[precision]))

    @classmethod
    def scalar(cls, value: float, precision: str = "single") -> "Tensor":
        return cls(np.full((1, 1, 1, 1), value, dtype=PRECISIONS[precision]))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def precision(self) -> str:
        return _PRECISION_NAMES[self.data.dtype]

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """Copy of the underlying array."""
        return self.data.copy()

    def detach(self) -> "Tensor":
        """Same data under a fresh id, never tracked by any tape."""
        return Tensor(self.data)

    def to(self, precision: str) -> "Tensor":
        if precision not in PRECISIONS:
            raise UsageError(f"unknown precision {precision!r}")
        return Tensor(self.data.astype(PRECISIONS[precision]))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, precision={self.precision}, tid={self.tid})"


class TapeNode:
    """One recorded operation: output id, tag, parent ids, backward rule."""

    __slots__ = ("out_tid", "tag", "parent_tids", "backward_fn")

    def __init__(self, out_tid: int, tag: str, parent_tids: tuple[int, ...],
                 backward_fn: Callable[[np.ndarray], tuple]):
        self.out_tid = out_tid
        self.tag = tag
        self.parent_tids = parent_tids
        self.backward_fn = backward_fn


class Tape:
    """Eager record of the forward computation, consumed by one backward.

    Use as a context manager; ops executed inside record themselves when any
    operand is tracked. ``watch`` marks parameters (or inputs) whose
    gradients should be produced.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.gradients: dict[int, Tensor] | None = None
        self._watched: dict[int, Tensor] = {}
        self._tracked: set[int] = set()
        self._out_tids: set[int] = set()
        self._consumed = False

    def watch(self, tensor: Tensor) -> None:
        if self._consumed:
            raise StateError("cannot watch on a consumed tape")
        self._watched[tensor.tid] = tensor
        self._tracked.add(tensor.tid)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape context exited out of order"
        return False

    def _record(self, node: TapeNode) -> None:
        self.nodes.append(node)
        self._tracked.add(node.out_tid)
        self._out_tids.add(node.out_tid)

    def grad(self, tensor: Tensor) -> Tensor:
        if self.gradients is None:
            raise StateError("backward has not been run on this tape")
        try:
            return self.gradients[tensor.tid]
        except KeyError:
            raise UsageError(
                f"tensor tid={tensor.tid} was not watched on this tape") from None


def _tape_for(*parents: Tensor):
    """Active tape and per-parent tracking flags, or (None, None)."""
    if not _TAPE_STACK:
        return None, None
    tape = _TAPE_STACK[-1]
    if tape._consumed:
        raise StateError("recording on a tape that was already consumed")
    needs = tuple(p.tid in tape._tracked for p in parents)
    if not any(needs):
        return None, None
    return tape, needs


def backward(tape: Tape, root: Tensor) -> dict[int, Tensor]:
    """Traverse ``tape`` in reverse from scalar ``root``.

    Returns the gradient map (also stored on ``tape.gradients``): one entry
    per watched tensor, zeros for watched tensors the root does not reach.
    The tape is consumed; a second call raises :class:`StateError`.
    """
    if tape._consumed:
        raise StateError("backward was already run on this tape")
    if root.shape != (1, 1, 1, 1):
        raise UsageError(f"backward root must have shape (1, 1, 1, 1), got {root.shape}")
    if root.tid not in tape._out_tids:
        raise UsageError("backward root was not produced on this tape")

    grads: dict[int, np.ndarray] = {
        root.tid: np.ones((1, 1, 1, 1), dtype=root.data.dtype)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.out_tid, None)
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for tid, pg in zip(node.parent_tids, parent_grads):
            if pg is None or tid not in tape._tracked:
                continue
            acc = grads.get(tid)
            if acc is None:
                grads[tid] = pg
            else:
                acc += pg

    tape.gradients = {}
    for tid, t in tape._watched.items():
        g = grads.get(tid)
        if g is None:
            g = np.zeros_like(t.data)
        tape.gradients[tid] = Tensor(g)
    tape._consumed = True
    tape.nodes = []
    return tape.gradients


# ---------------------------------------------------------------------------
# shape / argument validation helpers

def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes differ, {a.shape} vs {b.shape}")
    if a.data.dtype != b.data.dtype:
        raise UsageError(f"{op}: mixed precisions {a.precision} vs {b.precision}")


def _check_stride_padding(stride: int, padding: int) -> None:
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise UsageError(f"stride must be a positive integer, got {stride!r}")
    if not isinstance(padding, (int, np.integer)) or padding < 0:
        raise UsageError(f"padding must be a nonnegative integer, got {padding!r}")


def _conv_out_dim(size: int, k: int, stride: int, padding: int, axis: str) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise ConfigurationError(
            f"conv output {axis} dimension ({size} + 2*{padding} - {k})/{stride} + 1 "
            "is not a positive integer")
    return span // stride + 1


def _pad2d(arr: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return arr
    return np.pad(arr, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _run_im2col(xp: np.ndarray, kh: int, kw: int, stride: int,
                h_out: int, w_out: int) -> np.ndarray:
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((n, c * kh * kw, h_out * w_out), dtype=xp.dtype)
    _kernels.im2col(xp, kh, kw, stride, h_out, w_out, cols)
    return cols


def _run_col2im(cols: np.ndarray, n: int, c: int, h: int, w: int, kh: int, kw: int,
                stride: int, padding: int, h_out: int, w_out: int) -> np.ndarray:
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    _kernels.col2im(cols, kh, kw, stride, h_out, w_out, xp)
    if padding:
        return np.ascontiguousarray(xp[:, :, padding:-padding, padding:-padding])
    return xp


# ---------------------------------------------------------------------------
# operations

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` with ``kernel`` (C_out, C_in, kH, kW).

    ``bias`` has shape (1, C_out, 1, 1) and is added per output channel.
    """
    _check_stride_padding(stride, padding)
    n, c_in, h, w = x.shape
    c_out, kc, kh, kw = kernel.shape
    if kc != c_in:
        raise DimensionError(
            f"conv2d: kernel expects {kc} input channels (kernel {kernel.shape}), "
            f"input has {c_in} (input {x.shape})")
    if bias.shape != (1, c_out, 1, 1):
        raise DimensionError(
            f"conv2d: bias shape {bias.shape} != (1, {c_out}, 1, 1)")
    if x.data.dtype != kernel.data.dtype or x.data.dtype != bias.data.dtype:
        raise UsageError("conv2d: input, kernel and bias must share precision")
    h_out = _conv_out_dim(h, kh, stride, padding, "height")
    w_out = _conv_out_dim(w, kw, stride, padding, "width")

    cols = _run_im2col(_pad2d(x.data, padding), kh, kw, stride, h_out, w_out)
    k2 = kernel.data.reshape(c_out, c_in * kh * kw)
    out3 = np.matmul(k2, cols)
    out3 += bias.data.reshape(c_out, 1)
    out = Tensor(out3.reshape(n, c_out, h_out, w_out))

    tape, needs = _tape_for(x, kernel, bias)
    if tape is not None:
        saved_cols = cols if needs[1] else None
        saved_k2 = k2 if needs[0] else None
        kshape = kernel.shape

        def bwd(g: np.ndarray):
            g3 = g.reshape(n, c_out, h_out * w_out)
            gx = gk = gb = None
            if needs[0]:
                gcols = np.matmul(saved_k2.T, g3)
                gx = _run_col2im(gcols, n, c_in, h, w, kh, kw, stride, padding,
                                 h_out, w_out)
            if needs[1]:
                gk = np.matmul(g3, saved_cols.transpose(0, 2, 1)).sum(axis=0)
                gk = gk.reshape(kshape)
            if needs[2]:
                gb = g.sum(axis=(0, 2, 3)).reshape(1, c_out, 1, 1)
            return gx, gk, gb

        tape._record(TapeNode(out.tid, "conv2d", (x.tid, kernel.tid, bias.tid), bwd))
    return out


def transposed_conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1,
                      padding: int = 0) -> Tensor:
    """Adjoint of conv2d: fractionally-strided up-sampling convolution.

    ``kernel`` has shape (C_in, C_out, kH, kW); the same array used as a
    conv2d kernel (C_out', C_in', kH, kW) makes this op conv2d's adjoint
    under the flattened inner product.
    """
    _check_stride_padding(stride, padding)
    n, c_in, h, w = x.shape
    kc, c_out, kh, kw = kernel.shape
    if kc != c_in:
        raise DimensionError(
            f"transposed_conv2d: kernel expects {kc} input channels "
            f"(kernel {kernel.shape}), input has {c_in} (input {x.shape})")
    if bias.shape != (1, c_out, 1, 1):
        raise DimensionError(
            f"transposed_conv2d: bias shape {bias.shape} != (1, {c_out}, 1, 1)")
    if x.data.dtype != kernel.data.dtype or x.data.dtype != bias.data.dtype:
        raise UsageError("transposed_conv2d: input, kernel and bias must share precision")
    h_out = (h - 1) * stride - 2 * padding + kh
    w_out = (w - 1) * stride - 2 * padding + kw
    if h_out < 1 or w_out < 1:
        raise ConfigurationError(
            f"transposed_conv2d output dims ({h_out}, {w_out}) are not positive")

    k2 = kernel.data.reshape(c_in, c_out * kh * kw)
    x3 = x.data.reshape(n, c_in, h * w)
    gcols = np.matmul(k2.T, x3)
    out = _run_col2im(gcols, n, c_out, h_out, w_out, kh, kw, stride, padding, h, w)
    out += bias.data.reshape(1, c_out, 1, 1)
    out_t = Tensor(out)

    tape, needs = _tape_for(x, kernel, bias)
    if tape is not None:
        saved_k2 = k2 if needs[0] else None
        saved_x3 = x3 if needs[1] else None
        kshape = kernel.shape

        def bwd(g: np.ndarray):
            gx = gk = gb = None
            if needs[0] or needs[1]:
                colsg = _run_im2col(_pad2d(g, padding), kh, kw, stride, h, w)
            if needs[0]:
                gx = np.matmul(saved_k2, colsg).reshape(n, c_in, h, w)
            if needs[1]:
                gk = np.matmul(saved_x3, colsg.transpose(0, 2, 1)).sum(axis=0)
                gk = gk.reshape(kshape)
            if needs[2]:
                gb = g.sum(axis=(0, 2, 3)).reshape(1, c_out, 1, 1)
            return gx, gk, gb

        tape._record(TapeNode(out_t.tid, "transposed_conv2d",
                              (x.tid, kernel.tid, bias.tid), bwd))
    return out_t


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Parametric ReLU with one learnable slope: x if x >= 0 else slope*x."""
    if slope.shape != (1, 1, 1, 1):
        raise DimensionError(f"prelu slope must be (1, 1, 1, 1), got {slope.shape}")
    if x.data.dtype != slope.data.dtype:
        raise UsageError("prelu: input and slope must share precision")
    s = slope.data.reshape(())
    neg = x.data < 0
    out_data = np.where(neg, s * x.data, x.data)
    out = Tensor(out_data)

    tape, needs = _tape_for(x, slope)
    if tape is not None:
        saved_x = x.data

        def bwd(g: np.ndarray):
            gx = gs = None
            if needs[0]:
                gx = np.where(neg, s * g, g)
            if needs[1]:
                gs = (g * np.where(neg, saved_x, 0)).sum().reshape(1, 1, 1, 1)
            return gx, gs

        tape._record(TapeNode(out.tid, "prelu", (x.tid, slope.tid), bwd))
    return out


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    out = Tensor(np.where(pos, x.data, 0))
    tape, needs = _tape_for(x)
    if tape is not None:
        def bwd(g: np.ndarray):
            return (np.where(pos, g, 0),)
        tape._record(TapeNode(out.tid, "relu", (x.tid,), bwd))
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    tape, needs = _tape_for(a, b)
    if tape is not None:
        def bwd(g: np.ndarray):
            return (g if needs[0] else None, g.copy() if needs[1] else None)
        tape._record(TapeNode(out.tid, "add", (a.tid, b.tid), bwd))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    tape, needs = _tape_for(a, b)
    if tape is not None:
        def bwd(g: np.ndarray):
            return (g if needs[0] else None, -g if needs[1] else None)
        tape._record(TapeNode(out.tid, "sub", (a.tid, b.tid), bwd))
    return out


def scale(a: Tensor, factor: float) -> Tensor:
    f = float(factor)
    if not np.isfinite(f):
        raise UsageError(f"scale factor must be finite, got {factor!r}")
    out = Tensor(a.data * a.data.dtype.type(f))
    tape, needs = _tape_for(a)
    if tape is not None:
        def bwd(g: np.ndarray):
            return (g * g.dtype.type(f),)
        tape._record(TapeNode(out.tid, "scale", (a.tid,), bwd))
    return out


def clamp01(x: Tensor) -> Tensor:
    """Clamp to [0, 1]; backward passes gradient only strictly inside."""
    interior = (x.data > 0) & (x.data < 1)
    out = Tensor(np.clip(x.data, 0, 1))
    tape, needs = _tape_for(x)
    if tape is not None:
        def bwd(g: np.ndarray):
            return (np.where(interior, g, 0),)
        tape._record(TapeNode(out.tid, "clamp01", (x.tid,), bwd))
    return out


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise UsageError("concat_channels needs at least one tensor")
    n, _, h, w = parts[0].shape
    dtype = parts[0].data.dtype
    for p in parts[1:]:
        pn, _, ph, pw = p.shape
        if (pn, ph, pw) != (n, h, w) or p.data.dtype != dtype:
            raise DimensionError(
                f"concat_channels: incompatible member {p.shape} vs {parts[0].shape}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    tape, needs = _tape_for(*parts)
    if tape is not None:
        widths = [p.shape[1] for p in parts]
        offsets = np.cumsum([0] + widths)

        def bwd(g: np.ndarray):
            return tuple(
                np.ascontiguousarray(g[:, offsets[i]:offsets[i + 1]]) if needs[i] else None
                for i in range(len(widths)))

        tape._record(TapeNode(out.tid, "concat", tuple(p.tid for p in parts), bwd))
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum(dtype=x.data.dtype).reshape(1, 1, 1, 1))
    tape, needs = _tape_for(x)
    if tape is not None:
        shape = x.shape

        def bwd(g: np.ndarray):
            return (np.full(shape, g.reshape(()), dtype=g.dtype),)

        tape._record(TapeNode(out.tid, "sum_all", (x.tid,), bwd))
    return out


def mean_abs_pow(x: Tensor, p: int) -> Tensor:
    """Scalar mean of |x|^p over every element; p selects L1 or L2 flavor."""
    if p not in (1, 2):
        raise UsageError(f"mean_abs_pow supports p in {{1, 2}}, got {p!r}")
    if p == 1:
        val = np.mean(np.abs(x.data), dtype=x.data.dtype)
    else:
        val = np.mean(np.square(x.data), dtype=x.data.dtype)
    out = Tensor(val.reshape(1, 1, 1, 1))
    tape, needs = _tape_for(x)
    if tape is not None:
        saved = x.data
        inv_n = 1.0 / x.size

        def bwd(g: np.ndarray):
            gs = g.reshape(()) * saved.dtype.type(inv_n)
            if p == 1:
                return (np.sign(saved) * gs,)
            return (saved * (2 * gs),)

        tape._record(TapeNode(out.tid, f"mean_abs_pow{p}", (x.tid,), bwd))
    return out


def mean_spatial(x: Tensor) -> Tensor:
    """Average over height and width, keeping (N, C, 1, 1)."""
    out = Tensor(x.data.mean(axis=(2, 3), keepdims=True, dtype=x.data.dtype))
    tape, needs = _tape_for(x)
    if tape is not None:
        n, c, h, w = x.shape
        inv = 1.0 / (h * w)

        def bwd(g: np.ndarray):
            return (np.broadcast_to(g * g.dtype.type(inv), (n, c, h, w)).copy(),)

        tape._record(TapeNode(out.tid, "mean_spatial", (x.tid,), bwd))
    return out


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of (N, K, 1, 1) logits against integer labels."""
    n, k, h, w = logits.shape
    if (h, w) != (1, 1):
        raise DimensionError(f"logits must be (N, K, 1, 1), got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"labels must have shape ({n},), got {labels.shape}")
    z = logits.data.reshape(n, k)
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(sez)
    loss = -logp[np.arange(n), labels].mean(dtype=z.dtype)
    out = Tensor(loss.reshape(1, 1, 1, 1))

    tape, needs = _tape_for(logits)
    if tape is not None:
        softmax = ez / sez

        def bwd(g: np.ndarray):
            gz = softmax.copy()
            gz[np.arange(n), labels] -= 1
            gz *= g.reshape(()) / n
            return (gz.reshape(n, k, 1, 1),)

        tape._record(TapeNode(out.tid, "softmax_xent", (logits.tid,), bwd))
    return out


def finite_diff_grad(f: Callable[[Tensor], float], p: Tensor, step: float) -> Tensor:
    """Central finite-difference gradient of scalar ``f`` at ``p``.

    Independent of the tape machinery; used as the oracle for backward().
    """
    if step <= 0:
        raise UsageError(f"step must be positive, got {step!r}")
    flat = p.data.reshape(-1)
    grad = np.empty(flat.shape, dtype=flat.dtype)
    for i in range(flat.size):
        plus = p.data.copy()
        plus.reshape(-1)[i] = flat[i] + step
        minus = p.data.copy()
        minus.reshape(-1)[i] = flat[i] - step
        grad[i] = (f(Tensor(plus)) - f(Tensor(minus))) / (2 * step)
    return Tensor(grad.reshape(p.shape))


_kernels.warmup()
