"""Dense-tensor algebra with reverse-mode automatic differentiation.

Values wrap contiguous float64 numpy arrays and record the operation
that produced them. Running an op appends nothing to any global state;
instead every Value carries a monotonically increasing sequence number,
so the tape for a given loss can be reconstructed as the reachable
subgraph sorted by creation order (which is exactly forward execution
order). ``backward`` walks that tape in reverse and accumulates
adjoints with ``+=`` into each requires-grad ancestor.

Every op validates that its result is finite; NaN/Inf raises
``NumericError`` instead of propagating silently.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, InputError, NumericError, UsageError

Tensor = np.ndarray  # contiguous row-major float64 for compute

_SEQ = itertools.count()

# tanh-approximation constants for GELU
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715


def tensor(data) -> Tensor:
    """Coerce to a contiguous float64 array, rejecting non-finite values."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)  # keeps 0-d scalars 0-d
    if not np.all(np.isfinite(arr)):
        raise NumericError("tensor contains NaN or Inf")
    return arr


class Value:
    """A node in the autodiff graph: a tensor plus its (lazy) adjoint.

    ``grad`` stays unallocated (None) until backward first writes to it.
    ``requires_grad`` is set explicitly on leaves and inherited by any
    op output whose parents include a requires-grad Value.
    """

    __slots__ = ("data", "_grad", "requires_grad", "parents", "_backward", "op", "seq")

    def __init__(self, data, requires_grad: bool = False, *,
                 parents: tuple = (), backward=None, op: str = "leaf"):
        self.data = tensor(data)
        self._grad: Tensor | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.parents = parents
        self._backward = backward
        self.op = op
        self.seq = next(_SEQ)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def grad(self) -> Tensor | None:
        return self._grad

    @grad.setter
    def grad(self, g) -> None:
        if g is None:
            self._grad = None
            return
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.data.shape:
            raise DimensionError(
                f"grad shape {g.shape} does not match value shape {self.data.shape}")
        self._grad = g

    def accumulate_grad(self, g: Tensor) -> None:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        self._grad += g

    def __repr__(self):
        return f"Value(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_value(x) -> Value:
    """Wrap plain arrays/scalars as constant (no-grad) Values."""
    return x if isinstance(x, Value) else Value(x)


class Tape:
    """Op records for one loss, in forward execution order."""

    def __init__(self, records: list[Value]):
        self.records = records

    @classmethod
    def from_root(cls, root: Value) -> "Tape":
        """Collect the requires-grad subgraph reachable from ``root``.

        Creation order is a topological order, so sorting by sequence
        number reproduces forward execution order exactly.
        """
        seen: set[int] = set()
        nodes: list[Value] = []
        stack = [root]
        while stack:
            v = stack.pop()
            if id(v) in seen or not v.requires_grad:
                continue
            seen.add(id(v))
            nodes.append(v)
            stack.extend(v.parents)
        nodes.sort(key=lambda v: v.seq)
        return cls(nodes)

    def run_backward(self, root: Value, seed: Tensor) -> None:
        # Per-call adjoint buffers keep repeated backward() calls exact:
        # each call propagates only its own seed, then adds its full
        # per-node adjoint into the persistent .grad once.
        adjoint: dict[int, Tensor] = {id(root): seed}

        def push(parent: Value, contribution: Tensor) -> None:
            if not parent.requires_grad:
                return
            key = id(parent)
            if key in adjoint:
                adjoint[key] = adjoint[key] + contribution
            else:
                adjoint[key] = np.asarray(contribution, dtype=np.float64)

        for v in reversed(self.records):
            g = adjoint.pop(id(v), None)
            if g is None:
                continue
            v.accumulate_grad(g)
            if v._backward is not None:
                v._backward(g, push)


def backward(loss: Value) -> None:
    """Accumulate d(loss)/d(ancestor) into every requires-grad ancestor.

    Repeated calls without resetting grads accumulate. The loss must be
    a scalar.
    """
    if loss.data.shape != ():
        raise UsageError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    Tape.from_root(loss).run_backward(loss, np.array(1.0))


def zero_grads(params: Sequence[Value]) -> None:
    for p in params:
        p.grad = None


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting, summed back in backward)
# ---------------------------------------------------------------------------

def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out_data = a.data + b.data

    def _bw(g, push):
        if a.requires_grad:
            push(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            push(b, _unbroadcast(g, b.data.shape))

    return Value(out_data, parents=(a, b), backward=_bw, op="add")


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out_data = a.data - b.data

    def _bw(g, push):
        if a.requires_grad:
            push(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            push(b, _unbroadcast(-g, b.data.shape))

    return Value(out_data, parents=(a, b), backward=_bw, op="sub")


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out_data = a.data * b.data

    def _bw(g, push):
        if a.requires_grad:
            push(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            push(b, _unbroadcast(g * a.data, b.data.shape))

    return Value(out_data, parents=(a, b), backward=_bw, op="mul")


def div(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out_data = a.data / b.data

    def _bw(g, push):
        if a.requires_grad:
            push(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            push(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Value(out_data, parents=(a, b), backward=_bw, op="div")


def neg(a) -> Value:
    a = as_value(a)
    return Value(-a.data, parents=(a,), backward=lambda g, push: push(a, -g), op="neg")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Value:
    """2-D matrix product. Backward: dA = dC @ B.T, dB = A.T @ dC."""
    a, b = as_value(a), as_value(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul needs [m x k] @ [k x n], got {a.data.shape} and {b.data.shape}")
    out_data = a.data @ b.data

    def _bw(g, push):
        if a.requires_grad:
            push(a, g @ b.data.T)
        if b.requires_grad:
            push(b, a.data.T @ g)

    return Value(out_data, parents=(a, b), backward=_bw, op="matmul")


def transpose(a) -> Value:
    a = as_value(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D value, got shape {a.data.shape}")
    return Value(a.data.T, parents=(a,),
                 backward=lambda g, push: push(a, g.T), op="transpose")


# ---------------------------------------------------------------------------
# shape surgery
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Value:
    a = as_value(a)
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise DimensionError(f"cannot reshape {a.data.shape} to {shape}")
    in_shape = a.data.shape
    return Value(a.data.reshape(shape), parents=(a,),
                 backward=lambda g, push: push(a, g.reshape(in_shape)), op="reshape")


def flatten(a) -> Value:
    a = as_value(a)
    return reshape(a, (a.data.size,))


def col_slice(a, lo: int, hi: int) -> Value:
    """Columns [lo, hi) of a 2-D value; backward scatters into zeros."""
    a = as_value(a)
    if a.data.ndim != 2:
        raise DimensionError(f"col_slice needs a 2-D value, got shape {a.data.shape}")
    if not (0 <= lo < hi <= a.data.shape[1]):
        raise DimensionError(
            f"column range [{lo}, {hi}) outside width {a.data.shape[1]}")

    def _bw(g, push):
        full = np.zeros_like(a.data)
        full[:, lo:hi] = g
        push(a, full)

    return Value(a.data[:, lo:hi].copy(), parents=(a,), backward=_bw, op="col_slice")


def row_slice(a, lo: int, hi: int) -> Value:
    """Rows [lo, hi) of a 2-D value; backward scatters into zeros."""
    a = as_value(a)
    if a.data.ndim != 2:
        raise DimensionError(f"row_slice needs a 2-D value, got shape {a.data.shape}")
    if not (0 <= lo < hi <= a.data.shape[0]):
        raise DimensionError(f"row range [{lo}, {hi}) outside height {a.data.shape[0]}")

    def _bw(g, push):
        full = np.zeros_like(a.data)
        full[lo:hi, :] = g
        push(a, full)

    return Value(a.data[lo:hi, :].copy(), parents=(a,), backward=_bw, op="row_slice")


def concat(values: Sequence, axis: int = 0) -> Value:
    vals = [as_value(v) for v in values]
    if not vals:
        raise UsageError("concat of an empty sequence")
    out_data = np.concatenate([v.data for v in vals], axis=axis)
    extents = [v.data.shape[axis] for v in vals]

    def _bw(g, push):
        offset = 0
        for v, n in zip(vals, extents):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + n)
            push(v, g[tuple(idx)])
            offset += n

    return Value(out_data, parents=tuple(vals), backward=_bw, op="concat")


def stack(values: Sequence) -> Value:
    """Stack same-shape values along a new leading axis."""
    vals = [as_value(v) for v in values]
    if not vals:
        raise UsageError("stack of an empty sequence")
    out_data = np.stack([v.data for v in vals], axis=0)

    def _bw(g, push):
        for i, v in enumerate(vals):
            push(v, g[i])

    return Value(out_data, parents=tuple(vals), backward=_bw, op="stack")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(a) -> Value:
    a = as_value(a)
    return Value(a.data.sum(), parents=(a,),
                 backward=lambda g, push: push(a, np.full_like(a.data, float(g))),
                 op="sum_all")


def mean_rows(a) -> Value:
    """Column means of a 2-D value: [N x d] -> [d]."""
    a = as_value(a)
    if a.data.ndim != 2:
        raise DimensionError(f"mean_rows needs a 2-D value, got shape {a.data.shape}")
    n = a.data.shape[0]
    return Value(a.data.mean(axis=0), parents=(a,),
                 backward=lambda g, push: push(a, np.tile(g / n, (n, 1))),
                 op="mean_rows")


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def relu(a) -> Value:
    a = as_value(a)
    out_data = np.maximum(a.data, 0.0)

    def _bw(g, push):
        push(a, g * (a.data > 0.0))

    return Value(out_data, parents=(a,), backward=_bw, op="relu")


def gelu(a) -> Value:
    """GELU with the tanh approximation (0.044715 cubic term)."""
    a = as_value(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_CUBIC * x ** 3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def _bw(g, push):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_CUBIC * x ** 2)
        push(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner))

    return Value(out_data, parents=(a,), backward=_bw, op="gelu")


def sqrt(a) -> Value:
    a = as_value(a)
    if np.any(a.data <= 0.0):
        raise InputError("sqrt requires strictly positive input")
    out_data = np.sqrt(a.data)

    def _bw(g, push):
        push(a, g * 0.5 / out_data)

    return Value(out_data, parents=(a,), backward=_bw, op="sqrt")


def signed_sqrt(a, grad_floor: float = 1e-6) -> Value:
    """Elementwise sign(x) * sqrt(|x|).

    The true derivative 1/(2 sqrt(|x|)) blows up at zero, so it is
    clamped at 1/(2 * grad_floor) to keep training finite.
    """
    a = as_value(a)
    root = np.sqrt(np.abs(a.data))
    out_data = np.sign(a.data) * root

    def _bw(g, push):
        push(a, g * 0.5 / np.maximum(root, grad_floor))

    return Value(out_data, parents=(a,), backward=_bw, op="signed_sqrt")


def softmax_rows(a) -> Value:
    """Row-wise softmax of a 2-D value (max-subtracted for stability)."""
    a = as_value(a)
    if a.data.ndim != 2:
        raise DimensionError(f"softmax_rows needs a 2-D value, got shape {a.data.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def _bw(g, push):
        push(a, s * (g - (g * s).sum(axis=1, keepdims=True)))

    return Value(s, parents=(a,), backward=_bw, op="softmax_rows")


# ---------------------------------------------------------------------------
# normalizations
# ---------------------------------------------------------------------------

def layer_norm(x, gain, shift, eps: float = 1e-6) -> Value:
    """Normalize each row to zero mean / unit (biased) variance, then affine."""
    x, gain, shift = as_value(x), as_value(gain), as_value(shift)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or shift.data.shape != (d,):
        raise DimensionError(
            f"layer_norm gain/shift must have shape ({d},), got "
            f"{gain.data.shape} and {shift.data.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = gain.data * xhat + shift.data

    def _bw(g, push):
        if gain.requires_grad:
            push(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if shift.requires_grad:
            push(shift, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            push(x, inv * (gx - gx.mean(axis=-1, keepdims=True)
                           - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return Value(out_data, parents=(x, gain, shift), backward=_bw, op="layer_norm")


def frobenius_normalize(z, eps: float = 1e-6) -> Value:
    """z / (||z||_F + eps); a zero input stays zero."""
    z = as_value(z)
    norm = float(np.sqrt((z.data ** 2).sum()))
    scale = 1.0 / (norm + eps)
    out_data = z.data * scale

    def _bw(g, push):
        if norm == 0.0:
            push(z, g * scale)
        else:
            coef = float((g * z.data).sum()) / (norm * (norm + eps) ** 2)
            push(z, g * scale - coef * z.data)

    return Value(out_data, parents=(z,), backward=_bw, op="frobenius_normalize")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_out_extent(extent: int, k: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - k) // stride + 1


def conv2d(x, kernel, bias, stride: int = 1, pad: int = 0) -> Value:
    """Cross-correlation of one sample: [C_in x H x W] with
    [C_out x C_in x kh x kw] kernels plus per-channel bias.

    Supports the 1x1 and 3x3 kernels with strides 1 and 2 that the
    aggregation blocks need. Implemented by explicit accumulation over
    the (at most nine) kernel taps so the reduction order is fixed.
    """
    x, kernel, bias = as_value(x), as_value(kernel), as_value(bias)
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise DimensionError(
            f"conv2d needs [C x H x W] input and [O x C x kh x kw] kernel, "
            f"got {x.data.shape} and {kernel.data.shape}")
    c_out, c_in, kh, kw = kernel.data.shape
    if kh != kw or kh not in (1, 3):
        raise UsageError(f"conv2d supports square 1x1 or 3x3 kernels, got {kh}x{kw}")
    if stride not in (1, 2):
        raise UsageError(f"conv2d supports stride 1 or 2, got {stride}")
    if x.data.shape[0] != c_in:
        raise DimensionError(
            f"conv2d input has {x.data.shape[0]} channels, kernel expects {c_in}")
    if bias.data.shape != (c_out,):
        raise DimensionError(f"conv2d bias must have shape ({c_out},)")
    _, h, w = x.data.shape
    h_out = _conv_out_extent(h, kh, stride, pad)
    w_out = _conv_out_extent(w, kw, stride, pad)
    if h_out < 1 or w_out < 1:
        raise DimensionError(
            f"conv2d output extent {h_out}x{w_out} < 1 for input {h}x{w}, "
            f"kernel {kh}, stride {stride}, pad {pad}")

    padded = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    out_data = np.zeros((c_out, h_out, w_out))
    for i in range(kh):
        for j in range(kw):
            patch = padded[:, i:i + stride * h_out:stride, j:j + stride * w_out:stride]
            out_data += np.einsum("oc,chw->ohw", kernel.data[:, :, i, j], patch)
    out_data += bias.data[:, None, None]

    def _bw(g, push):
        if bias.requires_grad:
            push(bias, g.sum(axis=(1, 2)))
        if kernel.requires_grad:
            dk = np.zeros_like(kernel.data)
            for i in range(kh):
                for j in range(kw):
                    patch = padded[:, i:i + stride * h_out:stride,
                                   j:j + stride * w_out:stride]
                    dk[:, :, i, j] = np.einsum("ohw,chw->oc", g, patch)
            push(kernel, dk)
        if x.requires_grad:
            dpad = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    dpad[:, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += \
                        np.einsum("oc,ohw->chw", kernel.data[:, :, i, j], g)
            if pad:
                dpad = dpad[:, pad:pad + h, pad:pad + w]
            push(x, dpad)

    return Value(out_data, parents=(x, kernel, bias), backward=_bw, op="conv2d")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits, labels) -> Value:
    """Mean over the batch of -log softmax(logits)[label].

    Row-max subtraction keeps the exponentials stable; the backward pass
    is (softmax - onehot) / batch.
    """
    logits = as_value(logits)
    if logits.data.ndim != 2:
        raise DimensionError(
            f"softmax_cross_entropy needs [B x C] logits, got shape {logits.data.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.data.shape
    if labels.shape != (b,):
        raise DimensionError(f"labels must have shape ({b},), got {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= c):
        raise InputError(f"labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float((lse - z[np.arange(b), labels]).mean())
    probs = np.exp(z - lse[:, None])

    def _bw(g, push):
        d = probs.copy()
        d[np.arange(b), labels] -= 1.0
        push(logits, float(g) * d / b)

    return Value(loss, parents=(logits,), backward=_bw, op="softmax_cross_entropy")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[], Value], params: Sequence[Value],
                      step: float = 1e-5, refine: Sequence[float] = ()) -> float:
    """Central-difference check of ``f``'s gradients w.r.t. ``params``.

    ``f`` must deterministically rebuild its graph from the params'
    current data. Returns the max over all coordinates of
    |analytic - numeric| / max(1e-12, |analytic| + |numeric|).

    A coordinate whose derivative is many orders below the loss scale
    cannot be resolved at any single step (roundoff grows as the step
    shrinks, truncation as it grows). ``refine`` supplies larger steps
    that are tried per coordinate while its error stays above 1e-5, and
    the smallest error wins; deep composite losses need this, single
    ops do not.
    """
    zero_grads(params)
    backward(f())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    def rel_err_at(flat, i, a_i, h):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(f().data)
        flat[i] = orig - h
        f_minus = float(f().data)
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        return abs(a_i - numeric) / max(1e-12, abs(a_i) + abs(numeric))

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            err = rel_err_at(flat, i, a_flat[i], step)
            for h in refine:
                if err <= 1e-5:
                    break
                err = min(err, rel_err_at(flat, i, a_flat[i], h))
            worst = max(worst, err)
    return worst
