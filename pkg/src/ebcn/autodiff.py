"""Minimal reverse-mode automatic differentiation over numpy arrays.

The op set is exactly what the constraint network needs: matrix multiply
(including the batched self-attention forms), strict same-shape elementwise
arithmetic, a handful of pointwise nonlinearities, masked softmax, layer
normalization, depthwise causal convolution, an exponential-decay scan for
the recurrent state, reductions, concatenation, and reshape.

Design rules:

* No silent broadcasting. Elementwise binary ops demand identical shapes;
  the few ops that combine a per-channel vector with a batched tensor
  (``add_bias``, ``layer_norm``, ``depthwise_causal_conv``, ``decay_scan``)
  are explicit, documented forms.
* Every op validates shapes up front and raises ``ShapeError`` naming the
  op and the offending shapes.
* Every op checks its output for NaN/Inf and raises ``NumericFault`` with
  the tape position of the fault.
* Recording happens on an explicit ``Tape``. Forward passes outside any
  tape are pure numpy and allocate nothing for gradients, which is how
  frozen networks are evaluated.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import NumericFault, ShapeError

_ALLOWED_DTYPES = (np.float32, np.float64)

# -inf sentinel for additive softmax masks; large but finite so masked
# logits never produce NaN through exp/subtraction.
MASK_NEG = -1e30

_state = threading.local()


def _current_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class Tensor:
    """A dense array plus an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("op", "out", "backward")

    def __init__(self, op: str, out: Tensor, backward: Callable[[np.ndarray], None]):
        self.op = op
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of executed ops; context manager for recording.

    Execution order is a topological order of the dataflow graph, so
    replaying the node list in reverse visits every node after all of its
    consumers — one backward visit per node.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        if _current_tape() is not None:
            raise NumericFault("a tape is already recording in this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = None

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every requires_grad tensor reachable from ``loss``."""
        if loss.data.shape != ():
            raise NumericFault(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        if loss.tape is not self:
            raise NumericFault("loss was not produced on this tape")
        if self.consumed:
            raise NumericFault("backward already ran on this tape; record a new forward")
        self.consumed = True
        loss.grad = np.ones((), dtype=loss.data.dtype)
        for position in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[position]
            g = node.out.grad
            if g is None:
                continue
            node.backward(g)
            if not np.all(np.isfinite(g)):
                raise NumericFault(
                    f"non-finite gradient leaving op '{node.op}' at tape position {position}"
                )
        self.nodes.clear()


def backward(loss: Tensor) -> None:
    if loss.tape is None:
        raise NumericFault("loss was not recorded on a tape")
    loss.tape.backward(loss)


# ---------------------------------------------------------------------------
# op plumbing
# ---------------------------------------------------------------------------


def _finish(
    op: str,
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    make_backward: Callable[[Tensor], Callable[[np.ndarray], None]],
) -> Tensor:
    tape = _current_tape()
    where = f"tape position {len(tape.nodes)}" if tape is not None else "untaped forward"
    if not np.all(np.isfinite(out_data)):
        raise NumericFault(f"op '{op}' produced a non-finite value ({where})")
    out = Tensor(out_data)
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        tape.nodes.append(_Node(op, out, make_backward(out)))
    return out


def _check_dtypes(op: str, *tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{op}: mixed dtypes {sorted(d.name for d in dtypes)}")


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("add", a, b)
    _same_shape("add", a, b)

    def make(out: Tensor):
        def bw(g):
            if a.requires_grad:
                a.accumulate(g)
            if b.requires_grad:
                b.accumulate(g)

        return bw

    return _finish("add", a.data + b.data, (a, b), make)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("sub", a, b)
    _same_shape("sub", a, b)

    def make(out: Tensor):
        def bw(g):
            if a.requires_grad:
                a.accumulate(g)
            if b.requires_grad:
                b.accumulate(-g)

        return bw

    return _finish("sub", a.data - b.data, (a, b), make)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("mul", a, b)
    _same_shape("mul", a, b)

    def make(out: Tensor):
        def bw(g):
            if a.requires_grad:
                a.accumulate(g * b.data)
            if b.requires_grad:
                b.accumulate(g * a.data)

        return bw

    return _finish("mul", a.data * b.data, (a, b), make)


def scalar_mul(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def make(out: Tensor):
        def bw(g):
            if x.requires_grad:
                x.accumulate(g * c)

        return bw

    return _finish("scalar_mul", x.data * c, (x,), make)


def square(x: Tensor) -> Tensor:
    def make(out: Tensor):
        def bw(g):
            if x.requires_grad:
                x.accumulate(g * (2.0 * x.data))

        return bw

    return _finish("square", x.data * x.data, (x,), make)


def hinge(x: Tensor) -> Tensor:
    """max(0, x) elementwise."""
    out_data = np.maximum(x.data, 0.0)

    def make(out: Tensor):
        active = x.data > 0.0

        def bw(g):
            if x.requires_grad:
                x.accumulate(g * active)

        return bw

    return _finish("hinge", out_data, (x,), make)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., d] + b[d] — the one sanctioned per-channel addition."""
    _check_dtypes("add_bias", x, b)
    if b.ndim != 1 or x.ndim < 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match input {x.shape}")
    lead = tuple(range(x.ndim - 1))

    def make(out: Tensor):
        def bw(g):
            if x.requires_grad:
                x.accumulate(g)
            if b.requires_grad:
                b.accumulate(g.sum(axis=lead) if lead else g)

        return bw

    return _finish("add_bias", x.data + b.data, (x, b), make)


# ---------------------------------------------------------------------------
# pointwise nonlinearities
# ---------------------------------------------------------------------------


def _sigmoid_data(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument cannot overflow
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def _sigmoid_grad(s: np.ndarray) -> np.ndarray:
    # Separated out so derivative-mutation tests can patch it.
    return s * (1.0 - s)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_data(x.data)

    def make(out: Tensor):
        def bw(g):
            if x.requires_grad:
                x.accumulate(g * _sigmoid_grad(s))

        return bw

    return _finish("sigmoid", s, (x,), make)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x) — the smooth MLP nonlinearity."""
    s = _sigmoid_data(x.data)
    out_data = x.data * s

    def make(out: Tensor):
        def bw(g):
            if x.requires_grad:
                x.accumulate(g * (s + x.data * s * (1.0 - s)))

        return bw

    return _finish("silu", out_data, (x,), make)


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)

    def make(out: Tensor):
        def bw(g):
            if x.requires_grad:
                x.accumulate(g * e)

        return bw

    return _finish("exp", e, (x,), make)


def softplus(x: Tensor) -> Tensor:
    out_data = np.logaddexp(0.0, x.data)

    def make(out: Tensor):
        s = _sigmoid_data(x.data)

        def bw(g):
            if x.requires_grad:
                x.accumulate(g * s)

        return bw

    return _finish("softplus", out_data, (x,), make)


# ---------------------------------------------------------------------------
# matrix products
# ---------------------------------------------------------------------------


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """x[..., d] @ w[d, e]; leading axes of x are flattened batch axes."""
    _check_dtypes("matmul", x, w)
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {x.shape} by {w.shape}")
    lead = x.shape[:-1]
    # one large GEMM beats a stack of small batched ones
    x2 = np.ascontiguousarray(x.data).reshape(-1, x.shape[-1])
    out_data = (x2 @ w.data).reshape(*lead, w.shape[1])

    def make(out: Tensor):
        def bw(g):
            g2 = np.ascontiguousarray(g).reshape(-1, w.shape[1])
            if x.requires_grad:
                x.accumulate((g2 @ w.data.T).reshape(x.shape))
            if w.requires_grad:
                w.accumulate(x2.T @ g2)

        return bw

    return _finish("matmul", out_data, (x, w), make)


def self_scores(h: Tensor, scale: float) -> Tensor:
    """scale * h @ h^T per batch: h[b, p, k] -> scores[b, p, p]."""
    if h.ndim != 3:
        raise ShapeError(f"self_scores: expected (batch, positions, width), got {h.shape}")
    scale = float(scale)
    out_data = scale * (h.data @ h.data.swapaxes(-1, -2))

    def make(out: Tensor):
        def bw(g):
            if h.requires_grad:
                h.accumulate(scale * ((g + g.swapaxes(-1, -2)) @ h.data))

        return bw

    return _finish("self_scores", out_data, (h,), make)


def attend(weights: Tensor, values: Tensor) -> Tensor:
    """weights[b, p, p] @ values[b, p, k]."""
    _check_dtypes("attend", weights, values)
    if (
        weights.ndim != 3
        or values.ndim != 3
        or weights.shape[0] != values.shape[0]
        or weights.shape[1] != weights.shape[2]
        or weights.shape[2] != values.shape[1]
    ):
        raise ShapeError(f"attend: incompatible shapes {weights.shape} and {values.shape}")
    out_data = weights.data @ values.data

    def make(out: Tensor):
        def bw(g):
            if weights.requires_grad:
                weights.accumulate(g @ values.data.swapaxes(-1, -2))
            if values.requires_grad:
                values.accumulate(weights.data.swapaxes(-1, -2) @ g)

        return bw

    return _finish("attend", out_data, (weights, values), make)


# ---------------------------------------------------------------------------
# normalization and softmax
# ---------------------------------------------------------------------------


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with an optional additive mask.

    The mask is a constant array (no gradient) of shape equal to ``x`` or to
    its trailing axes; masked-out entries hold ``MASK_NEG``.
    """
    logits = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=x.data.dtype)
        if mask.shape != x.shape and mask.shape != x.shape[x.ndim - mask.ndim :]:
            raise ShapeError(f"softmax: mask {mask.shape} does not align with {x.shape}")
        logits = logits + mask
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def make(out: Tensor):
        def bw(g):
            if x.requires_grad:
                inner = (g * y).sum(axis=-1, keepdims=True)
                x.accumulate(y * (g - inner))

        return bw

    return _finish("softmax", y, (x,), make)


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    _check_dtypes("layer_norm", x, scale, shift)
    d = x.shape[-1] if x.ndim else 0
    if scale.shape != (d,) or shift.shape != (d,):
        raise ShapeError(
            f"layer_norm: scale {scale.shape} / shift {shift.shape} do not match last axis of {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * scale.data + shift.data
    lead = tuple(range(x.ndim - 1))

    def make(out: Tensor):
        def bw(g):
            if scale.requires_grad:
                scale.accumulate((g * xhat).sum(axis=lead) if lead else g * xhat)
            if shift.requires_grad:
                shift.accumulate(g.sum(axis=lead) if lead else g)
            if x.requires_grad:
                gx = g * scale.data
                m1 = gx.mean(axis=-1, keepdims=True)
                m2 = (gx * xhat).mean(axis=-1, keepdims=True)
                x.accumulate(inv * (gx - m1 - xhat * m2))

        return bw

    return _finish("layer_norm", out_data, (x, scale, shift), make)


# ---------------------------------------------------------------------------
# sequence ops
# ---------------------------------------------------------------------------


def depthwise_causal_conv(x: Tensor, kernels: Tensor) -> Tensor:
    """Per-channel causal 1-D convolution with left zero padding.

    ``x`` is (batch, positions, channels); ``kernels`` is (channels, width).
    Kernel column ``width-1`` multiplies the current position, column ``j``
    multiplies the input ``width-1-j`` steps back, so output at position t
    depends on inputs at positions <= t only. A kernel of width 1 whose
    single column is all ones is the identity map.
    """
    _check_dtypes("depthwise_causal_conv", x, kernels)
    if x.ndim != 3 or kernels.ndim != 2 or kernels.shape[0] != x.shape[2]:
        raise ShapeError(
            f"depthwise_causal_conv: input {x.shape} incompatible with kernels {kernels.shape}"
        )
    b, p, d = x.shape
    k = kernels.shape[1]
    out_data = np.zeros_like(x.data)
    for j in range(k):
        back = k - 1 - j
        if back >= p:
            continue
        # x at position t-back contributes via kernel column j
        out_data[:, back:, :] += x.data[:, : p - back, :] * kernels.data[:, j]

    def make(out: Tensor):
        def bw(g):
            if x.requires_grad:
                gx = np.zeros_like(x.data)
                for j in range(k):
                    back = k - 1 - j
                    if back >= p:
                        continue
                    gx[:, : p - back, :] += g[:, back:, :] * kernels.data[:, j]
                x.accumulate(gx)
            if kernels.requires_grad:
                gk = np.zeros_like(kernels.data)
                for j in range(k):
                    back = k - 1 - j
                    if back >= p:
                        continue
                    gk[:, j] = (g[:, back:, :] * x.data[:, : p - back, :]).sum(axis=(0, 1))
                kernels.accumulate(gk)

        return bw

    return _finish("depthwise_causal_conv", out_data, (x, kernels), make)


def decay_scan(decay: Tensor, u: Tensor) -> Tensor:
    """Linear recurrence s_t = decay * s_{t-1} + u_t with s before the sequence = 0.

    ``decay`` is a per-channel vector (channels,) and ``u`` is
    (batch, positions, channels). Realizes the learned exponential-decay
    state update; with decay -> 0 the output equals ``u``.
    """
    _check_dtypes("decay_scan", decay, u)
    if u.ndim != 3 or decay.ndim != 1 or decay.shape[0] != u.shape[2]:
        raise ShapeError(f"decay_scan: decay {decay.shape} incompatible with input {u.shape}")
    b, p, d = u.shape
    s = np.empty_like(u.data)
    state = np.zeros((b, d), dtype=u.data.dtype)
    a = decay.data
    for t in range(p):
        state = state * a + u.data[:, t, :]
        s[:, t, :] = state

    def make(out: Tensor):
        def bw(g):
            gu = np.empty_like(u.data)
            running = np.zeros((b, d), dtype=u.data.dtype)
            ga = np.zeros_like(a)
            for t in range(p - 1, -1, -1):
                running = running * a + g[:, t, :]
                gu[:, t, :] = running
                if decay.requires_grad and t > 0:
                    ga += (running * s[:, t - 1, :]).sum(axis=0)
            if u.requires_grad:
                u.accumulate(gu)
            if decay.requires_grad:
                decay.accumulate(ga)

        return bw

    return _finish("decay_scan", s, (decay, u), make)


# ---------------------------------------------------------------------------
# reductions, concat, reshape
# ---------------------------------------------------------------------------


def mean_axis(x: Tensor, axis: int) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"mean_axis: axis {axis} out of range for shape {x.shape}")
    axis = axis % x.ndim
    n = x.shape[axis]
    out_data = x.data.mean(axis=axis)

    def make(out: Tensor):
        def bw(g):
            if x.requires_grad:
                x.accumulate(np.repeat(np.expand_dims(g / n, axis), n, axis=axis))

        return bw

    return _finish("mean_axis", out_data, (x,), make)


def max_axis(x: Tensor, axis: int) -> Tensor:
    """Max over one axis; gradient routes to the first argmax (deterministic)."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"max_axis: axis {axis} out of range for shape {x.shape}")
    axis = axis % x.ndim
    out_data = x.data.max(axis=axis)
    arg = x.data.argmax(axis=axis)

    def make(out: Tensor):
        def bw(g):
            if x.requires_grad:
                gx = np.zeros_like(x.data)
                idx = list(np.indices(out_data.shape))
                idx.insert(axis, arg)
                gx[tuple(idx)] = g
                x.accumulate(gx)

        return bw

    return _finish("max_axis", out_data, (x,), make)


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_last: no tensors given")
    _check_dtypes("concat_last", *parts)
    lead = parts[0].shape[:-1]
    for t in parts[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(
                f"concat_last: leading shapes differ: {[p.shape for p in parts]}"
            )
    widths = [t.shape[-1] for t in parts]
    out_data = np.concatenate([t.data for t in parts], axis=-1)

    def make(out: Tensor):
        def bw(g):
            start = 0
            for t, w in zip(parts, widths):
                if t.requires_grad:
                    t.accumulate(g[..., start : start + w])
                start += w

        return bw

    return _finish("concat_last", out_data, tuple(parts), make)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    in_shape = x.shape

    def make(out: Tensor):
        def bw(g):
            if x.requires_grad:
                x.accumulate(g.reshape(in_shape))

        return bw

    return _finish("reshape", x.data.reshape(shape), (x,), make)


def causal_mask(positions: int, dtype=np.float64) -> np.ndarray:
    """Additive (positions, positions) mask: position i attends to j <= i."""
    m = np.zeros((positions, positions), dtype=dtype)
    m[np.triu_indices(positions, k=1)] = MASK_NEG
    return m


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


class GradCheckReport:
    """Worst-coordinate comparison of analytic vs central-difference gradients."""

    __slots__ = ("max_rel_error", "worst_index", "analytic", "numeric", "tol")

    def __init__(self, max_rel_error, worst_index, analytic, numeric, tol):
        self.max_rel_error = max_rel_error
        self.worst_index = worst_index
        self.analytic = analytic
        self.numeric = numeric
        self.tol = tol

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __repr__(self) -> str:
        return (
            f"GradCheckReport(max_rel_error={self.max_rel_error:.3e}, "
            f"worst_index={self.worst_index}, passed={self.passed})"
        )


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare d f(x)/dx against central finite differences, coordinate-wise.

    ``f`` must be scalar-valued and built from the ops in this module. The
    relative error of a coordinate is |a - n| / max(|a|, |n|, 1e-6); the
    floor keeps finite-difference noise on near-zero gradients from
    registering as disagreement.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ShapeError(f"grad_check: eps {eps} outside [1e-7, 1e-3]")
    probe = Tensor(np.array(x.data, dtype=np.float64, copy=True), requires_grad=True)
    with Tape() as tape:
        y = f(probe)
        if y.data.shape != ():
            raise ShapeError(f"grad_check: f must be scalar-valued, got {y.data.shape}")
        tape.backward(y)
    analytic = (
        probe.grad.copy() if probe.grad is not None else np.zeros_like(probe.data)
    )

    numeric = np.zeros_like(probe.data)
    flat = probe.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = f(Tensor(probe.data)).item()
        flat[i] = keep - eps
        lo = f(Tensor(probe.data)).item()
        flat[i] = keep
        nflat[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel))
    worst_index = np.unravel_index(worst, probe.data.shape)
    return GradCheckReport(float(rel.reshape(-1)[worst]), worst_index, analytic, numeric, tol)
