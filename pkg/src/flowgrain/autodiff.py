"""Reverse-mode automatic differentiation over dense float64 arrays.

Every model in this package is trained through the primitive set defined
here. Values live in :class:`Tensor`; while a :class:`Tape` is active each
primitive appends one node (operation id, input refs, saved forward
values) to it, so append order is already a topological order.
:func:`backward` replays the tape in reverse exactly once and accumulates
d(output)/d(leaf) into every leaf that has ``requires_grad``.

Conventions:

* all data is float64, row-major;
* every primitive validates operand shapes (ShapeMismatchError) and the
  finiteness of its result (NonFiniteError naming the offending node);
* elementwise binary ops accept equal shapes or a single-element operand
  (scalar broadcast); no other broadcasting exists;
* ``relu`` uses subgradient 0 at exactly 0;
* leaf gradients accumulate across backward calls until
  :func:`zero_grad`;
* ``reshape`` / ``transpose`` are layout ops, not arithmetic: their
  gradient is the inverse layout op.

Without an active tape the same functions evaluate eagerly with no
recording, which is the inference path.
"""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteError, ShapeMismatchError

_TAPE_STACK = []


class Tensor:
    """A dense float64 array with optional gradient accumulation."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar over the primitives below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)


def constant(data):
    return Tensor(data, requires_grad=False)


def parameter(data):
    return Tensor(data, requires_grad=True)


class Node:
    """One recorded operation: id, inputs, which inputs need grads, and a
    closure computing input gradients from the output gradient."""

    __slots__ = ("op", "index", "inputs", "needs", "backward_fn", "out", "tape")

    def __init__(self, op, index, inputs, needs, backward_fn, out, tape):
        self.op = op
        self.index = index
        self.inputs = inputs
        self.needs = needs
        self.backward_fn = backward_fn
        self.out = out
        self.tape = tape


class Tape:
    """Ordered record of operations; append order is topological order."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def backward(self, output):
        backward(self, output)


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _tracked(t, tape):
    return t.requires_grad or (t.node is not None and t.node.tape is tape)


def _finish(op, out_data, inputs, backward_fn):
    """Validate finiteness, wrap the result, and record on the active tape."""
    if not np.all(np.isfinite(out_data)):
        tape = _active_tape()
        where = f"op '{op}'"
        if tape is not None:
            where = f"node {len(tape.nodes)} ({op})"
        raise NonFiniteError(where)
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        needs = tuple(_tracked(t, tape) for t in inputs)
        if any(needs):
            node = Node(op, len(tape.nodes), inputs, needs, backward_fn, out, tape)
            tape.nodes.append(node)
            out.node = node
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(tape, output):
    """Accumulate d(output)/d(leaf) for every requires_grad leaf reachable
    from ``output`` through ``tape``.

    ``output`` must hold exactly one element. Repeated calls keep adding
    into leaf ``.grad`` buffers; use :func:`zero_grad` to reset. Leaves
    without ``requires_grad`` simply receive no gradient.
    """
    output = _as_tensor(output)
    if output.size != 1:
        raise ValueError(
            f"backward requires a scalar output, got shape {output.shape}"
        )
    if output.node is None or output.node.tape is not tape:
        if output.requires_grad:
            seed = np.ones_like(output.data)
            output.grad = seed if output.grad is None else output.grad + seed
        return
    grads = {output.node.index: np.ones_like(output.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.index, None)
        if g is None:
            continue
        gins = node.backward_fn(g)
        for t, gi, need in zip(node.inputs, gins, node.needs):
            if gi is None or not need:
                continue
            if t.node is not None and t.node.tape is tape:
                k = t.node.index
                grads[k] = gi if k not in grads else grads[k] + gi
            elif t.requires_grad:
                t.grad = gi.copy() if t.grad is None else t.grad + gi


def zero_grad(tensors):
    for t in tensors:
        t.grad = None


def evaluate(graph, inputs, tape=None):
    """Run ``graph`` (a callable composed of the primitives in this module)
    on ``inputs``, recording onto ``tape`` when one is given."""
    if tape is None:
        return graph(*inputs)
    with tape:
        return graph(*inputs)


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return (g @ bd.T, ad.T @ g)

    return _finish("matmul", out, (a, b), bwd)


def masked_matmul(x, w, mask):
    """``x @ (w * mask)`` where ``mask`` is a constant 0/1 array on the
    weight; masked-out weight entries receive zero gradient."""
    x, w = _as_tensor(x), _as_tensor(w)
    mask = np.asarray(mask, dtype=np.float64)
    if w.shape != mask.shape:
        raise ShapeMismatchError("masked_matmul", w.shape, mask.shape, "weight vs mask")
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatchError("masked_matmul", x.shape, w.shape)
    weff = w.data * mask
    out = x.data @ weff
    xd = x.data

    def bwd(g):
        return (g @ weff.T, (xd.T @ g) * mask)

    return _finish("masked_matmul", out, (x, w), bwd)


def _binary_shapes(op, a, b):
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeMismatchError(op, a.shape, b.shape)


def _unbroadcast(g, shape, size):
    if g.shape == tuple(shape):
        return g
    return np.sum(g).reshape(shape) if size == 1 else g


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("add", a, b)
    out = a.data + b.data
    sa, sb, na, nb = a.shape, b.shape, a.size, b.size

    def bwd(g):
        return (_unbroadcast(g, sa, na), _unbroadcast(g, sb, nb))

    return _finish("add", out, (a, b), bwd)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("sub", a, b)
    out = a.data - b.data
    sa, sb, na, nb = a.shape, b.shape, a.size, b.size

    def bwd(g):
        return (_unbroadcast(g, sa, na), _unbroadcast(-g, sb, nb))

    return _finish("sub", out, (a, b), bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("mul", a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data
    sa, sb, na, nb = a.shape, b.shape, a.size, b.size

    def bwd(g):
        return (_unbroadcast(g * bd, sa, na), _unbroadcast(g * ad, sb, nb))

    return _finish("mul", out, (a, b), bwd)


def neg(a):
    a = _as_tensor(a)
    return _finish("neg", -a.data, (a,), lambda g: (-g,))


def exp(a):
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _finish("exp", out, (a,), bwd)


def log(a):
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    ad = a.data

    def bwd(g):
        return (g / ad,)

    return _finish("log", out, (a,), bwd)


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _finish("tanh", out, (a,), bwd)


def relu(a):
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)
    pos = a.data > 0.0

    def bwd(g):
        return (g * pos,)

    return _finish("relu", out, (a,), bwd)


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def _keepdims_shape(in_shape, axes):
    return tuple(1 if i in axes else n for i, n in enumerate(in_shape))


def reduce_sum(a, axis=None):
    a = _as_tensor(a)
    axes = _axis_tuple(axis, a.ndim)
    out = a.data.sum(axis=axes)
    in_shape = a.shape
    kd = _keepdims_shape(in_shape, axes)

    def bwd(g):
        return (np.broadcast_to(g.reshape(kd), in_shape).copy(),)

    return _finish("sum", out, (a,), bwd)


def reduce_mean(a, axis=None):
    a = _as_tensor(a)
    axes = _axis_tuple(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.data.mean(axis=axes)
    in_shape = a.shape
    kd = _keepdims_shape(in_shape, axes)

    def bwd(g):
        return (np.broadcast_to(g.reshape(kd) / count, in_shape).copy(),)

    return _finish("mean", out, (a,), bwd)


def logsumexp(a, axis):
    """Numerically stable log(sum(exp(a))) along one axis."""
    a = _as_tensor(a)
    ax = axis % a.ndim
    m = np.max(a.data, axis=ax, keepdims=True)
    s = np.exp(a.data - m)
    t = s.sum(axis=ax, keepdims=True)
    out = np.squeeze(m + np.log(t), axis=ax)
    softmax = s / t

    def bwd(g):
        return (softmax * np.expand_dims(g, ax),)

    return _finish("logsumexp", out, (a,), bwd)


def affine(x, scale=None, shift=None):
    """Per-feature affine broadcast over the trailing axis:
    ``x * scale + shift`` with ``scale``/``shift`` of shape ``(F,)``."""
    x = _as_tensor(x)
    f = x.shape[-1] if x.ndim else 1
    if scale is not None:
        scale = _as_tensor(scale)
        if scale.shape != (f,):
            raise ShapeMismatchError("affine", x.shape, scale.shape, "scale")
    if shift is not None:
        shift = _as_tensor(shift)
        if shift.shape != (f,):
            raise ShapeMismatchError("affine", x.shape, shift.shape, "shift")
    out = x.data
    if scale is not None:
        out = out * scale.data
    if shift is not None:
        out = out + shift.data
    lead = tuple(range(x.ndim - 1))
    xd = x.data
    sc = scale.data if scale is not None else None

    inputs = [x]
    if scale is not None:
        inputs.append(scale)
    if shift is not None:
        inputs.append(shift)
    has_scale, has_shift = scale is not None, shift is not None

    def bwd(g):
        gx = g * sc if has_scale else g
        gins = [gx]
        if has_scale:
            gins.append((g * xd).sum(axis=lead))
        if has_shift:
            gins.append(g.sum(axis=lead))
        return tuple(gins)

    return _finish("affine", out, tuple(inputs), bwd)


def reshape(a, shape):
    a = _as_tensor(a)
    out = a.data.reshape(shape)
    in_shape = a.shape

    def bwd(g):
        return (g.reshape(in_shape),)

    return _finish("reshape", out, (a,), bwd)


def transpose(a):
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatchError("transpose", a.shape, a.shape, "need 2-D")
    out = a.data.T.copy()

    def bwd(g):
        return (g.T.copy(),)

    return _finish("transpose", out, (a,), bwd)


def _im2col(xp, kh, kw, oh, ow, s):
    B, C = xp.shape[0], xp.shape[1]
    cols = np.empty((B, oh, ow, C, kh, kw))
    for u in range(kh):
        for v in range(kw):
            cols[:, :, :, :, u, v] = xp[
                :, :, u : u + s * oh : s, v : v + s * ow : s
            ].transpose(0, 2, 3, 1)
    return cols.reshape(B * oh * ow, C * kh * kw)


def conv2d(x, w, bias=None, stride=1, padding=0):
    """2-D cross-correlation of ``x`` (B, C, H, W) with kernels ``w``
    (O, C, kh, kw), valid after zero padding, square stride.

    The im2col buffer is recomputed in backward instead of saved: it is
    ~k^2 times the input size, which dominated memory when tapes held one
    per layer.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatchError("conv2d", x.shape, w.shape)
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    s, p = int(stride), int(padding)
    oh = (H + 2 * p - kh) // s + 1
    ow = (W + 2 * p - kw) // s + 1
    if oh < 1 or ow < 1:
        raise ShapeMismatchError("conv2d", x.shape, w.shape, "kernel larger than input")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (O,):
            raise ShapeMismatchError("conv2d", bias.shape, (O,), "bias")

    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    x2 = _im2col(xp, kh, kw, oh, ow, s)
    w2 = w.data.reshape(O, C * kh * kw)
    y = x2 @ w2.T
    if bias is not None:
        y = y + bias.data
    out = y.reshape(B, oh, ow, O).transpose(0, 3, 1, 2)
    del x2

    has_bias = bias is not None

    def bwd(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * oh * ow, O)
        xpb = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
        gw = (g2.T @ _im2col(xpb, kh, kw, oh, ow, s)).reshape(O, C, kh, kw)
        gcols = (g2 @ w2).reshape(B, oh, ow, C, kh, kw)
        gxp = np.zeros(xpb.shape)
        for u in range(kh):
            for v in range(kw):
                gxp[:, :, u : u + s * oh : s, v : v + s * ow : s] += gcols[
                    :, :, :, :, u, v
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p : p + H, p : p + W] if p else gxp
        gins = [gx, gw]
        if has_bias:
            gins.append(g.sum(axis=(0, 2, 3)))
        return tuple(gins)

    inputs = (x, w, bias) if has_bias else (x, w)
    return _finish("conv2d", out, inputs, bwd)


def avg_pool2d(x, k):
    """Non-overlapping k-by-k average pooling; spatial dims must divide k."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeMismatchError("avg_pool2d", x.shape, (k, k))
    B, C, H, W = x.shape
    if H % k or W % k:
        raise ShapeMismatchError("avg_pool2d", x.shape, (k, k), "dims must divide k")
    out = x.data.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))

    def bwd(g):
        ge = g[:, :, :, None, :, None] / (k * k)
        return (np.broadcast_to(ge, (B, C, H // k, k, W // k, k)).reshape(B, C, H, W).copy(),)

    return _finish("avg_pool2d", out, (x,), bwd)


# ---------------------------------------------------------------------------
# oracle


def finite_difference_gradient(f, x, h=1e-5):
    """Central-difference gradient of a scalar function, the independent
    oracle every analytic gradient in this package is checked against.

    ``f`` maps an ndarray shaped like ``x`` to a float. For kinked
    functions (relu) callers should exclude coordinates within 2h of the
    kink before comparing.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xp[idx] += h
        fp = float(f(xp))
        xm = x.copy()
        xm[idx] -= h
        fm = float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"finite_difference_gradient at index {idx}")
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad
