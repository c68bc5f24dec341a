"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small. Every operation computes its result
eagerly with numpy and, when gradients are enabled and at least one input
needs them, records a backward closure plus parent references on the
result. :class:`GradientTape` replays those closures in reverse
topological order starting from a scalar loss.

There is no global graph state: the graph lives in the tensors produced
by one forward pass, so independent passes (one per worker thread, say)
never interact. The only thread-affine switch is the ``no_grad`` mode
flag, which lives in thread-local storage.

Determinism: tensor payloads are C-contiguous float64, the topological
order is a fixed function of the recorded graph, and accumulation follows
that order, so repeated backward passes over one graph are bit-identical.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class TapeError(RuntimeError):
    """Raised when the autodiff machinery is used outside its contract."""


_STATE = threading.local()


def grad_enabled() -> bool:
    return getattr(_STATE, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording on this thread."""

    def __enter__(self):
        self._prev = grad_enabled()
        _STATE.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.grad_enabled = self._prev
        return False


class gradient_fault:
    """Deliberately corrupt one matmul gradient by a factor 1.01.

    Debug hook for proving that a finite-difference harness actually
    catches wrong analytic gradients. Never enabled outside tests and the
    ``gradcheck --inject-bug`` path.
    """

    def __enter__(self):
        self._prev = getattr(_STATE, "fault", False)
        _STATE.fault = True
        return self

    def __exit__(self, *exc):
        _STATE.fault = self._prev
        return False


def _fault_active() -> bool:
    return getattr(_STATE, "fault", False)


class Tensor:
    """A float64 array plus an optional record of how it was computed.

    ``requires_grad`` on a leaf marks it as a differentiation target; on a
    non-leaf it means "some leaf below requires gradients". ``grad`` is
    only populated by :func:`backward` for convenience; tape-based code
    should use :meth:`GradientTape.gradients`.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # Arithmetic sugar; all routing goes through the module-level ops.
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not part of the op set")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def sum(self, axes=None, keepdims: bool = False):
        return tsum(self, axes=axes, keepdims=keepdims)

    def mean(self, axes=None, keepdims: bool = False):
        s = tsum(self, axes=axes, keepdims=keepdims)
        return scale(s, _mean_factor(self.shape, axes))

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def abs(self):
        return tabs(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)


def _mean_factor(shape, axes) -> float:
    if axes is None:
        n = int(np.prod(shape)) if shape else 1
    else:
        if isinstance(axes, int):
            axes = (axes,)
        n = 1
        for ax in axes:
            n *= shape[ax]
    return 1.0 / n


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def make_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], tuple],
) -> Tensor:
    """Build a graph node; the extension point for custom operations.

    ``backward`` receives the gradient w.r.t. ``data`` and returns one
    gradient array (or None) per parent, aligned with ``parents``. The
    returned arrays may alias the incoming gradient; the tape copies
    where needed before accumulating.
    """
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from e

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_op(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from e

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_op(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    a = _wrap(a)

    def backward(g):
        return (-g,)

    return make_op(-a.data, (a,), backward)


def scale(a: Tensor, s: float) -> Tensor:
    a = _wrap(a)
    s = float(s)

    def backward(g):
        return (g * s,)

    return make_op(a.data * s, (a,), backward)


def relu(a: Tensor) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0.0

    def backward(g):
        return (g * mask,)

    return make_op(np.where(mask, a.data, 0.0), (a,), backward)


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = _wrap(a)
    y = _sigmoid_stable(a.data)

    def backward(g):
        return (g * y * (1.0 - y),)

    return make_op(y, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    a = _wrap(a)
    y = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - y * y),)

    return make_op(y, (a,), backward)


def tabs(a: Tensor) -> Tensor:
    """Elementwise absolute value; the subgradient at 0 is 0."""
    a = _wrap(a)
    sign = np.sign(a.data)

    def backward(g):
        return (g * sign,)

    return make_op(np.abs(a.data), (a,), backward)


def tsum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axes is None:
        norm_axes = tuple(range(a.ndim))
    elif isinstance(axes, int):
        norm_axes = (axes,)
    else:
        norm_axes = tuple(axes)
    data = a.data.sum(axis=norm_axes if a.ndim else None, keepdims=keepdims)

    kept_shape = tuple(
        1 if i in norm_axes else s for i, s in enumerate(a.shape)
    )

    def backward(g):
        gk = g if keepdims else g.reshape(kept_shape)
        return (np.broadcast_to(gk, a.shape),)

    return make_op(data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    data = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T
        if _fault_active():
            ga = ga * 1.01
        return ga, a.data.T @ g

    return make_op(data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")

    def backward(g):
        return (np.ascontiguousarray(g.T),)

    return make_op(np.ascontiguousarray(a.data.T), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from e

    def backward(g):
        return (g.reshape(a.shape),)

    return make_op(data, (a,), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty sequence")
    ndim = ts[0].ndim
    ax = axis % ndim if ndim else 0
    ref = list(ts[0].shape)
    for t in ts[1:]:
        if t.ndim != ndim:
            raise ShapeError(f"concat: rank mismatch {ts[0].shape} vs {t.shape}")
        for i in range(ndim):
            if i != ax and t.shape[i] != ref[i]:
                raise ShapeError(
                    f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {ax}"
                )
    data = np.concatenate([t.data for t in ts], axis=ax)
    sizes = [t.shape[ax] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        slicer = [slice(None)] * ndim
        outs = []
        for i in range(len(ts)):
            slicer[ax] = slice(int(offsets[i]), int(offsets[i + 1]))
            outs.append(g[tuple(slicer)])
        return tuple(outs)

    return make_op(data, ts, backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    a = _wrap(a)
    ax = axis % a.ndim
    if start < 0 or length < 1 or start + length > a.shape[ax]:
        raise ShapeError(
            f"narrow: window [{start}, {start + length}) exceeds axis {ax} of {a.shape}"
        )
    slicer = [slice(None)] * a.ndim
    slicer[ax] = slice(start, start + length)
    slicer = tuple(slicer)
    data = np.ascontiguousarray(a.data[slicer])

    def backward(g):
        gx = np.zeros(a.shape, dtype=np.float64)
        gx[slicer] = g
        return (gx,)

    return make_op(data, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    y = ex / ex.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return make_op(y, (a,), backward)


# ---------------------------------------------------------------------------
# spatial ops


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return v, v
    a, b = v
    return int(a), int(b)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of a (C,H,W) input with (O,C,kh,kw) filters."""
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d expects (C,H,W) and (O,C,kh,kw), got {x.shape} and {w.shape}")
    c, h, wdt = x.shape
    o, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv2d: input has {c} channels but filters expect {cw}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    hp, wp = h + 2 * ph, wdt + 2 * pw
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel ({kh},{kw}) exceeds padded input ({hp},{wp})")
    if b is not None:
        b = _wrap(b)
        if b.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match {o} filters")

    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::sh, ::sw, :, :]
    ho, wo = win.shape[1], win.shape[2]
    # cols: (ho*wo, c*kh*kw) row-major over output positions
    cols = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, c * kh * kw)
    out = (cols @ wmat.T).T.reshape(o, ho, wo)
    if b is not None:
        out = out + b.data[:, None, None]
    out = np.ascontiguousarray(out)

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(o, ho * wo)
        grad_w = (g2 @ cols).reshape(o, c, kh, kw)
        grad_cols = g2.T @ wmat  # (ho*wo, c*kh*kw)
        gc = grad_cols.reshape(ho, wo, c, kh, kw)
        gp = np.zeros((c, hp, wp), dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                gp[:, i : i + sh * ho : sh, j : j + sw * wo : sw] += gc[:, :, :, i, j].transpose(2, 0, 1)
        gx = gp[:, ph : ph + h, pw : pw + wdt] if (ph or pw) else gp
        if b is None:
            return gx, grad_w
        return gx, grad_w, g.sum(axis=(1, 2))

    return make_op(out, parents, backward)


def maxpool2d(x: Tensor, kernel, stride=None) -> Tensor:
    """Max pooling over the two trailing axes; ties route to the first
    window element in row-major scan order."""
    x = _wrap(x)
    if x.ndim < 2:
        raise ShapeError(f"maxpool2d needs at least 2 axes, got {x.shape}")
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else (kh, kw))
    h, w = x.shape[-2], x.shape[-1]
    if kh > h or kw > w:
        raise ShapeError(f"maxpool2d: kernel ({kh},{kw}) exceeds input extent ({h},{w})")
    lead = x.shape[:-2]
    nb = int(np.prod(lead)) if lead else 1
    xb = x.data.reshape(nb, h, w)
    win = np.lib.stride_tricks.sliding_window_view(xb, (kh, kw), axis=(1, 2))
    win = win[:, ::sh, ::sw, :, :]
    ho, wo = win.shape[1], win.shape[2]
    flat = win.reshape(nb, ho, wo, kh * kw)
    arg = flat.argmax(axis=-1)  # first maximum in window scan order
    vals = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(vals.reshape(*lead, ho, wo))

    def backward(g):
        gb = g.reshape(nb, ho, wo)
        ai, aj = arg // kw, arg % kw
        ii = (np.arange(ho) * sh)[None, :, None] + ai
        jj = (np.arange(wo) * sw)[None, None, :] + aj
        bb = np.arange(nb)[:, None, None]
        gx = np.zeros((nb, h, w), dtype=np.float64)
        np.add.at(gx, (bb, ii, jj), gb)
        return (gx.reshape(x.shape),)

    return make_op(out, (x,), backward)


def _avgpool_k2(x: Tensor) -> Tensor:
    h, w = x.shape[-2], x.shape[-1]
    lead = x.shape[:-2]
    blocked = x.data.reshape(*lead, h // 2, 2, w // 2, 2)
    out = np.ascontiguousarray(blocked.sum(axis=(-3, -1)) * 0.25)

    def backward(g):
        gx = np.repeat(np.repeat(g * 0.25, 2, axis=-2), 2, axis=-1)
        return (gx,)

    return make_op(out, (x,), backward)


def avgpool2d(x: Tensor, kernel: int) -> Tensor:
    """Average pooling with square kernel == stride over the trailing axes.

    Power-of-two kernels are computed as repeated 2x2 pooling, so pooling
    by 4 is bitwise identical to pooling by 2 twice.
    """
    x = _wrap(x)
    k = int(kernel)
    if x.ndim < 2:
        raise ShapeError(f"avgpool2d needs at least 2 axes, got {x.shape}")
    h, w = x.shape[-2], x.shape[-1]
    if k < 1:
        raise ShapeError("avgpool2d: kernel must be >= 1")
    if h % k or w % k:
        raise ShapeError(f"avgpool2d: extent ({h},{w}) not divisible by kernel {k}")
    if k == 1:
        def backward(g):
            return (g,)

        return make_op(x.data.copy(), (x,), backward)
    if k & (k - 1) == 0:
        out = x
        steps = k.bit_length() - 1
        for _ in range(steps):
            out = _avgpool_k2(out)
        return out
    lead = x.shape[:-2]
    blocked = x.data.reshape(*lead, h // k, k, w // k, k)
    out = np.ascontiguousarray(blocked.mean(axis=(-3, -1)))
    inv = 1.0 / (k * k)

    def backward(g):
        gx = np.repeat(np.repeat(g * inv, k, axis=-2), k, axis=-1)
        return (gx,)

    return make_op(out, (x,), backward)


def replicate_pad2d(x: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Edge-replicating pad on the bottom/right of the trailing axes."""
    x = _wrap(x)
    if x.ndim < 2:
        raise ShapeError(f"replicate_pad2d needs at least 2 axes, got {x.shape}")
    ph, pw = int(pad_h), int(pad_w)
    if ph < 0 or pw < 0:
        raise ShapeError("replicate_pad2d: negative padding")
    if ph == 0 and pw == 0:
        def backward(g):
            return (g,)

        return make_op(x.data.copy(), (x,), backward)
    pads = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
    out = np.pad(x.data, pads, mode="edge")
    h, w = x.shape[-2], x.shape[-1]

    def backward(g):
        gx = g[..., :h, :w].copy()
        if ph:
            gx[..., -1:, :] += g[..., h:, :w].sum(axis=-2, keepdims=True)
        if pw:
            gx[..., :, -1:] += g[..., :h, w:].sum(axis=-1, keepdims=True)
        if ph and pw:
            gx[..., -1, -1] += g[..., h:, w:].sum(axis=(-2, -1))
        return (gx,)

    return make_op(out, (x,), backward)


def instance_norm(x: Tensor, channel_axis: int = 0, eps: float = 1e-5) -> Tensor:
    """Normalize each channel to zero mean / unit variance over all other
    axes (biased variance). No learned scale or shift."""
    x = _wrap(x)
    ax = channel_axis % x.ndim
    red = tuple(i for i in range(x.ndim) if i != ax)
    if not red:
        raise ShapeError(f"instance_norm: tensor {x.shape} has no axes to normalize over")
    mu = x.data.mean(axis=red, keepdims=True)
    var = x.data.var(axis=red, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv

    def backward(g):
        gm = g.mean(axis=red, keepdims=True)
        gy = (g * y).mean(axis=red, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return make_op(y, (x,), backward)


def l1_loss(pred: Tensor, target: Tensor, num_pixels: int | None = None) -> Tensor:
    """Mean absolute error, normalized by the number of positions (all
    axes after the leading channel axis); vector inputs count as one
    position."""
    pred, target = _wrap(pred), _wrap(target)
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: shape mismatch {pred.shape} vs {target.shape}")
    if num_pixels is None:
        num_pixels = int(np.prod(pred.shape[1:])) if pred.ndim >= 2 else 1
    if num_pixels < 1:
        raise ShapeError("l1_loss: num_pixels must be >= 1")
    diff = add(pred, neg(target))
    return scale(tsum(tabs(diff)), 1.0 / num_pixels)


# ---------------------------------------------------------------------------
# backward machinery


class GradientTape:
    """Reverse topological view of the graph below a scalar loss."""

    def __init__(self, loss: Tensor):
        if not isinstance(loss, Tensor):
            raise TapeError("loss must be a Tensor")
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.loss = loss
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))
        self._order = order

    def gradients(self, leaves: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of the loss w.r.t. ``leaves``; zeros for leaves the
        loss does not depend on."""
        grads: dict[int, np.ndarray] = {
            id(self.loss): np.ones(self.loss.shape, dtype=np.float64)
        }
        for node in reversed(self._order):
            if node._backward is None:
                continue  # leaves keep their accumulated gradient
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                acc = grads.get(id(p))
                if acc is None:
                    # own the buffer: closures may hand back views of g
                    if pg is g or not pg.flags.owndata or not pg.flags.writeable:
                        pg = pg.copy()
                    grads[id(p)] = pg
                else:
                    acc += pg
        return [
            grads.get(id(leaf), np.zeros(leaf.shape, dtype=np.float64))
            for leaf in leaves
        ]


def backward(loss: Tensor, leaves: Sequence[Tensor] | None = None) -> list[np.ndarray]:
    """Run one reverse pass; populates ``leaf.grad`` and returns the
    gradient arrays aligned with ``leaves``."""
    tape = GradientTape(loss)
    if leaves is None:
        leaves = [
            t for t in tape._order if t._backward is None and t.requires_grad
        ]
    grads = tape.gradients(leaves)
    for leaf, g in zip(leaves, grads):
        leaf.grad = g
    return grads


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-6,
    coords: Sequence[int] | None = None,
) -> float:
    """Worst relative disagreement between analytic and central-difference
    gradients of the scalar ``f(x)`` over coordinates of ``x``.

    ``f`` must be a pure function of ``x.data`` (closed-over constants are
    fine). ``coords`` restricts the sweep to a subset of flat indices;
    the default sweeps every coordinate.
    """
    if not x.requires_grad:
        raise TapeError("finite_diff_check target must require gradients")
    loss = f(x)
    if loss.size != 1:
        raise TapeError("finite_diff_check needs a scalar-valued function")
    analytic = GradientTape(loss).gradients([x])[0].ravel()
    flat = x.data.ravel()
    base = flat.copy()
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idx:
            flat[i] = base[i] + h
            fp = float(f(x).data.reshape(()))
            flat[i] = base[i] - h
            fm = float(f(x).data.reshape(()))
            flat[i] = base[i]
            num = (fp - fm) / (2.0 * h)
            rel = abs(analytic[i] - num) / max(abs(analytic[i]), abs(num), 1e-8)
            if rel > worst:
                worst = rel
    return worst
