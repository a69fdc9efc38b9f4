"""Reverse-mode automatic differentiation over float64 numpy arrays.

Each operation returns a new :class:`Tensor` holding a closure that pushes
the upstream gradient into its parents. :func:`backward` orders the graph
topologically and runs the closures once, in reverse.

Only the primitives needed by the downscaling networks are provided:
convolutions, activations, pooling reductions, channel concatenation,
broadcasting add/mul and the L1/L2 losses.
"""

import numpy as np

from . import kernels
from .errors import DoubleBackward, NonFiniteTensor, NonScalarLoss, ShapeMismatch


class Tensor:
    """A node of the differentiation graph.

    Parameters
    ----------
    data : array_like
        Values, stored as a float64 array.
    requires_grad : bool
        Whether :func:`backward` should populate :attr:`grad`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad=False, _parents=(), _op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = None
        self._op = _op
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op or 'leaf'})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn, op):
    if not np.isfinite(data).all():
        raise NonFiniteTensor(f"non-finite values produced by {op}")
    out = Tensor(data, _parents=tuple(parents), _op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._backward = lambda: backward_fn(out.grad)
    return out


def _require_4d(t, name):
    if t.data.ndim != 4:
        raise ShapeMismatch(f"{name} must be 4-D (n, c, h, w), got shape {t.shape}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- convolutions


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlate ``x`` (n, c, h, w) with ``weight`` (o, c, k, k)."""
    _require_4d(x, "input")
    _require_4d(weight, "weight")
    n, c, h, w = x.shape
    o, wc, k, k2 = weight.shape
    if wc != c or k != k2:
        raise ShapeMismatch(f"weight {weight.shape} does not match input channels {c}")
    if bias is not None and bias.shape != (o,):
        raise ShapeMismatch(f"bias shape {bias.shape} != ({o},)")
    oh = kernels.conv_out_size(h, k, stride, padding)
    ow = kernels.conv_out_size(w, k, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeMismatch(f"kernel {k} larger than padded input {(h, w)}")
    cols = kernels.im2col(x.data, k, stride, padding)
    w2 = weight.data.reshape(o, c * k * k)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, o, oh, ow)
    parents = [x, weight] + ([bias] if bias is not None else [])

    def backward_fn(g):
        g = g.reshape(n, o, oh * ow)
        if weight.requires_grad:
            # per-sample GEMMs summed in batch order; avoids tensordot's transposed copies
            gw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0)
            weight._accumulate(gw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2)))
        if x.requires_grad:
            gcols = np.matmul(w2.T, g)
            x._accumulate(kernels.col2im(gcols, x.shape, k, stride, padding))

    return _result(out, parents, backward_fn, "conv2d")


def transposed_conv2d(x, weight, bias=None, stride=2, padding=0):
    """Fractionally strided convolution; ``weight`` is (c_in, c_out, k, k).

    With the same weight array this is the adjoint of :func:`conv2d`.
    Output size is ``(h - 1) * stride + k - 2 * padding``.
    """
    _require_4d(x, "input")
    _require_4d(weight, "weight")
    n, c, h, w = x.shape
    wc, o, k, k2 = weight.shape
    if wc != c or k != k2:
        raise ShapeMismatch(f"weight {weight.shape} does not match input channels {c}")
    if bias is not None and bias.shape != (o,):
        raise ShapeMismatch(f"bias shape {bias.shape} != ({o},)")
    oh = (h - 1) * stride + k - 2 * padding
    ow = (w - 1) * stride + k - 2 * padding
    if oh < 1 or ow < 1:
        raise ShapeMismatch("transposed convolution output would be empty")
    w2 = weight.data.reshape(c, o * k * k)
    x2 = x.data.reshape(n, c, h * w)
    cols = np.matmul(w2.T, x2)
    out = kernels.col2im(cols, (n, o, oh, ow), k, stride, padding)
    if bias is not None:
        out += bias.data[None, :, None, None]
    parents = [x, weight] + ([bias] if bias is not None else [])

    def backward_fn(g):
        gcols = kernels.im2col(g, k, stride, padding)
        if weight.requires_grad:
            gw = np.matmul(x2, gcols.transpose(0, 2, 1)).sum(axis=0)
            weight._accumulate(gw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            x._accumulate(np.matmul(w2, gcols).reshape(x.shape))

    return _result(out, parents, backward_fn, "transposed_conv2d")


def pad_edge(x, pad):
    """Replicate the border cells ``pad`` times on each spatial side."""
    _require_4d(x, "input")
    if pad == 0:
        return x
    n, c, h, w = x.shape
    rows = np.clip(np.arange(-pad, h + pad), 0, h - 1)
    cols = np.clip(np.arange(-pad, w + pad), 0, w - 1)
    out = x.data[:, :, rows][:, :, :, cols]

    def backward_fn(g):
        # fold the replicated columns, then rows, back onto the border cells
        gc = g[:, :, :, pad : pad + w].copy()
        gc[..., 0] += g[..., :pad].sum(axis=-1)
        gc[..., -1] += g[..., pad + w :].sum(axis=-1)
        gx = gc[:, :, pad : pad + h].copy()
        gx[:, :, 0] += gc[:, :, :pad].sum(axis=2)
        gx[:, :, -1] += gc[:, :, pad + h :].sum(axis=2)
        x._accumulate(gx)

    return _result(out, [x], backward_fn, "pad_edge")


# ----------------------------------------------------------------- activations


def relu(x):
    on = x.data > 0
    # maximum propagates NaN where a masked select would hide it
    return _result(np.maximum(x.data, 0.0), [x], lambda g: x._accumulate(g * on), "relu")


def leaky_relu(x, alpha=0.2):
    slope = np.where(x.data > 0, 1.0, alpha)
    return _result(x.data * slope, [x], lambda g: x._accumulate(g * slope), "leaky_relu")


_SIG_LO = np.finfo(np.float64).tiny
_SIG_HI = 1.0 - np.finfo(np.float64).epsneg


def sigmoid(x):
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    # keep the gate strictly inside (0, 1) once float64 saturates
    s = np.clip(s, _SIG_LO, _SIG_HI)
    return _result(s, [x], lambda g: x._accumulate(g * s * (1.0 - s)), "sigmoid")


def activation(x, kind, alpha=0.2):
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind in (None, "identity", "linear"):
        return x
    raise ValueError(f"unknown activation {kind!r}")


# -------------------------------------------------------------------- pooling


def pool_stats(x, kind):
    """Channel-wise maps (n, 1, h, w) or global pools (n, c, 1, 1).

    Max reductions send the gradient to the first maximiser only.
    """
    _require_4d(x, "input")
    n, c, h, w = x.shape
    d = x.data
    if kind == "channel_mean_map":
        out = d.mean(axis=1, keepdims=True)
        return _result(out, [x], lambda g: x._accumulate(np.broadcast_to(g / c, d.shape)), kind)
    if kind == "global_avg":
        out = d.mean(axis=(2, 3), keepdims=True)
        return _result(
            out, [x], lambda g: x._accumulate(np.broadcast_to(g / (h * w), d.shape)), kind
        )
    if kind == "channel_max_map":
        idx = d.argmax(axis=1)[:, None]
        out = np.take_along_axis(d, idx, axis=1)

        def backward_fn(g):
            gx = np.zeros_like(d)
            np.put_along_axis(gx, idx, g, axis=1)
            x._accumulate(gx)

        return _result(out, [x], backward_fn, kind)
    if kind == "global_max":
        flat = d.reshape(n, c, h * w)
        idx = flat.argmax(axis=2)[..., None]
        out = np.take_along_axis(flat, idx, axis=2).reshape(n, c, 1, 1)

        def backward_fn(g):
            gx = np.zeros_like(flat)
            np.put_along_axis(gx, idx, g.reshape(n, c, 1), axis=2)
            x._accumulate(gx.reshape(d.shape))

        return _result(out, [x], backward_fn, kind)
    raise ValueError(f"unknown pooling kind {kind!r}")


# ---------------------------------------------------------- structural / pointwise


def concat_channels(inputs):
    inputs = list(inputs)
    if not inputs:
        raise ShapeMismatch("nothing to concatenate")
    for t in inputs:
        _require_4d(t, "input")
    n, _, h, w = inputs[0].shape
    for t in inputs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeMismatch(f"cannot concatenate {t.shape} with {inputs[0].shape}")
    if len(inputs) == 1:
        return inputs[0]
    out = np.concatenate([t.data for t in inputs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])

    def backward_fn(g):
        for t, lo, hi in zip(inputs, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accumulate(g[:, lo:hi])

    return _result(out, inputs, backward_fn, "concat")


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, [a, b], backward_fn, "add")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, [a, b], backward_fn, "mul")


def elementwise(a, b, kind):
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def neg(x):
    return _result(-x.data, [x], lambda g: x._accumulate(-g), "neg")


def repeat_batch(x, n):
    """Tile a batch-1 tensor to ``n`` samples; backward sums the copies."""
    _require_4d(x, "input")
    if x.shape[0] != 1:
        raise ShapeMismatch(f"repeat_batch expects a batch of 1, got {x.shape[0]}")
    if n == 1:
        return x
    out = np.repeat(x.data, n, axis=0)
    return _result(out, [x], lambda g: x._accumulate(g.sum(axis=0, keepdims=True)), "repeat")


def reshape(x, shape):
    old = x.shape
    return _result(x.data.reshape(shape), [x], lambda g: x._accumulate(g.reshape(old)), "reshape")


def tsum(x):
    return _result(
        np.asarray(x.data.sum()), [x], lambda g: x._accumulate(np.broadcast_to(g, x.shape)), "sum"
    )


def mean(x):
    n = x.size
    return _result(
        np.asarray(x.data.mean()),
        [x],
        lambda g: x._accumulate(np.broadcast_to(g / n, x.shape)),
        "mean",
    )


def reduce_loss(pred, target, kind):
    """Mean absolute (``l1``) or mean squared (``l2``) error as a scalar."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    if kind == "l1":
        value = np.abs(diff).mean()
        local = np.sign(diff) / n
    elif kind == "l2":
        value = (diff * diff).mean()
        local = 2.0 * diff / n
    else:
        raise ValueError(f"unknown loss kind {kind!r}")

    def backward_fn(g):
        if pred.requires_grad:
            pred._accumulate(g * local)
        if target.requires_grad:
            target._accumulate(-g * local)

    return _result(np.asarray(value), [pred, target], backward_fn, kind)


# ------------------------------------------------------------------- backward


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every tensor reachable from scalar ``loss``.

    The graph is consumed: calling this again on the same graph raises
    :class:`DoubleBackward`.
    """
    if loss.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    order = _topological(loss)
    if any(node._consumed for node in order):
        raise DoubleBackward("graph already consumed by a previous backward pass")
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward()
    for node in order:
        if not node.is_leaf:
            node._consumed = True
            node._backward = None
            node.grad = None
    loss._consumed = True


def grad_check(f, x, eps=1e-6, n_samples=64, seed=0, exclude_kinks=True, kink_rtol=0.1, resolve=None,
               details=False):
    """Maximum relative error between analytic and central-difference gradients.

    ``f`` maps ``x`` to a scalar Tensor. Up to ``n_samples`` coordinates of
    ``x`` are checked; relative error uses ``max(|a|, |n|, 1e-12)`` as
    denominator. With ``exclude_kinks`` a coordinate whose one-sided
    differences disagree by more than ``kink_rtol`` (a ReLU/abs/max kink
    within ``eps``) is skipped and another coordinate is drawn in its place.

    With ``resolve`` set, a coordinate is also skipped when the round-off
    in the central difference, about ``ulp(f) / eps``, exceeds ``resolve``
    times its derivative: there the comparison measures float64, not the
    gradient. ``details=True`` returns ``(worst, checked, skipped)``.
    """
    x.requires_grad = True
    x.grad = None
    loss = f(x)
    backward(loss)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None

    def value():
        return float(f(x).data)

    rng = np.random.default_rng(seed)
    candidates = rng.permutation(x.size)
    flat = x.data.reshape(-1)
    worst, used, skipped = 0.0, 0, 0
    for tried, idx in enumerate(candidates):
        if used >= n_samples or tried >= 10 * n_samples:
            break
        orig = flat[idx]
        flat[idx] = orig + eps
        fp = value()
        flat[idx] = orig - eps
        fm = value()
        flat[idx] = orig
        if exclude_kinks:
            f0 = value()
            fwd, bwd = (fp - f0) / eps, (f0 - fm) / eps
            if abs(fwd - bwd) > kink_rtol * max(abs(fwd), abs(bwd)) + 1e-7:
                continue
        numeric = (fp - fm) / (2 * eps)
        a = analytic.reshape(-1)[idx]
        if resolve is not None:
            noise = 2.0 * np.finfo(np.float64).eps * max(abs(fp), abs(fm)) / (2 * eps)
            if noise > resolve * max(abs(a), abs(numeric)):
                skipped += 1
                continue
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
        worst = max(worst, err)
        used += 1
    return (worst, used, skipped) if details else worst
