"""Define-by-run reverse-mode autodiff on numpy arrays.

Every backward rule is written in terms of Tensor operations, so with
``create_graph=True`` the gradients are themselves graph nodes and can be
differentiated again. That is all the meta-gradient needs: a loss evaluated
at ``w - lr * grad(w, phi)`` differentiated with respect to ``phi``.
"""
import contextlib
import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "ParamSet", "ShapeError", "no_grad", "enable_grad", "is_grad_enabled",
    "tensor", "backward", "virtual_sgd_step", "graph_nodes",
    "add", "mul", "matmul", "concat", "where_mask", "index_add",
    "relu", "sigmoid", "softmax", "log_softmax", "cross_entropy",
    "conv2d", "max_pool2d", "avg_pool2d", "global_avg_pool",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""

    def __init__(self, op, *shapes, detail=""):
        dims = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {dims}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = shapes


_state = {"grad": True}
_counter = itertools.count()


def is_grad_enabled():
    return _state["grad"]


@contextlib.contextmanager
def _grad_mode(flag):
    prev = _state["grad"]
    _state["grad"] = flag
    try:
        yield
    finally:
        _state["grad"] = prev


def no_grad():
    """Context manager: operations inside record nothing."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


class Tensor:
    """An n-d float array that may take part in a computation graph.

    Tensors are treated as immutable once created; ops always return new
    tensors and never write into ``data`` of an existing one.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_op", "_seq", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float64
        self.data = np.array(arr, dtype=dtype, copy=True)
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._seq = next(_counter)
        self.name = name

    # -- construction helpers --------------------------------------------

    @classmethod
    def _node(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data
        out._seq = next(_counter)
        out._op = op
        out.name = None
        if _state["grad"] and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    def _wrap(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # -- array-ish surface -----------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out._op = "leaf"
        out._seq = next(_counter)
        out.name = self.name
        return out

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operators -------------------------------------------------------

    def __add__(self, other):
        return add(self, self._wrap(other))

    def __radd__(self, other):
        return add(self._wrap(other), self)

    def __sub__(self, other):
        return sub(self, self._wrap(other))

    def __rsub__(self, other):
        return sub(self._wrap(other), self)

    def __mul__(self, other):
        return mul(self, self._wrap(other))

    def __rmul__(self, other):
        return mul(self._wrap(other), self)

    def __truediv__(self, other):
        return div(self, self._wrap(other))

    def __rtruediv__(self, other):
        return div(self._wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, self._wrap(other))

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return self.transpose()

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def max(self, axis=-1, keepdims=False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)

    def exp(self):
        return texp(self)

    def log(self):
        return tlog(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def softmax(self, axis=-1):
        return softmax(self, axis)

    def log_softmax(self, axis=-1):
        return log_softmax(self, axis)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _const(arr, like):
    return Tensor(np.asarray(arr, dtype=like.data.dtype))


# -- broadcasting helpers ------------------------------------------------

def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def sum_to(g, shape):
    """Reduce a broadcast gradient back to ``shape``."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and g.shape[i + lead] != 1
    )
    out = tsum(g, axes, keepdims=True) if axes else g
    return reshape(out, shape)


# -- elementwise ---------------------------------------------------------

def add(a, b):
    _broadcast_shape("add", a, b)

    def bw(g):
        return sum_to(g, a.shape), sum_to(g, b.shape)

    return Tensor._node(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    _broadcast_shape("sub", a, b)

    def bw(g):
        return sum_to(g, a.shape), sum_to(neg(g), b.shape)

    return Tensor._node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    _broadcast_shape("mul", a, b)

    def bw(g):
        ga = sum_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._node(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    _broadcast_shape("div", a, b)

    def bw(g):
        ga = sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return Tensor._node(a.data / b.data, (a, b), bw, "div")


def neg(a):
    return Tensor._node(-a.data, (a,), lambda g: (neg(g),), "neg")


def power(a, p):
    p = float(p)

    def bw(g):
        return (mul(g, mul(_const(p, a), power(a, p - 1.0))),)

    return Tensor._node(a.data ** p, (a,), bw, "pow")


def texp(a):
    data = np.exp(a.data)
    out = None

    def bw(g):
        return (mul(g, out),)

    out = Tensor._node(data, (a,), bw, "exp")
    return out


def tlog(a):
    return Tensor._node(np.log(a.data), (a,), lambda g: (div(g, a),), "log")


def where_mask(a, mask):
    """Multiply by a constant 0/1 mask (its derivative is the mask itself)."""
    m = _const(mask, a)
    return mul(a, m)


def relu(a):
    mask = (a.data > 0).astype(a.data.dtype)

    def bw(g):
        return (mul(g, _const(mask, a)),)

    return Tensor._node(a.data * mask, (a,), bw, "relu")


def sigmoid(a):
    data = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = None

    def bw(g):
        return (mul(g, mul(out, sub(_const(1.0, a), out))),)

    out = Tensor._node(data, (a,), bw, "sigmoid")
    return out


def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)
    out = None

    def bw(g):
        inner = tsum(mul(g, out), axis, keepdims=True)
        return (mul(out, sub(g, inner)),)

    out = Tensor._node(data, (a,), bw, "softmax")
    return out


def log_softmax(a, axis=-1):
    m = a.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True))
    out = None

    def bw(g):
        return (sub(g, mul(texp(out), tsum(g, axis, keepdims=True))),)

    out = Tensor._node(a.data - lse, (a,), bw, "log_softmax")
    return out


# -- reductions and shape ops --------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    def bw(g):
        if not keepdims:
            g = reshape(g, kept)
        return (broadcast_to(g, a.shape),)

    return Tensor._node(np.asarray(data), (a,), bw, "sum")


def tmean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axes, keepdims), _const(1.0 / count, a))


def tmax(a, axis=-1, keepdims=False):
    """Max along one axis; ties resolve to the lowest index."""
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    mask = np.zeros_like(a.data)
    np.put_along_axis(mask, np.expand_dims(idx, axis), 1.0, axis=axis)
    data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        data = np.squeeze(data, axis=axis)
    kept = tuple(1 if i == axis else s for i, s in enumerate(a.shape))

    def bw(g):
        if not keepdims:
            g = reshape(g, kept)
        return (mul(broadcast_to(g, a.shape), _const(mask, a)),)

    return Tensor._node(data, (a,), bw, "max")


def broadcast_to(a, shape):
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast", a.shape, shape) from None
    return Tensor._node(data, (a,), lambda g: (sum_to(g, a.shape),), "broadcast")


def reshape(a, shape):
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return Tensor._node(data, (a,), lambda g: (reshape(g, a.shape),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._node(a.data.transpose(axes), (a,), lambda g: (transpose(g, inv),), "transpose")


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="inner dimensions must agree")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = sum_to(matmul(g, _swap(b)), a.shape)
        if b.requires_grad:
            gb = sum_to(matmul(_swap(a), g), b.shape)
        return ga, gb

    return Tensor._node(data, (a, b), bw, "matmul")


def _swap(a):
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def concat(tensors, axis=0):
    tensors = list(tensors)
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref.shape)) if i != axis
        ):
            raise ShapeError("concat", ref.shape, t.shape, detail=f"axis={axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(lo), int(hi))
            out.append(getitem(g, tuple(sl)))
        return tuple(out)

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._node(data, tuple(tensors), bw, "concat")


def _has_array_index(idx):
    if not isinstance(idx, tuple):
        idx = (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in idx)


def getitem(a, idx):
    """Slicing / integer-array gathering."""
    try:
        data = a.data[idx]
    except IndexError as exc:
        raise ShapeError("slice", a.shape, detail=str(exc)) from None
    if not isinstance(data, np.ndarray):
        data = np.asarray(data)
    elif not _has_array_index(idx):
        data = data.copy()

    def bw(g):
        return (index_add(g, idx, a.shape),)

    return Tensor._node(data, (a,), bw, "slice")


def index_add(g, idx, shape):
    """Scatter ``g`` into zeros of ``shape`` at ``idx`` (adjoint of slicing)."""
    data = np.zeros(shape, dtype=g.data.dtype)
    if _has_array_index(idx):
        np.add.at(data, idx, g.data)
    else:
        data[idx] += g.data
    return Tensor._node(data, (g,), lambda h: (getitem(h, idx),), "index_add")


# -- losses --------------------------------------------------------------

def cross_entropy(logits, target):
    """Mean softmax cross-entropy.

    ``target`` is an int label array of shape [B] or a one-hot / soft
    label array of shape [B, c].
    """
    t = np.asarray(target.data if isinstance(target, Tensor) else target)
    if t.ndim == 1:
        if logits.ndim != 2 or t.shape[0] != logits.shape[0]:
            raise ShapeError("cross_entropy", logits.shape, t.shape)
        onehot = np.zeros(logits.shape, dtype=logits.data.dtype)
        onehot[np.arange(t.shape[0]), t.astype(np.int64)] = 1.0
    else:
        if t.shape != logits.shape:
            raise ShapeError("cross_entropy", logits.shape, t.shape)
        onehot = t.astype(logits.data.dtype)
    picked = tsum(mul(log_softmax(logits, axis=1), _const(onehot, logits)), axis=1)
    return neg(tmean(picked))


# -- convolution and pooling ---------------------------------------------

def _im2col_data(x, kh, kw, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    # rows: (n, oh, ow); cols: (c, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return cols, oh, ow


def _col2im_data(cols, xshape, kh, kw, stride, pad):
    n, c, h, w = xshape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    blocks = cols.reshape(n, oh, ow, c, kh, kw)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += (
                blocks[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


def im2col(x, kh, kw, stride=1, pad=0):
    cols, _, _ = _im2col_data(x.data, kh, kw, stride, pad)

    def bw(g):
        return (col2im(g, x.shape, kh, kw, stride, pad),)

    return Tensor._node(np.ascontiguousarray(cols), (x,), bw, "im2col")


def col2im(cols, xshape, kh, kw, stride=1, pad=0):
    data = _col2im_data(cols.data, xshape, kh, kw, stride, pad)

    def bw(g):
        return (im2col(g, kh, kw, stride, pad),)

    return Tensor._node(data, (cols,), bw, "col2im")


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """NCHW convolution (cross-correlation), weight shaped [F, C, kh, kw]."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape, detail="expected NCHW input and FCkk weight")
    f, c, kh, kw = weight.shape
    n, _, h, w = x.shape
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError("conv2d", x.shape, weight.shape, detail="kernel larger than padded input")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = im2col(x, kh, kw, stride, pad)
    out = matmul(cols, transpose(reshape(weight, (f, c * kh * kw))))
    if bias is not None:
        out = add(out, bias)
    return transpose(reshape(out, (n, oh, ow, f)), (0, 3, 1, 2))


def _pool_windows(x, k, op):
    if x.ndim != 4 or x.shape[2] % k or x.shape[3] % k:
        raise ShapeError(op, x.shape, detail=f"spatial dims must be divisible by {k}")
    n, c, h, w = x.shape
    t = reshape(x, (n, c, h // k, k, w // k, k))
    t = transpose(t, (0, 1, 2, 4, 3, 5))
    return reshape(t, (n, c, h // k, w // k, k * k))


def max_pool2d(x, k=2):
    return tmax(_pool_windows(x, k, "max_pool2d"), axis=-1)


def avg_pool2d(x, k=2):
    return tmean(_pool_windows(x, k, "avg_pool2d"), axis=-1)


def global_avg_pool(x):
    if x.ndim != 4:
        raise ShapeError("global_avg_pool", x.shape)
    return tmean(x, axis=(2, 3))


# -- graph traversal -----------------------------------------------------

def graph_nodes(root):
    """All grad-requiring nodes reachable from ``root`` in topological order.

    Creation order is a valid topological order (parents always exist
    before their children), so sorting by the creation counter suffices.
    """
    seen = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen[id(t)] = t
        stack.extend(t._parents)
    return sorted(seen.values(), key=lambda t: t._seq)


class ParamSet(dict):
    """Name -> Tensor mapping that always iterates in sorted name order."""

    def __iter__(self):
        return iter(sorted(dict.keys(self)))

    def keys(self):
        return list(iter(self))

    def values(self):
        return [self[k] for k in self]

    def items(self):
        return [(k, self[k]) for k in self]

    def copy(self):
        return ParamSet(dict.items(self))

    def numpy(self):
        return {k: v.data for k, v in self.items()}

    def detached(self, requires_grad=False):
        """Fresh leaves holding the same values."""
        return ParamSet({k: Tensor(v.data, requires_grad=requires_grad) for k, v in self.items()})


def backward(loss, wrt, create_graph=False, accumulate=None):
    """Gradients of a scalar ``loss`` with respect to each tensor in ``wrt``.

    Returns a ParamSet keyed like ``wrt``. Parameters the loss does not
    depend on get zero gradients. With ``create_graph`` the returned
    tensors are graph nodes that can themselves be differentiated.
    Nothing is stored on the tensors; pass a dict as ``accumulate`` to sum
    the result into it explicitly.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    wanted = {id(t): name for name, t in wrt.items()}
    found = {}
    with _grad_mode(bool(create_graph)):
        grads = {id(loss): Tensor(np.ones_like(loss.data))}
        for node in reversed(graph_nodes(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in wanted:
                found[id(node)] = g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else add(prev, pg)
    out = ParamSet()
    for name, t in wrt.items():
        g = found.get(id(t))
        if g is None:
            g = Tensor(np.zeros_like(t.data))
        elif g.shape != t.shape:
            g = sum_to(g, t.shape) if create_graph else Tensor(np.broadcast_to(g.data, t.shape))
        out[name] = g
    if accumulate is not None:
        for name, g in out.items():
            accumulate[name] = g if name not in accumulate else add(accumulate[name], g)
    return out


def virtual_sgd_step(params, grads, lr):
    """One differentiable SGD step ``w - lr * g`` for every named parameter."""
    if set(params.keys()) != set(grads.keys()):
        missing = sorted(set(params.keys()) ^ set(grads.keys()))
        raise KeyError(f"virtual_sgd_step: parameter/gradient keys differ: {missing}")
    if lr < 0:
        raise ValueError("virtual_sgd_step: lr must be non-negative")
    out = ParamSet()
    for name, w in params.items():
        g = grads[name]
        out[name] = sub(w, mul(g, _const(lr, w)))
    return out
