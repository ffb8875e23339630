"""A small reverse-mode autodiff library over float64 numpy arrays.

Operations executed while a :class:`Tape` is active are recorded on it;
:func:`backward` replays the tape in reverse. Outside a tape every
operation is a plain value computation.

    >>> w = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> backward(tape, loss)
    >>> w.grad
    array([6.])
"""

import threading

import numpy as np

from . import kernels
from .errors import ConfigurationError, ContractError, DimensionError

_state = threading.local()


def _stack(name):
    stack = getattr(_state, name, None)
    if stack is None:
        stack = []
        setattr(_state, name, stack)
    return stack


class Tape:
    """Ordered record of the operations executed inside ``with tape:``."""

    def __init__(self):
        self.nodes = []
        self.visits = 0

    def __enter__(self):
        _stack("tapes").append(self)
        return self

    def __exit__(self, *exc):
        _stack("tapes").pop()
        return False

    def __len__(self):
        return len(self.nodes)


def active_tape():
    stack = _stack("tapes")
    return stack[-1] if stack else None


class OpCounter:
    """Counts multiply-accumulates issued by matmul and convolution."""

    def __init__(self):
        self.macs = 0

    def __enter__(self):
        _stack("counters").append(self)
        return self

    def __exit__(self, *exc):
        _stack("counters").pop()
        return False


def _count(n):
    for counter in _stack("counters"):
        counter.macs += int(n)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "tape_id", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.tape_id = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x):
    return Tensor(x, requires_grad=False)


def parameter(x):
    return Tensor(x, requires_grad=True)


def make_node(data, parents, backward_fn):
    """Build an operation output; records it when a tape is active.

    ``backward_fn(grad_out)`` returns one gradient (or None) per parent.
    Exposed so callers can define custom operations.
    """
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out.tape_id = None
    out._parents = ()
    out._backward = None
    tape = active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.tape_id = len(tape.nodes)
        tape.nodes.append(out)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(tape, loss, params=None):
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Gradients are fresh for this call (not accumulated from earlier calls).
    Leaves in ``params`` that ``loss`` does not depend on get zero gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    for node in tape.nodes:
        node.grad = None
        for p in node._parents:
            p.grad = None
    for p in params or ():
        p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.data)
    tape.visits = 0
    for node in reversed(tape.nodes):
        if node.grad is None:
            continue
        tape.visits += 1
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            g = np.asarray(g, dtype=np.float64)
            if g.shape != parent.data.shape:
                g = _unbroadcast(g, parent.data.shape)
            if parent.grad is None:
                parent.grad = g.copy()
            else:
                parent.grad = parent.grad + g


# elementwise -------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return make_node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return make_node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return make_node(a.data / b.data, (a, b),
                     lambda g: (g / b.data, -g * a.data / (b.data * b.data)))


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    if p == 0.0:
        return make_node(np.ones_like(a.data), (a,), lambda g: (None,))
    return make_node(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return make_node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a):
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return make_node(s, (a,), lambda g: (g * s * (1.0 - s),))


def exp(a):
    a = as_tensor(a)
    e = np.exp(a.data)
    return make_node(e, (a,), lambda g: (g * e,))


def log(a):
    a = as_tensor(a)
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    r = np.sqrt(a.data)
    return make_node(r, (a,), lambda g: (g * 0.5 / r,))


def clip(a, lo=None, hi=None):
    """Clamp values; gradient is zero where the clamp is active."""
    a = as_tensor(a)
    lo_v = -np.inf if lo is None else lo
    hi_v = np.inf if hi is None else hi
    out = np.clip(a.data, lo_v, hi_v)
    mask = (a.data >= lo_v) & (a.data <= hi_v)
    return make_node(out, (a,), lambda g: (g * mask,))


# reductions and shape ----------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return make_node(out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return make_node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape):
    a = as_tensor(a)
    return make_node(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (g,))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def take_rows(a, idx):
    """Gather rows ``a[idx]``."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ContractError(f"row index out of bounds for {a.shape[0]} rows")

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return make_node(a.data[idx], (a,), bw)


def index_update(base, idx, values):
    """Copy of ``base`` with rows ``idx`` replaced by ``values``.

    Rows outside ``idx`` are copied bitwise.
    """
    base, values = as_tensor(base), as_tensor(values)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= base.shape[0]):
        raise ContractError(f"row index out of bounds for {base.shape[0]} rows")
    if len(np.unique(idx)) != len(idx):
        raise ContractError("index_update needs unique row indices")
    out = base.data.copy()
    out[idx] = values.data

    def bw(g):
        gb = g.copy()
        gb[idx] = 0.0
        return gb, g[idx]

    return make_node(out, (base, values), bw)


# linear algebra ----------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    _count(out.size * a.shape[-1])

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return make_node(out, (a, b), bw)


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_node(s, (a,), bw)


def grouped_conv2d(x, kernels_, groups=1):
    """Same-padded grouped 2-D convolution of a C x H x W map.

    ``kernels_`` has shape C_out x (C / groups) x kh x kw with odd kh, kw.
    """
    x, k = as_tensor(x), as_tensor(kernels_)
    if x.ndim != 3 or k.ndim != 4:
        raise DimensionError(f"grouped_conv2d expects CxHxW and 4-D kernels, got {x.shape}, {k.shape}")
    c = x.shape[0]
    c_out, c_g, kh, kw = k.shape
    if groups < 1 or c % groups or c_out % groups:
        raise ConfigurationError(f"channels {c} -> {c_out} not divisible by groups={groups}")
    if c_g != c // groups:
        raise ConfigurationError(f"kernel expects {c_g} input channels per group, input gives {c // groups}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError("same padding needs odd kernel sizes")
    out = kernels.conv2d_forward(x.data, k.data, groups)
    _count(c_out * c_g * kh * kw * x.shape[1] * x.shape[2])

    def bw(g):
        gx, gk = kernels.conv2d_backward(x.data, k.data, g, groups)
        return gx, gk

    return make_node(out, (x, k), bw)


def resize_matrix(n_in, n_out):
    """Row-stochastic 1-D bilinear interpolation matrix (align_corners=False).

    Source coordinates below zero are clamped to zero, as in the common
    deep-learning framework convention.
    """
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    return m


def bilinear_resize(x, out_h, out_w):
    x = as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ContractError(f"output size must be positive, got {out_h}x{out_w}")
    if x.ndim != 3:
        raise DimensionError(f"bilinear_resize expects CxHxW, got {x.shape}")
    _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return make_node(x.data.copy(), (x,), lambda g: (g,))
    rh = resize_matrix(h, out_h)
    rw = resize_matrix(w, out_w)
    out = np.einsum("oh,chw,pw->cop", rh, x.data, rw)
    return make_node(out, (x,), lambda g: (np.einsum("oh,cop,pw->chw", rh, g, rw),))


# gradient checking -------------------------------------------------------

def finite_difference_check(f, params, eps=1e-5, n_probes=20, rng=None, accept=None):
    """Max relative error between tape gradients and central differences.

    ``f`` is a zero-argument callable returning a scalar Tensor computed
    from ``params`` (read through their ``.data``). ``accept(k, flat_index)``
    may veto probe coordinates, e.g. near relu kinks.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    with Tape() as tape:
        loss = f()
    backward(tape, loss, params)
    analytic = [p.grad.copy() for p in params]

    candidates = [(k, i) for k, p in enumerate(params) for i in range(p.data.size)]
    if accept is not None:
        candidates = [c for c in candidates if accept(*c)]
    if not candidates:
        raise ContractError("no probe coordinates left after filtering")
    pick = rng.choice(len(candidates), size=min(n_probes, len(candidates)), replace=False)

    worst = 0.0
    for c in pick:
        k, i = candidates[c]
        flat = params[k].data.reshape(-1)
        saved = flat[i]
        flat[i] = saved + eps
        fp = f().item()
        flat[i] = saved - eps
        fm = f().item()
        flat[i] = saved
        numeric = (fp - fm) / (2.0 * eps)
        err = abs(analytic[k].reshape(-1)[i] - numeric) / max(1e-12, abs(numeric))
        worst = max(worst, err)
    return worst
