"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation that consumes a tensor with ``requires_grad=True`` records
its inputs and a backward rule on the output.  :func:`backward` linearises
the recorded graph into a :class:`Tape` (producers before consumers), walks
it in reverse and then discards it, so each forward pass owns one tape.

Broadcasting follows numpy's trailing-dimension alignment; gradients are
summed back onto the original shapes.
"""

import contextlib
import threading

import numpy as np

from .errors import ConfigError, ContractError, DomainError, OracleError, ParameterError, ShapeError, VocabError

DTYPE = np.float64

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

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
    def T(self):
        return transpose(self)

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (s, gs) in enumerate(zip(shape, g.shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op, a, b):
    if a.shape == b.shape:
        return a.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# tape and backward
# ---------------------------------------------------------------------------


class Tape:
    """Recorded operations reachable from ``root`` in execution order."""

    def __init__(self, root):
        order = []
        seen = {id(root)}
        stack = [(root, iter(root._parents))]
        while stack:
            node, parents = stack[-1]
            for p in parents:
                if p.requires_grad and id(p) not in seen:
                    seen.add(id(p))
                    stack.append((p, iter(p._parents)))
                    break
            else:
                stack.pop()
                order.append(node)
        self.nodes = order

    def __len__(self):
        return len(self.nodes)

    def run_backward(self, seed):
        self.nodes[-1].grad = seed
        for node in reversed(self.nodes):
            fn = node._backward
            if fn is None or node.grad is None:
                continue
            grads = fn(node.grad)
            for p, g in zip(node._parents, grads):
                if g is None or not p.requires_grad:
                    continue
                p.grad = g if p.grad is None else p.grad + g

    def discard(self):
        for node in self.nodes:
            node._parents = ()
            node._backward = None
        self.nodes = []


def backward(loss):
    """Populate ``grad`` on every tensor reachable from a scalar ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward called on a tensor that does not require grad")
    tape = Tape(loss)
    tape.run_backward(np.ones_like(loss.data))
    tape.discard()


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    """Hadamard product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), bw)


hadamard = mul


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _result(out, (a, b), bw)


def neg(x):
    return _result(-x.data, (x,), lambda g: (-g,))


def square(x):
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2.0 * xd * g,))


def log(x):
    xd = x.data
    if not np.all(xd > 0):
        raise DomainError("log of a non-positive value")
    return _result(np.log(xd), (x,), lambda g: (g / xd,))


def exp(x):
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def tanh(x):
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x):
    out = _sigmoid(x.data)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x):
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def dropout(x, p, rng):
    """Inverted dropout: zero each entry with probability ``p`` and rescale the rest by ``1/(1-p)``."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if p == 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


def clamp(x, lo, hi):
    """Clip into ``[lo, hi]``; gradient flows only where no clipping happened."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def masked_fill(x, mask, value):
    """Replace entries where ``mask`` is True by a constant."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    return _result(np.where(mask, value, x.data), (x,), lambda g: (np.where(mask, 0.0, g),))


def straight_through(soft, hard):
    """Forward the discrete values ``hard``; route their gradient to ``soft``."""
    hard = np.asarray(hard, dtype=DTYPE)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through: {soft.shape} vs {hard.shape}")
    return _result(hard, (soft,), lambda g: (g,))


def clip_grad(x, bound):
    """Identity forward; the gradient passed back to ``x`` is clipped to ``[-bound, bound]``."""
    if not bound > 0:
        raise ConfigError(f"clip_grad bound must be positive, got {bound}")
    return _result(x.data, (x,), lambda g: (np.clip(g, -bound, bound),))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(out, dtype=DTYPE), (x,), bw)


def mean(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    return sum(x, axis=axes, keepdims=keepdims) / float(count)


def transpose(x, axes=None):
    """Permute axes; default swaps the last two."""
    if axes is None:
        if x.ndim < 2:
            return x
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inv = tuple(sorted(range(len(axes)), key=axes.__getitem__))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x, shape):
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from None
    return _result(out, (x,), lambda g: (g.reshape(old),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _result(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=ax)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: incompatible shapes {[t.shape for t in tensors]}") from None
    ax = axis % out.ndim
    return _result(out, tuple(tensors), lambda g: tuple(np.moveaxis(g, ax, 0)))


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(x, idx):
    shape = x.shape
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(x.data[idx], (x,), bw)


def embedding_lookup(table, ids):
    """Gather rows of ``table`` (V x d) for an integer array of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise VocabError(f"token id out of range for vocabulary of size {table.shape[0]}")
    shape = table.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _result(table.data[ids], (table,), bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def _swap(a):
    return a.T if a.ndim == 2 else np.swapaxes(a, -1, -2)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions differ for {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g @ _swap(bd), ad.shape) if a.requires_grad else None,
            _unbroadcast(_swap(ad) @ g, bd.shape) if b.requires_grad else None,
        )

    return _result(out, (a, b), bw)


# ---------------------------------------------------------------------------
# normalisers
# ---------------------------------------------------------------------------


def softmax_temp(x, tau=1.0, axis=-1):
    """Softmax of ``x / tau`` along ``axis`` with max subtraction."""
    if not tau > 0:
        raise ParameterError(f"softmax temperature must be positive, got {tau}")
    z = x.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return ((out * (g - (g * out).sum(axis=axis, keepdims=True))) / tau,)

    return _result(out, (x,), bw)


def softmax(x, axis=-1):
    return softmax_temp(x, 1.0, axis=axis)


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    n = xd.shape[-1]

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        ggamma = _unbroadcast(g * xhat, gd.shape) if gamma.requires_grad else None
        gbeta = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, ggamma, gbeta

    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: affine parameters must have shape ({n},)")
    return _result(xhat * gd + beta.data, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# fused recurrent kernel
# ---------------------------------------------------------------------------


def lstm_sequence(x, W, b, mask=None, h0=None, c0=None):
    """Run a single-layer LSTM over ``x`` (B x L x d_in) and return all hidden states.

    ``W`` stacks input and recurrent weights, shape ``(d_in + d, 4d)``, gate
    order input, forget, cell candidate, output.  Where ``mask[b, l]`` is
    False the state is carried over unchanged, so trailing pads leave the
    last hidden state equal to the state at the true sequence length.
    """
    B, L, d_in = x.shape
    d = W.shape[1] // 4
    if W.shape != (d_in + d, 4 * d) or b.shape != (4 * d,):
        raise ShapeError(f"lstm: weight {W.shape} / bias {b.shape} do not fit input dim {d_in}")
    Wx, Wh = W.data[:d_in], W.data[d_in:]
    m = None if mask is None else np.asarray(mask, dtype=bool).reshape(B, L)
    h = np.zeros((B, d)) if h0 is None else h0.data
    c = np.zeros((B, d)) if c0 is None else c0.data
    xw = x.data @ Wx + b.data
    hs = np.empty((B, L, d))
    cache = []
    for t in range(L):
        z = xw[:, t] + h @ Wh
        sz = _sigmoid(z)
        ig, fg, og = sz[:, :d], sz[:, d : 2 * d], sz[:, 3 * d :]
        gg = np.tanh(z[:, 2 * d : 3 * d])
        c_new = fg * c + ig * gg
        tc = np.tanh(c_new)
        h_new = og * tc
        keep = None
        if m is not None:
            keep = m[:, t : t + 1]
            h_new = np.where(keep, h_new, h)
            c_new = np.where(keep, c_new, c)
        cache.append((h, c, ig, fg, gg, og, tc, keep))
        hs[:, t] = h_new
        h, c = h_new, c_new

    def bw(G):
        dh_next = np.zeros((B, d))
        dc_next = np.zeros((B, d))
        dWh = np.zeros_like(Wh)
        dz_all = np.empty((B, L, 4 * d))
        for t in range(L - 1, -1, -1):
            h_prev, c_prev, ig, fg, gg, og, tc, keep = cache[t]
            dh = G[:, t] + dh_next
            dc = dc_next
            if keep is None:
                dhc, dcc = dh, dc
            else:
                dhc = np.where(keep, dh, 0.0)
                dcc = np.where(keep, dc, 0.0)
            do = dhc * tc
            dcc = dcc + dhc * og * (1.0 - tc * tc)
            di = dcc * gg
            dg = dcc * ig
            df = dcc * c_prev
            dz = np.concatenate(
                [di * ig * (1.0 - ig), df * fg * (1.0 - fg), dg * (1.0 - gg * gg), do * og * (1.0 - og)],
                axis=1,
            )
            dz_all[:, t] = dz
            dWh += h_prev.T @ dz
            dh_next = dz @ Wh.T
            dc_next = dcc * fg
            if keep is not None:
                dh_next = dh_next + np.where(keep, 0.0, dh)
                dc_next = dc_next + np.where(keep, 0.0, dc)
        flat = dz_all.reshape(B * L, 4 * d)
        dWx = x.data.reshape(B * L, d_in).T @ flat
        grads = [dz_all @ Wx.T, np.concatenate([dWx, dWh], axis=0), flat.sum(axis=0)]
        if h0 is not None:
            grads.append(dh_next)
        if c0 is not None:
            grads.append(dc_next)
        return tuple(grads)

    parents = (x, W, b) + tuple(t for t in (h0, c0) if t is not None)
    return _result(hs, parents, bw)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def grad_check(f, inputs, step=1e-3, max_coords=None, seed=0):
    """Compare analytic gradients of scalar ``f(*inputs)`` with central differences.

    Returns the maximum over checked coordinates of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.  With
    ``max_coords`` only a seeded random subset of each input's coordinates
    is perturbed (every input still contributes).
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
        if not t.data.flags.c_contiguous or not t.data.flags.writeable:
            t.data = np.ascontiguousarray(t.data).copy()
    out = f(*inputs)
    if out.data.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
    backward(out)
    analytic = [np.zeros(t.shape) if t.grad is None else np.array(t.grad, dtype=DTYPE) for t in inputs]
    for t in inputs:
        t.grad = None
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            a = a.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in coords:
                orig = flat[i]
                flat[i] = orig + step
                fp = float(f(*inputs).data.reshape(-1)[0])
                flat[i] = orig - step
                fm = float(f(*inputs).data.reshape(-1)[0])
                flat[i] = orig
                num = (fp - fm) / (2.0 * step)
                if not np.isfinite(num):
                    raise OracleError(f"non-finite numeric derivative at coordinate {i}")
                err = abs(a[i] - num) / max(1.0, abs(a[i]), abs(num))
                worst = max(worst, err)
    return worst
