"""Dense tensors with define-by-run reverse-mode autodiff.

Every differentiable op appends a node to the active :class:`Tape`.  Nodes
are appended in creation order, so the tape is already topologically sorted
and :func:`backward` simply walks it in reverse.

Gradients of leaf tensors (parameters) accumulate into ``Tensor.grad``
across calls until :func:`zero_grad` is called.  Gradient accumulation over
micro-batches relies on this.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from slap.errors import DegenerateNormError, DimensionError, RankError, TapeError

NORM_EPS = 1e-12

_DTYPES = {"float64": np.float64, "float32": np.float32}


class _State(threading.local):
    def __init__(self):
        self.dtype = np.float64
        self.grad_enabled = True
        self.tape = Tape()


def set_default_dtype(name):
    """Switch new tensors to ``"float64"`` (default) or ``"float32"``."""
    if name not in _DTYPES:
        raise ValueError(f"unknown dtype {name!r}; expected one of {sorted(_DTYPES)}")
    _state.dtype = _DTYPES[name]


def get_default_dtype():
    return _state.dtype


def dtype_name(dtype=None):
    dtype = np.dtype(dtype or _state.dtype)
    return dtype.name


@contextlib.contextmanager
def default_dtype(name):
    prev = _state.dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _state.dtype = prev


def make_rng(seed, *stream):
    """Seeded PCG64 generator; ``stream`` ints select independent substreams."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, stream)]))


class _Node:
    __slots__ = ("parents", "backward")

    def __init__(self, parents, backward):
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    ``reset`` bumps the generation counter; tensors recorded under an older
    generation can no longer be differentiated through.
    """

    def __init__(self):
        self.nodes = []
        self.generation = 0

    def __len__(self):
        return len(self.nodes)

    def record(self, parents, backward):
        self.nodes.append(_Node(parents, backward))
        return len(self.nodes) - 1

    def reset(self):
        self.nodes = []
        self.generation += 1


_state = _State()


def active_tape():
    return _state.tape


@contextlib.contextmanager
def use_tape(tape=None):
    """Run a block against ``tape`` (a fresh one if omitted)."""
    tape = tape if tape is not None else Tape()
    prev = _state.tape
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = prev


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def is_grad_enabled():
    return _state.grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "_tape", "_gen", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _state.dtype)
        if arr.ndim and 0 in arr.shape:
            raise DimensionError(f"tensor shape must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad) and _state.grad_enabled
        self.grad = None
        self.name = name
        self._node = None
        self._tape = None
        self._gen = None

    # -- introspection -------------------------------------------------
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
    def tape_node(self):
        return self._node

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operators -----------------------------------------------------
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
        return scale(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None):
    return Tensor(np.array(data, dtype=_state.dtype), requires_grad=True, name=name)


def _make(data, parents, backward):
    """Wrap an op result, recording it on the tape when any parent needs grad."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._node = None
    out._tape = None
    out._gen = None
    needs = _state.grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        tape = _state.tape
        for p in parents:
            if p._node is not None and (p._tape is not tape or p._gen != tape.generation):
                raise TapeError("operand was recorded on a tape that has since been reset")
        out._node = tape.record(parents, backward)
        out._tape = tape
        out._gen = tape.generation
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise ------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), backward)


def scale(a, c):
    """Multiply by a python scalar constant."""
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def power(a, exponent):
    p = float(exponent)
    ad = a.data
    return _make(ad**p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def relu(a):
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0).astype(a.dtype, copy=False), (a,), lambda g: (g * mask,))


def clamp_min(a, lo):
    """``max(a, lo)``; gradient passes only where ``a > lo``."""
    mask = a.data > lo
    return _make(np.where(mask, a.data, lo).astype(a.dtype, copy=False), (a,), lambda g: (g * mask,))


def clip(a, lo, hi):
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


# -- shape / linear algebra ------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise RankError(f"matmul expects 2-D operands, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a):
    return _make(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


# -- reductions --------------------------------------------------------------

def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False):
    shape = a.shape
    return _make(
        np.asarray(a.data.sum(axis=axis, keepdims=keepdims)),
        (a,),
        lambda g: (_expand(g, shape, axis, keepdims).copy(),),
    )


def tmean(a, axis=None, keepdims=False):
    shape = a.shape
    n = a.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])
    return _make(
        np.asarray(a.data.mean(axis=axis, keepdims=keepdims)),
        (a,),
        lambda g: (_expand(g, shape, axis, keepdims) / n,),
    )


def l2_norm(a, keepdims=False):
    """Euclidean norm along the last axis."""
    out = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    ad = a.data

    def backward(g):
        gg = g if keepdims else g[..., None]
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(out > 0, ad / out, 0.0)
        return (gg * ratio,)

    return _make(out if keepdims else out[..., 0], (a,), backward)


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward)


def log_softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def backward(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward)


# -- composite ops -----------------------------------------------------------------

def stop_gradient(t):
    """Same values, no gradient path back to ``t``."""
    t = as_tensor(t)
    out = Tensor.__new__(Tensor)
    out.data = t.data
    out.requires_grad = False
    out.grad = None
    out.name = t.name
    out._node = None
    out._tape = None
    out._gen = None
    return out


def normalize_rows(a, *, strict=False, eps=NORM_EPS):
    """L2-normalize along the last axis.

    In strict mode a norm at or below ``eps`` raises; otherwise the norm is
    clamped to ``eps``.
    """
    norm = l2_norm(a, keepdims=True)
    if strict:
        if np.any(norm.data <= eps):
            raise DegenerateNormError(f"vector norm <= {eps:g} in strict mode")
    else:
        norm = clamp_min(norm, eps)
    return a / norm


def cosine_similarity(a, b, *, strict=False, eps=NORM_EPS):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"cosine: shapes {a.shape} and {b.shape} differ")
    if a.ndim not in (1, 2):
        raise RankError(f"cosine: expected 1-D or 2-D input, got shape {a.shape}")
    na = normalize_rows(a, strict=strict, eps=eps)
    nb = normalize_rows(b, strict=strict, eps=eps)
    return clip(tsum(na * nb, axis=-1), -1.0, 1.0)


def cosine_distance(a, b, *, strict=False, eps=NORM_EPS):
    """``1 - cos(a, b)`` along the last axis; scalar for vectors, per-row for matrices."""
    return 1.0 - cosine_similarity(a, b, strict=strict, eps=eps)


# -- backward ------------------------------------------------------------------

def backward(loss, tape=None):
    """Reverse-mode sweep from a scalar ``loss``.

    Leaf gradients are added into ``leaf.grad`` and also returned as a
    ``{leaf tensor: gradient array}`` map for this call only.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    out = {}
    if not loss.requires_grad:
        return out
    tape = tape or loss._tape
    if tape is None or loss._tape is not tape or loss._gen != tape.generation:
        raise TapeError("loss is not on the active tape (was the tape reset?)")
    nodes = tape.nodes
    grads = {loss._node: np.ones_like(loss.data)}
    for i in range(loss._node, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        node = nodes[i]
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node is not None:
                j = parent._node
                grads[j] = grads[j] + pg if j in grads else pg
            else:
                prev = out.get(parent)
                out[parent] = pg if prev is None else prev + pg
    for leaf, g in out.items():
        g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        out[leaf] = g
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return out


def zero_grad(params):
    for p in params:
        p.grad = None
