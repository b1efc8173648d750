"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

A :class:`Node` wraps a value and, for computed nodes, the parents it was
built from and a closure mapping the output gradient to parent gradients.
Leaves that require gradients (parameters, or inputs under test) receive
accumulated gradients in ``.grad`` when :func:`backward` is called on a
scalar loss.
"""

import numpy as np

from .errors import BadConfig, BadShape, DomainError, DuplicateParam

DTYPE = np.float64


class Node:
    __slots__ = ("value", "parents", "rule", "backward_fn", "requires_grad", "_grad", "name")

    def __init__(self, value, parents=(), rule="leaf", backward_fn=None,
                 requires_grad=False, name=None):
        self.value = value
        self.parents = parents
        self.rule = rule
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self._grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def grad(self):
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g):
        self._grad = g

    def zero_grad(self):
        self._grad = None

    def __repr__(self):
        label = self.name or self.rule
        return f"Node({label}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, _as_node(other))

    def __radd__(self, other):
        return add(_as_node(other), self)

    def __sub__(self, other):
        return sub(self, _as_node(other))

    def __rsub__(self, other):
        return sub(_as_node(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, _as_node(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)


def constant(x) -> Node:
    return Node(np.asarray(x, dtype=DTYPE), rule="const")


def variable(x, name=None) -> Node:
    """A leaf that collects gradients (used for inputs under test)."""
    return Node(np.array(x, dtype=DTYPE), rule="leaf", requires_grad=True, name=name)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value, parents, rule, backward_fn):
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Node(value, rule=rule)
    return Node(value, parents, rule, backward_fn, requires_grad=True)


# ---------------------------------------------------------------- parameters

class ParamStore:
    """Named parameters with their SGD momentum buffers."""

    def __init__(self):
        self.params = {}
        self.momentum = {}

    def __contains__(self, name):
        return name in self.params

    def __getitem__(self, name) -> Node:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def add(self, name, value) -> Node:
        if name in self.params:
            raise DuplicateParam(name)
        value = np.array(value, dtype=DTYPE)
        if value.ndim == 0 or any(d <= 0 for d in value.shape):
            raise BadShape(f"parameter {name!r} has shape {value.shape}")
        node = Node(value, rule="param", requires_grad=True, name=name)
        self.params[name] = node
        self.momentum[name] = np.zeros_like(value)
        return node

    def zero_grads(self):
        for node in self.params.values():
            node.zero_grad()

    def freeze(self):
        """Stop gradient collection; graphs through these params still carry input grads."""
        for node in self.params.values():
            node.requires_grad = False
            node.zero_grad()

    def snapshot(self) -> dict:
        return {k: v.value.copy() for k, v in self.params.items()}

    def load(self, values: dict, reset_momentum=True):
        if set(values) != set(self.params):
            raise BadShape("parameter names do not match the store")
        for k, v in values.items():
            v = np.asarray(v, dtype=DTYPE)
            if v.shape != self.params[k].value.shape:
                raise BadShape(f"{k}: {v.shape} != {self.params[k].value.shape}")
            self.params[k].value = v.copy()
            if reset_momentum:
                self.momentum[k] = np.zeros_like(v)

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, v in self.params.items():
            out.add(k, v.value)
        return out


def make_param(store: ParamStore, name, shape, init="zeros", rng=None) -> Node:
    """Register a parameter.

    ``init`` is ``"zeros"``, ``("uniform", a, b)`` or ``"kaiming"`` (normal
    with variance ``2 / fan_in``, fan-in = product of all but the first extent).
    """
    shape = tuple(int(s) for s in shape)
    if not shape or any(s <= 0 for s in shape):
        raise BadShape(f"parameter {name!r} has extents {shape}")
    if name in store:
        raise DuplicateParam(name)
    if init == "zeros":
        value = np.zeros(shape)
    elif isinstance(init, tuple) and init[0] == "uniform":
        value = rng.uniform(shape, init[1], init[2])
    elif init == "kaiming":
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
        value = rng.normal(shape) * np.sqrt(2.0 / fan_in)
    else:
        raise BadConfig(f"unknown init {init!r}")
    return store.add(name, value)


def sgd_step(store: ParamStore, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
    """v <- momentum * v + grad (+ wd * param); param <- param - lr * v; then zero grads."""
    if lr < 0:
        raise BadConfig(f"negative learning rate {lr}")
    for name, node in store.params.items():
        g = node.grad
        if weight_decay:
            g = g + weight_decay * node.value
        v = momentum * store.momentum[name] + g
        store.momentum[name] = v
        node.value = node.value - lr * v
    store.zero_grads()


# ------------------------------------------------------------------ backward

def backward(loss: Node):
    """Accumulate d(loss)/d(leaf) into every gradient-requiring leaf."""
    if loss.value.size != 1:
        raise BadShape(f"backward needs a scalar loss, got shape {loss.value.shape}")
    if not loss.requires_grad:
        return
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = node.grad + g
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -------------------------------------------------------------- arithmetic

def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_check(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise BadShape(f"cannot combine shapes {a.shape} and {b.shape}") from None


def add(a: Node, b: Node) -> Node:
    _broadcast_check(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b), "add",
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Node, b: Node) -> Node:
    _broadcast_check(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b), "sub",
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Node, b: Node) -> Node:
    _broadcast_check(a, b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), "mul",
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scalar_mul(a: Node, c: float) -> Node:
    c = float(c)
    return _make(a.value * c, (a,), "scalar_mul", lambda g: (g * c,))


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise BadShape(f"matmul of {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return _make(av @ bv, (a, b), "matmul", lambda g: (g @ bv.T, av.T @ g))


def concat(nodes, axis=0) -> Node:
    nodes = list(nodes)
    try:
        value = np.concatenate([n.value for n in nodes], axis=axis)
    except (ValueError, np.exceptions.AxisError) as exc:
        raise BadShape(str(exc)) from None
    bounds = np.cumsum([0] + [n.shape[axis] for n in nodes])

    def bw(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    return _make(value, tuple(nodes), "concat", bw)


def slice_(a: Node, axis, start, stop) -> Node:
    if not -a.value.ndim <= axis < a.value.ndim:
        raise BadShape(f"axis {axis} out of range for shape {a.shape}")
    n = a.shape[axis]
    if not (0 <= start < stop <= n):
        raise BadShape(f"slice [{start}:{stop}] out of range for extent {n}")
    idx = [slice(None)] * a.value.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        out[idx] = g
        return (out,)

    return _make(a.value[idx], (a,), "slice", bw)


def reshape(a: Node, shape) -> Node:
    try:
        value = a.value.reshape(shape)
    except ValueError as exc:
        raise BadShape(str(exc)) from None
    old = a.shape
    return _make(value, (a,), "reshape", lambda g: (g.reshape(old),))


def transpose(a: Node, axes) -> Node:
    inv = np.argsort(axes)
    return _make(a.value.transpose(axes), (a,), "transpose", lambda g: (g.transpose(inv),))


# -------------------------------------------------------------- reductions

def _check_axis(a, axis):
    if axis is None:
        return None
    if not -a.value.ndim <= axis < a.value.ndim:
        raise BadShape(f"axis {axis} out of range for shape {a.shape}")
    return axis % a.value.ndim


def sum_(a: Node, axis=None, keepdims=False) -> Node:
    axis = _check_axis(a, axis)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), "sum", bw)


def mean(a: Node, axis=None, keepdims=False) -> Node:
    axis = _check_axis(a, axis)
    n = a.value.size if axis is None else a.shape[axis]
    return scalar_mul(sum_(a, axis, keepdims), 1.0 / n)


def logsumexp(a: Node, axis=None, keepdims=False) -> Node:
    axis = _check_axis(a, axis)
    x = a.value
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = e / s
    value = out if keepdims else (out.reshape(()) if axis is None else np.squeeze(out, axis))

    def bw(g):
        if not keepdims:
            g = np.reshape(g, out.shape)
        return (g * soft,)

    return _make(value, (a,), "logsumexp", bw)


# ------------------------------------------------------------- convolution

def _im2col(x, kh, kw, stride, pad):
    """(N*Ho*Wo) x (kh*kw*C) patch matrix of an N x C x H x W array (channel fastest)."""
    n, c, h, w = x.shape
    xl = x.transpose(0, 2, 3, 1)
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        return xl.reshape(-1, c)
    if pad:
        xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
        xp[:, pad:pad + h, pad:pad + w] = xl
    else:
        xp = xl
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    blocks = [xp[:, i:i + span_h:stride, j:j + span_w:stride] for i in range(kh) for j in range(kw)]
    return np.concatenate(blocks, axis=-1).reshape(-1, kh * kw * c)


def conv2d(x: Node, w: Node, b: Node = None, stride=1, pad=0) -> Node:
    """Cross-correlation of N x C x H x W input with O x C x kh x kw weights, zero padded."""
    if x.value.ndim != 4 or w.value.ndim != 4:
        raise BadShape(f"conv2d expects 4-d input and weight, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if cw != c:
        raise BadShape(f"weight expects {cw} input channels, input has {c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise BadShape(f"kernel extents must be odd, got {kh}x{kw}")
    if b is not None and b.shape != (o,):
        raise BadShape(f"bias shape {b.shape} != ({o},)")
    s, p = int(stride), int(pad)
    if (h + 2 * p - kh) % s or (wd + 2 * p - kw) % s or h + 2 * p < kh or wd + 2 * p < kw:
        raise BadShape(f"non-integral output extent for {h}x{wd}, k={kh}x{kw}, s={s}, p={p}")
    ho = (h + 2 * p - kh) // s + 1
    wo = (wd + 2 * p - kw) // s + 1

    parents = (x, w) if b is None else (x, w, b)
    wmat = w.value.transpose(0, 2, 3, 1).reshape(o, kh * kw * c)
    pointwise = kh == 1 and kw == 1 and s == 1 and p == 0
    cols = _im2col(x.value, kh, kw, s, p)
    out = cols @ wmat.T
    if b is not None:
        out += b.value
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def bw(g):
        gx = gw = gb = None
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        if x.requires_grad:
            if pointwise:
                gx = (g2 @ wmat).reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
            elif s == 1 and p <= min(kh, kw) - 1 and kh == kw:
                # input gradient = correlation of the output gradient with the flipped kernel
                wflip = w.value[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, kh * kw * o)
                gcols = _im2col(g, kh, kw, 1, kh - 1 - p)
                gx = (gcols @ wflip.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
            else:
                dcols = (g2 @ wmat).reshape(n, ho, wo, kh, kw, c)
                gxp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += \
                            dcols[:, :, :, i, j, :].transpose(0, 3, 1, 2)
                gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gw) if b is None else (gx, gw, gb)

    return _make(out, parents, "conv2d", bw)


def avgpool2(a: Node) -> Node:
    n, c, h, w = a.shape
    if h % 2 or w % 2:
        raise BadShape(f"avgpool2 needs even extents, got {h}x{w}")
    value = a.value.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _make(value, (a,), "avgpool2", bw)


def nearest_upsample2(a: Node) -> Node:
    n, c, h, w = a.shape
    value = np.repeat(np.repeat(a.value, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(value, (a,), "nearest_upsample2", bw)


def resample(kind, a: Node) -> Node:
    if kind == "avgpool2":
        return avgpool2(a)
    if kind == "nearest_upsample2":
        return nearest_upsample2(a)
    raise BadConfig(f"unknown resample kind {kind!r}")


# ------------------------------------------------------------- activations

def relu(a: Node) -> Node:
    pos = a.value > 0
    return _make(np.where(pos, a.value, 0.0), (a,), "relu", lambda g: (g * pos,))


def leaky_relu(a: Node, slope=0.2) -> Node:
    pos = a.value > 0
    scale = np.where(pos, 1.0, slope)
    return _make(a.value * scale, (a,), "leaky_relu", lambda g: (g * scale,))


def tanh(a: Node) -> Node:
    t = np.tanh(a.value)
    return _make(t, (a,), "tanh", lambda g: (g * (1.0 - t * t),))


def sigmoid(a: Node) -> Node:
    s = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _make(s, (a,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def exp(a: Node) -> Node:
    e = np.exp(a.value)
    return _make(e, (a,), "exp", lambda g: (g * e,))


def log(a: Node) -> Node:
    if np.any(a.value <= 0):
        raise DomainError("log of a nonpositive value")
    x = a.value
    return _make(np.log(x), (a,), "log", lambda g: (g / x,))


def activation(kind, a: Node) -> Node:
    fns = {"relu": relu, "leaky_relu": leaky_relu, "tanh": tanh,
           "sigmoid": sigmoid, "exp": exp, "log": log}
    if kind not in fns:
        raise BadConfig(f"unknown activation {kind!r}")
    return fns[kind](a)


# ----------------------------------------------------------- channel softmax

def log_softmax_channels(logits: Node) -> Node:
    x = logits.value
    if x.ndim != 4 or x.shape[1] < 2:
        raise BadShape(f"expected N x C x H x W with C >= 2, got {x.shape}")
    m = x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(x - m).sum(axis=1, keepdims=True)) + m
    out = x - lse
    soft = np.exp(out)
    return _make(out, (logits,), "log_softmax_channels",
                 lambda g: (g - soft * g.sum(axis=1, keepdims=True),))


def softmax_channels(logits: Node) -> Node:
    x = logits.value
    if x.ndim != 4 or x.shape[1] < 2:
        raise BadShape(f"expected N x C x H x W with C >= 2, got {x.shape}")
    m = x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(x - m).sum(axis=1, keepdims=True)) + m
    s = np.exp(x - lse)
    return _make(s, (logits,), "softmax_channels",
                 lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),))


# ----------------------------------------------------------- linear algebra

def logabsdet(m: Node) -> Node:
    """ln|det M| of a square matrix (LU based); gradient is M^{-T}."""
    if m.value.ndim != 2 or m.shape[0] != m.shape[1]:
        raise BadShape(f"logabsdet needs a square matrix, got {m.shape}")
    sign, ld = np.linalg.slogdet(m.value)
    mv = m.value
    return _make(np.array(ld), (m,), "logabsdet", lambda g: (g * np.linalg.inv(mv).T,))


def arith(kind, a: Node, b: Node = None, **kw) -> Node:
    """Dispatch by name; ``kind`` is one of add, sub, mul, scalar_mul, matmul, concat, slice."""
    if kind == "add":
        return add(a, b)
    if kind == "sub":
        return sub(a, b)
    if kind == "mul":
        return mul(a, b)
    if kind == "scalar_mul":
        return scalar_mul(a, kw["c"])
    if kind == "matmul":
        return matmul(a, b)
    if kind == "concat":
        return concat([a, b], axis=kw.get("axis", 0))
    if kind == "slice":
        return slice_(a, kw["axis"], kw["start"], kw["stop"])
    raise BadConfig(f"unknown arith kind {kind!r}")


def reduce(kind, a: Node, axis=None) -> Node:
    if kind == "sum":
        return sum_(a, axis)
    if kind == "mean":
        return mean(a, axis)
    if kind == "logsumexp":
        return logsumexp(a, axis)
    raise BadConfig(f"unknown reduction {kind!r}")
