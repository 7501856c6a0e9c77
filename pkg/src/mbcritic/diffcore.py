"""Reverse-mode differentiation over a small set of array primitives.

Graphs are built from :class:`Expr` nodes with static shapes.  Backward passes
are themselves expression graphs, so a gradient can be differentiated again
(we need exactly that for differentiating through an inner policy update).

Typical use::

    x = inp("x", ())
    y = x ** 3
    (dy,) = grad(y, [x])
    (d2y,) = grad(dy, [x])
    evaluate(d2y, {"x": 2.0})   # 12.0

Graphs that are evaluated many times with different bindings should be
compiled once with :class:`Program`.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

MAX_NODES = 10**7

_ids = itertools.count()


class BindingError(KeyError):
    pass


class NumericError(FloatingPointError):
    def __init__(self, node: "Expr", msg: str = "non-finite value"):
        super().__init__(f"{msg} at node #{node.id} ({node.op})")
        self.node = node


class GraphSizeError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


def _asarray(v) -> np.ndarray:
    return np.asarray(v, dtype=np.float64)


class Expr:
    """A node in an expression graph.

    ``op`` names the primitive, ``args`` are operand nodes and ``attr`` holds
    static attributes (axis, index key, target shape, ...).  ``value`` is only
    populated for constants.
    """

    __slots__ = ("op", "args", "attr", "shape", "id", "value", "__weakref__")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, op, args=(), attr=None, shape=(), value=None):
        self.op = op
        self.args = tuple(args)
        self.attr = attr
        self.shape = tuple(shape)
        self.value = value
        self.id = next(_ids)

    def __repr__(self):
        if self.op == "input":
            return f"Expr(input {self.attr!r}, shape={self.shape})"
        return f"Expr({self.op}#{self.id}, shape={self.shape})"

    @property
    def ndim(self):
        return len(self.shape)

    @property
    def size(self):
        return int(np.prod(self.shape, dtype=np.int64))

    # arithmetic -----------------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        return powi(self, k)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None):
        return sum_(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return swap(self)


# ---------------------------------------------------------------------------
# numeric kernels, shared by graph evaluation and the plain-array code paths

def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _elu_prime(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def _step(x):
    return (x > 0).astype(np.float64)


def _sum_to(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and g.shape[i + lead] != 1
    )
    out = g.sum(axis=axes, keepdims=True) if axes else g
    return out.reshape(shape)


def _scatter(g, key, shape):
    out = np.zeros(shape)
    out[key] = g
    return out


KERNELS: dict[str, Callable] = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
    "neg": lambda a: -a,
    "powi": lambda a, k: a**k,
    "exp": np.exp,
    "log": np.log,
    "tanh": np.tanh,
    "sin": np.sin,
    "cos": np.cos,
    "elu": _elu,
    "elu_prime": _elu_prime,
    "relu": lambda a: np.maximum(a, 0.0),
    "step": _step,
    "clip": lambda a, lohi: np.clip(a, lohi[0], lohi[1]),
    "inside": lambda a, lohi: ((a > lohi[0]) & (a < lohi[1])).astype(np.float64),
    "sum": lambda a, axis: np.sum(a, axis=axis),
    "sum_to": _sum_to,
    "broadcast_to": lambda a, shape: np.broadcast_to(a, shape),
    "matmul": lambda a, b: a @ b,
    "swap": lambda a: np.swapaxes(a, -1, -2),
    "reshape": lambda a, shape: np.reshape(a, shape),
    "index": lambda a, key: a[key],
    "scatter": lambda a, ks: _scatter(a, ks[0], ks[1]),
    "concat": lambda *xs, axis: np.concatenate(xs, axis=axis),
    "stopgrad": lambda a: a,
}

_NO_GRAD = {"step", "inside"}
_NO_ATTR = {"add", "sub", "mul", "div", "neg", "exp", "log", "tanh", "sin", "cos", "elu",
            "elu_prime", "relu", "step", "matmul", "swap", "stopgrad"}


# ---------------------------------------------------------------------------
# construction

def inp(name: str, shape=()) -> Expr:
    """Free input, bound by name at evaluation time."""
    return Expr("input", (), name, shape)


def const(value) -> Expr:
    v = _asarray(value)
    return Expr("const", (), None, v.shape, v)


def _lift(x) -> Expr:
    return x if isinstance(x, Expr) else const(x)


def _is_const(x: Expr) -> bool:
    return x.op == "const"


def _is_scalar_const(x: Expr, c: float) -> bool:
    return x.op == "const" and x.value.shape == () and float(x.value) == c


def _node(op, args, attr=None, shape=()):
    """Build a node, folding it to a constant when every operand is constant."""
    if all(_is_const(a) for a in args):
        vals = [a.value for a in args]
        v = _call(op, vals, attr)
        return const(v)
    return Expr(op, args, attr, shape)


def _call(op, vals, attr):
    fn = KERNELS[op]
    if op == "concat":
        return fn(*vals, axis=attr)
    if op in _NO_ATTR:
        return fn(*vals)
    return fn(*vals, attr)


def _bshape(a: Expr, b: Expr):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from e


def add(a, b):
    if not isinstance(a, Expr) and not isinstance(b, Expr):
        return KERNELS["add"](a, b)
    a, b = _lift(a), _lift(b)
    shape = _bshape(a, b)
    if _is_scalar_const(a, 0.0) and b.shape == shape:
        return b
    if _is_scalar_const(b, 0.0) and a.shape == shape:
        return a
    return _node("add", (a, b), None, shape)


def sub(a, b):
    if not isinstance(a, Expr) and not isinstance(b, Expr):
        return KERNELS["sub"](a, b)
    a, b = _lift(a), _lift(b)
    shape = _bshape(a, b)
    if _is_scalar_const(b, 0.0) and a.shape == shape:
        return a
    return _node("sub", (a, b), None, shape)


def mul(a, b):
    if not isinstance(a, Expr) and not isinstance(b, Expr):
        return KERNELS["mul"](a, b)
    a, b = _lift(a), _lift(b)
    shape = _bshape(a, b)
    if _is_scalar_const(a, 1.0) and b.shape == shape:
        return b
    if _is_scalar_const(b, 1.0) and a.shape == shape:
        return a
    return _node("mul", (a, b), None, shape)


def div(a, b):
    if not isinstance(a, Expr) and not isinstance(b, Expr):
        return KERNELS["div"](a, b)
    a, b = _lift(a), _lift(b)
    return _node("div", (a, b), None, _bshape(a, b))


def _unary(op):
    kernel = KERNELS[op]

    def f(x):
        if not isinstance(x, Expr):
            return kernel(_asarray(x))
        return _node(op, (x,), None, x.shape)

    f.__name__ = op
    return f


neg = _unary("neg")
exp = _unary("exp")
log = _unary("log")
tanh = _unary("tanh")
sin = _unary("sin")
cos = _unary("cos")
elu = _unary("elu")
elu_prime = _unary("elu_prime")
relu = _unary("relu")
step = _unary("step")
stopgrad = _unary("stopgrad")


def powi(x, k: int):
    if int(k) != k:
        raise ValueError("only integer powers are supported")
    k = int(k)
    if not isinstance(x, Expr):
        return KERNELS["powi"](_asarray(x), k)
    if k == 1:
        return x
    if k == 0:
        return const(np.ones(x.shape))
    return _node("powi", (x,), k, x.shape)


def clip(x, lo: float, hi: float):
    if not isinstance(x, Expr):
        return KERNELS["clip"](_asarray(x), (lo, hi))
    return _node("clip", (x,), (float(lo), float(hi)), x.shape)


def _inside(x: Expr, lohi):
    return _node("inside", (x,), lohi, x.shape)


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(x, axis=None):
    if not isinstance(x, Expr):
        return np.sum(x, axis=axis)
    ax = _norm_axis(axis, x.ndim)
    if ax is None:
        shape = ()
    else:
        shape = tuple(n for i, n in enumerate(x.shape) if i not in ax)
    return _node("sum", (x,), ax, shape)


def sum_to(x: Expr, shape) -> Expr:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return _node("sum_to", (x,), shape, shape)


def broadcast_to(x: Expr, shape) -> Expr:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    if not isinstance(x, Expr):
        return np.broadcast_to(x, shape)
    np.broadcast_shapes(x.shape, shape)
    return _node("broadcast_to", (x,), shape, shape)


def reshape(x, shape) -> Expr:
    shape = tuple(shape)
    if not isinstance(x, Expr):
        return np.reshape(x, shape)
    if -1 in shape:
        known = int(np.prod([n for n in shape if n != -1]))
        shape = tuple(x.size // known if n == -1 else n for n in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    if shape == x.shape:
        return x
    return _node("reshape", (x,), shape, shape)


def swap(x) -> Expr:
    if not isinstance(x, Expr):
        return np.swapaxes(x, -1, -2)
    if x.ndim < 2:
        raise ShapeError("swap needs ndim >= 2")
    s = x.shape[:-2] + (x.shape[-1], x.shape[-2])
    return _node("swap", (x,), None, s)


def matmul(a, b):
    """numpy ``@`` semantics, including 1-D operands."""
    if not isinstance(a, Expr) and not isinstance(b, Expr):
        return a @ b
    a, b = _lift(a), _lift(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul of a scalar")
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1,) + a.shape), b), _drop(b.shape, -2))
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, b.shape + (1,))), a.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul mismatch {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise ShapeError(f"matmul batch mismatch {a.shape} @ {b.shape}") from e
    return _node("matmul", (a, b), None, batch + (a.shape[-2], b.shape[-1]))


def _drop(shape, i):
    s = list(shape)
    del s[i]
    return tuple(s)


def dot(a, b):
    return sum_(a * b)


def matvec(m, v):
    return matmul(m, v)


def _norm_key(key):
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not (k is Ellipsis or k is None or isinstance(k, (int, np.integer, slice))):
            raise TypeError(f"only basic indexing is supported, got {k!r}")
    return key


def index(x, key):
    if not isinstance(x, Expr):
        return x[key]
    key = _norm_key(key)
    shape = np.empty(x.shape, dtype=np.bool_)[key].shape
    return _node("index", (x,), key, shape)


def _scatter_node(g: Expr, key, shape) -> Expr:
    return _node("scatter", (g,), (key, tuple(shape)), shape)


def concat(xs: Sequence, axis: int = -1):
    if not any(isinstance(x, Expr) for x in xs):
        return np.concatenate([_asarray(x) for x in xs], axis=axis)
    xs = [_lift(x) for x in xs]
    nd = xs[0].ndim
    ax = axis % nd
    for x in xs:
        if x.ndim != nd or _drop(x.shape, ax) != _drop(xs[0].shape, ax):
            raise ShapeError(f"concat mismatch {[x.shape for x in xs]}")
    shape = list(xs[0].shape)
    shape[ax] = sum(x.shape[ax] for x in xs)
    return _node("concat", tuple(xs), ax, tuple(shape))


def stack(xs: Sequence, axis: int = -1):
    """Stack equal-shape operands along a new trailing axis."""
    if axis != -1:
        raise NotImplementedError("stack only supports axis=-1")
    if not any(isinstance(x, Expr) for x in xs):
        return np.stack([_asarray(x) for x in xs], axis=-1)
    xs = [_lift(x) for x in xs]
    return concat([reshape(x, x.shape + (1,)) for x in xs], axis=-1)


def zeros(shape) -> Expr:
    return const(np.zeros(tuple(shape)))


# ---------------------------------------------------------------------------
# graph traversal

def topo_order(outputs: Sequence[Expr], cap: int | None = None) -> list[Expr]:
    cap = MAX_NODES if cap is None else cap
    order: list[Expr] = []
    seen: set[int] = set()
    for root in outputs:
        if root.id in seen:
            continue
        stack_ = [(root, False)]
        while stack_:
            node, done = stack_.pop()
            if done:
                order.append(node)
                if len(order) > cap:
                    raise GraphSizeError(f"graph exceeds node cap of {cap}")
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack_.append((node, True))
            for a in reversed(node.args):
                if a.id not in seen:
                    stack_.append((a, False))
    return order


def inputs_of(expr: Expr | Sequence[Expr]) -> dict[str, Expr]:
    outs = [expr] if isinstance(expr, Expr) else list(expr)
    return {n.attr: n for n in topo_order(outs) if n.op == "input"}


# ---------------------------------------------------------------------------
# reverse mode

def _vjp(node: Expr, g: Expr) -> list[tuple[int, Expr]]:
    op, args = node.op, node.args
    if op == "add":
        a, b = args
        return [(0, sum_to(g, a.shape)), (1, sum_to(g, b.shape))]
    if op == "sub":
        a, b = args
        return [(0, sum_to(g, a.shape)), (1, sum_to(neg(g), b.shape))]
    if op == "mul":
        a, b = args
        return [(0, sum_to(g * b, a.shape)), (1, sum_to(g * a, b.shape))]
    if op == "div":
        a, b = args
        return [(0, sum_to(g / b, a.shape)), (1, sum_to(neg(g * node / b), b.shape))]
    if op == "neg":
        return [(0, neg(g))]
    if op == "powi":
        (x,), k = args, node.attr
        return [(0, g * (float(k) * powi(x, k - 1)))]
    if op == "exp":
        return [(0, g * node)]
    if op == "log":
        return [(0, g / args[0])]
    if op == "tanh":
        return [(0, g * (1.0 - node * node))]
    if op == "sin":
        return [(0, g * cos(args[0]))]
    if op == "cos":
        return [(0, neg(g * sin(args[0])))]
    if op == "elu":
        return [(0, g * elu_prime(args[0]))]
    if op == "elu_prime":
        return [(0, g * (node - step(args[0])))]
    if op == "relu":
        return [(0, g * step(args[0]))]
    if op == "clip":
        return [(0, g * _inside(args[0], node.attr))]
    if op == "sum":
        x = args[0]
        ax = node.attr
        if ax is None:
            kshape = (1,) * x.ndim
        else:
            kshape = tuple(1 if i in ax else n for i, n in enumerate(x.shape))
        return [(0, broadcast_to(reshape(g, kshape), x.shape))]
    if op == "sum_to":
        return [(0, broadcast_to(g, args[0].shape))]
    if op == "broadcast_to":
        return [(0, sum_to(g, args[0].shape))]
    if op == "matmul":
        a, b = args
        return [(0, sum_to(matmul(g, swap(b)), a.shape)),
                (1, sum_to(matmul(swap(a), g), b.shape))]
    if op == "swap":
        return [(0, swap(g))]
    if op == "reshape":
        return [(0, reshape(g, args[0].shape))]
    if op == "index":
        return [(0, _scatter_node(g, node.attr, args[0].shape))]
    if op == "scatter":
        return [(0, index(g, node.attr[0]))]
    if op == "concat":
        ax = node.attr
        out, lo = [], 0
        for i, a in enumerate(args):
            hi = lo + a.shape[ax]
            key = (slice(None),) * ax + (slice(lo, hi),)
            out.append((i, index(g, key)))
            lo = hi
        return out
    raise NotImplementedError(op)


def grad(y: Expr, wrt: Sequence[Expr]) -> list[Expr]:
    """Symbolic gradient of scalar ``y`` with respect to each node in ``wrt``.

    The returned expressions can be evaluated or differentiated again.
    Nodes ``y`` does not depend on get an exact zero.
    """
    if y.shape != ():
        raise ShapeError(f"grad needs a scalar output, got shape {y.shape}")
    order = topo_order([y])
    targets = {w.id for w in wrt}
    # forward reachability from wrt
    live: set[int] = set()
    for n in order:
        if n.id in targets or (
            n.op not in _NO_GRAD and n.op != "stopgrad" and any(a.id in live for a in n.args)
        ):
            live.add(n.id)
    adj: dict[int, Expr] = {}
    if y.id in live:
        adj[y.id] = const(1.0)
    for n in reversed(order):
        g = adj.get(n.id)
        if g is None or not n.args or n.op in _NO_GRAD or n.op == "stopgrad":
            continue
        for i, contrib in _vjp(n, g):
            a = n.args[i]
            if a.id not in live:
                continue
            prev = adj.get(a.id)
            adj[a.id] = contrib if prev is None else prev + contrib
    return [adj.get(w.id, zeros(w.shape)) for w in wrt]


# ---------------------------------------------------------------------------
# evaluation

class Program:
    """A compiled evaluation schedule for one or more output expressions."""

    def __init__(self, outputs: Sequence[Expr], cap: int | None = None,
                 check_finite: bool = True):
        self.outputs = list(outputs)
        self.order = topo_order(self.outputs, cap)
        slot = {n.id: i for i, n in enumerate(self.order)}
        self._plan = []
        for n in self.order:
            if n.op == "input":
                self._plan.append(("input", n.attr, n.shape, None, n))
            elif n.op == "const":
                self._plan.append(("const", n.value, None, None, n))
            else:
                self._plan.append((n.op, tuple(slot[a.id] for a in n.args), n.attr, KERNELS[n.op], n))
        self._out = [slot[o.id] for o in self.outputs]
        self.input_names = sorted({n.attr for n in self.order if n.op == "input"})
        self.check_finite = check_finite

    def __len__(self):
        return len(self.order)

    def __call__(self, bindings: Mapping[str, object]) -> list[np.ndarray]:
        # non-finite values are reported through NumericError, not numpy warnings
        with np.errstate(all="ignore"):
            vals = self._run(bindings)
        return [np.asarray(vals[j], dtype=np.float64) for j in self._out]

    def _run(self, bindings):
        vals: list = [None] * len(self._plan)
        check = self.check_finite
        isfinite = np.isfinite
        for i, (op, a, attr, fn, node) in enumerate(self._plan):
            if op == "input":
                if a not in bindings:
                    raise BindingError(f"unbound input {a!r}")
                v = _asarray(bindings[a])
                if v.shape != attr:
                    raise BindingError(f"input {a!r} expects shape {attr}, got {v.shape}")
            elif op == "const":
                v = a
            else:
                args = [vals[j] for j in a]
                if op == "concat":
                    v = fn(*args, axis=attr)
                elif op in _NO_ATTR:
                    v = fn(*args)
                else:
                    v = fn(*args, attr)
                if check and not isfinite(v).all():
                    raise NumericError(node)
            vals[i] = v
        return vals


def evaluate(expr: Expr, bindings: Mapping[str, object] | None = None):
    """Value of ``expr`` under ``bindings`` (a float for scalar outputs)."""
    (v,) = Program([expr])(bindings or {})
    return float(v) if v.shape == () else v


@dataclass
class GradVector:
    names: list[str]
    values: list[np.ndarray]

    def __getitem__(self, name):
        return self.values[self.names.index(name)]

    def __len__(self):
        return len(self.names)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.ravel(v) for v in self.values]) if self.values else np.zeros(0)


def _wrt_nodes(expr, wrt):
    table = inputs_of(expr)
    nodes = []
    for w in wrt:
        if isinstance(w, Expr):
            nodes.append(w)
        elif w in table:
            nodes.append(table[w])
        else:
            # not referenced: any placeholder gives an exact zero
            nodes.append(inp(w, ()))
    return nodes


def _names(nodes):
    return [n.attr if n.op == "input" else f"#{n.id}" for n in nodes]


def gradient(expr: Expr, wrt: Sequence, bindings: Mapping[str, object]) -> GradVector:
    """Numeric gradient of scalar ``expr`` with respect to named inputs."""
    nodes = _wrt_nodes(expr, wrt)
    gs = grad(expr, nodes)
    vals = Program(gs)(bindings)
    return GradVector(_names(nodes), vals)


def second_gradient(expr: Expr, outer: Sequence, inner: Sequence,
                    bindings: Mapping[str, object],
                    contraction: Callable[[list[Expr]], Expr] | None = None) -> GradVector:
    """Differentiate a scalar contraction of ``grad(expr, inner)`` w.r.t. ``outer``.

    The default contraction sums every entry of the inner gradient.
    """
    inner_nodes = _wrt_nodes(expr, inner)
    gi = grad(expr, inner_nodes)
    if contraction is None:
        z = const(0.0)
        for g in gi:
            z = z + sum_(g)
    else:
        z = contraction(gi)
    outer_nodes = _wrt_nodes(expr, outer)
    go = grad(z, outer_nodes)
    return GradVector(_names(outer_nodes), Program(go)(bindings))
