"""Reverse-mode automatic differentiation on numpy arrays.

A :class:`Tape` records every operation as a node in an append-only list, so
operands always precede results and the backward pass is a single reverse
sweep over the node list.  Values are numpy arrays (or python floats); all
arithmetic is double precision.

The functional API (``exp``, ``norm``, ``matmul``, ...) accepts either
:class:`Var` operands or plain arrays.  When no operand is attached to a
tape the computation runs directly on numpy and returns a plain array, so
model code written against this module serves both training (taped) and
inference (untaped) without duplication.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tape",
    "Var",
    "ParamStore",
    "grad_check",
    "add",
    "sub",
    "mul",
    "div",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "sin",
    "cos",
    "atan2",
    "clamp",
    "relu",
    "asum",
    "mean",
    "norm",
    "dot",
    "cross",
    "matmul",
    "quat_mul",
    "stack",
    "concat",
    "reshape",
    "transpose",
    "take",
    "where",
    "value_of",
]


class Node:
    """One recorded operation: kind, operand indices, cached value."""

    __slots__ = ("op", "parents", "value", "backward_fn")

    def __init__(self, op, parents, value, backward_fn):
        self.op = op
        self.parents = parents
        self.value = value
        self.backward_fn = backward_fn


class Tape:
    """Append-only operation log supporting one reverse sweep."""

    def __init__(self):
        self.nodes = []
        self.grads = None
        self._leaf_index = {}

    def _record(self, op, parents, value, backward_fn):
        self.nodes.append(Node(op, parents, value, backward_fn))
        return Var(self, len(self.nodes) - 1, value)

    def leaf(self, value, name=None):
        """Register an input value; named leaves can be queried after backward."""
        value = np.asarray(value, dtype=np.float64)
        var = self._record("leaf", (), value, None)
        if name is not None:
            if name in self._leaf_index:
                raise ValueError(f"duplicate leaf name {name!r}")
            self._leaf_index[name] = var.index
        return var

    def constant(self, value):
        value = np.asarray(value, dtype=np.float64)
        return self._record("const", (), value, None)

    def backward(self, output):
        """Accumulate adjoints of a scalar output for every node on the tape.

        Visits nodes in reverse insertion order exactly once.  Gradients of
        leaves that do not influence the output are zero.
        """
        if output.tape is not self:
            raise ValueError("output was recorded on a different tape")
        if np.ndim(output.value) != 0 and np.size(output.value) != 1:
            raise ValueError("backward requires a scalar output")
        nodes = self.nodes
        grads = [None] * len(nodes)
        grads[output.index] = np.ones_like(np.asarray(output.value, dtype=np.float64))
        for i in range(output.index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = nodes[i]
            if node.backward_fn is None:
                continue
            for p, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None:
                    continue
                if grads[p] is None:
                    grads[p] = pg
                else:
                    grads[p] = grads[p] + pg
        self.grads = grads

    def grad(self, var):
        """Adjoint of ``var`` from the latest backward pass (zeros if unused)."""
        if self.grads is None:
            raise RuntimeError("backward has not been run")
        g = self.grads[var.index]
        if g is None:
            return np.zeros_like(np.asarray(var.value, dtype=np.float64))
        return g

    def gradients(self):
        """Gradients of all named leaves, keyed by name."""
        if self.grads is None:
            raise RuntimeError("backward has not been run")
        out = {}
        for name, idx in self._leaf_index.items():
            g = self.grads[idx]
            if g is None:
                g = np.zeros_like(self.nodes[idx].value)
            out[name] = g
        return out


class Var:
    """Handle to a recorded value on a tape."""

    __slots__ = ("tape", "index", "value")

    # keep numpy from absorbing Var operands into object arrays
    __array_ufunc__ = None

    def __init__(self, tape, index, value):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Var(op={self.tape.nodes[self.index].op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only constant exponents are supported")
        return _power(self, float(p))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return _getitem(self, key)


def value_of(x):
    """Raw numpy value of a Var or passthrough for plain inputs."""
    return x.value if isinstance(x, Var) else x


def _tape_of(*args):
    for a in args:
        if isinstance(a, Var):
            return a.tape
        if isinstance(a, (list, tuple)):
            for b in a:
                if isinstance(b, Var):
                    return b.tape
    return None


def _lift(tape, x):
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("operands belong to different tapes")
        return x
    return tape.constant(x)


def _unbroadcast(grad, shape):
    """Sum a broadcasted gradient back down to ``shape``."""
    if getattr(grad, "shape", ()) == shape:
        return grad
    g = grad
    extra = np.ndim(g) - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and np.shape(g)[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(op, a, b, forward, backward):
    a_var = isinstance(a, Var)
    b_var = isinstance(b, Var)
    av = a.value if a_var else a
    bv = b.value if b_var else b
    out = forward(av, bv)
    if not (a_var or b_var):
        return out
    tape = a.tape if a_var else b.tape
    va = a if a_var else tape.constant(a)
    vb = b if b_var else tape.constant(b)
    if va.tape is not vb.tape:
        raise ValueError("operands belong to different tapes")
    ash = getattr(av, "shape", ())
    bsh = getattr(bv, "shape", ())

    def backward_fn(g):
        ga, gb = backward(g, av, bv, out)
        return (_unbroadcast(ga, ash) if ga is not None else None,
                _unbroadcast(gb, bsh) if gb is not None else None)

    return tape._record(op, (va.index, vb.index), out, backward_fn)


def _unary(op, a, forward, backward):
    if not isinstance(a, Var):
        return forward(a)
    av = a.value
    out = forward(av)

    def backward_fn(g):
        return (backward(g, av, out),)

    return a.tape._record(op, (a.index,), out, backward_fn)


# ---------------------------------------------------------------------------
# arithmetic

def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y, lambda g, x, y, o: (g, g))


def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y, lambda g, x, y, o: (g, -g))


def mul(a, b):
    return _binary("mul", a, b, lambda x, y: x * y, lambda g, x, y, o: (g * y, g * x))


def div(a, b):
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y, o: (g / y, -g * x / (y * y)))


def _power(a, p):
    return _unary("pow", a, lambda x: x ** p, lambda g, x, o: g * p * x ** (p - 1.0))


def exp(a):
    return _unary("exp", a, np.exp, lambda g, x, o: g * o)


def log(a):
    av = value_of(a)
    if np.any(np.asarray(av) <= 0.0):
        tape = _tape_of(a)
        at = f" (node {len(tape.nodes)})" if tape is not None else ""
        raise FloatingPointError(f"log of non-positive value{at}")
    return _unary("log", a, np.log, lambda g, x, o: g / x)


def sqrt(a):
    av = value_of(a)
    if np.any(np.asarray(av) < 0.0):
        tape = _tape_of(a)
        at = f" (node {len(tape.nodes)})" if tape is not None else ""
        raise FloatingPointError(f"sqrt of negative value{at}")
    # guarded at zero so masked-out branches cannot poison the sweep with NaN
    return _unary("sqrt", a, np.sqrt,
                  lambda g, x, o: g * 0.5 / np.maximum(o, 1e-300))


def tanh(a):
    return _unary("tanh", a, np.tanh, lambda g, x, o: g * (1.0 - o * o))


def sin(a):
    return _unary("sin", a, np.sin, lambda g, x, o: g * np.cos(x))


def cos(a):
    return _unary("cos", a, np.cos, lambda g, x, o: -g * np.sin(x))


def atan2(y, x):
    def backward(g, yv, xv, o):
        d = xv * xv + yv * yv
        return (g * xv / d, -g * yv / d)

    return _binary("atan2", y, x, np.arctan2, backward)


def clamp(a, lo=None, hi=None):
    """Clip to [lo, hi]; gradient passes through inside, zero outside."""

    def forward(x):
        return np.clip(x, lo, hi)

    def backward(g, x, o):
        mask = np.ones_like(np.asarray(x, dtype=np.float64))
        if lo is not None:
            mask = mask * (x >= lo)
        if hi is not None:
            mask = mask * (x <= hi)
        return g * mask

    return _unary("clamp", a, forward, backward)


def relu(a):
    def backward(g, x, o):
        return g * (x > 0.0)

    return _unary("relu", a, lambda x: np.maximum(x, 0.0), backward)


# ---------------------------------------------------------------------------
# reductions and vector ops

def asum(a, axis=None, keepdims=False):
    def forward(x):
        return np.sum(x, axis=axis, keepdims=keepdims)

    def backward(g, x, o):
        if axis is None:
            return np.broadcast_to(g, np.shape(x)).copy()
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return np.broadcast_to(gg, np.shape(x)).copy()

    return _unary("sum", a, forward, backward)


def mean(a, axis=None, keepdims=False):
    av = value_of(a)
    n = av.size if axis is None else np.shape(av)[axis]
    return asum(a, axis=axis, keepdims=keepdims) / float(n)


def norm(a, axis=-1, keepdims=False):
    """Euclidean norm along ``axis``; gradient is guarded at zero."""

    def forward(x):
        return np.sqrt(np.sum(x * x, axis=axis, keepdims=keepdims))

    def backward(g, x, o):
        nk = o if keepdims else np.expand_dims(o, axis)
        gk = g if keepdims else np.expand_dims(g, axis)
        return gk * x / np.maximum(nk, 1e-300)

    return _unary("norm", a, forward, backward)


def dot(a, b, axis=-1, keepdims=False):
    def forward(x, y):
        return np.sum(x * y, axis=axis, keepdims=keepdims)

    def backward(g, x, y, o):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * y, gk * x)

    return _binary("dot", a, b, forward, backward)


def cross(a, b):
    def backward(g, x, y, o):
        return (np.cross(y, g), np.cross(g, x))

    return _binary("cross", a, b, np.cross, backward)


def matmul(a, b):
    def backward(g, x, y, o):
        x = np.asarray(x)
        y = np.asarray(y)
        if x.ndim == 1 and y.ndim == 1:
            return (g * y, g * x)
        gm = np.asarray(g)
        if x.ndim == 1:
            gm = gm[..., None, :]
        if y.ndim == 1:
            gm = gm[..., :, None]
        xm = x[None, :] if x.ndim == 1 else x
        ym = y[:, None] if y.ndim == 1 else y
        ga = np.matmul(gm, np.swapaxes(ym, -1, -2))
        gb = np.matmul(np.swapaxes(xm, -1, -2), gm)
        if x.ndim == 1:
            ga = ga.reshape(ga.shape[:-2] + (ga.shape[-1],))
        if y.ndim == 1:
            gb = gb.reshape(gb.shape[:-1])
        return (ga, gb)

    return _binary("matmul", a, b, np.matmul, backward)


def _quat_mul_raw(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = aw * bw - ax * bx - ay * by - az * bz
    out[..., 1] = aw * bx + ax * bw + ay * bz - az * by
    out[..., 2] = aw * by - ax * bz + ay * bw + az * bx
    out[..., 3] = aw * bz + ax * by - ay * bx + az * bw
    return out


_QCONJ = np.array([1.0, -1.0, -1.0, -1.0])


def quat_mul(a, b):
    """Hamilton product on (..., 4) arrays, (w, x, y, z) component order."""

    def backward(g, x, y, o):
        return (_quat_mul_raw(g, y * _QCONJ), _quat_mul_raw(x * _QCONJ, g))

    return _binary("quat_mul", a, b, _quat_mul_raw, backward)


# ---------------------------------------------------------------------------
# structural ops

def stack(parts, axis=0):
    tape = _tape_of(parts)
    values = [value_of(p) for p in parts]
    out = np.stack(values, axis=axis)
    if tape is None:
        return out
    lifted = [_lift(tape, p) for p in parts]

    def backward_fn(g):
        return [np.take(g, i, axis=axis) for i in range(len(parts))]

    return tape._record("stack", tuple(v.index for v in lifted), out, backward_fn)


def concat(parts, axis=-1):
    tape = _tape_of(parts)
    values = [value_of(p) for p in parts]
    out = np.concatenate(values, axis=axis)
    if tape is None:
        return out
    lifted = [_lift(tape, p) for p in parts]
    sizes = [v.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return np.split(g, splits, axis=axis)

    return tape._record("concat", tuple(v.index for v in lifted), out, backward_fn)


def reshape(a, shape):
    def backward(g, x, o):
        return g.reshape(np.shape(x))

    return _unary("reshape", a, lambda x: np.reshape(x, shape), backward)


def transpose(a, axes):
    inv = np.argsort(axes)

    def backward(g, x, o):
        return np.transpose(g, inv)

    return _unary("transpose", a, lambda x: np.transpose(x, axes), backward)


def take(a, indices, axis=0):
    """Gather along ``axis`` with an integer index array."""
    indices = np.asarray(indices)

    def backward(g, x, o):
        gx = np.zeros_like(np.asarray(x, dtype=np.float64))
        np.add.at(gx, (slice(None),) * axis + (indices,), g)
        return gx

    return _unary("take", a, lambda x: np.take(x, indices, axis=axis), backward)


def _getitem(a, key):
    def backward(g, x, o):
        gx = np.zeros_like(np.asarray(x, dtype=np.float64))
        gx[key] = g
        return gx

    return _unary("getitem", a, lambda x: x[key], backward)


def where(cond, a, b):
    """Select by a boolean array; the condition itself is not differentiated."""
    cond = np.asarray(value_of(cond))

    def backward(g, x, y, o):
        return (np.where(cond, g, 0.0), np.where(cond, 0.0, g))

    return _binary("where", a, b, lambda x, y: np.where(cond, x, y), backward)


# ---------------------------------------------------------------------------
# parameters

class ParamStore:
    """Named flat collection of parameter arrays with an update counter."""

    def __init__(self):
        self._params = {}
        self.version = 0

    def register(self, name, value):
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        self._params[name] = np.array(value, dtype=np.float64)

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name):
        return self._params[name]

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def n_parameters(self):
        return int(sum(v.size for v in self._params.values()))

    def update(self, name, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._params[name].shape:
            raise ValueError(f"shape change for parameter {name!r}")
        self._params[name] = value
        self.version += 1

    def as_leaves(self, tape):
        """Register every parameter as a named leaf on ``tape``."""
        return {name: tape.leaf(value, name) for name, value in self._params.items()}

    def copy(self):
        out = ParamStore()
        for name, value in self._params.items():
            out.register(name, value.copy())
        return out


def grad_check(f, params, h=1e-5):
    """Max relative error of taped gradients against central differences.

    ``f`` maps a dict of parameter arrays (or Vars) to a scalar.  The
    analytic side runs once on a tape; the numeric side re-evaluates ``f``
    untaped at coordinate-wise perturbations of size ``h``.
    """
    tape = Tape()
    leaves = {k: tape.leaf(v, k) for k, v in params.items()}
    out = f(leaves)
    tape.backward(out)
    analytic = tape.gradients()

    worst = 0.0
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    for name, arr in work.items():
        flat = arr.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            fp = float(value_of(f(work)))
            flat[i] = keep - h
            fm = float(value_of(f(work)))
            flat[i] = keep
            num = (fp - fm) / (2.0 * h)
            rel = abs(ga[i] - num) / (abs(ga[i]) + 1e-8)
            if rel > worst:
                worst = rel
    return worst
