"""Reverse-mode automatic differentiation over dense float64 tensors.

The graph is taped dynamically: every operation on a ``Var`` whose inputs
require gradients records its inputs and enough context to run backward.
Backward passes are themselves expressed with these same operations, so
``gradients(..., create_graph=True)`` returns values that can be
differentiated again. That closure under differentiation is what lets the
outer meta-update see through the inner adaptation steps.

Raw array work is delegated to ``leo.backend`` (compiled or numpy kernels).
NaN is propagated, never clamped; callers detect and abort.
"""

import contextlib

import numpy as np

from . import backend as K


class ShapeMismatchError(ValueError):
    """Operand shapes cannot be combined by this operation."""


class InvalidAxisError(ValueError):
    """Axis or slice bounds do not fit the operand's shape."""


class NonScalarTargetError(ValueError):
    """gradients() requires a single-element target."""


class UnreachableSourceError(ValueError):
    """A differentiation source does not feed into the target."""


class LabelRangeError(ValueError):
    """A class label lies outside [0, N)."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Suspend graph recording; operations inside produce constants."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(x):
    a = np.asarray(x, dtype=np.float64)
    if not a.flags.c_contiguous:
        # ascontiguousarray would promote 0-d to 1-d, so only call when needed
        a = np.ascontiguousarray(a)
    return a


class Var:
    """A tensor bound into the differentiation graph.

    ``data`` is treated as immutable once wrapped; all code here follows a
    copy-on-write discipline.
    """

    __slots__ = ("data", "requires_grad", "op", "inputs", "ctx")

    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.op = None
        self.inputs = ()
        self.ctx = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise NonScalarTargetError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self):
        """Same values, no graph history (stop-gradient)."""
        return Var(self.data)

    def __repr__(self):
        tag = self.op or ("var" if self.requires_grad else "const")
        return "Var(%s, shape=%s)" % (tag, self.data.shape)

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


def variable(data):
    return Var(data, requires_grad=True)


def constant(data):
    return Var(data)


def _wrap(x):
    return x if isinstance(x, Var) else Var(x)


def _node(op, data, inputs, ctx=None):
    out = Var.__new__(Var)
    out.data = data
    if _grad_enabled and any(v.requires_grad for v in inputs):
        out.requires_grad = True
        out.op = op
        out.inputs = tuple(inputs)
        out.ctx = ctx
    else:
        out.requires_grad = False
        out.op = None
        out.inputs = ()
        out.ctx = None
    return out


def _broadcast_shape(s1, s2):
    out = []
    for i in range(1, max(len(s1), len(s2)) + 1):
        a = s1[-i] if i <= len(s1) else 1
        b = s2[-i] if i <= len(s2) else 1
        if a == b or a == 1 or b == 1:
            out.append(max(a, b))
        else:
            raise ShapeMismatchError(
                "cannot broadcast shapes %s and %s" % (s1, s2)
            )
    return tuple(reversed(out))


_BACKWARD = {}


def _rule(name):
    def deco(fn):
        _BACKWARD[name] = fn
        return fn

    return deco


# ---------------------------------------------------------------------------
# primitive operations


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a.shape, b.shape)
    return _node("add", K.add(a.data, b.data), (a, b))


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a.shape, b.shape)
    return _node("sub", K.sub(a.data, b.data), (a, b))


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a.shape, b.shape)
    return _node("mul", K.mul(a.data, b.data), (a, b))


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a.shape, b.shape)
    return _node("div", K.div(a.data, b.data), (a, b))


def neg(a):
    a = _wrap(a)
    return _node("neg", K.neg(a.data), (a,))


def exp(a):
    a = _wrap(a)
    return _node("exp", K.exp(a.data), (a,))


def log(a):
    a = _wrap(a)
    return _node("log", K.log(a.data), (a,))


def relu(a):
    a = _wrap(a)
    return _node("relu", K.relu(a.data), (a,))


def square(a):
    a = _wrap(a)
    return _node("square", K.square(a.data), (a,))


def sqrt(a):
    a = _wrap(a)
    return _node("sqrt", K.sqrt(a.data), (a,))


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatchError("matmul expects rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            "matmul inner extents disagree: %s vs %s" % (a.shape, b.shape)
        )
    return _node("matmul", K.matmul(a.data, b.data), (a, b))


def transpose(a):
    a = _wrap(a)
    if a.data.ndim != 2:
        raise ShapeMismatchError("transpose expects a rank-2 operand")
    return _node("transpose", K.transpose(a.data), (a,))


def reshape(a, shape):
    a = _wrap(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeMismatchError(
            "cannot reshape %s into %s" % (a.shape, shape)
        )
    return _node("reshape", a.data.reshape(shape), (a,), ctx=a.shape)


def broadcast_to(a, shape):
    a = _wrap(a)
    shape = tuple(int(s) for s in shape)
    if _broadcast_shape(a.shape, shape) != shape:
        raise ShapeMismatchError(
            "cannot broadcast %s to %s" % (a.shape, shape)
        )
    return _node("broadcast", K.broadcast_to(a.data, shape), (a,), ctx=a.shape)


def _normalize_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    result = []
    for ax in axes:
        ax = int(ax)
        if ax < 0:
            ax += ndim
        if not 0 <= ax < ndim:
            raise InvalidAxisError("axis %d invalid for rank %d" % (ax, ndim))
        result.append(ax)
    if len(set(result)) != len(result):
        raise InvalidAxisError("duplicate axes in %r" % (axes,))
    return tuple(sorted(result))


def reduce_sum(a, axes=None):
    a = _wrap(a)
    norm = _normalize_axes(axes, a.data.ndim)
    if not norm:
        return a
    data = K.reduce_sum(a.data, norm)
    return _node("reduce_sum", data, (a,), ctx=(a.shape, norm))


def reduce_mean(a, axes=None):
    a = _wrap(a)
    norm = _normalize_axes(axes, a.data.ndim)
    count = 1
    for ax in norm:
        count *= a.shape[ax]
    return div(reduce_sum(a, norm), constant(float(count)))


def concat(parts, axis=0):
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise ShapeMismatchError("concat of zero tensors")
    ndim = parts[0].data.ndim
    axis = int(axis)
    if axis < 0:
        axis += ndim
    if not 0 <= axis < ndim:
        raise InvalidAxisError("concat axis %d invalid for rank %d" % (axis, ndim))
    base = list(parts[0].shape)
    for p in parts[1:]:
        if p.data.ndim != ndim:
            raise ShapeMismatchError("concat rank mismatch")
        other = list(p.shape)
        if other[:axis] != base[:axis] or other[axis + 1 :] != base[axis + 1 :]:
            raise ShapeMismatchError("concat extents disagree off the axis")
    data = np.ascontiguousarray(
        np.concatenate([p.data for p in parts], axis=axis)
    )
    sizes = tuple(p.shape[axis] for p in parts)
    return _node("concat", data, tuple(parts), ctx=(axis, sizes))


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    a = _wrap(a)
    ndim = a.data.ndim
    axis = int(axis)
    if axis < 0:
        axis += ndim
    if not 0 <= axis < ndim:
        raise InvalidAxisError("narrow axis %d invalid for rank %d" % (axis, ndim))
    start, length = int(start), int(length)
    if start < 0 or length < 0 or start + length > a.shape[axis]:
        raise InvalidAxisError(
            "narrow range [%d,%d) exceeds extent %d"
            % (start, start + length, a.shape[axis])
        )
    index = tuple(
        slice(start, start + length) if d == axis else slice(None)
        for d in range(ndim)
    )
    data = np.ascontiguousarray(a.data[index])
    return _node("narrow", data, (a,), ctx=(axis, start, length, a.shape[axis]))


# ---------------------------------------------------------------------------
# backward rules; each returns one gradient Var (or None) per input


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = len(g.shape) - len(shape)
    axes = list(range(extra))
    for i, ext in enumerate(shape):
        if ext == 1 and g.shape[extra + i] != 1:
            axes.append(extra + i)
    if axes:
        g = reduce_sum(g, tuple(axes))
    if g.shape != shape:
        g = reshape(g, shape)
    return g


@_rule("add")
def _add_bwd(node, g, wants):
    a, b = node.inputs
    ga = _unbroadcast(g, a.shape) if wants[0] else None
    gb = _unbroadcast(g, b.shape) if wants[1] else None
    return ga, gb


@_rule("sub")
def _sub_bwd(node, g, wants):
    a, b = node.inputs
    ga = _unbroadcast(g, a.shape) if wants[0] else None
    gb = _unbroadcast(neg(g), b.shape) if wants[1] else None
    return ga, gb


@_rule("mul")
def _mul_bwd(node, g, wants):
    a, b = node.inputs
    ga = _unbroadcast(mul(g, b), a.shape) if wants[0] else None
    gb = _unbroadcast(mul(g, a), b.shape) if wants[1] else None
    return ga, gb


@_rule("div")
def _div_bwd(node, g, wants):
    a, b = node.inputs
    ga = _unbroadcast(div(g, b), a.shape) if wants[0] else None
    gb = None
    if wants[1]:
        gb = _unbroadcast(neg(div(mul(g, node), b)), b.shape)
    return ga, gb


@_rule("neg")
def _neg_bwd(node, g, wants):
    return (neg(g),)


@_rule("exp")
def _exp_bwd(node, g, wants):
    return (mul(g, node),)


@_rule("log")
def _log_bwd(node, g, wants):
    return (div(g, node.inputs[0]),)


@_rule("relu")
def _relu_bwd(node, g, wants):
    mask = constant((node.inputs[0].data > 0.0).astype(np.float64))
    return (mul(g, mask),)


@_rule("square")
def _square_bwd(node, g, wants):
    a = node.inputs[0]
    return (mul(mul(g, a), constant(2.0)),)


@_rule("sqrt")
def _sqrt_bwd(node, g, wants):
    return (div(g, mul(node, constant(2.0))),)


@_rule("matmul")
def _matmul_bwd(node, g, wants):
    a, b = node.inputs
    ga = matmul(g, transpose(b)) if wants[0] else None
    gb = matmul(transpose(a), g) if wants[1] else None
    return ga, gb


@_rule("transpose")
def _transpose_bwd(node, g, wants):
    return (transpose(g),)


@_rule("reshape")
def _reshape_bwd(node, g, wants):
    return (reshape(g, node.ctx),)


@_rule("broadcast")
def _broadcast_bwd(node, g, wants):
    return (_unbroadcast(g, node.ctx),)


@_rule("reduce_sum")
def _reduce_sum_bwd(node, g, wants):
    shape, axes = node.ctx
    keep = list(shape)
    for ax in axes:
        keep[ax] = 1
    return (broadcast_to(reshape(g, keep), shape),)


@_rule("concat")
def _concat_bwd(node, g, wants):
    axis, sizes = node.ctx
    grads = []
    offset = 0
    for want, size in zip(wants, sizes):
        grads.append(narrow(g, axis, offset, size) if want else None)
        offset += size
    return tuple(grads)


@_rule("narrow")
def _narrow_bwd(node, g, wants):
    axis, start, length, extent = node.ctx
    pieces = []
    if start > 0:
        before = list(g.shape)
        before[axis] = start
        pieces.append(constant(np.zeros(before)))
    pieces.append(g)
    if start + length < extent:
        after = list(g.shape)
        after[axis] = extent - start - length
        pieces.append(constant(np.zeros(after)))
    return (concat(pieces, axis) if len(pieces) > 1 else g,)


# ---------------------------------------------------------------------------
# composites


def softmax_cross_entropy(logits, labels):
    """Sum over the batch of -logit_y + log(sum_j exp logit_j).

    ``labels`` are integer class indices, treated as constants. Stabilized
    by per-row max subtraction, which cancels exactly in the result.
    """
    logits = _wrap(logits)
    if logits.data.ndim != 2:
        raise ShapeMismatchError("logits must be [batch, classes]")
    batch, n_classes = logits.shape
    idx = np.asarray(labels)
    if idx.ndim != 1 or idx.shape[0] != batch:
        raise ShapeMismatchError("labels must be one index per row")
    idx = idx.astype(np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= n_classes):
        raise LabelRangeError(
            "labels must lie in [0, %d)" % n_classes
        )
    onehot = np.zeros((batch, n_classes))
    onehot[np.arange(batch), idx] = 1.0
    row_max = constant(logits.data.max(axis=1, keepdims=True))
    shifted = sub(logits, row_max)
    lse = log(reduce_sum(exp(shifted), (1,)))
    picked = reduce_sum(mul(shifted, constant(onehot)), (1,))
    return reduce_sum(sub(lse, picked), (0,))


def mean_squared_error(pred, target):
    pred, target = _wrap(pred), _wrap(target)
    if pred.shape != target.shape:
        raise ShapeMismatchError(
            "prediction shape %s vs target %s" % (pred.shape, target.shape)
        )
    return reduce_mean(square(sub(pred, target)))


def sum_of_squares(a):
    return reduce_sum(square(_wrap(a)))


# ---------------------------------------------------------------------------
# differentiation


def _postorder(root):
    post = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            post.append(node)
            continue
        nid = id(node)
        if nid in seen:
            continue
        seen.add(nid)
        stack.append((node, True))
        for inp in node.inputs:
            if id(inp) not in seen:
                stack.append((inp, False))
    return post


def gradients(target, sources, create_graph=False, allow_unused=False):
    """d(target)/d(source) for each source, reverse-mode.

    target must hold exactly one element. With ``create_graph`` the returned
    values stay in the graph and can be differentiated again. Sources that
    the target does not depend on raise, unless ``allow_unused`` turns them
    into zeros.
    """
    target = _wrap(target)
    sources = list(sources)
    if target.data.size != 1:
        raise NonScalarTargetError(
            "target has %d elements, expected 1" % target.data.size
        )
    post = _postorder(target)
    src_ids = {id(s) for s in sources}
    needed = {}
    for node in post:
        flag = id(node) in src_ids
        if not flag:
            for inp in node.inputs:
                if needed.get(id(inp), False):
                    flag = True
                    break
        needed[id(node)] = flag

    grads = {}
    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx:
        grads[id(target)] = constant(np.ones(target.shape))
        for node in reversed(post):
            if node.op is None:
                continue
            g = grads.get(id(node))
            if g is None or not needed[id(node)]:
                continue
            wants = tuple(
                needed.get(id(inp), False) or id(inp) in src_ids
                for inp in node.inputs
            )
            if not any(wants):
                continue
            for inp, piece in zip(node.inputs, _BACKWARD[node.op](node, g, wants)):
                if piece is None:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = piece if prev is None else add(prev, piece)

        out = []
        for src in sources:
            g = grads.get(id(src))
            if g is None:
                if not allow_unused:
                    raise UnreachableSourceError(
                        "target does not depend on source %r" % (src,)
                    )
                g = constant(np.zeros(src.shape))
            out.append(g)
    return out
