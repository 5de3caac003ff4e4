"""Dense tensors with reverse-mode automatic differentiation.

Execution is eager: every operation computes its numpy result immediately
and records a node on an acyclic tape (operands, vector-Jacobian closure).
`Tensor.backward` replays the tape in reverse topological order, summing
gradient contributions over fan-out. Training runs in float32; gradient
checks should build float64 graphs.

All operations are pure functions of their inputs: re-evaluating with the
same buffers yields bit-identical results (kernels are plain numpy calls,
which are deterministic for a fixed build). Tensors on the tape must not
be mutated in place.
"""

from __future__ import annotations

import math

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)

# Module-wide toggle: verify every op output is finite. A non-finite value
# on the forward path is a contract violation (usually a diverging run) and
# is surfaced as NonFiniteError instead of propagating NaNs.
_finite_checks = True


class ShapeError(ValueError):
    """Operand shapes violate an operation's shape rule."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf on the forward pass."""


def set_finite_checks(enabled):
    """Enable/disable forward-pass finiteness verification. Returns prior value."""
    global _finite_checks
    prior = _finite_checks
    _finite_checks = bool(enabled)
    return prior


def _check_finite(data, op):
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"op '{op}' produced non-finite values")


class Tensor:
    """A dense array plus its tape node.

    Leaf tensors hold data only; tensors produced by operations also carry
    the producing op name, the parent tensors and a VJP closure mapping the
    output gradient to per-parent gradients. `grad` accumulates across
    backward calls until reset to None.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_vjp", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.parents = ()
        self._vjp = None
        self.name = name

    # -- introspection ------------------------------------------------------

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

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        """A new leaf sharing this tensor's buffer, cut off from the tape."""
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r}{tag})"

    # -- autodiff -----------------------------------------------------------

    def backward(self, seed=None):
        """Accumulate d(seed . self)/d(leaf) into every reachable leaf's .grad.

        `seed` must match this tensor's shape; it defaults to ones for a
        single-element output. Fan-out accumulates by summation. Gradients
        of interior nodes live only for the duration of the call; leaf
        .grad accumulates across calls until reset to None.
        """
        if seed is None:
            if self.data.size != 1:
                raise ShapeError("backward on a non-scalar output requires an explicit seed")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise ShapeError(f"seed shape {seed.shape} does not match output shape {self.data.shape}")

        inflight = {id(self): seed}
        for node in _toposort(self):
            g = inflight.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pgrad in zip(node.parents, node._vjp(g)):
                if pgrad is None or not parent.requires_grad:
                    continue
                if pgrad.shape != parent.data.shape:
                    raise ShapeError(
                        f"vjp of '{node.op}' returned shape {pgrad.shape} for parent of shape {parent.data.shape}")
                key = id(parent)
                held = inflight.get(key)
                inflight[key] = pgrad if held is None else held + pgrad

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return batched_matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


def _toposort(root):
    """Reverse topological order over grad-requiring ancestors of `root`."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    order.reverse()
    return order


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _pair(a, b):
    """Wrap operands, coercing a bare Python scalar to the partner's dtype
    so float32 graphs are not upcast (numpy 2 promotes 0-d float64)."""
    if isinstance(a, Tensor) and isinstance(b, (int, float)):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor) and isinstance(a, (int, float)):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return as_tensor(a), as_tensor(b)


def _sigmoid(x):
    """Overflow-free logistic of a numpy array."""
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def _result(data, parents, vjp, op):
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out.parents = ()
        out._vjp = None
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic --------------------------------------------------


def add(a, b):
    a, b = _pair(a, b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from e

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _result(data, (a, b), vjp, "add")


def subtract(a, b):
    a, b = _pair(a, b)
    try:
        data = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"subtract: {a.shape} vs {b.shape}") from e

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _result(data, (a, b), vjp, "subtract")


def multiply(a, b):
    a, b = _pair(a, b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"multiply: {a.shape} vs {b.shape}") from e

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _result(data, (a, b), vjp, "multiply")


def divide(a, b):
    a, b = _pair(a, b)
    try:
        data = a.data / b.data
    except ValueError as e:
        raise ShapeError(f"divide: {a.shape} vs {b.shape}") from e

    def vjp(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _result(data, (a, b), vjp, "divide")


def negate(a):
    a = as_tensor(a)

    def vjp(g):
        return (-g,)

    return _result(-a.data, (a,), vjp, "negate")


def maximum(a, b):
    """Elementwise max; at ties the gradient goes to the first operand."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = np.maximum(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"maximum: {a.shape} vs {b.shape}") from e

    def vjp(g):
        take_a = a.data >= b.data
        return (_unbroadcast(g * take_a, a.data.shape),
                _unbroadcast(g * ~take_a, b.data.shape))

    return _result(data, (a, b), vjp, "maximum")


# -- elementwise nonlinearities ----------------------------------------------


def relu(a):
    a = as_tensor(a)
    data = np.maximum(a.data, 0)

    def vjp(g):
        return (g * (a.data > 0),)

    return _result(data, (a,), vjp, "relu")


def logistic(a):
    a = as_tensor(a)
    data = _sigmoid(a.data)

    def vjp(g):
        return (g * data * (1.0 - data),)

    return _result(data, (a,), vjp, "logistic")


def softplus(a):
    a = as_tensor(a)
    data = np.logaddexp(np.zeros((), dtype=a.dtype), a.data)

    def vjp(g):
        return (g * _sigmoid(a.data),)

    return _result(data, (a,), vjp, "softplus")


def square(a):
    a = as_tensor(a)

    def vjp(g):
        return (g * (2.0 * a.data),)

    return _result(a.data * a.data, (a,), vjp, "square")


def sqrt(a):
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def vjp(g):
        return (g / (2.0 * data),)

    return _result(data, (a,), vjp, "sqrt")


def log(a):
    a = as_tensor(a)
    data = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _result(data, (a,), vjp, "log")


def exp(a):
    a = as_tensor(a)
    data = np.exp(a.data)

    def vjp(g):
        return (g * data,)

    return _result(data, (a,), vjp, "exp")


def softmax(a, axis):
    """Softmax over one axis, computed with max subtraction."""
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        dot = np.sum(g * data, axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _result(data, (a,), vjp, "softmax")


# -- reductions ---------------------------------------------------------------


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    data = np.sum(a.data, axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape).astype(a.dtype, copy=False),)

    return _result(data, (a,), vjp, "sum")


def reduce_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    data = np.mean(a.data, axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.data.shape).astype(a.dtype, copy=False),)

    return _result(data, (a,), vjp, "mean")


def l2_norm(a, axis=-1, keepdims=False, eps=1e-12):
    """sqrt(sum(x^2) + eps) over `axis`; the eps guard keeps the gradient
    defined at the zero vector."""
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    norm = np.sqrt(np.sum(a.data * a.data, axis=axes, keepdims=True) + eps)
    data = norm if keepdims else np.squeeze(norm, axis=axes)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * a.data / norm,)

    return _result(data, (a,), vjp, "l2_norm")


# -- shape manipulation -------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {a.shape} -> {shape}") from e

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _result(data, (a,), vjp, "reshape")


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    data = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inverse),)

    return _result(data, (a,), vjp, "transpose")


def broadcast_to(a, shape):
    a = as_tensor(a)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise ShapeError(f"broadcast: {a.shape} -> {shape}") from e

    def vjp(g):
        return (_unbroadcast(g, a.data.shape),)

    return _result(data, (a,), vjp, "broadcast")


def concatenate(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concatenate of zero tensors")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError("concatenate: incompatible shapes") from e
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        pieces = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(pieces)

    return _result(data, tensors, vjp, "concatenate")


def slice_(a, key):
    """Basic slicing (ints, slices, Ellipsis). The gradient scatters back
    into a zero tensor of the input shape."""
    a = as_tensor(a)
    try:
        data = a.data[key]
    except IndexError as e:
        raise ShapeError(f"slice: bad key {key!r} for shape {a.shape}") from e
    data = np.ascontiguousarray(data)

    def vjp(g):
        out = np.zeros_like(a.data)
        out[key] = g
        return (out,)

    return _result(data, (a,), vjp, "slice")


# -- linear algebra ------------------------------------------------------------


def matmul(a, b):
    """Strict 2-D matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    return batched_matmul(a, b)


def batched_matmul(a, b):
    """Matrix product over the trailing two axes with numpy-style broadcast
    of the leading (batch) axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"batched_matmul expects ndim >= 2, got {a.shape} and {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"batched_matmul: inner dims {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"batched_matmul: {a.shape} @ {b.shape}") from e

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _result(data, (a, b), vjp, "matmul")


# -- convolution ----------------------------------------------------------------


def _conv_windows(xp, kh, kw, stride, oh, ow):
    """Strided view [B, C, KH, KW, OH, OW] over a padded NCHW buffer."""
    b, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    shape = (b, c, kh, kw, oh, ow)
    strides = (sb, sc, sh, sw, sh * stride, sw * stride)
    return np.lib.stride_tricks.as_strided(xp, shape=shape, strides=strides)


def conv2d(x, w, stride=1, padding=0, groups=1):
    """2-D cross-correlation, NCHW layout, zero padding.

    x: [B, C, H, W]; w: [OC, C/groups, KH, KW]. Output spatial dims follow
    floor((H + 2*padding - KH)/stride) + 1.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D x and w, got {x.shape} and {w.shape}")
    bsz, c, h, wdt = x.data.shape
    oc, cg, kh, kw = w.data.shape
    if c % groups or oc % groups:
        raise ShapeError(f"conv2d: channels {c}->{oc} not divisible by groups={groups}")
    if cg != c // groups:
        raise ShapeError(f"conv2d: kernel expects {cg} channels/group, input has {c // groups}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wdt + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} exceeds padded input {h + 2 * padding}x{wdt + 2 * padding}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    ocg = oc // groups
    windows = _conv_windows(xp, kh, kw, stride, oh, ow)
    # [B, G, Cg*KH*KW, OH*OW]; the reshape materializes the view once.
    cols = windows.reshape(bsz, groups, cg * kh * kw, oh * ow)
    wmat = w.data.reshape(groups, ocg, cg * kh * kw)
    out = np.matmul(wmat, cols).reshape(bsz, oc, oh, ow)

    def vjp(g):
        gm = g.reshape(bsz, groups, ocg, oh * ow)
        gw = None
        gx = None
        if w.requires_grad:
            gw = np.matmul(gm, np.swapaxes(cols, -1, -2)).sum(axis=0)
            gw = gw.reshape(oc, cg, kh, kw)
        if x.requires_grad:
            dcols = np.matmul(np.swapaxes(wmat, -1, -2), gm)
            dcols = dcols.reshape(bsz, c, kh, kw, oh, ow)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, i, j]
            gx = dxp[:, :, padding:padding + h, padding:padding + wdt] if padding else dxp
            gx = np.ascontiguousarray(gx)
        return gx, gw

    return _result(out, (x, w), vjp, "conv2d")


# -- gradient checking -----------------------------------------------------------


def grad_check(fn, inputs, epsilon=1e-6):
    """Compare analytic gradients of sum(fn(*inputs)) against central
    finite differences.

    `fn` maps Tensors to one Tensor and must be a pure function; `inputs`
    is a sequence of float64 arrays. Returns the max over all input entries
    of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8). Inputs of a
    piecewise op should sit away from its kinks (|x| > 10*epsilon).
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    arrays = [np.array(x, dtype=np.float64) for x in inputs]

    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    out.backward(np.ones_like(out.data))
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def objective(args):
        return float(np.sum(fn(*[Tensor(a) for a in args]).data))

    worst = 0.0
    for k, arr in enumerate(arrays):
        probe = [a.copy() for a in arrays]
        flat = probe[k].reshape(-1)
        ana = analytic[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = objective(probe)
            flat[i] = orig - epsilon
            f_minus = objective(probe)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            denom = max(abs(ana[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(ana[i] - numeric) / denom)
    return worst
