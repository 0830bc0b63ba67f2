"""Dense tensors with reverse-mode differentiation and the layers built on them.

Every operation records its inputs while it runs; calling ``Tensor.backward()``
replays the recorded graph in reverse topological order and accumulates
gradients into each tensor created with ``requires_grad=True``. Data lives in
row-major numpy buffers, float32 by default; build models with
``dtype=numpy.float64`` for verification runs (``grad_check`` insists on it).

Only the broadcasting the layers in this package need is supported: the
elementwise operations broadcast like numpy, ``matmul`` accepts 2-D pairs or
equal-batch 3-D pairs, reductions take a single axis.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32
_FLOAT_TYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Operand extents do not match the operation's contract."""


class DomainError(ValueError):
    """Numeric argument lies outside the operation's domain."""


class GradCheckError(RuntimeError):
    """Finite-difference verification failed or met non-finite values."""


def _as_array(value, dtype=None):
    arr = np.asarray(value)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in _FLOAT_TYPES:
        return arr.astype(DEFAULT_DTYPE)
    return arr


class Tensor:
    """A dense array plus the bookkeeping for reverse-mode gradients.

    ``data`` is the value, ``grad`` the accumulated gradient (same shape,
    populated by ``backward``). Tensors are treated as immutable once they
    enter a graph; optimizers may rewrite leaf ``data`` between graphs.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _backward=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        """Accumulate d(self)/d(leaf) into every reachable ``requires_grad`` tensor."""
        if seed is None:
            seed = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        _accumulate(self, np.asarray(seed, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_constant(other, self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_constant(other, self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _constant(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _accumulate(t: Tensor, g: np.ndarray):
    # never in place: grads may alias views of downstream buffers
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _node(data, parents, backward) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


# elementwise -----------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _constant(b, a)
    data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _node(data, (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    b = _constant(b, a)
    data = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _node(data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    b = _constant(b, a)
    data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), backward)


def div(a: Tensor, b) -> Tensor:
    b = _constant(b, a)
    data = a.data / b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(data, (a, b), backward)


def pow_const(a: Tensor, exponent: float) -> Tensor:
    data = a.data ** exponent

    def backward(g):
        _accumulate(a, g * (exponent * a.data ** (exponent - 1)))

    return _node(data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * data)

    return _node(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward(g):
        _accumulate(a, g / a.data)

    return _node(data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def backward(g):
        _accumulate(a, g * (a.data > 0))

    return _node(data, (a,), backward)


def maximum_const(a: Tensor, floor: float) -> Tensor:
    """Elementwise max against a scalar; clamped entries get zero gradient."""
    data = np.maximum(a.data, floor)

    def backward(g):
        _accumulate(a, g * (a.data > floor))

    return _node(data, (a,), backward)


# linear algebra and structure ------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != b.data.ndim or a.data.ndim not in (2, 3):
        raise ShapeError(f"matmul needs equal-rank 2-D or 3-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}")
    if a.data.ndim == 3 and a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"matmul batch extents differ: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def backward(g):
        _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return _node(data, (a, b), backward)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape))
        else:
            gx = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(gx, a.data.shape))

    return _node(data, (a,), backward)


def mean_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def amax(a: Tensor, axis: int, keepdims=False) -> Tensor:
    """Max along one axis; gradient is routed only to the (first) argmax slot."""
    if a.data.shape[axis] < 1:
        raise DomainError(f"cannot reduce empty axis {axis} of shape {a.data.shape}")
    ax = axis % a.data.ndim
    # argmax over a contiguous trailing axis is much faster than a strided one;
    # tie order along the scanned axis is unchanged by the relayout
    canonical = np.ascontiguousarray(np.moveaxis(a.data, ax, -1))
    idx_last = np.argmax(canonical, axis=-1)
    picked = np.take_along_axis(canonical, idx_last[..., None], -1)[..., 0]
    idx = np.moveaxis(np.expand_dims(idx_last, -1), -1, ax)
    data = np.expand_dims(picked, ax) if keepdims else picked

    def backward(g):
        gx = np.zeros_like(a.data)
        gk = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(gx, idx, gk, ax)
        _accumulate(a, gx)

    return _node(data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _node(data, (a,), backward)


def moveaxis(a: Tensor, source: int, destination: int) -> Tensor:
    data = np.moveaxis(a.data, source, destination)

    def backward(g):
        _accumulate(a, np.moveaxis(g, destination, source))

    return _node(data, (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return _node(data, tuple(tensors), backward)


def take_rows(a: Tensor, indices) -> Tensor:
    """Select rows along axis 0 with a 1-D integer index."""
    idx = np.asarray(indices)
    data = a.data[idx]

    def backward(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, idx, g)
        _accumulate(a, gx)

    return _node(data, (a,), backward)


def _scatter_add_rows(n_rows: int, indices: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Sum the rows of ``g`` into their target rows (duplicates accumulate).

    Sort-then-segment-sum; several times faster than ``np.add.at`` for the
    neighborhood-sized tables this engine produces, and still deterministic.
    """
    flat = indices.reshape(-1)
    g_flat = g.reshape(flat.shape[0], -1)
    order = np.argsort(flat, kind="stable")
    sorted_idx = flat[order]
    starts = np.concatenate([[0], np.flatnonzero(sorted_idx[1:] != sorted_idx[:-1]) + 1])
    out = np.zeros((n_rows, g_flat.shape[1]), dtype=g.dtype)
    out[sorted_idx[starts]] = np.add.reduceat(g_flat[order], starts, axis=0)
    return out


def gather_rows(a: Tensor, indices) -> Tensor:
    """Row gather with a 2-D index table: out[i, j] = a[indices[i, j]]."""
    idx = np.asarray(indices)
    data = a.data[idx]

    def backward(g):
        _accumulate(a, _scatter_add_rows(a.data.shape[0], idx, g).reshape(a.data.shape))

    return _node(data, (a,), backward)


# fused neighborhood kernels: one node instead of a gather/subtract/add chain,
# and channel contractions that never materialize an (N, k, C) product


def relative_rows(proj: Tensor, indices, bias: Tensor | None = None) -> Tensor:
    """out[i, j, :] = proj[indices[i, j]] - proj[i] (+ bias)."""
    idx = np.asarray(indices)
    data = proj.data[idx]
    np.subtract(data, proj.data[:, None, :], out=data)
    if bias is not None:
        np.add(data, bias.data, out=data)

    def backward(g):
        gp = _scatter_add_rows(proj.data.shape[0], idx, g)
        gp -= g.sum(axis=1)
        _accumulate(proj, gp)
        if bias is not None:
            _accumulate(bias, g.sum(axis=(0, 1)))

    parents = (proj,) if bias is None else (proj, bias)
    return _node(data, parents, backward)


def channel_dot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row dot products over the channel axis: out[i, j] = a[i] . b[i, j]."""
    data = np.einsum("nc,nkc->nk", a.data, b.data)

    def backward(g):
        _accumulate(a, np.einsum("nk,nkc->nc", g, b.data))
        _accumulate(b, g[:, :, None] * a.data[:, None, :])

    return _node(data, (a, b), backward)


def channel_weighted_sum(w: Tensor, v: Tensor) -> Tensor:
    """Weighted sum over neighbors: out[i, c] = sum_j w[i, j] * v[i, j, c]."""
    data = np.einsum("nk,nkc->nc", w.data, v.data)

    def backward(g):
        _accumulate(w, np.einsum("nc,nkc->nk", g, v.data))
        _accumulate(v, w.data[:, :, None] * g[:, None, :])

    return _node(data, (w, v), backward)


def mulsum_neighbors(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product reduced over the neighbor axis:
    out[i, c] = sum_j a[i, j, c] * b[i, j, c]."""
    data = np.einsum("nkc,nkc->nc", a.data, b.data)

    def backward(g):
        _accumulate(a, b.data * g[:, None, :])
        _accumulate(b, a.data * g[:, None, :])

    return _node(data, (a, b), backward)


def scale_by_temperature(score: Tensor, temp: Tensor) -> Tensor:
    """Broadcast shared per-neighbor scores against per-channel temperatures:
    out[i, j, c] = score[i, j] / temp[i, c]."""
    data = score.data[:, :, None] / temp.data[:, None, :]

    def backward(g):
        inv = 1.0 / temp.data
        _accumulate(score, np.einsum("nkc,nc->nk", g, inv))
        _accumulate(temp, -np.einsum("nkc,nk->nc", g, score.data) * inv * inv)

    return _node(data, (score, temp), backward)


# layers ----------------------------------------------------------------------


class Parameter:
    """A named trainable tensor; names must be unique within one model."""

    __slots__ = ("name", "tensor")

    def __init__(self, name: str, value):
        self.name = name
        self.tensor = Tensor(value, requires_grad=True)

    @property
    def value(self) -> np.ndarray:
        return self.tensor.data

    @value.setter
    def value(self, new):
        self.tensor.data = _as_array(new, self.tensor.data.dtype)

    @property
    def gradient(self):
        return self.tensor.grad

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.data.shape})"


class LinearLayer:
    """Affine map over the last axis: y = x @ weight (+ bias).

    weight has shape (in_features, out_features); initial values are uniform in
    +-1/sqrt(in_features) drawn from ``rng``.
    """

    def __init__(self, in_features: int, out_features: int, *, bias=True,
                 rng=None, dtype=None, name="linear"):
        dtype = np.dtype(dtype) if dtype is not None else np.dtype(DEFAULT_DTYPE)
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(in_features)
        self.in_features = in_features
        self.out_features = out_features
        self.name = name
        w = rng.uniform(-bound, bound, size=(in_features, out_features)).astype(dtype)
        self.weight = Parameter(f"{name}.weight", w)
        if bias:
            b = rng.uniform(-bound, bound, size=out_features).astype(dtype)
            self.bias = Parameter(f"{name}.bias", b)
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(x, self)

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])


def linear_forward(x: Tensor, layer: LinearLayer) -> Tensor:
    """Matrix product over the last axis of ``x``, bias broadcast if present."""
    c_in = layer.weight.tensor.data.shape[0]
    if x.data.ndim < 1 or x.data.shape[-1] != c_in:
        raise ShapeError(f"linear_forward: input width {x.data.shape} does not match {c_in}")
    lead = x.data.shape[:-1]
    flat = x if x.data.ndim == 2 else reshape(x, (-1, c_in))
    y = matmul(flat, layer.weight.tensor)
    if layer.bias is not None:
        y = add(y, layer.bias.tensor)
    if x.data.ndim != 2:
        y = reshape(y, (*lead, layer.out_features))
    return y


def softmax(scores: Tensor, axis: int, temperature=None) -> Tensor:
    """Softmax along ``axis``: exp((s - max s)/T) normalized to sum 1.

    ``temperature`` may be a positive scalar or a Tensor broadcastable over
    ``scores``; the axis max is subtracted as a constant before exponentiation.
    The reduction always runs over a contiguous trailing axis (input is
    transposed and flattened first), so rows with equal values produce
    bit-identical results whatever the original layout. One fused node: the
    backward applies the softmax Jacobian directly.
    """
    if temperature is not None:
        t = temperature if isinstance(temperature, Tensor) else _constant(temperature, scores)
        if np.min(t.data) <= 0:
            raise DomainError("softmax temperature must be strictly positive")
        x = div(scores, t)
    else:
        x = scores
    ndim = x.data.ndim
    ax = axis % ndim
    moved = np.moveaxis(x.data, ax, -1)
    moved_shape = moved.shape
    flat = moved.reshape(-1, moved_shape[-1])
    e = np.exp(flat - np.max(flat, axis=1, keepdims=True))
    w_flat = e / e.sum(axis=1, keepdims=True)
    data = np.moveaxis(w_flat.reshape(moved_shape), -1, ax)

    def backward(g):
        g_flat = np.moveaxis(g, ax, -1).reshape(w_flat.shape)
        gw = g_flat * w_flat
        gx_flat = gw - w_flat * gw.sum(axis=1, keepdims=True)
        _accumulate(x, np.moveaxis(gx_flat.reshape(moved_shape), -1, ax))

    return _node(data, (x,), backward)


def pool(x: Tensor, axis: int, mode: str) -> Tensor:
    """Reduce one axis by ``max`` (argmax-routed gradient) or ``mean``."""
    if x.data.shape[axis] < 1:
        raise DomainError(f"cannot pool empty axis {axis} of shape {x.data.shape}")
    if mode == "max":
        return amax(x, axis)
    if mode == "mean":
        return mean_(x, axis)
    raise ValueError(f"unknown pool mode {mode!r}")


LAYER_NORM_EPS = 1e-5


def layer_normalize(x: Tensor, gain: Tensor, shift: Tensor) -> Tensor:
    """Per-row normalization over the last axis, then affine gain/shift."""
    mu = mean_(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = mean_(mul(centered, centered), axis=-1, keepdims=True)
    rstd = pow_const(add(var, LAYER_NORM_EPS), -0.5)
    return add(mul(mul(centered, rstd), gain), shift)


# verification ----------------------------------------------------------------


def grad_check(fragment, wrt, step=1e-5, tolerance=None) -> float:
    """Compare reverse-mode gradients against central finite differences.

    ``fragment`` is a zero-argument callable returning a scalar Tensor; it must
    read its inputs and parameters from the tensors named in ``wrt`` (pairs of
    ``(name, Tensor)``) so that perturbing ``tensor.data`` in place changes the
    result. All checked tensors must be float64. Returns the worst relative
    error over every element; raises GradCheckError on non-finite values or
    when ``tolerance`` is given and exceeded.
    """
    wrt = list(wrt)
    for name, t in wrt:
        if t.data.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 tensors, {name} is {t.data.dtype}")
        t.zero_grad()
    out = fragment()
    if out.data.size != 1:
        raise ValueError("fragment must return a scalar")
    if not np.isfinite(out.data).all():
        raise GradCheckError("non-finite forward value")
    out.backward()

    worst = 0.0
    worst_name = None
    for name, t in wrt:
        analytic = np.zeros_like(t.data) if t.grad is None else np.asarray(t.grad, dtype=np.float64)
        if not np.isfinite(analytic).all():
            raise GradCheckError(f"non-finite gradient for {name}")
        flat = t.data.reshape(-1)
        flat_analytic = analytic.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            f_plus = float(fragment().data)
            flat[i] = saved - step
            f_minus = float(fragment().data)
            flat[i] = saved
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise GradCheckError(f"non-finite perturbed value for {name}[{i}]")
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(flat_analytic[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-4)
            if err > worst:
                worst = err
                worst_name = f"{name}[{i}]"
    if tolerance is not None and worst > tolerance:
        raise GradCheckError(f"max relative error {worst:.3e} at {worst_name} exceeds {tolerance:.1e}")
    return worst
