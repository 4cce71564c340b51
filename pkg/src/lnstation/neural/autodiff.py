"""Minimal reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps a float64 array plus a closure that propagates the
output gradient to its parents; ``backward`` replays the tape in
reverse topological order. Only the handful of primitives the two
branches need is provided: elementwise arithmetic, relu/sigmoid/log,
linear, 3-d convolution, global average pooling, concat/stack,
row-softmax and the graph mixing step.

The graph mixing step and the row-softmax denominator sum their terms
in value-sorted order, so a joint permutation of node indices permutes
the outputs bit-exactly (plain BLAS reductions would reorder the
floating-point sums).
"""

from __future__ import annotations

import numpy as np

from ..errors import RankError, ShapeError

# When not None, relu and clip record their activation sign patterns
# here; the finite-difference checker uses this to discard probes that
# cross a kink between the two one-sided evaluations.
_ACTIVATION_TRACE = None


class activation_trace:
    """Context manager collecting relu/clip masks during forward passes."""

    def __enter__(self):
        global _ACTIVATION_TRACE
        self._saved = _ACTIVATION_TRACE
        _ACTIVATION_TRACE = []
        return _ACTIVATION_TRACE

    def __exit__(self, *exc):
        global _ACTIVATION_TRACE
        _ACTIVATION_TRACE = self._saved
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _bwd=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._bwd = _bwd

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'yes' if self.grad is not None else 'no'})"

    # -- graph traversal ----------------------------------------------------

    def backward(self) -> None:
        """Seed d(self)/d(self) = 1 and accumulate grads into the graph."""
        if self.data.size != 1:
            raise RankError(f"backward: loss must be scalar, got shape {self.data.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        _accumulate(self, np.ones_like(self.data))
        for node in reversed(topo):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor, params=None) -> None:
    """Backward pass; parameters unreachable from ``loss`` get zero grads."""
    loss.backward()
    if params is not None:
        for t in params.tensors():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# elementwise primitives


def _same_shape(name, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{name}: operand shapes {a.data.shape} and {b.data.shape} differ")


def add(a: Tensor, b):
    if not isinstance(b, Tensor):
        return shift(a, float(b))
    _same_shape("add", a, b)

    def bwd(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return Tensor(a.data + b.data, _parents=(a, b), _bwd=bwd)


def mul(a: Tensor, b):
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    _same_shape("mul", a, b)

    def bwd(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return Tensor(a.data * b.data, _parents=(a, b), _bwd=bwd)


def scale(a: Tensor, c: float):
    c = float(c)

    def bwd(g):
        _accumulate(a, g * c)

    return Tensor(a.data * c, _parents=(a,), _bwd=bwd)


def shift(a: Tensor, c: float):
    def bwd(g):
        _accumulate(a, g)

    return Tensor(a.data + float(c), _parents=(a,), _bwd=bwd)


def mul_array(a: Tensor, arr) -> Tensor:
    """Elementwise product with a constant (non-differentiated) array."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != a.data.shape:
        raise ShapeError(f"mul_array: array shape {arr.shape} != tensor shape {a.data.shape}")

    def bwd(g):
        _accumulate(a, g * arr)

    return Tensor(a.data * arr, _parents=(a,), _bwd=bwd)


def power(a: Tensor, exponent: float):
    """a ** exponent for a constant exponent; inputs must be positive
    unless the exponent is a non-negative integer."""
    exponent = float(exponent)
    out = a.data**exponent

    def bwd(g):
        if exponent == 0.0:
            return
        _accumulate(a, g * exponent * a.data ** (exponent - 1.0))

    return Tensor(out, _parents=(a,), _bwd=bwd)


def log(a: Tensor):
    def bwd(g):
        _accumulate(a, g / a.data)

    return Tensor(np.log(a.data), _parents=(a,), _bwd=bwd)


def clip(a: Tensor, lo: float, hi: float):
    """Clamp values; gradient passes through only where unclamped."""
    inside = (a.data >= lo) & (a.data <= hi)
    if _ACTIVATION_TRACE is not None:
        _ACTIVATION_TRACE.append(inside.copy())

    def bwd(g):
        _accumulate(a, g * inside)

    return Tensor(np.clip(a.data, lo, hi), _parents=(a,), _bwd=bwd)


def relu(a: Tensor):
    pos = a.data > 0
    if _ACTIVATION_TRACE is not None:
        _ACTIVATION_TRACE.append(pos.copy())

    def bwd(g):
        _accumulate(a, g * pos)

    return Tensor(a.data * pos, _parents=(a,), _bwd=bwd)


def sigmoid(a: Tensor):
    x = a.data
    out = np.empty_like(x)
    nonneg = x >= 0
    out[nonneg] = 1.0 / (1.0 + np.exp(-x[nonneg]))
    ex = np.exp(x[~nonneg])
    out[~nonneg] = ex / (1.0 + ex)

    def bwd(g):
        _accumulate(a, g * out * (1.0 - out))

    return Tensor(out, _parents=(a,), _bwd=bwd)


def tsum(a: Tensor):
    def bwd(g):
        _accumulate(a, np.full_like(a.data, float(g)))

    return Tensor(a.data.sum(), _parents=(a,), _bwd=bwd)


def tmean(a: Tensor):
    n = a.data.size

    def bwd(g):
        _accumulate(a, np.full_like(a.data, float(g) / n))

    return Tensor(a.data.mean(), _parents=(a,), _bwd=bwd)


def reshape(a: Tensor, shape):
    shape = tuple(shape)

    def bwd(g):
        _accumulate(a, g.reshape(a.data.shape))

    return Tensor(a.data.reshape(shape), _parents=(a,), _bwd=bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")

    def bwd(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return Tensor(a.data @ b.data, _parents=(a, b), _bwd=bwd)


def transpose(a: Tensor):
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d tensor, got shape {a.data.shape}")

    def bwd(g):
        _accumulate(a, g.T)

    return Tensor(a.data.T.copy(), _parents=(a,), _bwd=bwd)


def linear(x: Tensor, w: Tensor, b=None):
    """Affine map: x (n,) -> w @ x + b, or batched x (m, n) -> x @ w.T + b."""
    if w.data.ndim != 2:
        raise ShapeError(f"linear: weight must be 2-d, got {w.data.shape}")
    n_out, n_in = w.data.shape
    if b is not None and b.data.shape != (n_out,):
        raise ShapeError(f"linear: bias shape {b.data.shape} != ({n_out},)")

    if x.data.ndim == 1:
        if x.data.shape[0] != n_in:
            raise ShapeError(f"linear: input dim {x.data.shape[0]} != weight fan-in {n_in}")
        out = w.data @ x.data
        if b is not None:
            out = out + b.data

        def bwd(g):
            _accumulate(w, np.outer(g, x.data))
            _accumulate(x, w.data.T @ g)
            if b is not None:
                _accumulate(b, g)

        parents = (x, w) if b is None else (x, w, b)
        return Tensor(out, _parents=parents, _bwd=bwd)

    if x.data.ndim == 2:
        if x.data.shape[1] != n_in:
            raise ShapeError(f"linear: input dim {x.data.shape[1]} != weight fan-in {n_in}")
        out = x.data @ w.data.T
        if b is not None:
            out = out + b.data

        def bwd(g):
            _accumulate(w, g.T @ x.data)
            _accumulate(x, g @ w.data)
            if b is not None:
                _accumulate(b, g.sum(axis=0))

        parents = (x, w) if b is None else (x, w, b)
        return Tensor(out, _parents=parents, _bwd=bwd)

    raise ShapeError(f"linear: input must be 1-d or 2-d, got shape {x.data.shape}")


# ---------------------------------------------------------------------------
# convolution


def conv3d(x: Tensor, w: Tensor, b=None, stride: int = 1, padding: int = 0):
    """3-d convolution: x (c_in, d, h, w), w (c_out, c_in, k, k, k).

    Implemented as im2col + matmul; the column matrix is kept for the
    backward pass.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv3d: input must be (c_in, d, h, w), got {x.data.shape}")
    if w.data.ndim != 5 or w.data.shape[2] != w.data.shape[3] != w.data.shape[4]:
        raise ShapeError(f"conv3d: kernel must be (c_out, c_in, k, k, k), got {w.data.shape}")
    c_out, c_in, k = w.data.shape[0], w.data.shape[1], w.data.shape[2]
    if x.data.shape[0] != c_in:
        raise ShapeError(
            f"conv3d: input channels {x.data.shape[0]} != kernel fan-in {c_in}"
        )
    if b is not None and b.data.shape != (c_out,):
        raise ShapeError(f"conv3d: bias shape {b.data.shape} != ({c_out},)")
    stride = int(stride)
    padding = int(padding)

    spatial = x.data.shape[1:]
    out_dims = tuple((n + 2 * padding - k) // stride + 1 for n in spatial)
    if any(d < 1 for d in out_dims):
        raise ShapeError(
            f"conv3d: kernel {k} with stride {stride}, padding {padding} "
            f"does not fit input {spatial}"
        )

    if padding:
        xp = np.pad(x.data, ((0, 0),) + ((padding, padding),) * 3)
    else:
        xp = x.data
    sc, sd, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c_in, k, k, k) + out_dims,
        strides=(sc, sd, sh, sw, sd * stride, sh * stride, sw * stride),
        writeable=False,
    )
    n_out = out_dims[0] * out_dims[1] * out_dims[2]
    cols = view.reshape(c_in * k**3, n_out)
    w_mat = w.data.reshape(c_out, c_in * k**3)
    out = w_mat @ cols
    if b is not None:
        out = out + b.data[:, None]
    out = out.reshape((c_out,) + out_dims)

    def bwd(g):
        g_mat = g.reshape(c_out, n_out)
        _accumulate(w, (g_mat @ cols.T).reshape(w.data.shape))
        if b is not None:
            _accumulate(b, g_mat.sum(axis=1))
        g_cols = (w_mat.T @ g_mat).reshape((c_in, k, k, k) + out_dims)
        gx = np.zeros_like(xp)
        od, oh, ow = out_dims
        for a in range(k):
            for bb in range(k):
                for c in range(k):
                    gx[
                        :,
                        a : a + stride * od : stride,
                        bb : bb + stride * oh : stride,
                        c : c + stride * ow : stride,
                    ] += g_cols[:, a, bb, c]
        if padding:
            gx = gx[:, padding:-padding, padding:-padding, padding:-padding]
        _accumulate(x, gx)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out, _parents=parents, _bwd=bwd)


def global_avg_pool(x: Tensor):
    """(c, d, h, w) -> (c,) spatial mean."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: input must be 4-d, got {x.data.shape}")
    n_spatial = x.data.shape[1] * x.data.shape[2] * x.data.shape[3]

    def bwd(g):
        _accumulate(
            x, np.broadcast_to(g[:, None, None, None] / n_spatial, x.data.shape).copy()
        )

    return Tensor(x.data.mean(axis=(1, 2, 3)), _parents=(x,), _bwd=bwd)


# ---------------------------------------------------------------------------
# structural ops


def concat(tensors, axis: int = 0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    ref = tensors[0].data.shape
    for t in tensors[1:]:
        a, b = list(ref), list(t.data.shape)
        a.pop(axis)
        b.pop(axis)
        if a != b or t.data.ndim != len(ref):
            raise ShapeError(f"concat: shape {t.data.shape} incompatible with {ref} on axis {axis}")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        _parents=tuple(tensors),
        _bwd=bwd,
    )


def stack_rows(tensors):
    """Stack n equal-length vectors into an (n, d) matrix."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("stack_rows: need at least one tensor")
    d = tensors[0].data.shape
    for t in tensors:
        if t.data.ndim != 1 or t.data.shape != d:
            raise ShapeError(f"stack_rows: expected 1-d tensors of shape {d}, got {t.data.shape}")

    def bwd(g):
        for i, t in enumerate(tensors):
            _accumulate(t, g[i])

    return Tensor(np.stack([t.data for t in tensors]), _parents=tuple(tensors), _bwd=bwd)


def row(a: Tensor, i: int):
    """Select row i of a 2-d tensor."""
    if a.data.ndim != 2:
        raise ShapeError(f"row: expected 2-d tensor, got shape {a.data.shape}")
    i = int(i)

    def bwd(g):
        full = np.zeros_like(a.data)
        full[i] = g
        _accumulate(a, full)

    return Tensor(a.data[i].copy(), _parents=(a,), _bwd=bwd)


def _sorted_axis_sum(arr: np.ndarray, axis: int) -> np.ndarray:
    # summation in value-sorted order: invariant to permutations of the
    # reduced axis, which keeps graph ops bit-exact under node relabeling
    return np.sort(arr, axis=axis).sum(axis=axis)


def row_softmax(a: Tensor):
    """Softmax over each row of a 2-d tensor (rows sum to 1)."""
    if a.data.ndim != 2:
        raise ShapeError(f"row_softmax: expected 2-d tensor, got shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    denom = _sorted_axis_sum(e, axis=1)[:, None]
    out = e / denom

    def bwd(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        _accumulate(a, out * (g - dot))

    return Tensor(out, _parents=(a,), _bwd=bwd)


def graph_mix(a: Tensor, phi: Tensor):
    """Adjacency mixing: out[j] = sum_k a[k, j] * phi[k].

    ``a`` is (n, n), ``phi`` is (n, d). Forward sums the n products per
    output element in value-sorted order (see module docstring).
    """
    if a.data.ndim != 2 or a.data.shape[0] != a.data.shape[1]:
        raise ShapeError(f"graph_mix: adjacency must be square, got {a.data.shape}")
    if phi.data.ndim != 2 or phi.data.shape[0] != a.data.shape[0]:
        raise ShapeError(
            f"graph_mix: features {phi.data.shape} incompatible with adjacency {a.data.shape}"
        )
    prod = a.data[:, :, None] * phi.data[:, None, :]  # (k, j, d)
    out = _sorted_axis_sum(prod, axis=0)

    def bwd(g):
        _accumulate(a, phi.data @ g.T)
        _accumulate(phi, a.data @ g)

    return Tensor(out, _parents=(a, phi), _bwd=bwd)
