"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every forward computation in this package is built from the primitives
defined here. Backward rules are themselves expressed in terms of the same
primitives, so gradients can be differentiated again (``create_graph=True``);
that second-order capability is what powers conservative-force training and
the mixed-Hessian diagnostics.

Only the primitives this model family needs are provided. Arrays are
float64 throughout; integer arrays may appear only as constant indices.
"""

from __future__ import annotations

import numpy as np


class UnsupportedOperationError(RuntimeError):
    """Raised when a computation cannot be differentiated (e.g. graph construction)."""


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED[0]


def _as_data(x) -> np.ndarray:
    if isinstance(x, np.ndarray):
        if x.dtype == np.float64:
            return x
        return x.astype(np.float64)
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A numpy array plus an optional record of how it was produced."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_data(data)
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic
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
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def swap_last(self):
        """Transpose the trailing two axes."""
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return transpose(self, tuple(axes))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x)


def _node(data: np.ndarray, parents: tuple, vjp) -> Tensor:
    """Create a result tensor, recording it on the tape if gradients are live."""
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = parents
        out._vjp = vjp
        return out
    return Tensor(data)


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    """Reduce a broadcast cotangent back to ``shape`` (built from primitives)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


# ---------------------------------------------------------------------------
# primitives

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)

    return _node(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)

    return _node(a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = _unbroadcast(div(g, b), a.shape)
        gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _node(a.data / b.data, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (neg(g),))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise UnsupportedOperationError("only constant exponents are supported")
    p = float(exponent)

    def vjp(g):
        return (mul(g, mul(constant(p), power(a, p - 1.0))),)

    return _node(a.data ** p, (a,), vjp)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = _node(np.exp(a.data), (a,), None)
    if out.requires_grad:
        out._vjp = lambda g: (mul(g, out),)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (div(g, a),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = _node(np.sqrt(a.data), (a,), None)
    if out.requires_grad:
        out._vjp = lambda g: (div(mul(g, constant(0.5)), out),)
    return out


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.sin(a.data), (a,), lambda g: (mul(g, cos(a)),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.cos(a.data), (a,), lambda g: (neg(mul(g, sin(a))),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = _node(np.tanh(a.data), (a,), None)
    if out.requires_grad:
        out._vjp = lambda g: (mul(g, sub(constant(1.0), mul(out, out))),)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = np.empty_like(a.data)
    pos = a.data >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    data[~pos] = ex / (1.0 + ex)
    out = _node(data, (a,), None)
    if out.requires_grad:
        out._vjp = lambda g: (mul(g, mul(out, sub(constant(1.0), out))),)
    return out


def silu(a) -> Tensor:
    a = as_tensor(a)
    return mul(a, sigmoid(a))


def absval(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _node(np.abs(a.data), (a,), lambda g: (mul(g, constant(sign)),))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    in_shape = a.shape

    def vjp(g):
        if axis is None:
            gk = reshape(g, (1,) * len(in_shape)) if in_shape else g
        elif not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(ax % len(in_shape) for ax in axes)
            kshape = tuple(1 if i in axes else s for i, s in enumerate(in_shape))
            gk = reshape(g, kshape)
        else:
            gk = g
        return (broadcast_to(gk, in_shape),)

    return _node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), constant(1.0 / count))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise UnsupportedOperationError("matmul requires ndim >= 2; reshape vectors first")

    def vjp(g):
        ga = _unbroadcast(matmul(g, b.swap_last()), a.shape)
        gb = _unbroadcast(matmul(a.swap_last(), g), b.shape)
        return ga, gb

    return _node(a.data @ b.data, (a, b), vjp)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    in_shape = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (reshape(g, in_shape),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    in_shape = a.shape
    data = np.broadcast_to(a.data, shape)
    # copy so downstream in-place-free math still owns memory layout
    return _node(np.ascontiguousarray(data), (a,), lambda g: (_unbroadcast(g, in_shape),))


def concat(parts, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def vjp(g):
        grads = []
        for i in range(len(parts)):
            index = [slice(None)] * g.ndim
            index[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            grads.append(take(g, tuple(index)))
        return tuple(grads)

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), vjp)


def take(a, index) -> Tensor:
    """numpy-style indexing; the adjoint scatter-adds into the source shape."""
    a = as_tensor(a)
    if isinstance(index, Tensor):
        raise UnsupportedOperationError("indices must be constant arrays, not tensors")
    in_shape = a.shape

    def vjp(g):
        return (scatter_add(in_shape, index, g),)

    return _node(a.data[index], (a,), vjp)


def scatter_add(shape, index, values) -> Tensor:
    """Dense zeros of ``shape`` with ``values`` added at ``index`` (duplicates sum)."""
    values = as_tensor(values)
    out = np.zeros(shape, dtype=np.float64)
    np.add.at(out, index, values.data)
    return _node(out, (values,), lambda g: (take(g, index),))


def segment_sum(values, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``values`` into ``num_segments`` buckets along axis 0."""
    values = as_tensor(values)
    return scatter_add((num_segments,) + values.shape[1:], segment_ids, values)


def stop_gradient(a) -> Tensor:
    return Tensor(as_tensor(a).data.copy())


def where_mask(mask: np.ndarray, a, b) -> Tensor:
    """Select elementwise by a constant boolean mask."""
    m = constant(mask.astype(np.float64))
    return add(mul(m, as_tensor(a)), mul(sub(constant(1.0), m), as_tensor(b)))


# ---------------------------------------------------------------------------
# backward pass

def _toposort(root: Tensor) -> list:
    order: list = []
    seen: set = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order


def grad(output: Tensor, wrt, create_graph: bool = False, strict: bool = False):
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    Tensors unreachable from ``output`` get zero gradients unless ``strict``.
    With ``create_graph=True`` the returned gradients are themselves
    differentiable.
    """
    single = isinstance(wrt, Tensor)
    targets = [wrt] if single else list(wrt)
    if output.size != 1:
        raise UnsupportedOperationError("grad expects a scalar output")
    if not output.requires_grad:
        if strict:
            raise UnsupportedOperationError("output does not depend on any differentiable input")
        results = [Tensor(np.zeros(t.shape)) for t in targets]
        return results[0] if single else results

    order = _toposort(output)
    target_ids = {id(t) for t in targets}
    cot: dict = {id(output): Tensor(np.ones_like(output.data))}
    guard = no_grad() if not create_graph else _NullCtx()
    with guard:
        for node in reversed(order):
            g = cot.pop(id(node), None)
            if g is None or node._vjp is None:
                if g is not None and id(node) in target_ids:
                    cot[id(node)] = g
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                prev = cot.get(id(parent))
                cot[id(parent)] = pg if prev is None else add(prev, pg)
            if id(node) in target_ids:
                cot[id(node)] = g

    results = []
    for t in targets:
        g = cot.get(id(t))
        if g is None:
            if strict:
                raise UnsupportedOperationError("no differentiable path to requested tensor")
            g = Tensor(np.zeros(t.shape))
        results.append(g)
    return results[0] if single else results


class _NullCtx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


# ---------------------------------------------------------------------------
# parameter store

class ParameterStore:
    """Flat named collection of trainable arrays with gradient slots."""

    def __init__(self, seed: int = 0):
        self._arrays: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray | None] = {}
        self.seed = seed

    def add(self, name: str, array: np.ndarray) -> None:
        if name in self._arrays:
            raise ValueError(f"duplicate parameter name: {name}")
        self._arrays[name] = _as_data(array).copy()
        self.grads[name] = None

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, array: np.ndarray) -> None:
        if name not in self._arrays:
            raise KeyError(name)
        self._arrays[name] = _as_data(array)

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def names(self) -> list[str]:
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def tensors(self) -> dict[str, Tensor]:
        """Fresh leaf tensors; one computation graph per call site owns them."""
        return {k: Tensor(v, requires_grad=True) for k, v in self._arrays.items()}

    def set_grads(self, tensors: dict[str, Tensor], grads) -> None:
        for name, g in zip(tensors, grads):
            self.grads[name] = g.data

    def zero_grads(self) -> None:
        for name in self.grads:
            self.grads[name] = None

    def n_parameters(self) -> int:
        return sum(v.size for v in self._arrays.values())

    def copy(self) -> "ParameterStore":
        out = ParameterStore(seed=self.seed)
        for k, v in self._arrays.items():
            out.add(k, v.copy())
        return out


# ---------------------------------------------------------------------------
# numerical oracles

def finite_difference_grad(fn, arrays: list[np.ndarray], step: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of a scalar function of a list of arrays."""
    grads = []
    for ai, base in enumerate(arrays):
        g = np.zeros_like(base)
        flat = base.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn(arrays)
            flat[i] = orig - step
            fm = fn(arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def mixed_hessian(energy_fn, store: ParameterStore, subset, positions: np.ndarray,
                  step: float = 1e-4) -> np.ndarray:
    """Mixed second derivatives d2E/(d theta d x), assembled row by row.

    ``energy_fn(param_tensors, positions_tensor) -> scalar Tensor`` must treat
    the graph topology as fixed. ``subset`` is a list of ``(name, flat_indices)``
    pairs; ``flat_indices=None`` selects the whole array. Rows follow subset
    order; columns are (atom, axis) flattened. Computed as central finite
    differences over parameters of the analytic position gradient, which keeps
    this path independent of the double-backward route it is used to check.
    """
    def position_grad() -> np.ndarray:
        pos = Tensor(positions, requires_grad=True)
        params = store.tensors()
        energy = energy_fn(params, pos)
        return grad(energy, pos).data.reshape(-1)

    rows = []
    for name, idx in subset:
        arr = store[name]
        flat = arr.reshape(-1)
        indices = range(flat.size) if idx is None else np.asarray(idx).reshape(-1)
        for i in indices:
            orig = flat[i]
            flat[i] = orig + step
            gp = position_grad()
            flat[i] = orig - step
            gm = position_grad()
            flat[i] = orig
            rows.append((gp - gm) / (2.0 * step))
    n_cols = positions.size
    if not rows:
        return np.zeros((0, n_cols))
    return np.vstack(rows)


def numerical_rank(matrix: np.ndarray, tolerance: float = 1e-8) -> int:
    """Count of singular values above ``tolerance`` times the largest."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.size == 0:
        return 0
    if not np.all(np.isfinite(matrix)):
        raise ValueError("matrix has non-finite entries")
    s = np.linalg.svd(matrix, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > tolerance * s[0]))
