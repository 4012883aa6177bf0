"""Dense tensors with reverse-mode automatic differentiation.

Covers exactly the operation set the sequence models in this package need:
matmul, stable softmax, an elementwise suite, RMS normalization, causal
depthwise conv, cross entropy, embedding lookup, and the gather/scatter
primitives used for expert dispatch. Buffers are numpy arrays (float32 or
float64); each differentiable op records its parents and a closure with the
exact backward rule, and ``Tensor.backward`` replays the graph once in
reverse topological order.
"""

from __future__ import annotations

import contextlib

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A dense n-dimensional array that can participate in the gradient tape.

    ``data`` is always a float32 or float64 numpy array. ``grad`` has the
    same shape and dtype once populated by ``backward``. ``decay`` marks
    parameters eligible for weight decay (matrix weights only; the optimizer
    reads it and never decays norms, biases, or state-space coefficients).
    """

    __slots__ = ("data", "requires_grad", "grad", "decay", "_parents", "_backward_fn", "_released")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.decay = False
        self._parents = ()
        self._backward_fn = None
        self._released = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def backward(self):
        """Accumulate gradients into every reachable requires_grad tensor.

        The loss must be a scalar. The tape is released afterwards; calling
        backward a second time through the same graph raises.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.data.shape}")
        if self._released:
            raise RuntimeError("backward already ran through this graph; the tape was released")
        topo = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            fn = node._backward_fn
            node._released = True
            if fn is not None and node.grad is not None:
                fn(node.grad)
            # drop references so intermediate buffers can be collected
            node._backward_fn = None
            node._parents = ()


def _toposort(root: Tensor) -> list[Tensor]:
    # iterative DFS; deterministic order for a deterministically built graph
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Build an interior tape node. ``backward_fn(grad)`` must accumulate
    into the parents via ``_accumulate``."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray, owned: bool = True):
    """Add ``g`` into ``t.grad``.

    ``owned`` means the caller hands over a freshly allocated array that no
    other node can see; it is adopted without a copy. Views and shared
    arrays (owned=False, or anything with a base) are copied first, because
    later accumulations mutate the buffer in place.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        if not owned or g.base is not None or g.dtype != t.data.dtype:
            g = np.array(g, dtype=t.data.dtype)
        t.grad = g
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    if a.data.dtype != b.data.dtype:
        raise ValueError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise suite


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")
    out_data = a.data + b.data

    def backward(g):
        ga = _unbroadcast(g, a.shape)
        _accumulate(a, ga, owned=ga is not g)
        gb = _unbroadcast(g, b.shape)
        _accumulate(b, gb, owned=gb is not g)

    return _node(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "mul")
    out_data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(out_data, (a, b), backward)


def negate(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g)

    return _node(-a.data, (a,), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)

    def backward(g):
        _accumulate(a, g * c)

    return _node(a.data * c, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out_data)

    return _node(out_data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    out_data = _sigmoid(a.data)

    def backward(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-x) may overflow to inf for very negative x; 1/(1+inf) = 0 is the
    # correct limit, so just silence the overflow warning
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x); d/dx = s(x) * (1 + x * (1 - s(x)))."""
    s = _sigmoid(a.data)
    out_data = a.data * s

    def backward(g):
        _accumulate(a, g * (s * (1.0 + a.data * (1.0 - s))))

    return _node(out_data, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed as max(x, 0) + log1p(exp(-|x|))."""
    out_data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

    def backward(g):
        _accumulate(a, g * _sigmoid(a.data))

    return _node(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched contraction [.., m, k] @ [.., k, n] -> [.., m, n].

    Leading dimensions broadcast (a plain weight matrix broadcasts over a
    [B, L, k] activation). Gradients: dA = dC @ B^T, dB = A^T @ dC, summed
    over broadcast leading axes.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul: operands must have ndim >= 2, got {a.shape} and {b.shape}")
    if a.data.dtype != b.data.dtype:
        raise ValueError(f"matmul: dtype mismatch {a.data.dtype} vs {b.data.dtype}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError:
        raise ValueError(f"matmul: batch dimensions disagree for shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2))
        gb = np.matmul(a.data.swapaxes(-1, -2), g)
        _accumulate(a, _unbroadcast(ga, a.shape))
        _accumulate(b, _unbroadcast(gb, b.shape))

    return _node(out_data, (a, b), backward)


def softmax(a: Tensor, axis: int = -1, sorted_sum: bool = False) -> Tensor:
    """Stable softmax along ``axis`` (max subtraction before exp).

    ``sorted_sum`` makes the denominator a sorted summation, so the output
    is bit-identical under any permutation of the softmaxed axis; the expert
    router uses this to keep expert relabeling an exact symmetry.
    """
    if np.isnan(a.data).any():
        raise ValueError("softmax: input contains NaN")
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    if sorted_sum:
        denom = np.sort(e, axis=axis).sum(axis=axis, keepdims=True)
    else:
        denom = e.sum(axis=axis, keepdims=True)
    p = e / denom

    def backward(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        _accumulate(a, p * (g - inner))

    return _node(p, (a,), backward)


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """y = x / sqrt(mean(x^2, last axis) + eps) * gain."""
    if gain.shape != x.shape[-1:]:
        raise ValueError(f"rmsnorm: gain shape {gain.shape} does not match feature dim of {x.shape}")
    d = x.shape[-1]
    ms = np.mean(np.square(x.data), axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + x.data.dtype.type(eps))
    normed = x.data * r
    out_data = normed * gain.data

    def backward(g):
        gg = g * gain.data
        # d r / d x_i = -x_i r^3 / d
        inner = (gg * x.data).sum(axis=-1, keepdims=True)
        _accumulate(x, gg * r - x.data * (r ** 3) * (inner / d))
        _accumulate(gain, (g * normed).reshape(-1, d).sum(axis=0))

    return _node(out_data, (x, gain), backward)


def conv1d_depthwise_causal(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Per-channel causal convolution: y[b,t,c] = sum_j k[c,j] * x[b,t-j,c] + bias[c].

    Tap j reaches j steps into the past; positions before the sequence start
    read zeros, so output at t never depends on inputs after t.
    """
    if x.data.ndim != 3 or kernel.data.ndim != 2:
        raise ValueError(f"conv1d: expected x [B,L,C] and kernel [C,k], got {x.shape} and {kernel.shape}")
    channels, k = kernel.shape
    if x.shape[-1] != channels or bias.shape != (channels,):
        raise ValueError(f"conv1d: channel mismatch x={x.shape} kernel={kernel.shape} bias={bias.shape}")
    out_data = x.data * kernel.data[:, 0] + bias.data
    for j in range(1, k):
        out_data[:, j:, :] += kernel.data[:, j] * x.data[:, :-j, :]

    def backward(g):
        gx = g * kernel.data[:, 0]
        for j in range(1, k):
            gx[:, :-j, :] += kernel.data[:, j] * g[:, j:, :]
        _accumulate(x, gx)
        gk = np.empty_like(kernel.data)
        gk[:, 0] = (g * x.data).sum(axis=(0, 1))
        for j in range(1, k):
            gk[:, j] = (g[:, j:, :] * x.data[:, :-j, :]).sum(axis=(0, 1))
        _accumulate(kernel, gk)
        _accumulate(bias, g.sum(axis=(0, 1)))

    return _node(out_data, (x, kernel, bias), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-softmax probability of integer targets.

    Gradient is (softmax(logits) - onehot(targets)) / N.
    """
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy: logits must be [N, V], got {logits.shape}")
    targets = np.asarray(targets)
    n, v = logits.shape
    if targets.shape != (n,):
        raise ValueError(f"cross_entropy: targets shape {targets.shape} does not match logits {logits.shape}")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= v:
        raise IndexError(f"cross_entropy: target out of range [0, {v})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = z[np.arange(n), targets]
    out_data = np.asarray((lse - picked).mean(), dtype=logits.data.dtype)

    def backward(g):
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(n), targets] -= 1.0
        _accumulate(logits, (g / n) * p)

    return _node(out_data, (logits,), backward)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(a, g.transpose(inverse))

    return _node(a.data.transpose(axes), (a,), backward)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Narrow the last axis to [start, stop)."""
    def backward(g):
        buf = np.zeros_like(a.data)
        buf[..., start:stop] = g
        _accumulate(a, buf)

    return _node(np.ascontiguousarray(a.data[..., start:stop]), (a,), backward)


def concat_last(tensors: list[Tensor]) -> Tensor:
    sizes = [t.shape[-1] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=-1)

    def backward(g):
        offset = 0
        for t, s in zip(tensors, sizes):
            _accumulate(t, g[..., offset:offset + s])
            offset += s

    return _node(out_data, tuple(tensors), backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _node(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), backward)


def mean_axis(a: Tensor, axis: int) -> Tensor:
    n = a.shape[axis]

    def backward(g):
        _accumulate(a, np.broadcast_to(np.expand_dims(g / n, axis), a.shape).copy())

    return _node(a.data.mean(axis=axis), (a,), backward)


# ---------------------------------------------------------------------------
# lookups and expert dispatch


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: [V, d] x integer [..] -> [.., d]."""
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= weight.shape[0]:
        raise IndexError(f"embedding: id out of range [0, {weight.shape[0]})")
    out_data = weight.data[ids]

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        _accumulate(weight, gw)

    return _node(out_data, (weight,), backward)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a [N, ...] tensor; duplicate indices accumulate on backward."""
    idx = np.asarray(idx)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _accumulate(a, ga)

    return _node(a.data[idx], (a,), backward)


def scatter_rows(values: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    """Place [K, ...] rows into a zero-initialized [n_rows, ...] tensor.

    Indices must be distinct (each destination row is written at most once),
    which holds for top-1 dispatch where every token goes to one expert.
    """
    idx = np.asarray(idx)
    out_data = np.zeros((n_rows,) + values.shape[1:], dtype=values.data.dtype)
    out_data[idx] = values.data

    def backward(g):
        _accumulate(values, g[idx])

    return _node(out_data, (values,), backward)


def take_pairs(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Pick a[rows[i], cols[i]] as a 1-D tensor."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, cols), g)
        _accumulate(a, ga)

    return _node(a.data[rows, cols], (a,), backward)


def constant(data, dtype=None) -> Tensor:
    """A tensor that never requires grad (masks, rotary tables, loss weights)."""
    return Tensor(np.asarray(data, dtype=dtype))
