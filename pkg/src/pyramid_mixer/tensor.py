"""Dense-tensor numeric core with reverse-mode automatic differentiation.

Just enough machinery for an all-MLP sequence model: matmul (plain and
batched), layer norm, GELU/Swish, strided 1-D convolution, embedding
lookup, reductions, and a fused softmax cross-entropy. Arrays are numpy,
float32 by default; float64 is supported so gradient checks can run in a
64-bit shadow mode.

A forward pass builds a tape (each result tensor records its parents and
a backward rule); ``backward`` on a scalar loss walks the tape once in
reverse topological order. Graphs are single-use: rebuild the forward
pass for every step.

Thread contract: a graph and its intermediate tensors belong to one
thread. Parameter tensors may be read from many threads as long as no
training step mutates them concurrently.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, GraphError, NumericError

DEFAULT_DTYPE = np.float32

# Set by debug_checks(); every op then verifies its output is finite.
_check_finite = False

# Active MAC tallies; matmul/conv1d report multiply-accumulate counts here.
_mac_tallies: list["MacTally"] = []


class debug_checks:
    """Context manager enabling NaN/Inf detection after every forward op."""

    def __enter__(self):
        global _check_finite
        self._prev = _check_finite
        _check_finite = True
        return self

    def __exit__(self, *exc):
        global _check_finite
        _check_finite = self._prev
        return False


class MacTally:
    """Context manager counting multiply-accumulates of matmul/conv ops.

    Only dot-product multiplies are tallied (matrix products and
    convolutions); elementwise work and normalization are not MACs.
    """

    def __init__(self):
        self.total = 0

    def __enter__(self):
        _mac_tallies.append(self)
        return self

    def __exit__(self, *exc):
        _mac_tallies.remove(self)
        return False


def _record_macs(n: int) -> None:
    for tally in _mac_tallies:
        tally.total += n


def _finite_or_raise(arr: np.ndarray, op: str) -> None:
    if _check_finite and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {op}")


class Tensor:
    """A dense n-d array with an optional gradient accumulator.

    ``grad`` is populated (same shape as ``data``) by ``backward`` for
    every tensor with ``requires_grad=True`` reachable from the loss, and
    accumulates across backward calls until ``zero_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_consumed")

    def __init__(
        self,
        data: np.ndarray,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward_fn: Callable[[np.ndarray], None] | None = None,
    ):
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward_fn = _backward_fn
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the module-level functions carry the real logic.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, dtype=None, requires_grad: bool = False) -> Tensor:
    """Wrap array-like data as a constant (or trainable) tensor."""
    arr = np.asarray(data, dtype=dtype if dtype is not None else None)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(DEFAULT_DTYPE)
    return Tensor(arr, requires_grad=requires_grad)


def parameter(data, dtype=DEFAULT_DTYPE) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    _finite_or_raise(data, op)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward_fn=backward_fn)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(out, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), bwd, "mul")


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a._accumulate(-g)

    return _make(-a.data, (a,), bwd, "neg")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2-D x 2-D, batched 3-D x 2-D, or batched 3-D x 3-D."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.ndim > 3 or bd.ndim > 3:
        raise DimensionError(f"matmul supports 2-D/3-D operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {ad.shape} @ {bd.shape}")
    if ad.ndim == 3 and bd.ndim == 3 and ad.shape[0] != bd.shape[0]:
        raise DimensionError(f"matmul batch dimensions differ: {ad.shape} @ {bd.shape}")
    if ad.ndim == 2 and bd.ndim == 3:
        raise DimensionError(f"matmul 2-D @ 3-D not supported: {ad.shape} @ {bd.shape}")

    out = ad @ bd
    batch = ad.shape[0] if ad.ndim == 3 else 1
    _record_macs(batch * ad.shape[-2] * ad.shape[-1] * bd.shape[-1])

    def bwd(g):
        if a.requires_grad:
            if bd.ndim == 2:
                a._accumulate(g @ bd.T)
            else:
                a._accumulate(g @ bd.transpose(0, 2, 1))
        if b.requires_grad:
            if ad.ndim == 2:
                b._accumulate(ad.T @ g)
            elif bd.ndim == 2:
                b._accumulate(ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
            else:
                b._accumulate(ad.transpose(0, 2, 1) @ g)

    return _make(out, (a, b), bwd, "matmul")


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), bwd, "transpose")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = a.shape

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.reshape(orig))

    return _make(a.data.reshape(shape), (a,), bwd, "reshape")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    parts = [t.data for t in tensors]
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(np.concatenate(parts, axis=axis), tuple(tensors), bwd, "concat")


def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.full_like(a.data, g))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(ge, a.shape).copy())

    return _make(np.asarray(out), (a,), bwd, "sum")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(x.dtype)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * out * (1.0 - out))

    return _make(out, (a,), bwd, "sigmoid")


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh form: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    x = a.data
    x2 = x * x
    u = _GELU_C * (x + _GELU_A * x2 * x)
    t = np.tanh(u)
    out = (0.5 * x * (1.0 + t)).astype(x.dtype)

    def bwd(g):
        if a.requires_grad:
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
            d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            a._accumulate(g * d.astype(x.dtype))

    return _make(out, (a,), bwd, "gelu")


def swish(a: Tensor) -> Tensor:
    """Swish: x * sigmoid(x)."""
    x = a.data
    s = 1.0 / (1.0 + np.exp(-x))
    out = (x * s).astype(x.dtype)

    def bwd(g):
        if a.requires_grad:
            d = s * (1.0 + x * (1.0 - s))
            a._accumulate(g * d.astype(x.dtype))

    return _make(out, (a,), bwd, "swish")


ACTIVATIONS = {"gelu": gelu, "swish": swish}


def activation(a: Tensor, kind: str) -> Tensor:
    """Elementwise nonlinearity; ``kind`` is one of 'gelu' or 'swish'."""
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        from .errors import ConfigError

        raise ConfigError(f"unknown activation kind {kind!r}; expected one of {sorted(ACTIVATIONS)}") from None
    return fn(a)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x = a.data
    d = x.shape[-1]
    if d < 2:
        raise DimensionError(f"layer_norm needs a last dimension >= 2, got shape {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = (xhat * gamma.data + beta.data).astype(x.dtype)

    def bwd(g):
        if gamma.requires_grad:
            gamma._accumulate(_unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta._accumulate(_unbroadcast(g, beta.shape))
        if a.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            a._accumulate(((dxhat - m1 - xhat * m2) * inv).astype(x.dtype))

    return _make(out, (a, gamma, beta), bwd, "layer_norm")


def conv1d(a: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Full cross-channel 1-D convolution along the sequence axis.

    ``a`` is (L, C) or batched (B, L, C); ``kernels`` is (K, C, C_out) with
    K odd. Output length is floor((L + 2*padding - K) / stride) + 1.
    """
    w = kernels.data
    if w.ndim != 3:
        raise DimensionError(f"conv1d kernels must be (K, C, C_out), got {w.shape}")
    k, c_in, c_out = w.shape
    if k % 2 == 0:
        raise DimensionError(f"conv1d kernel size must be odd, got {k}")
    squeeze = a.data.ndim == 2
    x = a.data[None] if squeeze else a.data
    if x.ndim != 3:
        raise DimensionError(f"conv1d input must be (L, C) or (B, L, C), got {a.shape}")
    bsz, length, ch = x.shape
    if ch != c_in:
        raise DimensionError(f"conv1d channel mismatch: input {x.shape} vs kernels {w.shape}")
    out_len = (length + 2 * padding - k) // stride + 1
    if out_len < 1:
        raise DimensionError(
            f"sequence too short for conv1d: L={length}, K={k}, stride={stride}, padding={padding}"
        )

    xp = np.pad(x, ((0, 0), (padding, padding), (0, 0))) if padding else x
    out = np.zeros((bsz, out_len, c_out), dtype=x.dtype)
    span = stride * (out_len - 1) + 1
    for tap in range(k):
        out += xp[:, tap : tap + span : stride, :] @ w[tap]
    _record_macs(bsz * out_len * k * c_in * c_out)

    def bwd(g):
        if squeeze:
            g = g[None] if g.ndim == 2 else g
        if kernels.requires_grad:
            gw = np.empty_like(w)
            gflat = g.reshape(-1, c_out)
            for tap in range(k):
                xs = np.ascontiguousarray(xp[:, tap : tap + span : stride, :])
                gw[tap] = xs.reshape(-1, c_in).T @ gflat
            kernels._accumulate(gw)
        if a.requires_grad:
            gxp = np.zeros_like(xp)
            for tap in range(k):
                gxp[:, tap : tap + span : stride, :] += g @ w[tap].T
            gx = gxp[:, padding : padding + length, :] if padding else gxp
            a._accumulate(gx[0] if squeeze else gx)

    result = out[0] if squeeze else out
    return _make(result, (a, kernels), bwd, "conv1d")


def embedding(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup into an embedding table; gradients scatter-add back."""
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError(
            f"embedding index out of range [0, {table.shape[0]}): min={idx.min()}, max={idx.max()}"
        )
    out = table.data[idx]

    def bwd(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, idx.reshape(-1), g.reshape(-1, table.shape[1]))

    return _make(out, (table,), bwd, "embedding")


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray, row_mask: np.ndarray | None = None) -> Tensor:
    """Mean softmax cross-entropy of ``targets`` over the rows where ``row_mask`` is true.

    ``logits`` is (B, V); ``targets`` holds one class index per row. Rows
    with a false mask bit contribute nothing. At least one row must be
    unmasked.
    """
    z = logits.data
    if z.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects (B, V) logits, got {logits.shape}")
    t = np.asarray(targets)
    if t.shape != (z.shape[0],):
        raise DimensionError(f"targets shape {t.shape} does not match batch size {z.shape[0]}")
    mask = np.ones(z.shape[0], dtype=bool) if row_mask is None else np.asarray(row_mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ContractError("softmax_cross_entropy: every row is masked")

    m = z.max(axis=1, keepdims=True)
    ez = np.exp(z - m)
    sez = ez.sum(axis=1, keepdims=True)
    log_probs = (z - m) - np.log(sez)
    rows = np.arange(z.shape[0])
    losses = -log_probs[rows, t]
    out = np.asarray((losses * mask).sum() / n, dtype=z.dtype)

    def bwd(g):
        if logits.requires_grad:
            p = ez / sez
            p[rows, t] -= 1.0
            p *= (mask[:, None] / n) * g
            logits._accumulate(p.astype(z.dtype))

    return _make(out, (logits,), bwd, "softmax_cross_entropy")


# ---------------------------------------------------------------------------
# backward driver


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Populates ``grad`` on every ``requires_grad`` tensor reachable from
    ``loss``. The graph is single-use: a second call without a fresh
    forward pass raises ``GraphError``.
    """
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward already ran on this graph; rebuild the forward pass first")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any requires_grad tensor")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        node._consumed = True
        if node._backward_fn is not None:
            node._backward_fn(node.grad)
            if node._parents:
                # Intermediate grads are scratch space; free them eagerly.
                node.grad = None


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    rel_tol: float = 1e-3,
) -> float:
    """Compare backward grads with central finite differences.

    ``loss_fn`` rebuilds the forward pass from the current parameter
    values. Returns the worst relative error observed; raises
    ``NumericError`` when it exceeds ``rel_tol``.
    """
    params = list(params)
    loss = loss_fn()
    for p in params:
        p.zero_grad()
    backward(loss)
    analytic = [np.array(p.grad if p.grad is not None else np.zeros_like(p.data)) for p in params]

    worst = 0.0
    worst_name = ""
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = float(loss_fn().data)
            flat[i] = old - h
            fm = float(loss_fn().data)
            flat[i] = old
            num = (fp - fm) / (2.0 * h)
            ana = float(analytic[pi].reshape(-1)[i])
            err = abs(num - ana) / max(abs(num), abs(ana), 1e-4)
            if err > worst:
                worst = err
                worst_name = f"param[{pi}] element {i}"
    if worst > rel_tol:
        raise NumericError(f"gradient check failed at {worst_name}: rel err {worst:.3e} > {rel_tol:g}")
    return worst
