"""Reverse-mode automatic differentiation on numpy arrays.

A Tensor wraps an ndarray plus a gradient slot and a backward closure.
Each op builds one graph node; backward() topologically sorts the graph
once and runs the closures in reverse, accumulating gradients into every
tensor that requires them (fan-out sums). The tape is per forward pass
and is freed after backward unless asked otherwise.

Every op keeps the dtype of its inputs, so the same graph code runs in
float64 (tests, gradient checks) and float32 (large training runs).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "set_debug_checks",
    "debug_checks_enabled",
    "matmul",
    "add",
    "sub",
    "scale",
    "hadamard",
    "transpose",
    "swapaxes",
    "reshape",
    "concat",
    "broadcast_to",
    "select_index",
    "mean_tokens",
    "softmax_rows",
    "attention_context",
    "layernorm",
    "rmsnorm",
    "relu",
    "swish",
    "absolute",
    "reduce_sum",
    "backward",
]

# When enabled, every op asserts its output is finite. Off by default:
# the check is a full pass over the data, which matters on hot paths.
_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def debug_checks_enabled() -> bool:
    return _DEBUG_CHECKS


class Tensor:
    """Node in the autodiff graph: value, gradient, and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None, free_graph: bool = True) -> None:
        backward(self, grad, free_graph=free_graph)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; the module-level functions are the real API.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return hadamard(self, other)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Create an interior node; drops the tape when no parent needs grads."""
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError(
            f"non-finite values produced by {backward_fn.__qualname__.split('.')[0]}"
        )
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _acc(t: Tensor, g: np.ndarray, shared: bool = False) -> None:
    """Accumulate g into t.grad. shared=True means g aliases another
    tensor's grad buffer and must be copied on first assignment."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if shared else g
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(root: Tensor, grad: np.ndarray | None = None, free_graph: bool = True) -> None:
    """Run reverse-mode accumulation from `root`.

    Iterative topological sort (no recursion, graphs can be deep), then
    each node's closure once. Leaf gradients survive; interior tape is
    released afterwards so activation memory is returned promptly.
    """
    if grad is None:
        grad = np.ones_like(root.data)
    else:
        grad = np.asarray(grad, dtype=root.data.dtype)
        if grad.shape != root.data.shape:
            raise ValueError(f"seed gradient shape {grad.shape} != value shape {root.data.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p._backward is not None:
                stack.append((p, False))
            elif id(p) not in visited:
                # Leaf: mark visited so it is not re-pushed via other children.
                visited.add(id(p))

    root.grad = grad if root.grad is None else root.grad + grad
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        if free_graph:
            # Release the closure right away: it holds the references to
            # this node's cached activations, which dominate peak memory.
            node._parents = ()
            node._backward = None
            if node is not root:
                node.grad = None


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy matmul semantics (batched, broadcast).

    The common case in this codebase is a stacked input against a 2D
    weight, [..., n, k] @ [k, m]; that is flattened to one GEMM instead
    of a loop of small ones.
    """
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        lead = ad.shape[:-1]
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(*lead, bd.shape[1])

        def _bw(g: np.ndarray) -> None:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                _acc(a, (g2 @ bd.T).reshape(ad.shape))
            if b.requires_grad:
                _acc(b, ad.reshape(-1, ad.shape[-1]).T @ g2)

        return _node(out, (a, b), _bw)

    out = np.matmul(ad, bd)

    def _bw(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = np.matmul(g, bd.swapaxes(-1, -2))
            _acc(a, _unbroadcast(ga, ad.shape))
        if b.requires_grad:
            gb = np.matmul(ad.swapaxes(-1, -2), g)
            _acc(b, _unbroadcast(gb, bd.shape))

    return _node(out, (a, b), _bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def _bw(g: np.ndarray) -> None:
        if a.requires_grad:
            _acc(a, _unbroadcast(g, a.data.shape), shared=g.shape == a.data.shape)
        if b.requires_grad:
            _acc(b, _unbroadcast(g, b.data.shape), shared=g.shape == b.data.shape)

    return _node(out, (a, b), _bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def _bw(g: np.ndarray) -> None:
        if a.requires_grad:
            _acc(a, _unbroadcast(g, a.data.shape), shared=g.shape == a.data.shape)
        if b.requires_grad:
            _acc(b, _unbroadcast(-g, b.data.shape))

    return _node(out, (a, b), _bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * c

    def _bw(g: np.ndarray) -> None:
        _acc(a, g * c)

    return _node(out, (a,), _bw)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def _bw(g: np.ndarray) -> None:
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out, (a, b), _bw)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    out = a.data.swapaxes(-1, -2)

    def _bw(g: np.ndarray) -> None:
        _acc(a, g.swapaxes(-1, -2), shared=True)

    return _node(out, (a,), _bw)


def swapaxes(a: Tensor, axis1: int, axis2: int) -> Tensor:
    out = a.data.swapaxes(axis1, axis2)

    def _bw(g: np.ndarray) -> None:
        _acc(a, g.swapaxes(axis1, axis2), shared=True)

    return _node(out, (a,), _bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)

    def _bw(g: np.ndarray) -> None:
        _acc(a, g.reshape(a.data.shape), shared=True)

    return _node(out, (a,), _bw)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def _bw(g: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _acc(t, g[tuple(idx)], shared=True)

    return _node(out, tuple(tensors), _bw)


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = np.broadcast_to(a.data, shape)

    def _bw(g: np.ndarray) -> None:
        _acc(a, _unbroadcast(g, a.data.shape))

    return _node(out, (a,), _bw)


def select_index(a: Tensor, index: int, axis: int) -> Tensor:
    """Pick one slice along `axis` (e.g. read a designated token row)."""
    out = np.take(a.data, index, axis=axis)

    def _bw(g: np.ndarray) -> None:
        full = np.zeros_like(a.data)
        idx = [slice(None)] * a.data.ndim
        idx[axis % a.data.ndim] = index
        full[tuple(idx)] = g
        _acc(a, full)

    return _node(out, (a,), _bw)


def mean_tokens(a: Tensor) -> Tensor:
    """Mean over the token axis (second to last): [..., n, d] -> [..., d]."""
    n = a.data.shape[-2]
    out = a.data.mean(axis=-2)

    def _bw(g: np.ndarray) -> None:
        ga = np.broadcast_to(np.expand_dims(g, -2), a.data.shape) / n
        _acc(a, np.ascontiguousarray(ga))

    return _node(out, (a,), _bw)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis with max subtraction for stability."""
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    p = x - m
    np.exp(p, out=p)
    denom = p.sum(axis=-1, keepdims=True)
    p /= denom

    def _bw(g: np.ndarray) -> None:
        # dX = (g - sum(g * p, -1, keepdims)) * p, without materializing g*p.
        s = np.einsum("...i,...i->...", g, p)
        dx = g - s[..., None]
        dx *= p
        _acc(a, dx)

    return _node(p, (a,), _bw)


# Target size of one attention score tile. Tiles this small stay resident
# in cache, so the softmax passes never touch main memory.
_ATTN_TILE_BYTES = 4 << 20


def attention_context(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    *,
    n_heads: int = 1,
    scale: float | None = None,
    capture: bool = False,
    tile_bytes: int = _ATTN_TILE_BYTES,
) -> tuple[Tensor, np.ndarray | None]:
    """Multi-head softmax(scale * q @ k^T) @ v over the last two axes.

    Inputs are [..., n, n_heads * d_h]; the head axis is split off here
    (and the context merged back) so callers skip the reshape/swapaxes
    round trip per projection. `scale` is folded into the internal copy
    of q, which multiplies every score exactly like scaling after the
    product.

    The flattened (leading, head) axes are processed in chunks sized so
    each chunk's score tile is at most `tile_bytes`; the whole softmax
    runs on the cache-resident tile, and backward recomputes it there
    bit-identically rather than streaming an [..., n, n] array through
    main memory twice. The softmax skips the usual max subtraction —
    softmax is shift-invariant, the subtraction exists only to keep
    exp() in range — and redoes a chunk the guarded classic way if its
    raw normalizer overflows or underflows, so the result is always
    finite. v carries an appended ones column so each row's normalizer
    falls out of the context product instead of a separate reduction.

    Returns (context, maps): context is [..., n, n_heads * d_h]; maps is
    the row-stochastic [..., n_heads, n, n] attention array (plain
    ndarray) when capture=True else None.
    """
    qd, kd, vd = q.data, k.data, v.data
    if not qd.shape == kd.shape == vd.shape or qd.ndim < 2:
        raise ValueError(f"incompatible attention shapes {qd.shape}/{kd.shape}/{vd.shape}")
    lead = qd.shape[:-2]
    n, width = qd.shape[-2:]
    if n_heads < 1 or width % n_heads:
        raise ValueError(f"model width {width} does not split into {n_heads} heads")
    dh = width // n_heads
    dtype = qd.dtype
    bh = n_heads
    for dim in lead:
        bh *= dim

    def _split(a: np.ndarray, factor: float | None = None) -> np.ndarray:
        # [..., n, H*dh] -> contiguous [bh, n, dh] with heads ahead of rows.
        view = np.moveaxis(a.reshape(*lead, n, n_heads, dh), -2, -3)
        dst = np.empty((bh, n, dh), dtype)
        if factor is None:
            np.copyto(dst.reshape(view.shape), view)
        else:
            np.multiply(view, dtype.type(factor), out=dst.reshape(view.shape))
        return dst

    def _merge(a3: np.ndarray, factor: float | None = None) -> np.ndarray:
        # [bh, n, dh] -> contiguous [..., n, H*dh].
        view = np.moveaxis(a3.reshape(*lead, n_heads, n, dh), -3, -2)
        dst = np.empty((*lead, n, n_heads, dh), dtype)
        if factor is None:
            np.copyto(dst, view)
        else:
            np.multiply(view, dtype.type(factor), out=dst)
        return dst.reshape(qd.shape)

    q3 = _split(qd, scale)
    k3 = _split(kd)
    chunk = max(1, int(tile_bytes) // max(1, n * n * dtype.itemsize))
    # The fast path needs row sums the backward divide can safely invert:
    # a sum near the denormal range would overflow g / row_sum. cbrt(tiny)
    # leaves ~2/3 of the exponent range as headroom for the downstream
    # products while still letting fairly negative scores through.
    sum_floor = np.cbrt(np.finfo(dtype).tiny)

    # v gains a ones column so exp-row sums fall out of the context
    # product: t @ [v | 1] = [t @ v | row_sum]. The tile probabilities
    # stay unnormalized; 1/row_sum is applied to the [.., n, dh+1] block
    # and, in backward, to g — both tiny next to an [n, n] tile pass.
    v_ext = np.empty((bh, n, dh + 1), dtype)
    np.copyto(
        v_ext.reshape(*lead, n_heads, n, dh + 1)[..., :dh],
        np.moveaxis(vd.reshape(*lead, n, n_heads, dh), -2, -3),
    )
    v_ext[:, :, dh] = 1
    out_ext = np.empty((bh, n, dh + 1), dtype)
    maps = np.empty((bh, n, n), dtype) if capture else None
    # Per-row shifts stay zero unless a chunk needed the guarded redo;
    # backward recomputes exp(s - shift) either way, bit-identical.
    shifts: dict[int, np.ndarray] = {}
    tile = np.empty((min(chunk, bh), n, n), dtype)
    for lo in range(0, bh, chunk):
        hi = min(lo + chunk, bh)
        s = np.matmul(q3[lo:hi], k3[lo:hi].swapaxes(-1, -2), out=tile[: hi - lo])
        with np.errstate(over="ignore", invalid="ignore"):
            np.exp(s, out=s)
            np.matmul(s, v_ext[lo:hi], out=out_ext[lo:hi])
        sums = out_ext[lo:hi, :, dh:]
        if not np.isfinite(out_ext[lo:hi]).all() or sums.min() <= sum_floor:
            # Raw exp() left this chunk's range; redo it max-subtracted.
            s = np.matmul(q3[lo:hi], k3[lo:hi].swapaxes(-1, -2), out=tile[: hi - lo])
            shifts[lo] = np.amax(s, axis=-1, keepdims=True)
            s -= shifts[lo]
            np.exp(s, out=s)
            np.matmul(s, v_ext[lo:hi], out=out_ext[lo:hi])
        if capture:
            np.divide(s, out_ext[lo:hi, :, dh:], out=maps[lo:hi])
        out_ext[lo:hi, :, :dh] /= out_ext[lo:hi, :, dh:]
    out3 = out_ext[:, :, :dh]
    row_sum = out_ext[:, :, dh:]

    def _bw(g: np.ndarray) -> None:
        dq = np.empty_like(q3)
        dk = np.empty_like(k3)
        dv = np.empty_like(q3)
        g3 = _split(g)
        g_ext = np.empty((min(chunk, bh), n, dh + 1), dtype)
        t_tile = np.empty((min(chunk, bh), n, n), dtype)
        ds_tile = np.empty((min(chunk, bh), n, n), dtype)
        for lo in range(0, bh, chunk):
            hi = min(lo + chunk, bh)
            c = hi - lo
            t = np.matmul(q3[lo:hi], k3[lo:hi].swapaxes(-1, -2), out=t_tile[:c])
            if lo in shifts:
                t -= shifts[lo]
            np.exp(t, out=t)
            # With gn = g/row_sum: d(scores) = t * (gn @ v^T - <gn, out>),
            # dv = t^T @ gn. Packing [gn | -<gn, out>] against [v | 1]
            # folds the rowwise subtraction into the score-shaped matmul.
            gn = np.divide(g3[lo:hi], row_sum[lo:hi], out=g_ext[:c, :, :dh])
            np.einsum("bnd,bnd->bn", gn, out3[lo:hi], out=g_ext[:c, :, dh])
            g_ext[:c, :, dh] *= -1
            ds = np.matmul(g_ext[:c], v_ext[lo:hi].swapaxes(-1, -2), out=ds_tile[:c])
            ds *= t
            np.matmul(ds, k3[lo:hi], out=dq[lo:hi])
            np.matmul(ds.swapaxes(-1, -2), q3[lo:hi], out=dk[lo:hi])
            np.matmul(t.swapaxes(-1, -2), gn, out=dv[lo:hi])
        _acc(q, _merge(dq, scale))
        _acc(k, _merge(dk))
        _acc(v, _merge(dv))

    merged = np.empty((*lead, n, n_heads, dh), dtype)
    np.copyto(
        merged, np.moveaxis(out_ext.reshape(*lead, n_heads, n, dh + 1)[..., :dh], -3, -2)
    )
    out = _node(merged.reshape(qd.shape), (q, k, v), _bw)
    return out, maps.reshape(*lead, n_heads, n, n) if capture else None


def layernorm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = a.data
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xhat = x - mu
    var = np.einsum("...i,...i->...", xhat, xhat)[..., None] / d
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv
    out = xhat * gamma.data
    out += beta.data

    def _bw(g: np.ndarray) -> None:
        if gamma.requires_grad:
            _acc(gamma, np.einsum("ri,ri->i", g.reshape(-1, d), xhat.reshape(-1, d)))
        if beta.requires_grad:
            _acc(beta, g.reshape(-1, d).sum(axis=0))
        if a.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = np.einsum("...i,...i->...", dxhat, xhat)[..., None] / d
            # Backward runs once per node, so the saved activation can be
            # consumed in place (the gain gradient above already read it).
            np.multiply(xhat, m2, out=xhat)
            np.subtract(dxhat, m1, out=dxhat)
            dxhat -= xhat
            dxhat *= inv
            _acc(a, dxhat)

    return _node(out, (a, gamma, beta), _bw)


def rmsnorm(a: Tensor, gamma: Tensor, eps: float = 1e-5) -> Tensor:
    """Scale the last axis by its root-mean-square, then gain. No recentering."""
    x = a.data
    d = x.shape[-1]
    inv = 1.0 / np.sqrt(np.einsum("...i,...i->...", x, x)[..., None] / d + eps)
    xhat = x * inv
    out = xhat * gamma.data

    def _bw(g: np.ndarray) -> None:
        if gamma.requires_grad:
            _acc(gamma, np.einsum("ri,ri->i", g.reshape(-1, d), xhat.reshape(-1, d)))
        if a.requires_grad:
            dxhat = g * gamma.data
            m2 = np.einsum("...i,...i->...", dxhat, xhat)[..., None] / d
            np.multiply(xhat, m2, out=xhat)
            np.subtract(dxhat, xhat, out=dxhat)
            dxhat *= inv
            _acc(a, dxhat)

    return _node(out, (a, gamma), _bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # derivative at exactly zero is taken as 0
    out = np.where(mask, a.data, 0.0).astype(a.data.dtype, copy=False)

    def _bw(g: np.ndarray) -> None:
        _acc(a, g * mask)

    return _node(out, (a,), _bw)


def swish(a: Tensor) -> Tensor:
    """x * sigmoid(x), the beta=1 variant."""
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    out = x * sig

    def _bw(g: np.ndarray) -> None:
        _acc(a, g * (sig * (1.0 + x * (1.0 - sig))))

    return _node(out, (a,), _bw)


def absolute(a: Tensor) -> Tensor:
    out = np.abs(a.data)
    sgn = np.sign(a.data)  # subgradient 0 at exactly zero

    def _bw(g: np.ndarray) -> None:
        _acc(a, g * sgn)

    return _node(out, (a,), _bw)


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    """Sum over one axis, or over everything (axis=None -> scalar)."""
    out = a.data.sum(axis=axis)

    def _bw(g: np.ndarray) -> None:
        if axis is None:
            _acc(a, np.full_like(a.data, g))
        else:
            ga = np.broadcast_to(np.expand_dims(g, axis), a.data.shape)
            _acc(a, np.ascontiguousarray(ga))

    return _node(out, (a,), _bw)
