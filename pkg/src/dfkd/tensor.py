"""Minimal reverse-mode autodiff engine on flat numpy storage.

Tensors are dense float arrays (float32 for training, float64 for gradient
checking) with an optional grad buffer. Every differentiable op records a
node on a per-forward tape (define-by-run); ``backward`` walks the tape in
reverse topological order exactly once and then invalidates the root.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "UsageError",
    "matmul",
    "conv2d",
    "relu",
    "tanh",
    "exp",
    "clamp",
    "add",
    "subtract",
    "multiply",
    "divide",
    "scalar_multiply",
    "mean",
    "tsum",
    "max_pool2x2",
    "global_avg_pool",
    "batch_norm",
    "reshape",
    "flatten",
    "softmax_cross_entropy",
    "huber",
    "pairwise_dist",
    "batched_project",
    "svd",
    "jacobi_svd",
]


class DimensionError(ValueError):
    """Shapes do not satisfy an op's contract."""


class UsageError(RuntimeError):
    """The autodiff API was called out of contract (e.g. double backward)."""


class Tensor:
    """Dense array with optional grad buffer and tape bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_op", "_spent")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None
        self._op = None
        self._spent = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={self._op})"

    def detach(self):
        t = Tensor(self.data, requires_grad=False)
        return t

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return subtract(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return subtract(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_multiply(self, other)
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scalar_multiply(self, 1.0 / other)
        return divide(self, other)

    def __neg__(self):
        return scalar_multiply(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- autodiff ----------------------------------------------------------

    def backward(self):
        """Populate grads of all reachable leaves from this scalar root."""
        if self.data.size != 1:
            raise UsageError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if self._backward_fn is None and not self.requires_grad:
            raise UsageError("backward called on a detached tensor (no recorded graph)")
        if self._spent:
            raise UsageError("backward already ran for this loss; re-run the forward pass first")
        self._spent = True

        topo = []
        visited = set()
        stack = [(self, False)]
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
                if id(p) not in visited:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward_fn is not None:
                parent_grads = node._backward_fn(g)
                for p, pg in zip(node._parents, parent_grads):
                    if pg is None:
                        continue
                    acc = grads.get(id(p))
                    grads[id(p)] = pg if acc is None else acc + pg
            elif node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g


def _as_tensor(x, dtype=np.float32):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _from_op(data, parents, backward_fn, op):
    out = Tensor(data)
    if any(p.requires_grad or p._backward_fn is not None for p in parents):
        out.requires_grad = False
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
        out._op = op
    return out


def _unbroadcast(grad, shape):
    """Sum grad over axes that were broadcast up from `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# -- elementwise ----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _from_op(out, (a, b), bwd, "add")


def subtract(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _from_op(out, (a, b), bwd, "subtract")


def multiply(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _from_op(out, (a, b), bwd, "multiply")


def divide(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _from_op(out, (a, b), bwd, "divide")


def scalar_multiply(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * c

    def bwd(g):
        return (g * c,)

    return _from_op(out, (a,), bwd, "scalar_multiply")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, 0)

    def bwd(g):
        return (g * mask,)

    return _from_op(out, (a,), bwd, "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1 - out * out),)

    return _from_op(out, (a,), bwd, "tanh")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _from_op(out, (a,), bwd, "exp")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)

    def bwd(g):
        return (g * mask,)

    return _from_op(out, (a,), bwd, "clamp")


def huber(a: Tensor, delta: float = 1.0) -> Tensor:
    """Elementwise Huber penalty of `a` (quadratic within ±delta)."""
    absa = np.abs(a.data)
    out = np.where(absa <= delta, 0.5 * a.data * a.data, delta * (absa - 0.5 * delta))

    def bwd(g):
        return (g * np.clip(a.data, -delta, delta),)

    return _from_op(out, (a,), bwd, "huber")


# -- reductions -----------------------------------------------------------


def tsum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype),)
        gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).astype(a.dtype),)

    return _from_op(out, (a,), bwd, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    out = a.data.mean(axis=axis)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).astype(a.dtype),)
        gg = np.expand_dims(g, axis) / n
        return (np.broadcast_to(gg, a.shape).astype(a.dtype),)

    return _from_op(out, (a,), bwd, "mean")


# -- shape ----------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _from_op(out, (a,), bwd, "reshape")


def flatten(a: Tensor) -> Tensor:
    """Collapse all but the leading (batch) dimension."""
    return reshape(a, (a.shape[0], -1))


# -- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _from_op(out, (a, b), bwd, "matmul")


def batched_project(x: Tensor, basis: np.ndarray) -> Tensor:
    """Per-sample projection: (N,M,C) tensor against constant (N,C,K) bases."""
    if x.data.ndim != 3 or basis.ndim != 3 or x.shape[0] != basis.shape[0] or x.shape[2] != basis.shape[1]:
        raise DimensionError(f"batched_project shape mismatch: {x.shape} vs {basis.shape}")
    b = basis.astype(x.dtype)
    out = np.einsum("nmc,nck->nmk", x.data, b)

    def bwd(g):
        return (np.einsum("nmk,nck->nmc", g, b),)

    return _from_op(out, (x,), bwd, "batched_project")


def transpose_last2(a: Tensor) -> Tensor:
    out = np.swapaxes(a.data, -1, -2)

    def bwd(g):
        return (np.swapaxes(g, -1, -2),)

    return _from_op(out, (a,), bwd, "transpose_last2")


def pairwise_dist(a: Tensor) -> Tensor:
    """Euclidean distance matrix of the rows of an (N,D) tensor.

    The diagonal is exactly zero and receives no gradient (the sqrt is not
    differentiable there); off-diagonal zeros likewise get zero gradient.
    """
    if a.data.ndim != 2:
        raise DimensionError(f"pairwise_dist expects (N,D), got {a.shape}")
    diff = a.data[:, None, :] - a.data[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=2))

    def bwd(g):
        safe = np.where(d > 0, d, 1.0)
        w = np.where(d > 0, g / safe, 0.0)
        # dD_ij/da_i = (a_i - a_j)/D_ij ; row i collects +, column i collects -
        ga = (w[:, :, None] * diff).sum(axis=1) - (w[:, :, None] * diff).sum(axis=0)
        return (ga.astype(a.dtype),)

    return _from_op(d, (a,), bwd, "pairwise_dist")


# -- convolution and pooling ----------------------------------------------


def _im2col(x, kh, kw, stride, padding):
    n, c, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    s0, s1, s2, s3 = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return cols.reshape(n, c * kh * kw, ho * wo), ho, wo


def _col2im(gcols, x_shape, kh, kw, stride, padding, ho, wo):
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    gxp = np.zeros((n, c, hp, wp), dtype=gcols.dtype)
    g6 = gcols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g6[:, :, i, j]
    if padding:
        return gxp[:, :, padding:-padding, padding:-padding]
    return gxp


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with FCKhKw kernel, zero padding."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input/kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if ck != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"kernel {kernel.shape} larger than padded input {x.shape} (padding={padding})"
        )
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    kmat = kernel.data.reshape(f, -1)
    out = np.einsum("fk,nkp->nfp", kmat, cols).reshape(n, f, ho, wo)

    def bwd(g):
        gmat = g.reshape(n, f, ho * wo)
        gk = np.einsum("nfp,nkp->fk", gmat, cols).reshape(kernel.shape)
        gcols = np.einsum("fk,nfp->nkp", kmat, gmat)
        gx = _col2im(gcols, x.data.shape, kh, kw, stride, padding, ho, wo)
        return gx, gk

    return _from_op(out, (x, kernel), bwd, "conv2d")


def max_pool2x2(x: Tensor) -> Tensor:
    if x.data.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise DimensionError(f"max_pool2x2 needs 4-D input with even H,W, got {x.shape}")
    n, c, h, w = x.shape
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2)
    out = blocks.max(axis=(3, 5))
    # winner mask; ties split gradient equally nowhere: first max wins via argmax
    flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = flat.argmax(axis=4)

    def bwd(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=4)
        gx = gflat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(x.shape)
        return (gx,)

    return _from_op(out, (x,), bwd, "max_pool2x2")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),)

    return _from_op(out, (x,), bwd, "global_avg_pool")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: dict, training: bool,
               momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalization over (N,) or (N,H,W) per channel.

    `state` carries running_mean/running_var arrays, updated in training mode.
    Always computed in the input dtype's full precision.
    """
    if x.data.ndim == 4:
        axes = (0, 2, 3)
        shape = (1, -1, 1, 1)
    elif x.data.ndim == 2:
        axes = (0,)
        shape = (1, -1)
    else:
        raise DimensionError(f"batch_norm expects 2-D or 4-D input, got {x.shape}")
    m = x.data.size // x.data.shape[1]

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state["running_mean"] = (1 - momentum) * state["running_mean"] + momentum * mu
        state["running_var"] = (1 - momentum) * state["running_var"] + momentum * var
    else:
        mu = state["running_mean"]
        var = state["running_var"]

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shape)) * inv.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def bwd(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gs = g * gamma.data.reshape(shape)
        if training:
            gx = (inv.reshape(shape) / m) * (
                m * gs
                - gs.sum(axis=axes).reshape(shape)
                - xhat * (gs * xhat).sum(axis=axes).reshape(shape)
            )
        else:
            gx = gs * inv.reshape(shape)
        return gx.astype(x.dtype), ggamma.astype(gamma.dtype), gbeta.astype(beta.dtype)

    return _from_op(out, (x, gamma, beta), bwd, "batch_norm")


# -- losses ---------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean cross-entropy between target rows and softmax(logits) rows.

    Targets are treated as constants; gradient to logits is (softmax - t)/N.
    """
    if logits.data.ndim != 2 or logits.shape != targets.shape:
        raise DimensionError(f"softmax_cross_entropy shapes: {logits.shape} vs {targets.shape}")
    rowsum = targets.data.sum(axis=1)
    if np.abs(rowsum - 1.0).max() > 1e-5:
        raise ValueError(f"target rows must sum to 1 (max deviation {np.abs(rowsum - 1.0).max():.2e})")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = -(targets.data * logp).sum() / n
    sm = np.exp(logp)

    def bwd(g):
        return (g * (sm - targets.data) / n, None)

    return _from_op(np.asarray(out, dtype=logits.dtype), (logits, targets), bwd, "softmax_cross_entropy")


# -- SVD ------------------------------------------------------------------


def jacobi_svd(a: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100):
    """One-sided Jacobi SVD of a 2-D array (float64 internally).

    Returns (U, S, Vt) with A ~= U @ diag(S) @ Vt, singular values sorted
    descending and non-negative.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"jacobi_svd expects a 2-D array, got shape {a.shape}")
    m, n = a.shape
    if m < n:
        u, s, vt = jacobi_svd(a.T, tol, max_sweeps)
        return vt.T, s, u.T

    u = a.copy()
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = u[:, p] @ u[:, p]
                beta = u[:, q] @ u[:, q]
                gamma = u[:, p] @ u[:, q]
                denom = np.sqrt(alpha * beta)
                rel = abs(gamma) / denom if denom > 0 else 0.0
                off = max(off, rel)
                if rel <= tol:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s_ = c * t
                up, uq = u[:, p].copy(), u[:, q].copy()
                u[:, p] = c * up - s_ * uq
                u[:, q] = s_ * up + c * uq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s_ * vq
                v[:, q] = s_ * vp + c * vq
        if off <= tol:
            break

    s = np.sqrt((u * u).sum(axis=0))
    order = np.argsort(-s)
    s = s[order]
    u = u[:, order]
    v = v[:, order]
    nz = s > 1e-300
    u = np.where(nz[None, :], u / np.where(nz, s, 1.0)[None, :], 0.0)
    return u, s, v.T


def jacobi_svd_batched(a: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100):
    """One-sided Jacobi SVD applied to a stack of same-shape matrices.

    Input (B,m,n); returns (U, S, Vt) with shapes (B,m,n), (B,n), (B,n,n).
    The rotation schedule matches jacobi_svd; the pair loop runs in Python
    while each rotation is applied across the whole batch at once.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 3:
        raise DimensionError(f"jacobi_svd_batched expects a 3-D array, got shape {a.shape}")
    b, m, n = a.shape
    if m < n:
        u, s, vt = jacobi_svd_batched(a.transpose(0, 2, 1), tol, max_sweeps)
        return vt.transpose(0, 2, 1), s, u.transpose(0, 2, 1)

    u = a.copy()
    v = np.broadcast_to(np.eye(n), (b, n, n)).copy()
    # round-robin tournament schedule: each round pairs disjoint columns, so
    # all rotations in a round commute and can be applied at once
    players = list(range(n)) + ([-1] if n % 2 else [])
    rounds = []
    order = players[:]
    for _ in range(len(players) - 1):
        pairs = [(min(order[i], order[-1 - i]), max(order[i], order[-1 - i]))
                 for i in range(len(order) // 2)
                 if order[i] != -1 and order[-1 - i] != -1]
        if pairs:
            rounds.append(np.array(pairs))
        order = [order[0]] + [order[-1]] + order[1:-1]

    for _ in range(max_sweeps):
        off = 0.0
        for pairs in rounds:
            pcol, qcol = pairs[:, 0], pairs[:, 1]
            up, uq = u[:, :, pcol], u[:, :, qcol]  # (B, m, r)
            alpha = (up * up).sum(axis=1)
            beta = (uq * uq).sum(axis=1)
            gamma = (up * uq).sum(axis=1)
            denom = np.sqrt(alpha * beta)
            rel = np.where(denom > 0, np.abs(gamma) / np.where(denom > 0, denom, 1.0), 0.0)
            off = max(off, float(rel.max()))
            active = rel > tol
            if not active.any():
                continue
            zeta = np.where(active, (beta - alpha) / np.where(active, 2.0 * gamma, 1.0), 0.0)
            t = np.where(active, np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta)), 0.0)
            c = (1.0 / np.sqrt(1.0 + t * t))[:, None, :]
            s_ = c * t[:, None, :]
            u[:, :, pcol] = c * up - s_ * uq
            u[:, :, qcol] = s_ * up + c * uq
            vp, vq = v[:, :, pcol], v[:, :, qcol]
            v[:, :, pcol] = c * vp - s_ * vq
            v[:, :, qcol] = s_ * vp + c * vq
        if off <= tol:
            break

    s = np.sqrt((u * u).sum(axis=1))
    order = np.argsort(-s, axis=1)
    s = np.take_along_axis(s, order, axis=1)
    u = np.take_along_axis(u, order[:, None, :], axis=2)
    v = np.take_along_axis(v, order[:, None, :], axis=2)
    nz = s > 1e-300
    scale = np.where(nz, s, 1.0)
    u = np.where(nz[:, None, :], u / scale[:, None, :], 0.0)
    return u, s, v.transpose(0, 2, 1)


def svd(a: Tensor):
    """Forward-only SVD of a 2-D tensor; no gradient flows through it."""
    if a.data.ndim != 2:
        raise DimensionError(f"svd expects a 2-D tensor, got {a.shape}")
    u, s, vt = jacobi_svd(a.data)
    return Tensor(u.astype(a.dtype)), Tensor(s.astype(a.dtype)), Tensor(vt.astype(a.dtype))
