"""A small tape-based reverse-mode autodiff over dense numpy arrays.

Only the operations the network needs are provided; there is no general
broadcasting. Operations record onto the active :class:`Tape` (entered with
``with Tape() as tape:``) when any input requires a gradient. Outside a tape
nothing is recorded, which is how inference runs.

    >>> with Tape() as tape:
    ...     y = total(relu(x))
    >>> tape.backward(y)
    >>> x.grad
"""
from __future__ import annotations

import contextvars
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "active_tape", default=None
)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # sugar for the handful of binary ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, name=name)


class Tape:
    """Ordered record of executed operations for one forward/backward session."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, output: Tensor, grad: Optional[np.ndarray] = None) -> None:
        """Propagate adjoints from ``output`` back through the recorded ops.

        Records are replayed in exact reverse execution order, so every
        adjoint is complete before its producer runs. Leaf tensors that
        require grad get the result *added* to ``.grad``.
        """
        seed = np.ones_like(output.data) if grad is None else np.asarray(grad, output.dtype)
        adj: dict[int, np.ndarray] = {id(output): seed}
        produced = set()
        for out, inputs, backward_fn in reversed(self.records):
            produced.add(id(out))
            g = adj.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, backward_fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in adj:
                    adj[key] = adj[key] + gi
                else:
                    adj[key] = gi
        leaves = {}
        for _, inputs, _ in self.records:
            for t in inputs:
                leaves[id(t)] = t
        if id(output) not in produced:
            leaves[id(output)] = output
        for key, g in adj.items():
            t = leaves.get(key)
            if t is None or key in produced or not t.requires_grad:
                continue
            g = g.astype(t.dtype, copy=False)
            t.grad = g.copy() if t.grad is None else t.grad + g


def _record(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = _active_tape.get()
    if needs and tape is not None:
        tape.records.append((out, tuple(inputs), backward_fn))
    return out


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shapes differ {a.shape} vs {b.shape}")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"sub: shapes differ {a.shape} vs {b.shape}")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal-shape tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mul: shapes differ {a.shape} vs {b.shape}")
    return _record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def mul_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Product with a constant array of the same shape (e.g. a dropout mask)."""
    c = np.asarray(c, dtype=x.dtype)
    return _record(x.data * c, (x,), lambda g: (g * c,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.maximum(x.data, 0), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra and normalization


def linear(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ W.T + b`` along the last axis; ``W`` is (out, in)."""
    if W.data.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ValueError(f"linear: input shape {x.shape} does not match weight shape {W.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise ValueError(f"linear: bias shape {b.shape} does not match weight shape {W.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    y = x2 @ W.data.T
    if b is not None:
        y = y + b.data
    y = y.reshape(*lead, W.shape[0])

    def backward(g):
        g2 = g.reshape(-1, W.shape[0])
        gx = (g2 @ W.data).reshape(x.shape) if x.requires_grad else None
        gW = g2.T @ x2 if W.requires_grad else None
        gb = colsum(g2) if b is not None and b.requires_grad else None
        return gx, gW, gb

    inputs = (x, W) if b is None else (x, W, b)
    return _record(y, inputs, backward)


def colsum(x2: np.ndarray) -> np.ndarray:
    """Column sums of a 2-D array (a BLAS matrix-vector product; much faster
    than ``sum(axis=0)`` for tall, narrow arrays)."""
    return np.ones(x2.shape[0], dtype=x2.dtype) @ x2


def batch_norm(
    x: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    gamma: Tensor,
    beta: Tensor,
    train: bool,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Batch normalization over all leading axes of ``x`` (channels last).

    Train mode normalizes with batch statistics and updates the running
    buffers in place (unbiased variance, like most frameworks); eval mode
    uses the running buffers.
    """
    c = x.shape[-1]
    x2 = x.data.reshape(-1, c)
    n = x2.shape[0]
    if train:
        if n < 2:
            raise ValueError("batch_norm in train mode needs at least 2 rows")
        mean = colsum(x2) / n
        xc = x2 - mean
        var = colsum(xc * xc) / n
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        mean, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
        xc = x2 - mean
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv
    y = (xhat * gamma.data + beta.data).reshape(x.shape).astype(x.dtype, copy=False)

    def backward(g):
        g2 = g.reshape(-1, c)
        gbeta = colsum(g2)
        ggamma = colsum(g2 * xhat)
        if train:
            scale = gamma.data * inv
            gx = scale * (g2 - gbeta / n - xhat * (ggamma / n))
        else:
            gx = g2 * (gamma.data * inv)
        return gx.reshape(x.shape), ggamma, gbeta

    return _record(y, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# shape plumbing


def concat_last(xs: Sequence[Tensor]) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    lead = xs[0].shape[:-1]
    for t in xs:
        if t.shape[:-1] != lead:
            raise ValueError(f"concat_last: leading shapes differ {lead} vs {t.shape[:-1]}")
    widths = [t.shape[-1] for t in xs]
    cuts = np.cumsum(widths)[:-1]
    y = np.concatenate([t.data for t in xs], axis=-1)
    return _record(y, tuple(xs), lambda g: tuple(np.split(g, cuts, axis=-1)))


def slice_last(x: Tensor, parts: int) -> list[Tensor]:
    c = x.shape[-1]
    if parts < 1 or c % parts:
        raise ValueError(f"slice_last: last extent {c} is not divisible by {parts}")
    w = c // parts
    out = []
    for k in range(parts):
        lo, hi = k * w, (k + 1) * w

        def backward(g, lo=lo, hi=hi):
            full = np.zeros_like(x.data)
            full[..., lo:hi] = g
            return (full,)

        out.append(_record(np.ascontiguousarray(x.data[..., lo:hi]), (x,), backward))
    return out


def reshape(x: Tensor, shape) -> Tensor:
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def _scatter_rows(g: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    flat = idx.reshape(-1)
    g2 = g.reshape(flat.size, -1)
    S = sp.csr_matrix(
        (np.ones(flat.size, dtype=g.dtype), (flat, np.arange(flat.size))), shape=(n, flat.size)
    )
    return np.asarray(S @ g2).astype(g.dtype, copy=False)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Rows of a 2-D tensor: (N, C) indexed by an int array of shape S -> (*S, C)."""
    if x.data.ndim != 2:
        raise ValueError(f"gather_rows expects a 2-D tensor, got shape {x.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]
    return _record(x.data[idx], (x,), lambda g: (_scatter_rows(g, idx, n),))


def pair_linear(f: Tensor, query_rows: np.ndarray, neighbor_rows: np.ndarray, W: Tensor,
                b: Optional[Tensor], P: np.ndarray) -> Tensor:
    """``linear([f_i, f_j - f_i, P_ij], W, b)`` for every (query, neighbor) pair.

    Same result as gathering, concatenating and applying :func:`linear`, but
    the (M, K, 2C + w) input is never materialized: the two feature blocks of
    ``W`` are applied per point first and then gathered.
    """
    c = f.shape[1]
    m, k = neighbor_rows.shape
    w = P.shape[-1]
    if W.shape[1] != 2 * c + w or P.shape[:2] != (m, k):
        raise ValueError(
            f"pair_linear: weight {W.shape} does not fit features {f.shape} and encoding {P.shape}")
    o = W.shape[0]
    Wa, Wb, Wc = W.data[:, :c], W.data[:, c:2 * c], W.data[:, 2 * c:]
    P = P.astype(f.dtype, copy=False)
    f_q = f.data[query_rows]
    per_query = f_q @ (Wa - Wb).T
    if b is not None:
        per_query = per_query + b.data
    per_point = f.data @ Wb.T
    y = per_point[neighbor_rows]
    y += per_query[:, None, :]
    y += (P.reshape(-1, w) @ Wc.T).reshape(m, k, o)
    n = f.shape[0]

    def backward(g):
        g_q = np.einsum("mko->mo", g)
        g_pt = _scatter_rows(g, neighbor_rows, n)  # (N, o)
        gf = gW = gb = None
        if f.requires_grad:
            gf = _scatter_rows(g_q @ (Wa - Wb), query_rows, n) + g_pt @ Wb
        if W.requires_grad:
            ga = g_q.T @ f_q
            gw_b = g_pt.T @ f.data - ga
            gW = np.concatenate([ga, gw_b, g.reshape(-1, o).T @ P.reshape(-1, w)], axis=1)
        if b is not None and b.requires_grad:
            gb = colsum(g_q)
        return gf, gW, gb

    inputs = (f, W) if b is None else (f, W, b)
    return _record(y, inputs, backward)


def expand_neighbors(x: Tensor, k: int) -> Tensor:
    """(M, C) -> (M, K, C) by repeating each row K times."""
    y = np.broadcast_to(x.data[:, None, :], (x.shape[0], k, x.shape[1]))
    return _record(np.ascontiguousarray(y), (x,), lambda g: (np.einsum("mkc->mc", g),))


def max_over_neighbors(g: Tensor) -> Tensor:
    """Entrywise max over axis 1 of an (M, K, C) tensor.

    The adjoint of each output goes to a single input: the lowest-k argmax.
    """
    if g.data.ndim != 3:
        raise ValueError(f"max_over_neighbors expects (M, K, C), got {g.shape}")
    arg = g.data.argmax(axis=1)  # first occurrence on ties
    y = np.take_along_axis(g.data, arg[:, None, :], axis=1)[:, 0, :]

    def backward(gout):
        full = np.zeros_like(g.data)
        np.put_along_axis(full, arg[:, None, :], gout[:, None, :], axis=1)
        return (full,)

    return _record(y, (g,), backward)


def bn_relu_max(
    x: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    gamma: Tensor,
    beta: Tensor,
    train: bool,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """``max_over_neighbors(relu(batch_norm(x)))`` for an (M, K, C) tensor, fused.

    Normalization followed by ReLU is monotone in ``x`` per channel
    (increasing where the effective scale ``gamma / std`` is >= 0, decreasing
    otherwise), so the neighbor maximum can be located on ``x`` itself and
    the normalized (M, K, C) tensor is never formed. Statistics, running
    buffer updates and tie routing (lowest k) match the unfused chain.
    """
    if x.data.ndim != 3:
        raise ValueError(f"bn_relu_max expects (M, K, C), got {x.shape}")
    m, k, c = x.shape
    x2 = x.data.reshape(-1, c)
    n = x2.shape[0]
    if train:
        if n < 2:
            raise ValueError("batch_norm in train mode needs at least 2 rows")
        mean = colsum(x2) / n
        xc = x2 - mean
        var = colsum(xc * xc) / n
        del xc
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        mean, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    scale = (gamma.data * inv).astype(x.dtype)
    flip = scale < 0
    if flip.any():
        arg = np.where(flip, x.data.argmin(axis=1), x.data.argmax(axis=1))
    else:
        arg = x.data.argmax(axis=1)
    idx = arg[:, None, :]
    x_sel = np.take_along_axis(x.data, idx, axis=1)[:, 0, :]
    xhat_sel = (x_sel - mean) * inv
    pre = (xhat_sel * gamma.data + beta.data).astype(x.dtype, copy=False)
    y = np.maximum(pre, 0)

    def backward(g):
        gy = g * (pre > 0)
        gbeta = colsum(gy)
        ggamma = colsum(gy * xhat_sel)
        if train:
            # d/dx of the batch statistics reaches every element: gx = x * a + b
            a = (-scale * inv * ggamma / n).astype(x.dtype)
            b = (scale * (inv * ggamma * mean - gbeta) / n).astype(x.dtype)
            full = x.data * a
            full += b
            sel = np.take_along_axis(full, idx, axis=1)
            np.put_along_axis(full, idx, sel + (scale * gy)[:, None, :], axis=1)
        else:
            full = np.zeros_like(x.data)
            np.put_along_axis(full, idx, (scale * gy)[:, None, :], axis=1)
        return full, ggamma, gbeta

    return _record(y, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# reductions and losses


def total(x: Tensor) -> Tensor:
    return _record(np.asarray(x.data.sum()), (x,), lambda g: (np.full_like(x.data, g),))


def weighted_sum(x: Tensor, w: np.ndarray) -> Tensor:
    """``sum(x * w)`` for a constant ``w``; handy for gradient checks."""
    w = np.asarray(w, dtype=x.dtype)
    return _record(np.asarray((x.data * w).sum()), (x,), lambda g: (g * w,))


def log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels: np.ndarray, smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy against one-hot targets mixed with ``smoothing``/c uniform mass."""
    b, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    target = np.full((b, c), smoothing / c, dtype=logits.dtype)
    target[np.arange(b), labels] += 1.0 - smoothing
    logp = log_softmax(logits.data)
    loss = np.asarray(-(target * logp).sum() / b, dtype=logits.dtype)

    def backward(g):
        return (g * (np.exp(logp) - target) / b,)

    return _record(loss, (logits,), backward)


# ---------------------------------------------------------------------------
# verification


def grad_check(fn: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` must return a scalar tensor. Relative error per coordinate uses the
    denominator ``max(|a|, |b|, 1e-8)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(x.data, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        y = fn(xt)
    if y.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    tape.backward(y)
    analytic = np.zeros_like(base) if xt.grad is None else xt.grad.astype(np.float64)

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    probe = base.copy()
    pflat = probe.reshape(-1)
    for i in range(pflat.size):
        orig = pflat[i]
        pflat[i] = orig + step
        hi = float(fn(Tensor(probe.copy())).data)
        pflat[i] = orig - step
        lo = float(fn(Tensor(probe.copy())).data)
        pflat[i] = orig
        flat[i] = (hi - lo) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
