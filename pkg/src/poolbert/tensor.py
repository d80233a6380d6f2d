"""Dense float32 tensors with reverse-mode automatic differentiation.

The design is deliberately small: a :class:`Tensor` wraps a numpy array plus
an optional gradient buffer, and every differentiable operation is a free
function that takes the participating tensors and a :class:`Tape`.  Ops
append a backward closure to the tape as they execute, so the tape is in
execution order, which is already a valid topological order.  ``backward``
walks it once in reverse.

Passing ``tape=None`` runs an op in inference mode: no closure is recorded
and the output does not require gradients.  All data buffers are float32;
gradient buffers match their tensor's shape exactly.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, InvariantError, ParameterError, ShapeError

_CHECK_FINITE = False

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715


def set_finite_checks(enabled: bool) -> bool:
    """Toggle NaN/Inf scanning at op boundaries; returns the previous value.

    Off by default (training-loop performance); tests switch it on.
    """
    global _CHECK_FINITE
    previous = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    return previous


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise InvariantError(f"non-finite values encountered in {op}")


class Tensor:
    """Shape + row-major float32 buffer with an optional gradient buffer.

    Scalar reduction results (losses) are the one exception to the float32
    rule: they are held in float64 so that finite-difference gradient checks
    at eps=1e-3 are not drowned by rounding of the reduced value.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=np.float32):
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


class Tape:
    """Ordered record of executed differentiable ops.

    Entries are appended in execution order, so inputs always precede the ops
    consuming them.  A tape is single-use: ``backward`` consumes it, and a
    second backward on the same tape raises ``InvariantError`` (gradients do
    not silently double).
    """

    __slots__ = ("_entries", "_consumed")

    def __init__(self):
        self._entries: list[Callable[[], None]] = []
        self._consumed = False

    def record(self, backward_fn: Callable[[], None]) -> None:
        self._entries.append(backward_fn)

    def __len__(self) -> int:
        return len(self._entries)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.astype(np.float32, copy=False)


def _result(
    data: np.ndarray,
    inputs: Sequence[Tensor],
    tape: Tape | None,
    backward_builder,
    op: str,
    dtype=np.float32,
) -> Tensor:
    """Wrap an op result, recording its backward closure when applicable."""
    _check_finite(data, op)
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track, dtype=dtype)
    if track:
        tape.record(backward_builder(out))
    return out


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Elementwise a + b with numpy broadcasting."""
    data = a.data + b.data

    def build(out):
        def bw():
            if out.grad is None:
                return
            if a.requires_grad:
                _accumulate(a, _unbroadcast(out.grad, a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(out.grad, b.shape))

        return bw

    return _result(data, (a, b), tape, build, "add")


def mul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Elementwise a * b with numpy broadcasting."""
    data = a.data * b.data

    def build(out):
        def bw():
            if out.grad is None:
                return
            if a.requires_grad:
                _accumulate(a, _unbroadcast(out.grad * b.data, a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(out.grad * a.data, b.shape))

        return bw

    return _result(data, (a, b), tape, build, "mul")


def scale(a: Tensor, factor: float, tape: Tape | None = None) -> Tensor:
    """a * constant."""
    factor = float(factor)
    data = a.data * np.float32(factor)

    def build(out):
        def bw():
            if out.grad is not None and a.requires_grad:
                _accumulate(a, out.grad * np.float32(factor))

        return bw

    return _result(data, (a,), tape, build, "scale")


def add_constant(a: Tensor, const: np.ndarray, tape: Tape | None = None) -> Tensor:
    """a + fixed array (no gradient through the constant); used for mask biases."""
    data = a.data + const.astype(np.float32)

    def build(out):
        def bw():
            if out.grad is not None and a.requires_grad:
                _accumulate(a, _unbroadcast(out.grad, a.shape))

        return bw

    return _result(data, (a,), tape, build, "add_constant")


def reshape(a: Tensor, shape: Sequence[int], tape: Tape | None = None) -> Tensor:
    data = a.data.reshape(shape)

    def build(out):
        def bw():
            if out.grad is not None and a.requires_grad:
                _accumulate(a, out.grad.reshape(a.shape))

        return bw

    return _result(data, (a,), tape, build, "reshape")


def transpose(a: Tensor, axes: Sequence[int], tape: Tape | None = None) -> Tensor:
    axes = tuple(axes)
    data = np.ascontiguousarray(a.data.transpose(axes))
    inverse = np.argsort(axes)

    def build(out):
        def bw():
            if out.grad is not None and a.requires_grad:
                _accumulate(a, out.grad.transpose(inverse))

        return bw

    return _result(data, (a,), tape, build, "transpose")


def concat(parts: Sequence[Tensor], axis: int, tape: Tape | None = None) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def build(out):
        def bw():
            if out.grad is None:
                return
            for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if part.requires_grad:
                    index = [slice(None)] * out.grad.ndim
                    index[axis] = slice(lo, hi)
                    _accumulate(part, out.grad[tuple(index)])

        return bw

    return _result(data, tuple(parts), tape, build, "concat")


def select_index(a: Tensor, axis: int, index: int, tape: Tape | None = None) -> Tensor:
    """Take one slice along ``axis``, removing that axis (e.g. position 0)."""
    data = np.take(a.data, index, axis=axis)

    def build(out):
        def bw():
            if out.grad is not None and a.requires_grad:
                g = np.zeros_like(a.data)
                sel = [slice(None)] * a.data.ndim
                sel[axis] = index
                g[tuple(sel)] = out.grad
                _accumulate(a, g)

        return bw

    return _result(data, (a,), tape, build, "select_index")


def slice_rows(a: Tensor, n: int, tape: Tape | None = None) -> Tensor:
    """First ``n`` rows of a 2-D tensor (position-embedding lookup)."""
    data = a.data[:n]

    def build(out):
        def bw():
            if out.grad is not None and a.requires_grad:
                g = np.zeros_like(a.data)
                g[:n] = out.grad
                _accumulate(a, g)

        return bw

    return _result(data, (a,), tape, build, "slice_rows")


def gather_rows(table: Tensor, ids: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Embedding lookup: table[V, H] indexed by an integer array of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"gather_rows: id out of range [0, {table.shape[0]}) in lookup"
        )
    data = table.data[ids]

    def build(out):
        def bw():
            if out.grad is not None and table.requires_grad:
                g = np.zeros_like(table.data)
                np.add.at(g, ids.ravel(), out.grad.reshape(-1, table.shape[1]))
                _accumulate(table, g)

        return bw

    return _result(data, (table,), tape, build, "gather_rows")


def gather_positions(
    a: Tensor,
    batch_idx: np.ndarray,
    pos_idx: np.ndarray,
    tape: Tape | None = None,
) -> Tensor:
    """Gather rows of a [B, N, H] tensor at (batch, position) pairs -> [P, H]."""
    batch_idx = np.asarray(batch_idx)
    pos_idx = np.asarray(pos_idx)
    if pos_idx.size and (pos_idx.min() < 0 or pos_idx.max() >= a.shape[1]):
        raise ShapeError("gather_positions: position out of range")
    data = a.data[batch_idx, pos_idx]

    def build(out):
        def bw():
            if out.grad is not None and a.requires_grad:
                g = np.zeros_like(a.data)
                np.add.at(g, (batch_idx, pos_idx), out.grad)
                _accumulate(a, g)

        return bw

    return _result(data, (a,), tape, build, "gather_positions")


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes.

    Backward: dA = dC @ B^T, dB = A^T @ dC, summed over broadcast axes.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul requires tensors with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.shape} x {b.shape}"
        )
    data = a.data @ b.data

    def build(out):
        def bw():
            if out.grad is None:
                return
            g = out.grad
            if a.requires_grad:
                ga = g @ b.data.swapaxes(-1, -2)
                _accumulate(a, _unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = a.data.swapaxes(-1, -2) @ g
                _accumulate(b, _unbroadcast(gb, b.shape))

        return bw

    return _result(data, (a, b), tape, build, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """x @ w + b for a [in, out] weight and [out] bias."""
    return add(matmul(x, w, tape), b, tape)


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1, tape: Tape | None = None) -> Tensor:
    """Numerically stable softmax: subtracts the per-slice max before exp."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def build(out):
        def bw():
            if out.grad is None or not x.requires_grad:
                return
            s = out.data
            g = out.grad
            dx = s * (g - (g * s).sum(axis=axis, keepdims=True))
            _accumulate(x, dx)

        return bw

    return _result(data, (x,), tape, build, "softmax")


def layer_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    eps: float = 1e-5,
    tape: Tape | None = None,
) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    if eps <= 0:
        raise ParameterError("layer_norm eps must be positive")
    h = x.shape[-1]
    if gamma.shape != (h,) or beta.shape != (h,):
        raise ShapeError("layer_norm gamma/beta must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.float32(eps))
    xhat = centered * inv_std
    data = gamma.data * xhat + beta.data

    def build(out):
        def bw():
            if out.grad is None:
                return
            g = out.grad
            if gamma.requires_grad:
                _accumulate(gamma, (g * xhat).reshape(-1, h).sum(axis=0))
            if beta.requires_grad:
                _accumulate(beta, g.reshape(-1, h).sum(axis=0))
            if x.requires_grad:
                dxhat = g * gamma.data
                m1 = dxhat.mean(axis=-1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
                _accumulate(x, inv_std * (dxhat - m1 - xhat * m2))

        return bw

    return _result(data, (x, gamma, beta), tape, build, "layer_norm")


def gelu(x: Tensor, tape: Tape | None = None, exact: bool = False) -> Tensor:
    """x * Phi(x); tanh approximation by default, exact erf behind a flag."""
    if exact:
        erf = np.vectorize(math.erf)
        phi = 0.5 * (1.0 + erf(x.data / np.float32(math.sqrt(2.0))))
        data = (x.data * phi).astype(np.float32)

        def build(out):
            def bw():
                if out.grad is None or not x.requires_grad:
                    return
                pdf = np.exp(-0.5 * x.data * x.data) / np.float32(
                    math.sqrt(2.0 * math.pi)
                )
                _accumulate(x, out.grad * (phi + x.data * pdf).astype(np.float32))

            return bw

    else:
        u = _SQRT_2_OVER_PI * (x.data + _GELU_CUBIC * x.data**3)
        t = np.tanh(u)
        data = (0.5 * x.data * (1.0 + t)).astype(np.float32)

        def build(out):
            def bw():
                if out.grad is None or not x.requires_grad:
                    return
                du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_CUBIC * x.data**2)
                local = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
                _accumulate(x, out.grad * local.astype(np.float32))

            return bw

    return _result(data, (x,), tape, build, "gelu")


def dropout(
    x: Tensor,
    rate: float,
    training: bool,
    rng: np.random.Generator | None = None,
    tape: Tape | None = None,
) -> Tensor:
    """Zero elements with probability ``rate``; survivors scale by 1/(1-rate).

    Identity in eval mode or at rate 0.  ``rng`` is required in training mode
    so that runs are reproducible.
    """
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in training mode requires an rng")
    keep = (rng.random(x.shape) >= rate).astype(np.float32)
    factor = np.float32(1.0 / (1.0 - rate))
    data = x.data * keep * factor

    def build(out):
        def bw():
            if out.grad is not None and x.requires_grad:
                _accumulate(x, out.grad * keep * factor)

        return bw

    return _result(data, (x,), tape, build, "dropout")


# ---------------------------------------------------------------------------
# reductions and pooling
# ---------------------------------------------------------------------------


def sum_all(x: Tensor, tape: Tape | None = None) -> Tensor:
    data = np.asarray(x.data.sum(dtype=np.float64))

    def build(out):
        def bw():
            if out.grad is not None and x.requires_grad:
                _accumulate(x, np.full_like(x.data, out.grad.reshape(())))

        return bw

    return _result(data, (x,), tape, build, "sum_all", dtype=np.float64)


def mean_all(x: Tensor, tape: Tape | None = None) -> Tensor:
    n = x.data.size
    data = np.asarray(x.data.mean(dtype=np.float64))

    def build(out):
        def bw():
            if out.grad is not None and x.requires_grad:
                _accumulate(x, np.full_like(x.data, out.grad.reshape(()) / n))

        return bw

    return _result(data, (x,), tape, build, "mean_all", dtype=np.float64)


def masked_max(x: Tensor, mask: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Elementwise max over axis 1 of [B, N, H], restricted to mask == 1.

    Gradient flows to the first maximal position of each (batch, feature)
    pair.  Rows whose mask is all zero are rejected.
    """
    mask = np.asarray(mask)
    if mask.shape != x.shape[:2]:
        raise ShapeError("masked_max mask must be [batch, seq]")
    if (mask.sum(axis=1) == 0).any():
        raise DataError("pooling over a row whose attention mask is all zero")
    neg = np.where(mask[:, :, None] > 0, x.data, -np.inf)
    argmax = neg.argmax(axis=1)  # [B, H]
    data = np.take_along_axis(neg, argmax[:, None, :], axis=1)[:, 0, :]

    def build(out):
        def bw():
            if out.grad is None or not x.requires_grad:
                return
            g = np.zeros_like(x.data)
            b_idx = np.arange(x.shape[0])[:, None]
            h_idx = np.arange(x.shape[2])[None, :]
            np.add.at(g, (b_idx, argmax, h_idx), out.grad)
            _accumulate(x, g)

        return bw

    return _result(data, (x,), tape, build, "masked_max")


def masked_mean(x: Tensor, mask: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Mean over axis 1 of [B, N, H], restricted to mask == 1."""
    mask = np.asarray(mask)
    if mask.shape != x.shape[:2]:
        raise ShapeError("masked_mean mask must be [batch, seq]")
    counts = mask.sum(axis=1).astype(np.float32)
    if (counts == 0).any():
        raise DataError("pooling over a row whose attention mask is all zero")
    m = mask.astype(np.float32)[:, :, None]
    data = (x.data * m).sum(axis=1) / counts[:, None]

    def build(out):
        def bw():
            if out.grad is None or not x.requires_grad:
                return
            _accumulate(x, out.grad[:, None, :] * m / counts[:, None, None])

        return bw

    return _result(data, (x,), tape, build, "masked_mean")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def softmax_cross_entropy(
    logits: Tensor, targets: np.ndarray, tape: Tape | None = None
) -> Tensor:
    """Mean cross-entropy of integer targets against softmax(logits).

    Fused log-softmax keeps the computation stable; backward is the classic
    (softmax - onehot) / n.
    """
    targets = np.asarray(targets)
    n, k = logits.shape
    if targets.shape != (n,):
        raise ShapeError("targets must be a vector matching the batch size")
    z = logits.data.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    data = np.asarray(-log_probs[np.arange(n), targets].mean())

    def build(out):
        def bw():
            if out.grad is None or not logits.requires_grad:
                return
            probs = np.exp(log_probs)
            probs[np.arange(n), targets] -= 1.0
            g = probs * (out.grad.reshape(()) / n)
            _accumulate(logits, g.astype(np.float32))

        return bw

    return _result(data, (logits,), tape, build, "softmax_cross_entropy",
                   dtype=np.float64)


def bce_with_logits(
    logits: Tensor, targets: np.ndarray, tape: Tape | None = None
) -> Tensor:
    """Mean binary cross-entropy between sigmoid(logits) and 0/1 targets.

    Uses the standard stable form max(z,0) - z*t + log(1 + exp(-|z|)),
    averaged over every element; backward is (sigmoid(z) - t) / numel.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise ShapeError("bce targets must match logits shape")
    z = logits.data.astype(np.float64)
    per_elem = np.maximum(z, 0.0) - z * targets + np.log1p(np.exp(-np.abs(z)))
    data = np.asarray(per_elem.mean())
    numel = z.size

    def build(out):
        def bw():
            if out.grad is None or not logits.requires_grad:
                return
            sig = 1.0 / (1.0 + np.exp(-z))
            g = (sig - targets) * (out.grad.reshape(()) / numel)
            _accumulate(logits, g.astype(np.float32))

        return bw

    return _result(data, (logits,), tape, build, "bce_with_logits",
                   dtype=np.float64)


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate gradients of every tensor reachable from ``loss``.

    Gradients accumulate additively across multiple uses of a tensor.  The
    tape is consumed: calling backward on it a second time raises.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got {loss.shape}")
    if tape._consumed:
        raise InvariantError("tape already consumed by a previous backward")
    tape._consumed = True
    loss.grad = np.ones_like(loss.data)
    for bw in reversed(tape._entries):
        bw()


def grad_check(
    f: Callable[[Tape | None], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-3,
    max_coords: int = 256,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic scalar function of ``params`` (dropout
    disabled), evaluated with a fresh tape for the analytic pass and with
    ``tape=None`` for the perturbed numeric evaluations.  At most
    ``max_coords`` coordinates per tensor are sampled.
    """
    rng = np.random.default_rng(seed)
    tape = Tape()
    loss = f(tape)
    backward(loss, tape)
    analytic = [None if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, grad in zip(params, analytic):
        if grad is None:
            grad = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, max_coords, False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            up = f(None).item()
            flat[c] = orig - eps
            down = f(None).item()
            flat[c] = orig
            numeric = (up - down) / (2.0 * eps)
            a = float(grad.reshape(-1)[c])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
