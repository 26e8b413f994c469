"""Dense float32 tensors with a reverse-mode gradient tape.

Storage is row-major numpy float32. Only the trainable side of the pipeline
records onto a tape; frozen-model inference runs on plain arrays. There is no
implicit broadcasting except scalar-with-tensor; shape changes go through
explicit ops (expand_leading, reshape, transpose) so mismatches fail loudly.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, NumericError, ShapeError

_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    """A float32 array plus gradient bookkeeping.

    Treat instances as immutable once created; the optimizer is the only code
    that writes ``data`` in place, between tape lifetimes.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


# The innermost `with GradTape()` block; ops record onto it when an input
# requires gradients.
_TAPE_STACK: list["GradTape"] = []


def _active_tape() -> "GradTape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class GradTape:
    """Ordered record of differentiable ops plus a parameter registry.

    Records are appended in execution order, so replaying them in reverse is a
    reverse topological walk of the graph. Single-threaded by contract.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._params: list[Tensor] = []

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def watch(self, params: Iterable[Tensor]) -> None:
        """Register parameters so backward() guarantees each ends with a gradient."""
        for p in params:
            p.requires_grad = True
            self._params.append(p)

    def _record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self._records.append((out, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(param) into each participating tensor's .grad.

        Registered parameters that the loss does not depend on receive zero
        gradients of their own shape.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        for p in self._params:
            p.grad = None  # parameters may carry grads from an earlier tape
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._records):
            if out.grad is None:
                continue
            fn(out.grad)
        for p in self._params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self._params:
            p.grad = None


def backward(tape: GradTape, loss: Tensor) -> None:
    """Run reverse-mode differentiation of `loss` over everything `tape` recorded."""
    tape.backward(loss)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g.astype(np.float32, copy=False)


def _make_out(data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result; record the backward closure if a tape is listening."""
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    tape = _active_tape()
    if requires and tape is not None:
        tape._record(out, backward_fn(out))
    return out


# ---------------------------------------------------------------------------
# Construction helpers
# ---------------------------------------------------------------------------


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=requires_grad)


def randn(rng: np.random.Generator, shape, std: float = 1.0, requires_grad: bool = False) -> Tensor:
    data = (rng.standard_normal(shape) * std).astype(np.float32)
    return Tensor(data, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Elementwise and scalar ops
# ---------------------------------------------------------------------------


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)

    def bw(out):
        def fn(g):
            _accumulate(a, g)
            _accumulate(b, g)
        return fn

    return _make_out(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)

    def bw(out):
        def fn(g):
            _accumulate(a, g)
            _accumulate(b, -g)
        return fn

    return _make_out(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)

    def bw(out):
        def fn(g):
            _accumulate(a, g * b.data)
            _accumulate(b, g * a.data)
        return fn

    return _make_out(a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c32 = np.float32(c)

    def bw(out):
        def fn(g):
            _accumulate(a, g * c32)
        return fn

    return _make_out(a.data * c32, (a,), bw)


def add_scalar(a: Tensor, c: float) -> Tensor:
    def bw(out):
        def fn(g):
            _accumulate(a, g)
        return fn

    return _make_out(a.data + np.float32(c), (a,), bw)


def mul_by_scalar_tensor(a: Tensor, s: Tensor) -> Tensor:
    """Elementwise a * s where s is a zero-dim tensor (the one allowed broadcast)."""
    if s.data.size != 1:
        raise ShapeError(f"mul_by_scalar_tensor: scalar operand has shape {s.shape}")

    def bw(out):
        def fn(g):
            _accumulate(a, g * s.data)
            _accumulate(s, np.float32(np.sum(g * a.data)).reshape(s.data.shape))
        return fn

    return _make_out(a.data * s.data.reshape(()), (a, s), bw)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bw(out):
        def fn(g):
            _accumulate(a, g * out.data)
        return fn

    return _make_out(out_data, (a,), bw)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximation GELU."""
    x = a.data
    inner = _GELU_C * (x + np.float32(0.044715) * x * x * x)
    t = np.tanh(inner)
    out_data = np.float32(0.5) * x * (np.float32(1.0) + t)

    def bw(out):
        def fn(g):
            sech2 = np.float32(1.0) - t * t
            dinner = _GELU_C * (np.float32(1.0) + np.float32(3 * 0.044715) * x * x)
            local = np.float32(0.5) * (np.float32(1.0) + t) + np.float32(0.5) * x * sech2 * dinner
            _accumulate(a, g * local)
        return fn

    return _make_out(out_data, (a,), bw)


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")

    def bw(out):
        def fn(g):
            _accumulate(a, g.reshape(a.shape))
        return fn

    return _make_out(a.data.reshape(shape), (a,), bw)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    """Materializing transpose (no views in v1)."""
    if axes is None:
        if a.ndim != 2:
            raise ShapeError(f"transpose: default axes need a 2-d tensor, got {a.shape}")
        axes = (1, 0)
    inv = np.argsort(axes)

    def bw(out):
        def fn(g):
            _accumulate(a, np.ascontiguousarray(g.transpose(inv)))
        return fn

    return _make_out(np.ascontiguousarray(a.data.transpose(axes)), (a,), bw)


def concat(a: Tensor, b: Tensor, axis: int) -> Tensor:
    if a.ndim != b.ndim:
        raise ShapeError(f"concat: ranks differ, {a.shape} vs {b.shape}")
    axis = axis % a.ndim
    for d in range(a.ndim):
        if d != axis and a.shape[d] != b.shape[d]:
            raise ShapeError(f"concat: shapes {a.shape} and {b.shape} differ off axis {axis}")
    na = a.shape[axis]

    def bw(out):
        def fn(g):
            sl_a = [slice(None)] * g.ndim
            sl_a[axis] = slice(0, na)
            sl_b = [slice(None)] * g.ndim
            sl_b[axis] = slice(na, None)
            _accumulate(a, g[tuple(sl_a)])
            _accumulate(b, g[tuple(sl_b)])
        return fn

    return _make_out(np.concatenate([a.data, b.data], axis=axis), (a, b), bw)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % a.ndim
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def bw(out):
        def fn(g):
            full = np.zeros_like(a.data)
            full[sl] = g
            _accumulate(a, full)
        return fn

    return _make_out(np.ascontiguousarray(a.data[sl]), (a,), bw)


def expand_leading(a: Tensor, n: int) -> Tensor:
    """Tile `a` along a new leading axis of size n; backward sums that axis."""
    out_data = np.broadcast_to(a.data, (n,) + a.shape).copy()

    def bw(out):
        def fn(g):
            _accumulate(a, g.sum(axis=0))
        return fn

    return _make_out(out_data, (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    def bw(out):
        def fn(g):
            _accumulate(a, np.full_like(a.data, g.reshape(())))
        return fn

    return _make_out(np.float32(a.data.sum()).reshape(()), (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    inv_n = np.float32(1.0 / a.size)

    def bw(out):
        def fn(g):
            _accumulate(a, np.full_like(a.data, g.reshape(()) * inv_n))
        return fn

    return _make_out(np.float32(a.data.mean()).reshape(()), (a,), bw)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. 2-d x 2-d, or stacked 3-d x 3-d with equal leading dim."""
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    elif a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"matmul: batched shapes incompatible, {a.shape} x {b.shape}")
    else:
        raise ShapeError(f"matmul: unsupported ranks, {a.shape} x {b.shape}")

    def bw(out):
        def fn(g):
            _accumulate(a, g @ b.data.swapaxes(-1, -2))
            _accumulate(b, a.data.swapaxes(-1, -2) @ g)
        return fn

    return _make_out(a.data @ b.data, (a, b), bw)


# ---------------------------------------------------------------------------
# Normalization and softmax-family ops
# ---------------------------------------------------------------------------


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row-stable softmax over the last axis; -inf entries contribute zero."""
    if x.shape[-1] < 1:
        raise ShapeError(f"softmax_lastdim: empty last dim in shape {x.shape}")
    if np.isnan(x.data).any():
        raise NumericError("softmax_lastdim: NaN in input")
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bw(out):
        def fn(g):
            s = out.data
            dot = (g * s).sum(axis=-1, keepdims=True)
            _accumulate(x, s * (g - dot))
        return fn

    return _make_out(out_data, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ConfigError(f"layer_norm: eps must be positive, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last dim of {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def bw(out):
        def fn(g):
            _accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0))
            _accumulate(bias, g.reshape(-1, d).sum(axis=0))
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv * (gx - m1 - xhat * m2))
        return fn

    return _make_out(out_data, (x, gain, bias), bw)


def l2_normalize_lastdim(x: Tensor, min_norm: float = 1e-12) -> Tensor:
    """Scale each last-axis vector to unit euclidean norm."""
    sq = (x.data * x.data).sum(axis=-1, keepdims=True)
    if (sq <= np.float32(min_norm)).any():
        raise NumericError("l2_normalize_lastdim: zero-norm vector, cosine undefined")
    inv = 1.0 / np.sqrt(sq)
    out_data = x.data * inv

    def bw(out):
        def fn(g):
            dot = (g * out.data).sum(axis=-1, keepdims=True)
            _accumulate(x, inv * (g - out.data * dot))
        return fn

    return _make_out(out_data, (x,), bw)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-softmax of logits[i, targets[i]] over rows.

    Backward is the classic (softmax - onehot) / n_rows.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-d, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    if targets.shape != (n,):
        raise ShapeError(
            f"softmax_cross_entropy: targets shape {targets.shape} does not match {n} rows"
        )
    if np.isnan(logits.data).any():
        raise NumericError("softmax_cross_entropy: NaN in logits")
    m = logits.data.max(axis=1, keepdims=True)
    shifted = logits.data - m
    e = np.exp(shifted)
    denom = e.sum(axis=1)
    nll = np.log(denom) - shifted[np.arange(n), targets]
    out_data = np.float32(nll.mean()).reshape(())

    def bw(out):
        def fn(g):
            probs = e / denom[:, None]
            probs[np.arange(n), targets] -= np.float32(1.0)
            _accumulate(logits, probs * (g.reshape(()) / np.float32(n)))
        return fn

    return _make_out(out_data, (logits,), bw)
