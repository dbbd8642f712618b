"""Minimal N-d tensor engine with reverse-mode automatic differentiation.

Covers exactly the operations the conditioning adapter and the small
denoiser need: elementwise arithmetic, batched matmul, linear layers,
row softmax, exact-erf GELU, 3x3 convolution, nearest upsampling,
embedding gathers and reductions. Gradients are accumulated into leaf
tensors by ``backward``; ``finite_diff_grad`` provides the independent
central-difference oracle used by the test suite.

Two precisions are supported: float32 for training/sampling, float64
for gradient checks. Mixed-dtype operands are rejected.

Reductions over attention token axes go through ``compensated_sum``
(Neumaier summation in float64), which makes attention outputs
independent of the memory order of the tokens: permuting keys permutes
only the multiset of summands, and the compensated sum is far more
accurate than one ulp of the output dtype, so the rounded result is
order-independent in practice. Plain BLAS reductions are used
everywhere else.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ContractError, DimensionError, NumericError

FLOAT_DTYPES = (np.float32, np.float64)

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327

_debug_checks = False
_grad_enabled = True


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf validation at operation boundaries (off in hot loops)."""
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_checks


@contextmanager
def no_grad():
    """Disable graph construction inside the block (sampling/eval paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(op: str, *arrays: np.ndarray) -> None:
    if not _debug_checks:
        return
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"{op}: non-finite values encountered")


def _as_float_array(data, dtype=None) -> np.ndarray:
    a = np.asarray(data, dtype=dtype)
    if a.dtype not in FLOAT_DTYPES:
        a = a.astype(np.float32 if dtype is None else dtype)
    return a


class Tensor:
    """N-dimensional real array with optional gradient tracking.

    ``data`` is a numpy array (float32 or float64), treated as immutable
    once wrapped. ``grad`` accumulates across ``backward`` calls until
    ``zero_grad`` resets it.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        _check_finite("tensor", self.data)

    # -- construction of op results -------------------------------------
    @staticmethod
    def _result(data: np.ndarray, parents: tuple["Tensor", ...], backward_fn):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        track = _grad_enabled and any(p.requires_grad or p._parents for p in parents)
        if track:
            out.requires_grad = True
            out._parents = parents
            out._backward_fn = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward_fn = None
        return out

    # -- basic introspection ---------------------------------------------
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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- autodiff ----------------------------------------------------------
    def backward(self) -> None:
        backward(self)


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _require_same_dtype(op: str, a: Tensor, b: Tensor) -> None:
    if a.dtype != b.dtype:
        raise DimensionError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` along broadcast axes."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def compensated_sum(values: np.ndarray, axis: int) -> np.ndarray:
    """Neumaier-compensated sum along ``axis``, accumulated in float64.

    The result depends on the multiset of summands, not their order, up
    to an error far below one ulp of float64, which is what makes the
    attention modules exactly permutation-invariant after rounding.
    """
    v = np.moveaxis(np.asarray(values, dtype=np.float64), axis, 0)
    total = np.zeros(v.shape[1:], dtype=np.float64)
    comp = np.zeros_like(total)
    for k in range(v.shape[0]):
        x = v[k]
        t = total + x
        swap = np.abs(total) >= np.abs(x)
        comp += np.where(swap, (total - t) + x, (x - t) + total)
        total = t
    return total + comp


# -- elementwise arithmetic ---------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _require_same_dtype("add", a, b)
    data = a.data + b.data
    _check_finite("add", data)

    def grad_fn(g, acc):
        acc(a, _unbroadcast(g, a.shape))
        acc(b, _unbroadcast(g, b.shape))

    return Tensor._result(data, (a, b), grad_fn)


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _require_same_dtype("sub", a, b)
    data = a.data - b.data
    _check_finite("sub", data)

    def grad_fn(g, acc):
        acc(a, _unbroadcast(g, a.shape))
        acc(b, _unbroadcast(-g, b.shape))

    return Tensor._result(data, (a, b), grad_fn)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        scalar = float(b)
        data = a.data * a.dtype.type(scalar)
        _check_finite("mul", data)

        def grad_scalar(g, acc):
            acc(a, g * a.dtype.type(scalar))

        return Tensor._result(data, (a,), grad_scalar)
    _require_same_dtype("mul", a, b)
    data = a.data * b.data
    _check_finite("mul", data)

    def grad_fn(g, acc):
        acc(a, _unbroadcast(g * b.data, a.shape))
        acc(b, _unbroadcast(g * a.data, b.shape))

    return Tensor._result(data, (a, b), grad_fn)


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / float(b))
    _require_same_dtype("div", a, b)
    data = a.data / b.data
    _check_finite("div", data)

    def grad_fn(g, acc):
        acc(a, _unbroadcast(g / b.data, a.shape))
        acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._result(data, (a, b), grad_fn)


def add_scalar(a: Tensor, c: float) -> Tensor:
    data = a.data + a.dtype.type(c)
    _check_finite("add_scalar", data)

    def grad_fn(g, acc):
        acc(a, g)

    return Tensor._result(data, (a,), grad_fn)


def pow_scalar(a: Tensor, p: float) -> Tensor:
    data = np.power(a.data, a.dtype.type(p))
    _check_finite("pow_scalar", data)

    def grad_fn(g, acc):
        acc(a, g * p * np.power(a.data, a.dtype.type(p - 1.0)))

    return Tensor._result(data, (a,), grad_fn)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    _check_finite("exp", data)

    def grad_fn(g, acc):
        acc(a, g * data)

    return Tensor._result(data, (a,), grad_fn)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)
    _check_finite("log", data)

    def grad_fn(g, acc):
        acc(a, g / a.data)

    return Tensor._result(data, (a,), grad_fn)


def gelu(a: Tensor) -> Tensor:
    """Exact-CDF GELU: x * Phi(x) with Phi from erf (no tanh approximation)."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * a.dtype.type(_INV_SQRT2)))
    data = x * phi
    _check_finite("gelu", data)

    def grad_fn(g, acc):
        dens = np.exp(-0.5 * x * x) * a.dtype.type(_INV_SQRT2PI)
        acc(a, g * (phi + x * dens))

    return Tensor._result(data, (a,), grad_fn)


# -- matmul / linear ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting on leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    _require_same_dtype("matmul", a, b)
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"matmul batch extents incompatible: {a.shape} @ {b.shape}") from e
    _check_finite("matmul", data)

    def grad_fn(g, acc):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        acc(a, _unbroadcast(ga, a.shape))
        acc(b, _unbroadcast(gb, b.shape))

    return Tensor._result(data, (a, b), grad_fn)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ broadcast bias). ``w`` is [d_in, d_out], ``b`` is [d_out]."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input dim {x.shape} does not match weight {w.shape}")
    out = matmul(x, w) if x.ndim >= 2 else matmul(reshape(x, (1, -1)), w)
    if b is not None:
        if b.shape != (w.shape[1],):
            raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
        out = add(out, b)
    return out


# -- shape manipulation ----------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def grad_fn(g, acc):
        acc(a, g.reshape(a.shape))

    return Tensor._result(data, (a,), grad_fn)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))

    def grad_fn(g, acc):
        acc(a, np.transpose(g, inv))

    return Tensor._result(data, (a,), grad_fn)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of zero tensors")
    for t in tensors[1:]:
        _require_same_dtype("concat", tensors[0], t)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g, acc):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            acc(t, g[tuple(idx)])

    return Tensor._result(data, tuple(tensors), grad_fn)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along ``axis``."""
    if start < 0 or start + length > a.shape[axis]:
        raise DimensionError(
            f"narrow: [{start}, {start + length}) out of bounds for axis {axis} of {a.shape}"
        )
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    data = a.data[tuple(idx)]

    def grad_fn(g, acc):
        full = np.zeros(a.shape, dtype=a.dtype)
        full[tuple(idx)] = g
        acc(a, full)

    return Tensor._result(data, (a,), grad_fn)


# -- reductions -------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g, acc):
        if axis is None:
            acc(a, np.broadcast_to(np.asarray(g, dtype=a.dtype), a.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            acc(a, np.broadcast_to(gg, a.shape).copy())

    return Tensor._result(np.asarray(data, dtype=a.dtype), (a,), grad_fn)


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    elif isinstance(axis, int):
        n = a.shape[axis]
    else:
        n = int(np.prod([a.shape[i] for i in axis]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- softmax / attention -----------------------------------------------------


def softmax_rows(a: Tensor) -> Tensor:
    """Row-stochastic softmax over the last axis, stabilized by max-subtraction.

    The denominator uses the compensated sum, so each row is a pure
    function of its multiset of scores.
    """
    if a.ndim == 0 or a.shape[-1] == 0:
        raise DimensionError(f"softmax_rows: empty last axis in shape {a.shape}")
    x = a.data.astype(np.float64)
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    denom = compensated_sum(e, axis=-1)[..., None]
    data = (e / denom).astype(a.dtype)
    _check_finite("softmax_rows", data)

    def grad_fn(g, acc):
        p = data
        inner = np.sum(g * p, axis=-1, keepdims=True)
        acc(a, (p * (g - inner)).astype(a.dtype))

    return Tensor._result(data, (a,), grad_fn)


def attn_mix(weights: Tensor, values: Tensor) -> Tensor:
    """Weighted sum of value rows: [.., Q, S] x [.., S, D] -> [.., Q, D].

    The reduction over the S (token) axis is compensated, making the
    output exactly independent of token order when the weights are too.
    """
    _require_same_dtype("attn_mix", weights, values)
    if weights.shape[-1] != values.shape[-2]:
        raise DimensionError(f"attn_mix: token extents differ: {weights.shape} x {values.shape}")
    prod = weights.data[..., :, :, None] * values.data[..., None, :, :]
    data = compensated_sum(prod, axis=-2).astype(weights.dtype)
    _check_finite("attn_mix", data)

    def grad_fn(g, acc):
        gw = np.matmul(g, np.swapaxes(values.data, -1, -2))
        gv = np.matmul(np.swapaxes(weights.data, -1, -2), g)
        acc(weights, _unbroadcast(gw, weights.shape))
        acc(values, _unbroadcast(gv, values.shape))

    return Tensor._result(data, (weights, values), grad_fn)


# -- gathers ------------------------------------------------------------------


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` (embedding / timestep tables)."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ContractError("gather_rows: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(
            f"gather_rows: ids out of range [0, {table.shape[0]}) (got {ids.min()}..{ids.max()})"
        )
    data = table.data[ids]

    def grad_fn(g, acc):
        gt = np.zeros(table.shape, dtype=table.dtype)
        np.add.at(gt, ids, g)
        acc(table, gt)

    return Tensor._result(data, (table,), grad_fn)


# -- conv / resampling ---------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # [B, C, OH, OW, kh, kw] -> [B, OH, OW, C, kh, kw]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
    """2-d convolution, NCHW layout, weight [C_out, C_in, kh, kw]."""
    _require_same_dtype("conv2d", x, w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: incompatible shapes {x.shape} * {w.shape}")
    bs, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xp, kh, kw, stride).reshape(bs * oh * ow, cin * kh * kw)
    w2 = w.data.reshape(cout, -1).T
    out = cols @ w2 + b.data
    data = out.reshape(bs, oh, ow, cout).transpose(0, 3, 1, 2)
    data = np.ascontiguousarray(data)
    _check_finite("conv2d", data)

    def grad_fn(g, acc):
        g2 = g.transpose(0, 2, 3, 1).reshape(bs * oh * ow, cout)
        acc(b, g2.sum(axis=0))
        acc(w, (cols.T @ g2).T.reshape(w.shape))
        gcols = (g2 @ w2.T).reshape(bs, oh, ow, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[
                    :, :, :, :, i, j
                ]
        acc(x, gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp)

    return Tensor._result(data, (x, w, b), grad_fn)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling (NCHW)."""
    data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def grad_fn(g, acc):
        bs, c, h2, w2 = g.shape
        acc(x, g.reshape(bs, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))

    return Tensor._result(data, (x,), grad_fn)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Per-sample group normalization with affine scale/shift (NCHW)."""
    bs, c, h, w = x.shape
    if c % groups:
        raise DimensionError(f"group_norm: {c} channels not divisible into {groups} groups")
    xg = reshape(x, (bs, groups, (c // groups) * h * w))
    mu = mean_(xg, axis=2, keepdims=True)
    xc = sub(xg, mu)
    var = mean_(mul(xc, xc), axis=2, keepdims=True)
    inv = pow_scalar(add_scalar(var, eps), -0.5)
    xn = reshape(mul(xc, inv), (bs, c, h, w))
    return add(mul(xn, reshape(gamma, (1, c, 1, 1))), reshape(beta, (1, c, 1, 1)))


# -- autodiff driver -----------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every tracked leaf's ``grad``.

    ``loss`` must be scalar. Repeated calls keep accumulating until the
    leaves' grads are reset.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and (p.requires_grad or p._parents):
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}

    def accumulate(t: Tensor, g: np.ndarray):
        if not (t.requires_grad or t._parents):
            return
        g = np.asarray(g, dtype=t.dtype)
        key = id(t)
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = g

    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward_fn is not None:
            node._backward_fn(g, accumulate)
        elif node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g


def finite_diff_grad(f, x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient oracle: (f(x+h e_i) - f(x-h e_i)) / 2h.

    ``f`` maps a Tensor to a scalar (Tensor or float) and must be
    deterministic. Kept independent of the autodiff path it checks.
    """
    if h <= 0:
        raise ContractError("finite_diff_grad: h must be positive")

    def evaluate(arr: np.ndarray) -> float:
        out = f(Tensor(arr, dtype=x.dtype))
        val = out.item() if isinstance(out, Tensor) else float(out)
        if not np.isfinite(val):
            raise NumericError("finite_diff_grad: non-finite function value")
        return val

    base = x.data
    grad = np.zeros_like(base, dtype=np.float64)
    flat = grad.reshape(-1)
    for i in range(base.size):
        pert = base.copy().reshape(-1)
        pert[i] += h
        hi = evaluate(pert.reshape(base.shape))
        pert[i] -= 2 * h
        lo = evaluate(pert.reshape(base.shape))
        flat[i] = (hi - lo) / (2 * h)
    return grad.astype(base.dtype)


# -- counter-based RNG -----------------------------------------------------------

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def _fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass
class RngStream:
    """Counter-based random stream: draws are pure functions of (seed, stream, counter).

    Backed by Philox keyed on (seed, stream); the draw index occupies the
    second 64-bit counter word so a single draw can consume up to 2^64
    blocks without overlapping the next. ``child`` derives a
    non-overlapping stream; children of distinct labels never collide.
    """

    seed: int
    stream: int = 0
    counter: int = field(default=0)

    def child(self, label) -> "RngStream":
        if isinstance(label, str):
            key = _fnv1a64(label.encode("utf-8"))
        else:
            key = int(label) & _MASK64
        return RngStream(self.seed, _splitmix64((self.stream ^ key) & _MASK64), 0)

    def _generator(self) -> np.random.Generator:
        bitgen = np.random.Philox(
            counter=np.array([0, self.counter, 0, 0], dtype=np.uint64),
            key=np.array([self.seed & _MASK64, self.stream], dtype=np.uint64),
        )
        self.counter += 1
        return np.random.Generator(bitgen)

    def normal(self, shape, dtype=np.float32) -> np.ndarray:
        return self._generator().standard_normal(size=shape, dtype=np.float64).astype(dtype)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0, dtype=np.float32) -> np.ndarray:
        return self._generator().uniform(low, high, size=shape).astype(dtype)

    def integers(self, low: int, high: int, shape) -> np.ndarray:
        return self._generator().integers(low, high, size=shape, dtype=np.int64)


# -- RFTN raw tensor format --------------------------------------------------------

RFTN_MAGIC = b"RFTN"
RFTN_VERSION = 1


def write_rftn(fh, array: np.ndarray) -> None:
    """Write one tensor: magic, version u32 LE, rank u32, dims u64 LE, f32 LE data."""
    a = np.ascontiguousarray(array, dtype=np.float32)
    fh.write(RFTN_MAGIC)
    fh.write(struct.pack("<II", RFTN_VERSION, a.ndim))
    for d in a.shape:
        fh.write(struct.pack("<Q", d))
    fh.write(a.tobytes(order="C"))


def read_rftn(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != RFTN_MAGIC:
        raise IOError(f"bad RFTN magic {magic!r}")
    version, rank = struct.unpack("<II", fh.read(8))
    if version != RFTN_VERSION:
        raise IOError(f"unsupported RFTN version {version}")
    dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise IOError("truncated RFTN payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def save_rftn(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_rftn(fh, array)


def load_rftn(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_rftn(fh)
