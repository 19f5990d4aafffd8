"""Dense tensors with reverse-mode automatic differentiation.

Just enough machinery for a small transformer, its heads and the contrastive
losses: 2-D matmul, row softmax, layer norm, multi-head attention, pointwise
ops and a handful of shape ops. The graph is recorded dynamically; calling
``backward()`` on a scalar walks it in reverse topological order and
accumulates ``.grad`` on every tensor that requires it.

Storage and training run in float32. Ops compute in the active dtype, which
``compute_dtype(np.float64)`` can widen temporarily; finite-difference probes
use that to measure derivatives without float32 rounding noise drowning them.

Every forward op validates that its output is finite; NaN/Inf anywhere is an
error, not a value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


# Graph recording can be suspended (inference, finite-difference probes).
_GRAD_ENABLED = True
_DTYPE = np.float32


class no_grad:
    """Context manager: ops inside record no graph and carry no gradients."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class compute_dtype:
    """Context manager: ops inside compute (and allocate) in the given dtype."""

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype).type

    def __enter__(self):
        global _DTYPE
        self._prev = _DTYPE
        _DTYPE = self.dtype
        return self

    def __exit__(self, *exc):
        global _DTYPE
        _DTYPE = self._prev
        return False


def _d(t: "Tensor") -> np.ndarray:
    """Tensor payload, upcast to the active compute dtype when needed."""
    return t.data.astype(_DTYPE, copy=False)


class Tensor:
    """A dense array plus its place in the recorded graph.

    Leaves created with ``requires_grad=True`` are trainable parameters.
    Non-leaf tensors are immutable once created; parameters are mutated only
    between steps (optimizer updates), never inside a recorded graph.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_DTYPE)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    # -- construction helpers ---------------------------------------------

    @staticmethod
    def _op(data: np.ndarray, parents: tuple, backward_fn) -> "Tensor":
        """Wrap an op result, wiring the backward closure if grads are live."""
        out = Tensor.__new__(Tensor)
        out.data = data if data.dtype == _DTYPE else data.astype(_DTYPE)
        if not np.all(np.isfinite(out.data)):
            raise NonFiniteError("op produced non-finite values")
        out.grad = None
        out.name = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties ---------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g.astype(self.data.dtype, copy=False)

    # -- autodiff -------------------------------------------------------------

    def backward(self):
        """Reverse-mode sweep from a scalar loss.

        Iterative topological order; graphs routinely exceed Python's
        recursion limit (one node per op across all video segments).
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss does not require grad; nothing to differentiate")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def transpose(self):
        return transpose(self)

    def sum(self):
        return total_sum(self)

    def mean(self):
        return total_mean(self)


def parameter(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- pointwise and arithmetic ops ------------------------------------------------


def add(a, b) -> Tensor:
    """Elementwise sum; also broadcasts a 1-D bias over the rows of a 2-D input."""
    a, b = _coerce(a), _coerce(b)
    if a.shape != b.shape:
        if not (a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]):
            raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(g if b.shape == g.shape else g.sum(axis=0))

    return Tensor._op(_d(a) + _d(b), (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(-g)

    return Tensor._op(_d(a) - _d(b), (a, b), bw)


def mul(a, b) -> Tensor:
    """Elementwise product. Accepts a Python scalar for either operand."""
    if isinstance(a, (int, float)):
        return scale(_coerce(b), float(a))
    if isinstance(b, (int, float)):
        return scale(_coerce(a), float(b))
    a, b = _coerce(a), _coerce(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accum(g * _d(b))
        if b.requires_grad:
            b._accum(g * _d(a))

    return Tensor._op(_d(a) * _d(b), (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    def bw(g):
        if a.requires_grad:
            a._accum(g * _DTYPE(s))

    return Tensor._op(_d(a) * _DTYPE(s), (a,), bw)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow becomes NonFiniteError in _op
        out_data = np.exp(_d(a))

    def bw(g):
        if a.requires_grad:
            a._accum(g * out_data)

    return Tensor._op(out_data, (a,), bw)


def log(a: Tensor) -> Tensor:
    def bw(g):
        if a.requires_grad:
            a._accum(g / _d(a))

    return Tensor._op(np.log(_d(a)), (a,), bw)


def relu(a: Tensor) -> Tensor:
    def bw(g):
        if a.requires_grad:
            a._accum(g * (a.data > 0))

    return Tensor._op(np.maximum(_d(a), 0), (a,), bw)


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU: x * Phi(x). Smooth, unlike ReLU."""
    from scipy.special import erf

    x = _d(a)
    cdf = 0.5 * (1.0 + erf(x * _DTYPE(_INV_SQRT2)))

    def bw(g):
        if a.requires_grad:
            pdf = np.exp(-0.5 * x * x) * _DTYPE(_INV_SQRT2PI)
            a._accum(g * (cdf + x * pdf))

    return Tensor._op(x * cdf, (a,), bw)


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product [m,k] @ [k,n] -> [m,n]."""
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accum(g @ _d(b).T)
        if b.requires_grad:
            b._accum(_d(a).T @ g)

    return Tensor._op(_d(a) @ _d(b), (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")

    def bw(g):
        if a.requires_grad:
            a._accum(g.T)

    return Tensor._op(np.ascontiguousarray(_d(a).T), (a,), bw)


# -- reductions ---------------------------------------------------------------


def total_sum(a: Tensor) -> Tensor:
    def bw(g):
        if a.requires_grad:
            a._accum(np.broadcast_to(g, a.shape))

    return Tensor._op(_d(a).sum().reshape(()), (a,), bw)


def total_mean(a: Tensor) -> Tensor:
    n = a.data.size

    def bw(g):
        if a.requires_grad:
            a._accum(np.broadcast_to(g / n, a.shape))

    return Tensor._op((_d(a).sum() / n).reshape(()), (a,), bw)


def row_sum(a: Tensor) -> Tensor:
    """[m,n] -> [m], summing each row."""
    if a.data.ndim != 2:
        raise ShapeError("row_sum expects a 2-D tensor")

    def bw(g):
        if a.requires_grad:
            a._accum(np.repeat(g[:, None], a.shape[1], axis=1))

    return Tensor._op(_d(a).sum(axis=1), (a,), bw)


def mean_rows(a: Tensor) -> Tensor:
    """[m,n] -> [n], averaging over rows."""
    if a.data.ndim != 2:
        raise ShapeError("mean_rows expects a 2-D tensor")
    m = a.shape[0]

    def bw(g):
        if a.requires_grad:
            a._accum(np.repeat(g[None, :] / m, m, axis=0))

    return Tensor._op(_d(a).mean(axis=0), (a,), bw)


# -- shape surgery --------------------------------------------------------------


def concat_rows(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows of nothing")
    sizes = [p.shape[0] for p in parts]

    def bw(g):
        off = 0
        for p, s in zip(parts, sizes):
            if p.requires_grad:
                p._accum(g[off : off + s])
            off += s

    return Tensor._op(np.concatenate([_d(p) for p in parts], axis=0), tuple(parts), bw)


def concat_cols(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols of nothing")
    sizes = [p.shape[1] for p in parts]

    def bw(g):
        off = 0
        for p, s in zip(parts, sizes):
            if p.requires_grad:
                p._accum(g[:, off : off + s])
            off += s

    return Tensor._op(np.concatenate([_d(p) for p in parts], axis=1), tuple(parts), bw)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    def bw(g):
        if a.requires_grad:
            full = np.zeros(a.shape, dtype=g.dtype)
            full[start:stop] = g
            a._accum(full)

    return Tensor._op(np.ascontiguousarray(_d(a)[start:stop]), (a,), bw)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    def bw(g):
        if a.requires_grad:
            full = np.zeros(a.shape, dtype=g.dtype)
            full[:, start:stop] = g
            a._accum(full)

    return Tensor._op(np.ascontiguousarray(_d(a)[:, start:stop]), (a,), bw)


def gather(a: Tensor, indices: list[int]) -> Tensor:
    """Select entries of a 1-D tensor; backward scatter-adds."""
    if a.data.ndim != 1:
        raise ShapeError("gather expects a 1-D tensor")
    idx = np.asarray(indices, dtype=np.int64)

    def bw(g):
        if a.requires_grad:
            full = np.zeros(a.shape, dtype=g.dtype)
            np.add.at(full, idx, g)
            a._accum(full)

    return Tensor._op(_d(a)[idx], (a,), bw)


def reshape_row(a: Tensor) -> Tensor:
    """[D] -> [1,D]."""

    def bw(g):
        if a.requires_grad:
            a._accum(g[0])

    return Tensor._op(_d(a)[None, :], (a,), bw)


def flatten_row(a: Tensor) -> Tensor:
    """[1,D] -> [D]."""
    if a.data.ndim != 2 or a.shape[0] != 1:
        raise ShapeError("flatten_row expects a [1,D] tensor")

    def bw(g):
        if a.requires_grad:
            a._accum(g[None, :])

    return Tensor._op(_d(a)[0], (a,), bw)


# -- fused neural-net ops ---------------------------------------------------------


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction; rows sum to 1.

    Accepts 1-D input as a single row.
    """
    x = _d(a) if a.data.ndim == 2 else _d(a)[None, :]
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out_data = y if a.data.ndim == 2 else y[0]

    def bw(g):
        if a.requires_grad:
            g2 = g if g.ndim == 2 else g[None, :]
            dot = (g2 * y).sum(axis=1, keepdims=True)
            dx = y * (g2 - dot)
            a._accum(dx if a.data.ndim == 2 else dx[0])

    return Tensor._op(out_data, (a,), bw)


LAYER_NORM_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Per-row normalization to zero mean / unit variance, then affine.

    1-D input is treated as a single row of width D; gain and bias are [D].
    """
    gain, bias = _coerce(gain), _coerce(bias)
    one_d = x.data.ndim == 1
    xv = _d(x)[None, :] if one_d else _d(x)
    d = xv.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm: gain/bias must match the feature dim")

    mu = xv.mean(axis=1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _DTYPE(eps))
    xhat = xc * inv
    out = xhat * _d(gain) + _d(bias)

    def bw(g):
        g2 = g[None, :] if one_d else g
        if gain.requires_grad:
            gain._accum((g2 * xhat).sum(axis=0))
        if bias.requires_grad:
            bias._accum(g2.sum(axis=0))
        if x.requires_grad:
            gh = g2 * _d(gain)
            dx = inv * (gh - gh.mean(axis=1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=1, keepdims=True))
            x._accum(dx[0] if one_d else dx)

    return Tensor._op(out[0] if one_d else out, (x, gain, bias), bw)


def normalize_rows(a: Tensor, min_norm: float = 1e-12) -> Tensor:
    """Scale each row to unit L2 norm. Zero rows are an error."""
    x = _d(a) if a.data.ndim == 2 else _d(a)[None, :]
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    if np.any(norms <= min_norm):
        raise ValueError("normalize_rows: zero-norm row")
    y = x / norms
    out = y if a.data.ndim == 2 else y[0]

    def bw(g):
        if a.requires_grad:
            g2 = g if g.ndim == 2 else g[None, :]
            dot = (g2 * y).sum(axis=1, keepdims=True)
            dx = (g2 - y * dot) / norms
            a._accum(dx if a.data.ndim == 2 else dx[0])

    return Tensor._op(out, (a,), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b). x is [L,D_in] or [D_in]; w is [D_in,D_out]."""
    one_d = x.data.ndim == 1
    xm = reshape_row(x) if one_d else x
    out = matmul(xm, w)
    if b is not None:
        out = add(out, b)
    return flatten_row(out) if one_d else out


@dataclass
class AttentionParams:
    """Projection weights for one multi-head attention layer.

    The key projection carries no bias: a constant added to every key shifts
    each query's scores uniformly and softmax cancels it, so its gradient
    would be identically zero.
    """

    wq: Tensor
    bq: Tensor
    wk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    def tensors(self) -> list[Tensor]:
        return [self.wq, self.bq, self.wk, self.wv, self.bv, self.wo, self.bo]


def multi_head_attention(x: Tensor, params: AttentionParams, heads: int) -> Tensor:
    """Standard scaled dot-product attention over the L tokens of x [L,D].

    Per head: softmax(q k^T / sqrt(d_h)) v, heads concatenated, then the
    output projection. D must be divisible by the head count.
    """
    L, D = x.shape
    if D % heads != 0:
        raise ShapeError(f"model dim {D} not divisible by {heads} heads")
    dh = D // heads
    inv_sqrt = 1.0 / math.sqrt(dh)

    q = linear(x, params.wq, params.bq)
    k = linear(x, params.wk)
    v = linear(x, params.wv, params.bv)

    outs = []
    for h in range(heads):
        qh = slice_cols(q, h * dh, (h + 1) * dh)
        kh = slice_cols(k, h * dh, (h + 1) * dh)
        vh = slice_cols(v, h * dh, (h + 1) * dh)
        scores = scale(matmul(qh, transpose(kh)), inv_sqrt)
        outs.append(matmul(softmax_rows(scores), vh))
    merged = concat_cols(outs) if heads > 1 else outs[0]
    return linear(merged, params.wo, params.bo)


def jitter_parameters(params: dict[str, Tensor], std: float = 0.05, seed: int = 0):
    """Nudge every parameter off special points (zeros, constants) in place.

    Finite-difference checks belong at generic parameter values; exact zeros
    park layer norm and ReLU on their non-smooth spots.
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.data = p.data + rng.normal(0.0, std, size=p.shape).astype(p.data.dtype)


# -- numeric differentiation (forward-only oracle) ---------------------------------


def numeric_gradient(f, t: Tensor, h: float = 1e-3, coords=None,
                     dtype=np.float64) -> dict:
    """Central finite differences of scalar f() w.r.t. entries of t.

    Perturbs t.data in place (restoring it), evaluating f under no_grad with
    the requested compute dtype (float64 by default, so the probe measures
    the derivative rather than float32 rounding noise).
    Returns {flat_index: derivative estimate}.
    """
    flat = t.data.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    grads = {}
    with no_grad(), compute_dtype(dtype):
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f())
            flat[i] = orig - h
            fm = float(f())
            flat[i] = orig
            grads[int(i)] = (fp - fm) / (2.0 * h)
    return grads


def gradient_check(f, params: dict[str, Tensor], h: float = 1e-3,
                   rel_tol: float = 1e-2, abs_tol: float = 1e-4,
                   max_coords_per_tensor: int | None = None,
                   rng: np.random.Generator | None = None,
                   dtype=np.float64, refine_h: float | None = 1e-4):
    """Compare recorded gradients of f() against central finite differences.

    f() must rebuild the graph and return the scalar loss tensor. A coordinate
    passes when |a - n| <= abs_tol or the relative error is below rel_tol.
    Large tensors can be subsampled (always including the largest-gradient
    coordinate); small ones are checked exhaustively.

    A +-h interval that straddles a ReLU kink makes the central difference
    measure a slope average instead of the derivative at the point, so
    coordinates failing at the coarse step are re-probed at ``refine_h``
    under the same tolerances before being reported.

    Returns a list of (param_name, flat_index, analytic, numeric) failures.
    """
    for p in params.values():
        p.grad = None
    loss = f()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    def disagrees(av: float, nv: float) -> bool:
        diff = abs(av - nv)
        rel = diff / max(abs(av), abs(nv), 1e-12)
        return diff > abs_tol and rel > rel_tol

    if rng is None:
        rng = np.random.default_rng(0)
    failures = []
    for name, p in params.items():
        n = p.data.size
        a_flat = analytic[name].reshape(-1)
        if max_coords_per_tensor is None or n <= max_coords_per_tensor:
            coords = list(range(n))
        else:
            coords = list(rng.choice(n, size=max_coords_per_tensor, replace=False))
            top = int(np.argmax(np.abs(a_flat)))
            if top not in coords:
                coords.append(top)
        numeric = numeric_gradient(lambda: f().data, p, h=h, coords=coords, dtype=dtype)
        for i, nv in numeric.items():
            av = float(a_flat[i])
            if not disagrees(av, nv):
                continue
            if refine_h is not None:
                nv = numeric_gradient(lambda: f().data, p, h=refine_h,
                                      coords=[i], dtype=dtype)[i]
                if not disagrees(av, nv):
                    continue
            failures.append((name, i, av, nv))
    return failures
