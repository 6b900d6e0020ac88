"""Dense float64 tensors with reverse-mode differentiation.

This is the computation kernel for the whole detector: a small tape-based
autograd over numpy arrays, plus the handful of network primitives the
camera, radar and fusion blocks need (linear, layer norm, masked softmax,
multi-head attention, FFN). Everything runs in double precision so
finite-difference gradient checks at 1e-5 are meaningful.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Tensor",
    "ParamStore",
    "AdditiveMask",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "relu",
    "exp",
    "log",
    "sqrt",
    "abs_",
    "pow_const",
    "clamp_min",
    "sum_",
    "mean_",
    "reshape",
    "transpose",
    "concat",
    "take_rows",
    "take_pairs",
    "slice_cols",
    "softmax",
    "masked_softmax",
    "layer_norm",
    "linear_forward",
    "ffn_forward",
    "multi_head_cross_attention",
    "bilinear_gather",
    "backward",
    "finite_diff_check",
]


class Tensor:
    """A node in the computation graph holding a float64 ndarray.

    Leaf tensors either carry data only (constants) or are registered
    parameters with ``requires_grad=True``. Non-leaf tensors remember their
    parents and a closure that propagates the output gradient to them.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite values in tensor")
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in parents
        )
        self._parents = tuple(parents) if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def bwd(g, grads):
        _accum(grads, a, _unbroadcast(g, a.data.shape))
        _accum(grads, b, _unbroadcast(g, b.data.shape))

    return Tensor(out_data, parents=(a, b), backward=bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data

    def bwd(g, grads):
        _accum(grads, a, _unbroadcast(g, a.data.shape))
        _accum(grads, b, _unbroadcast(-g, b.data.shape))

    return Tensor(out_data, parents=(a, b), backward=bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(g, grads):
        _accum(grads, a, -g)

    return Tensor(-a.data, parents=(a,), backward=bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def bwd(g, grads):
        _accum(grads, a, _unbroadcast(g * b.data, a.data.shape))
        _accum(grads, b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, parents=(a, b), backward=bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data / b.data

    def bwd(g, grads):
        _accum(grads, a, _unbroadcast(g / b.data, a.data.shape))
        _accum(grads, b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor(out_data, parents=(a, b), backward=bwd)


def matmul(a, b) -> Tensor:
    """Matrix product; supports stacked (batched) operands like numpy."""
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data @ b.data

    def bwd(g, grads):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accum(grads, a, _unbroadcast(ga, a.data.shape))
        _accum(grads, b, _unbroadcast(gb, b.data.shape))

    return Tensor(out_data, parents=(a, b), backward=bwd)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0
    out_data = np.where(mask, a.data, 0.0)

    def bwd(g, grads):
        _accum(grads, a, g * mask)

    return Tensor(out_data, parents=(a,), backward=bwd)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def bwd(g, grads):
        _accum(grads, a, g * out_data)

    return Tensor(out_data, parents=(a,), backward=bwd)


def log(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.log(a.data)

    def bwd(g, grads):
        _accum(grads, a, g / a.data)

    return Tensor(out_data, parents=(a,), backward=bwd)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)

    def bwd(g, grads):
        _accum(grads, a, g * 0.5 / out_data)

    return Tensor(out_data, parents=(a,), backward=bwd)


def abs_(a) -> Tensor:
    """Elementwise absolute value; subgradient 0 at the origin."""
    a = _as_tensor(a)
    sign = np.sign(a.data)

    def bwd(g, grads):
        _accum(grads, a, g * sign)

    return Tensor(np.abs(a.data), parents=(a,), backward=bwd)


def pow_const(a, p: float) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data**p

    def bwd(g, grads):
        _accum(grads, a, g * p * a.data ** (p - 1.0))

    return Tensor(out_data, parents=(a,), backward=bwd)


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); zero gradient on the clamped region."""
    a = _as_tensor(a)
    mask = a.data > floor
    out_data = np.where(mask, a.data, floor)

    def bwd(g, grads):
        _accum(grads, a, g * mask)

    return Tensor(out_data, parents=(a,), backward=bwd)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g, grads):
        if axis is None:
            ga = np.broadcast_to(g, a.data.shape)
        elif keepdims:
            ga = np.broadcast_to(g, a.data.shape)
        else:
            ga = np.broadcast_to(np.expand_dims(g, axis), a.data.shape)
        _accum(grads, a, ga.copy())

    return Tensor(out_data, parents=(a,), backward=bwd)


def mean_(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)

    def bwd(g, grads):
        _accum(grads, a, g.reshape(a.data.shape))

    return Tensor(out_data, parents=(a,), backward=bwd)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    inv = np.argsort(axes)

    def bwd(g, grads):
        _accum(grads, a, g.transpose(inv))

    return Tensor(a.data.transpose(axes), parents=(a,), backward=bwd)


def concat(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g, grads):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(grads, t, piece)

    return Tensor(out_data, parents=tuple(tensors), backward=bwd)


def take_rows(a, idx) -> Tensor:
    """Select rows of a 2D tensor; gradient scatter-adds back."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g, grads):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _accum(grads, a, ga)

    return Tensor(a.data[idx], parents=(a,), backward=bwd)


def slice_cols(a, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of a 2D tensor."""
    a = _as_tensor(a)

    def bwd(g, grads):
        ga = np.zeros_like(a.data)
        ga[:, start:stop] = g
        _accum(grads, a, ga)

    return Tensor(a.data[:, start:stop], parents=(a,), backward=bwd)


def take_pairs(a, rows, cols) -> Tensor:
    """Gather a[rows[k], cols[k]] into a 1D tensor."""
    a = _as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def bwd(g, grads):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, cols), g)
        _accum(grads, a, ga)

    return Tensor(a.data[rows, cols], parents=(a,), backward=bwd)


def softmax(a, axis=-1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def bwd(g, grads):
        dot = (g * p).sum(axis=axis, keepdims=True)
        _accum(grads, a, p * (g - dot))

    return Tensor(p, parents=(a,), backward=bwd)


class AdditiveMask:
    """Binary allow/deny mask for an N x M attention score matrix.

    ``allow[i, j]`` is True when query i may attend key j. Denied entries of
    the resulting attention matrix are exactly zero; they are excluded from
    the softmax normalization entirely rather than pushed down with large
    negative logits, so denied keys can never leak into allowed weights.
    """

    def __init__(self, allow):
        allow = np.asarray(allow, dtype=bool)
        if allow.ndim != 2:
            raise ValueError(f"mask must be 2D, got shape {allow.shape}")
        self.allow = allow

    @classmethod
    def all_allowed(cls, n: int, m: int) -> "AdditiveMask":
        return cls(np.ones((n, m), dtype=bool))

    @classmethod
    def all_denied(cls, n: int, m: int) -> "AdditiveMask":
        return cls(np.zeros((n, m), dtype=bool))

    @property
    def shape(self):
        return self.allow.shape


def masked_softmax(scores, mask: AdditiveMask) -> Tensor:
    """Row softmax restricted to allowed entries.

    Denied entries are exactly 0 in the output. A row with at least one
    allowed entry sums to 1; a fully denied row is all zeros (the query
    falls back to vision-only downstream). Accepts (N, M) scores or a
    stacked (H, N, M) batch sharing one (N, M) mask.
    """
    scores = _as_tensor(scores)
    allow = mask.allow
    if scores.data.shape[-2:] != allow.shape:
        raise ValueError(
            f"mask shape {allow.shape} does not match scores {scores.data.shape}"
        )
    allow_b = np.broadcast_to(allow, scores.data.shape)
    # Max over allowed entries only: denied scores must not affect anything.
    masked = np.where(allow_b, scores.data, -np.inf)
    row_max = masked.max(axis=-1, keepdims=True)
    any_allowed = allow.any(axis=-1)
    row_max = np.where(
        np.broadcast_to(any_allowed[..., None], row_max.shape), row_max, 0.0
    )
    shifted = np.where(allow_b, scores.data - row_max, 0.0)
    e = np.where(allow_b, np.exp(shifted), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    safe = np.where(denom > 0.0, denom, 1.0)
    p = e / safe

    def bwd(g, grads):
        dot = (g * p).sum(axis=-1, keepdims=True)
        _accum(grads, scores, np.where(allow_b, p * (g - dot), 0.0))

    return Tensor(p, parents=(scores,), backward=bwd)


def layer_norm(x, gain, shift, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, shift = _as_tensor(x), _as_tensor(gain), _as_tensor(shift)
    c = x.data.shape[-1]
    if gain.data.shape != (c,) or shift.data.shape != (c,):
        raise ValueError("gain/shift must match the normalized width")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bwd(g, grads):
        dxhat = g * gain.data
        dx = (
            inv
            / c
            * (
                c * dxhat
                - dxhat.sum(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
        )
        _accum(grads, x, dx)
        red = tuple(range(g.ndim - 1))
        _accum(grads, gain, (g * xhat).sum(axis=red))
        _accum(grads, shift, g.sum(axis=red))

    return Tensor(
        xhat * gain.data + shift.data, parents=(x, gain, shift), backward=bwd
    )


def linear_forward(x, weight, bias) -> Tensor:
    """y = x @ W + b over the last axis."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.shape[-1] != weight.data.shape[0]:
        raise ValueError(
            f"linear: input width {x.data.shape[-1]} != weight rows "
            f"{weight.data.shape[0]}"
        )
    if bias.data.shape != (weight.data.shape[1],):
        raise ValueError("linear: bias width must match weight columns")
    return add(matmul(x, weight), bias)


def ffn_forward(x, w1, b1, w2, b2) -> Tensor:
    """Two linear layers with a rectifier between; preserves input width."""
    return linear_forward(relu(linear_forward(x, w1, b1)), w2, b2)


def multi_head_cross_attention(queries, keys, values, mask, heads, weights):
    """Masked multi-head attention.

    ``weights`` maps {"wq","bq","wk","bk","wv","bv","wo","bo"} to tensors of
    shape (C, C) / (C,). Returns ``(attended, attn)`` where ``attended`` is
    (N, C) and ``attn`` is the head-averaged (N, M) attention matrix; masked
    columns receive exactly zero attention in every head.
    """
    queries, keys, values = _as_tensor(queries), _as_tensor(keys), _as_tensor(values)
    n, c = queries.data.shape
    m = keys.data.shape[0]
    if c % heads != 0:
        raise ValueError(f"channels {c} not divisible by {heads} heads")
    if mask.shape != (n, m):
        raise ValueError(f"mask shape {mask.shape} != ({n}, {m})")
    dh = c // heads

    def split(t, length):
        # (L, C) -> (H, L, dh)
        return transpose(reshape(t, (length, heads, dh)), (1, 0, 2))

    qh = split(linear_forward(queries, weights["wq"], weights["bq"]), n)
    kh = split(linear_forward(keys, weights["wk"], weights["bk"]), m)
    vh = split(linear_forward(values, weights["wv"], weights["bv"]), m)
    scores = mul(matmul(qh, transpose(kh, (0, 2, 1))), 1.0 / math.sqrt(dh))
    attn_h = masked_softmax(scores, mask)  # (H, N, M)
    out_h = matmul(attn_h, vh)  # (H, N, dh)
    out = reshape(transpose(out_h, (1, 0, 2)), (n, c))
    out = linear_forward(out, weights["wo"], weights["bo"])
    attn = mean_(attn_h, axis=0)
    return out, attn


def bilinear_gather(grid: np.ndarray, uv) -> Tensor:
    """Bilinearly sample a (H, W, C) grid at float (u, v) positions.

    ``uv`` is an (N, 2) tensor of (column, row) coordinates in cell units;
    samples outside the grid read zeros (zero padding), so values fade to
    zero across the border. The grid itself is a constant; gradients flow
    to the sample positions only.
    """
    uv = _as_tensor(uv)
    h, w, _ = grid.shape
    u = uv.data[:, 0]
    v = uv.data[:, 1]
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    fu = u - u0
    fv = v - v0

    def cell(vi, ui):
        inside = (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
        vals = grid[np.clip(vi, 0, h - 1), np.clip(ui, 0, w - 1)]
        return np.where(inside[:, None], vals, 0.0)

    c00 = cell(v0, u0)
    c01 = cell(v0, u0 + 1)
    c10 = cell(v0 + 1, u0)
    c11 = cell(v0 + 1, u0 + 1)
    w00 = ((1 - fu) * (1 - fv))[:, None]
    w01 = (fu * (1 - fv))[:, None]
    w10 = ((1 - fu) * fv)[:, None]
    w11 = (fu * fv)[:, None]
    out_data = w00 * c00 + w01 * c01 + w10 * c10 + w11 * c11

    def bwd(g, grads):
        du = (
            ((c01 - c00) * (1 - fv)[:, None] + (c11 - c10) * fv[:, None]) * g
        ).sum(axis=1)
        dv = (
            ((c10 - c00) * (1 - fu)[:, None] + (c11 - c01) * fu[:, None]) * g
        ).sum(axis=1)
        _accum(grads, uv, np.stack([du, dv], axis=1))

    return Tensor(out_data, parents=(uv,), backward=bwd)


class ParamStore:
    """Named trainable parameters with matching gradient accumulators."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already registered")
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        self.grads[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self):
        return list(self.params.keys())

    def zero_grads(self):
        for g in self.grads.values():
            g[...] = 0.0

    def n_scalars(self) -> int:
        return sum(p.data.size for p in self.params.values())


def _accum(grads: dict, t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t in grads:
        grads[t] = grads[t] + g
    else:
        grads[t] = g


def _toposort(root: Tensor):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: ParamStore) -> ParamStore:
    """Accumulate d(loss)/d(param) into the store for every reachable param.

    Repeated calls add up, so the gradient of a sum of losses equals the sum
    of per-loss backward passes.
    """
    if loss.data.shape != ():
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return params
    grads: dict[Tensor, np.ndarray] = {loss: np.asarray(1.0)}
    for node in reversed(_toposort(loss)):
        g = grads.get(node)
        if g is None or node._backward is None:
            continue
        node._backward(g, grads)
    for name, p in params.params.items():
        g = grads.get(p)
        if g is not None:
            params.grads[name] += g
    return params


def grad_of(loss: Tensor, wrt: Tensor) -> np.ndarray:
    """Gradient of a scalar loss with respect to one tensor (testing aid)."""
    if loss.data.shape != ():
        raise ValueError("loss must be scalar")
    grads: dict[Tensor, np.ndarray] = {loss: np.asarray(1.0)}
    for node in reversed(_toposort(loss)):
        g = grads.get(node)
        if g is None or node._backward is None:
            continue
        node._backward(g, grads)
    g = grads.get(wrt)
    return np.zeros_like(wrt.data) if g is None else np.asarray(g)


def finite_diff_check(f, params: ParamStore, step: float = 1e-5) -> float:
    """Compare analytic gradients of ``f(params)`` against central differences.

    Returns the max over all parameter components of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
    ``f`` must be a deterministic scalar function of the store.
    """
    if step <= 0.0:
        raise ValueError("step must be positive")
    params.zero_grads()
    loss = f(params)
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite loss in gradient check")
    backward(loss, params)
    analytic = {k: v.copy() for k, v in params.grads.items()}

    worst = 0.0
    for name, p in params.params.items():
        flat = p.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f(params).data)
            flat[i] = orig - step
            lo = float(f(params).data)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise FloatingPointError("non-finite loss in gradient check")
            numeric = (hi - lo) / (2.0 * step)
            denom = max(abs(a_flat[i]), abs(numeric), 1e-12)
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
    params.zero_grads()
    return worst
