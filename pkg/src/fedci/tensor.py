"""Small dense-tensor engine with tape-based reverse-mode differentiation.

Only the operations the forecasting backbone needs are provided. Every op
returns a new :class:`Tensor` whose ``_backward`` closure pushes the upstream
gradient into its parents; :meth:`Tensor.backward` walks the tape in reverse
topological order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence

import numpy as np

MAX_DIMS = 4


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 _parents: Sequence["Tensor"] = (), _backward: Optional[Callable] = None):
        data = np.asarray(data)
        if data.ndim > MAX_DIMS:
            raise DimensionError(f"tensor has {data.ndim} dims, at most {MAX_DIMS} allowed")
        if data.size == 0:
            raise DimensionError(f"tensor extents must be >= 1, got {data.shape}")
        self.data = data
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dims(self):
        return list(self.data.shape)

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
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
        _accumulate(self, np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior gradients are not needed once propagated
                if node._parents:
                    node.grad = None


def _accumulate(t: Tensor, g: np.ndarray, fresh: bool = False):
    """Add ``g`` into ``t.grad``; ``fresh`` means ``g`` is a new array nobody else holds."""
    if not t.requires_grad:
        return
    if t.grad is None:
        if fresh and g.dtype == t.data.dtype and g.shape == t.data.shape:
            t.grad = g
        else:
            t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _result(data, parents, backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (),
                  _backward=backward if needs else None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# operations


def linear(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``y[..., j] = sum_i x[..., i] W[i, j] + b[j]``."""
    if W.data.ndim != 2 or x.shape[-1] != W.shape[0] or (b is not None and b.shape != (W.shape[1],)):
        bshape = None if b is None else b.shape
        raise DimensionError(f"linear: cannot apply weight {W.shape} (bias {bshape}) to input {x.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, W.shape[0])
    y = x2 @ W.data
    if b is not None:
        y += b.data
    parents = (x, W) if b is None else (x, W, b)

    def backward(g):
        g2 = g.reshape(-1, W.shape[1])
        if x.requires_grad:
            _accumulate(x, (g2 @ W.data.T).reshape(x.shape), fresh=True)
        if W.requires_grad:
            _accumulate(W, x2.T @ g2, fresh=True)
        if b is not None and b.requires_grad:
            _accumulate(b, np.ones(g2.shape[0], dtype=g2.dtype) @ g2, fresh=True)

    return _result(y.reshape(lead + (W.shape[1],)), parents, backward)


def linear_concat(xs: Sequence[Tensor], W: Tensor, b: Tensor, lead) -> Tensor:
    """``linear(concat_last(broadcast_to(x, lead + (.,)) for x in xs), W, b)`` without the big concat.

    Each part is multiplied by its own row block of ``W`` at its own
    (broadcastable) shape, and the partial products are broadcast-added.
    """
    lead = tuple(lead)
    widths = [x.shape[-1] for x in xs]
    if W.data.ndim != 2 or sum(widths) != W.shape[0] or b.shape != (W.shape[1],):
        raise DimensionError(f"linear_concat: weight {W.shape} / bias {b.shape} vs part widths {widths}")
    offsets = np.concatenate([[0], np.cumsum(widths)])
    blocks = [W.data[offsets[i]:offsets[i + 1]] for i in range(len(xs))]
    try:
        y = np.broadcast_to(b.data, lead + (W.shape[1],)).copy()
        for x, Wi in zip(xs, blocks):
            y += x.data @ Wi
    except ValueError:
        raise DimensionError(f"linear_concat: parts {[x.shape for x in xs]} do not broadcast to {lead}") from None

    def backward(g):
        gW = np.empty_like(W.data) if W.requires_grad else None
        for i, (x, Wi) in enumerate(zip(xs, blocks)):
            gi = _unbroadcast(g, x.shape[:-1] + (W.shape[1],)).reshape(x.shape[:-1] + (W.shape[1],))
            if x.requires_grad:
                _accumulate(x, gi @ Wi.T, fresh=True)
            if gW is not None:
                gW[offsets[i]:offsets[i + 1]] = x.data.reshape(-1, widths[i]).T @ gi.reshape(-1, W.shape[1])
        if gW is not None:
            _accumulate(W, gW, fresh=True)
        if b.requires_grad:
            _accumulate(b, g.reshape(-1, W.shape[1]).sum(axis=0))

    return _result(y, tuple(xs) + (W, b), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with population variance, then scale and shift."""
    H = x.shape[-1]
    if gamma.shape != (H,) or beta.shape != (H,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match input {x.shape}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).reshape(-1, H).sum(axis=0), fresh=True)
        if beta.requires_grad:
            _accumulate(beta, g.reshape(-1, H).sum(axis=0), fresh=True)
        if x.requires_grad:
            gx = g * gamma.data
            dx = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, dx * inv, fresh=True)

    return _result(y, (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    y = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        _accumulate(x, g * mask, fresh=True)

    return _result(y, (x,), backward)


def dropout_multiplier(shape, p: float, rng: np.random.Generator, dtype) -> np.ndarray:
    """Per-element 0 or 1/(1-p') where p' is p rounded to a multiple of 2**-16.

    One 64-bit draw from ``rng`` keys a counter-based hash that decides every
    element, which is far cheaper than drawing a uniform per element.
    """
    from . import _kernels

    threshold = int(round(p * 65536))
    key = np.uint64(rng.bit_generator.random_raw())
    out = np.empty(int(np.prod(shape)), dtype=dtype)
    _kernels.dropout_keep(key, threshold, out.dtype.type(65536.0 / (65536 - threshold)), out)
    return out.reshape(shape)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; identity (the same object) outside training."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    m = dropout_multiplier(x.shape, p, rng, x.dtype)
    y = x.data * m

    def backward(g):
        _accumulate(x, g * m, fresh=True)

    return _result(y, (x,), backward)


def norm_relu_dropout(x: Tensor, gamma: Tensor, beta: Tensor, p: float, rng, training: bool,
                      eps: float = 1e-5) -> Tensor:
    """``dropout(relu(layer_norm(x)))`` in one pass.

    Draws the same dropout mask as the unfused composition for the same rng
    state.
    """
    from . import _kernels

    H = x.shape[-1]
    if gamma.shape != (H,) or beta.shape != (H,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match input {x.shape}")
    if not 0 <= p < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    z = np.ascontiguousarray(x.data.reshape(-1, H))
    dt = z.dtype
    if training and p > 0:
        if rng is None:
            raise ValueError("dropout in training mode needs an explicit rng")
        keep = dropout_multiplier(z.shape, p, rng, dt)
    else:
        keep = np.ones_like(z)
    g_, b_ = gamma.data.astype(dt, copy=False), beta.data.astype(dt, copy=False)
    y, xhat, inv = _kernels.block_forward(z, g_, b_, dt.type(eps), keep)

    def backward(g):
        dgamma = np.zeros(H, dtype=dt)
        dbeta = np.zeros(H, dtype=dt)
        g2 = np.ascontiguousarray(g.reshape(-1, H), dtype=dt)
        dz = _kernels.block_backward(g2, xhat, inv, g_, b_, keep, dgamma, dbeta, x.requires_grad)
        _accumulate(gamma, dgamma, fresh=True)
        _accumulate(beta, dbeta, fresh=True)
        if x.requires_grad:
            _accumulate(x, dz.reshape(x.shape), fresh=True)

    return _result(y.reshape(x.shape), (x, gamma, beta), backward)


def gather_rows(table: Tensor, idx) -> Tensor:
    """``out[..., :] = table[idx[...], :]``; the backward pass scatter-adds."""
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError(f"gather_rows indices must be integers, got {idx.dtype}")
    if table.data.ndim != 2:
        raise DimensionError(f"gather_rows expects a 2-D table, got {table.shape}")
    R = table.shape[0]
    bad = idx[(idx < 0) | (idx >= R)]
    if bad.size:
        raise IndexError(f"row index {int(bad.flat[0])} out of range for table with {R} rows")
    y = table.data[idx]

    def backward(g):
        if table.requires_grad:
            from . import _kernels

            dt = np.zeros_like(table.data)
            _kernels.scatter_add_rows(dt, idx.reshape(-1), np.ascontiguousarray(g.reshape(-1, table.shape[1])))
            _accumulate(table, dt, fresh=True)

    return _result(y, (table,), backward)


def concat_last(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise DimensionError("concat_last needs at least one tensor")
    if len(xs) == 1:
        return xs[0]
    lead = xs[0].shape[:-1]
    for t in xs[1:]:
        if t.shape[:-1] != lead:
            raise DimensionError(f"concat_last: leading shape {t.shape[:-1]} differs from {lead}")
    widths = [t.shape[-1] for t in xs]
    y = np.concatenate([t.data for t in xs], axis=-1)
    bounds = np.cumsum(widths)[:-1]

    def backward(g):
        for t, part in zip(xs, np.split(g, bounds, axis=-1)):
            _accumulate(t, part)

    return _result(y, tuple(xs), backward)


def split_last(g: np.ndarray, widths: Sequence[int]):
    """Inverse of concatenation along the last axis (used to route gradients)."""
    return np.split(g, np.cumsum(widths)[:-1], axis=-1)


def swap_time_hidden(x: Tensor) -> Tensor:
    """``(B, T, N, H) -> (B, H, N, T)``; an involution."""
    if x.data.ndim != 4:
        raise DimensionError(f"swap_time_hidden expects a 4-D tensor, got {x.shape}")
    y = np.ascontiguousarray(x.data.transpose(0, 3, 2, 1))

    def backward(g):
        _accumulate(x, g.transpose(0, 3, 2, 1))

    return _result(y, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    try:
        y = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _result(y, (a, b), backward)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        y = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast {x.shape} to {shape}") from None

    def backward(g):
        _accumulate(x, _unbroadcast(g, x.shape).reshape(x.shape))

    return _result(y, (x,), backward)


def squeeze_last(x: Tensor) -> Tensor:
    if x.shape[-1] != 1:
        raise DimensionError(f"squeeze_last needs a trailing extent of 1, got {x.shape}")
    y = x.data[..., 0]

    def backward(g):
        _accumulate(x, g[..., None])

    return _result(y, (x,), backward)


def total(x: Tensor) -> Tensor:
    y = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _result(y, (x,), backward)


def mean_abs_error(pred: Tensor, target) -> Tensor:
    """Mean absolute error; the subgradient at exact ties is 0."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != t.shape:
        raise DimensionError(f"mae: prediction {pred.shape} vs target {t.shape}")
    diff = pred.data - t
    y = np.asarray(np.abs(diff).mean(), dtype=pred.dtype)

    def backward(g):
        _accumulate(pred, np.sign(diff) * (g / diff.size), fresh=True)

    return _result(y, (pred,), backward)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Parameters without an entry in ``grads`` are treated as having a zero
    gradient. The step counter advances once per call.
    """
    if state.lr <= 0:
        raise ValueError("learning rate must be positive")
    for name, g in grads.items():
        if not np.isfinite(np.dot(g.reshape(-1), g.reshape(-1))) and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        v *= state.beta2
        if g is not None:
            m += (1.0 - state.beta1) * g
            v += (1.0 - state.beta2) * (g * g)
        step = (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        p -= step.astype(p.dtype, copy=False)


class Adam:
    """Thin stateful wrapper around :func:`adam_step`."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self, params, grads):
        adam_step(params, grads, self.state)


# ---------------------------------------------------------------------------
# gradient oracle


def leaves(params: Mapping[str, np.ndarray]) -> Dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}


def grad_check(f: Callable[[Dict[str, Tensor]], Tensor], params: Mapping[str, np.ndarray],
               step: float = 1e-5, max_elements: int = 10_000, seed: int = 0,
               names: Optional[Iterable[str]] = None) -> float:
    """Largest relative discrepancy between analytic and central-difference gradients.

    ``f`` maps a dict of leaf tensors to a scalar tensor and must be
    deterministic (no dropout). The error is measured over the whole checked
    gradient vector: ``max|analytic - numeric| / max(|analytic|, |numeric|)``
    with both maxima taken over every checked element, so parameters whose
    gradient is near zero are judged against the overall gradient scale
    rather than their own round-off. Above ``max_elements`` total elements a
    seeded random subsample is checked.
    """
    arrays = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    names = list(arrays) if names is None else list(names)
    lv = leaves(arrays)
    out = f(lv)
    out.backward()
    analytic = {k: (lv[k].grad if lv[k].grad is not None else np.zeros_like(arrays[k])) for k in names}

    total_elems = sum(arrays[k].size for k in names)
    rng = np.random.default_rng(seed)
    keep_frac = min(1.0, max_elements / max(total_elems, 1))

    def evaluate():
        return float(f({k: Tensor(v) for k, v in arrays.items()}).data)

    diff = scale = 0.0
    for k in names:
        arr = arrays[k]
        flat = arr.reshape(-1)
        if keep_frac < 1.0:
            n = max(1, int(round(flat.size * keep_frac)))
            picks = np.sort(rng.choice(flat.size, size=n, replace=False))
        else:
            picks = np.arange(flat.size)
        a = analytic[k].reshape(-1)[picks]
        num = np.empty(len(picks))
        for j, i in enumerate(picks):
            orig = flat[i]
            flat[i] = orig + step
            fp = evaluate()
            flat[i] = orig - step
            fm = evaluate()
            flat[i] = orig
            num[j] = (fp - fm) / (2 * step)
        diff = max(diff, float(np.abs(a - num).max()))
        scale = max(scale, float(np.abs(a).max()), float(np.abs(num).max()))
    return diff / scale if scale > 0 else diff
