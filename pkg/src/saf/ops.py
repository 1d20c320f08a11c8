"""Differentiable operators on :class:`~saf.tensor.Tensor`.

Feature maps are laid out channel-first as ``[C, T, F]``. There is no implicit
broadcasting: binary element-wise operators require identical shapes, and the
only tensor-by-number product is :func:`scale`.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf, expit

from saf import _kernels
from saf.tensor import Tensor, make_result


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- convolutions -----------------------------------------------------------


def conv2d_pointwise(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """1x1 convolution: ``out[c] = b[c] + sum_k w[c, k] * x[k]``."""
    if x.ndim != 3 or w.ndim != 2 or b.ndim != 1:
        raise ValueError(f"conv2d_pointwise: expected x[C,T,F], w[Co,Ci], b[Co]; got {x.shape}, {w.shape}, {b.shape}")
    c_in, t, f = x.shape
    c_out = w.shape[0]
    if w.shape[1] != c_in or b.shape[0] != c_out:
        raise ValueError(
            f"conv2d_pointwise: input has {c_in} channels but weight is {w.shape} and bias {b.shape}"
        )
    x2 = x.data.reshape(c_in, t * f)
    out = w.data @ x2
    out += b.data[:, None]

    def backward(g):
        g2 = g.reshape(c_out, t * f)
        dx = (w.data.T @ g2).reshape(c_in, t, f) if x.requires_grad else None
        dw = g2 @ x2.T if w.requires_grad else None
        db = g2.sum(axis=1) if b.requires_grad else None
        return dx, dw, db

    return make_result(out.reshape(c_out, t, f), (x, w, b), backward)


def conv2d_depthwise(x: Tensor, w: Tensor, b: Tensor, dilation: tuple[int, int] = (1, 1)) -> Tensor:
    """Per-channel 2-D convolution with zero "same" padding.

    Cross-correlation convention (no kernel flip), as in common deep-learning
    frameworks: ``out[c,t,f] = b[c] + sum_ij w[c,i,j] * xpad[c, t+i*dT, f+j*dF]``.
    """
    if x.ndim != 3 or w.ndim != 3 or b.ndim != 1:
        raise ValueError(f"conv2d_depthwise: expected x[C,T,F], w[C,kT,kF], b[C]; got {x.shape}, {w.shape}, {b.shape}")
    c, t, f = x.shape
    _, kt, kf = w.shape
    if w.shape[0] != c or b.shape[0] != c:
        raise ValueError(f"conv2d_depthwise: {c} channels but weight {w.shape}, bias {b.shape}")
    if kt % 2 == 0 or kf % 2 == 0:
        raise ValueError(f"conv2d_depthwise: kernel extents must be odd, got {(kt, kf)}")
    dt, df = dilation
    xd = np.ascontiguousarray(x.data)
    out = np.empty_like(xd)
    _kernels.depthwise_forward(xd, w.data, b.data, dt, df, out)

    def backward(g):
        g = np.ascontiguousarray(g)
        dx = dw = db = None
        if x.requires_grad:
            dx = np.empty_like(xd)
            _kernels.depthwise_backward_input(g, w.data, dt, df, dx)
        if w.requires_grad or b.requires_grad:
            dw = np.empty_like(w.data)
            db = np.empty_like(b.data)
            _kernels.depthwise_backward_weight(g, xd, dt, df, dw, db)
        return dx, dw, db

    return make_result(out, (x, w, b), backward)


# -- normalization and activations -----------------------------------------


def _rows(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a).reshape(a.shape[0], -1)


def channel_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize across channels (axis 0) independently at every position."""
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"channel_norm: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    x2 = _rows(x.data)
    mu = np.empty(x2.shape[1], dtype=x2.dtype)
    inv = np.empty_like(mu)
    out = np.empty_like(x2)
    _kernels.channel_norm_forward(x2, gamma.data, beta.data, x2.dtype.type(eps), mu, inv, out)

    def backward(g):
        dx = np.empty_like(x2)
        dgamma = np.empty_like(gamma.data)
        dbeta = np.empty_like(beta.data)
        _kernels.channel_norm_backward(x2, mu, inv, gamma.data, _rows(g), dx, dgamma, dbeta)
        return dx.reshape(x.shape), dgamma, dbeta

    return make_result(out.reshape(x.shape), (x, gamma, beta), backward)


class _BranchTape:
    def __init__(self, masks: Optional[list]):
        self.replay = masks is not None
        self.masks = list(masks) if masks is not None else []
        self.pos = 0


_tape: Optional[_BranchTape] = None


@contextmanager
def prelu_branches(masks: Optional[list] = None):
    """Record (``masks`` None) or replay which PReLU branch every input takes.

    Yields the list of boolean masks in call order. Replaying a recording pins
    the network to the smooth piece that is active at the recorded point, so
    finite differences taken there estimate its gradient even when a small
    perturbation would push some inputs across zero.
    """
    global _tape
    saved, _tape = _tape, _BranchTape(masks)
    try:
        yield _tape.masks
    finally:
        _tape = saved


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Parametric ReLU with one learnable negative slope per channel (axis 0)."""
    if slope.shape != (x.shape[0],):
        raise ValueError(f"prelu: {x.shape[0]} channels but slope {slope.shape}")
    x2 = _rows(x.data)
    if _tape is not None and _tape.replay:
        pos = _tape.masks[_tape.pos]
        _tape.pos += 1
        out = np.where(pos, x2, slope.data[:, None] * x2)
    else:
        if _tape is not None:
            _tape.masks.append(x2 > 0)
        out = np.empty_like(x2)
        _kernels.prelu_forward(x2, slope.data, out)

    def backward(g):
        dx = np.empty_like(x2)
        dslope = np.empty_like(slope.data)
        _kernels.prelu_backward(x2, slope.data, _rows(g), dx, dslope)
        return dx.reshape(x.shape), dslope

    return make_result(out.reshape(x.shape), (x, slope), backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return make_result(out.astype(x.dtype, copy=False), (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)

    def backward(g):
        return (g * s * (1.0 - s),)

    return make_result(s, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    th = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - th * th),)

    return make_result(th, (x,), backward)


def softmax(x: Tensor, axis: int = 0, valid: Optional[np.ndarray] = None) -> Tensor:
    """Softmax along ``axis``; positions where ``valid`` is False get weight 0."""
    z = x.data if valid is None else np.where(valid, x.data, -np.inf)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - np.sum(s * g, axis=axis, keepdims=True)),)

    return make_result(s.astype(x.dtype, copy=False), (x,), backward)


# -- element-wise arithmetic -----------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return make_result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)

    def backward(g):
        return (g * b.data if a.requires_grad else None, g * a.data if b.requires_grad else None)

    return make_result(a.data * b.data, (a, b), backward)


def scale(a: Tensor, k: float) -> Tensor:
    k = a.dtype.type(k)
    return make_result(a.data * k, (a,), lambda g: (g * k,))


def magnitude(re: Tensor, im: Tensor, floor: float = 1e-12) -> Tensor:
    """``sqrt(re**2 + im**2 + floor)``; the floor keeps the gradient finite at 0."""
    _check_same_shape("magnitude", re, im)
    mag = np.sqrt(re.data * re.data + im.data * im.data + re.dtype.type(floor))

    def backward(g):
        q = g / mag
        return (q * re.data if re.requires_grad else None, q * im.data if im.requires_grad else None)

    return make_result(mag, (re, im), backward)


# -- structural --------------------------------------------------------------


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise ValueError("concat: empty input list")
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(x.shape[d] != ref[d] for d in range(len(ref)) if d != axis):
            raise ValueError(f"concat: incompatible shapes {[x.shape for x in xs]} on axis {axis}")
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make_result(out, tuple(xs), backward)


def pad(x: Tensor, widths: Sequence[tuple[int, int]], value: float = 0.0) -> Tensor:
    if len(widths) != x.ndim:
        raise ValueError(f"pad: need {x.ndim} (before, after) pairs, got {len(widths)}")
    out = np.pad(x.data, widths, constant_values=value)
    inner = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))
    return make_result(out, (x,), lambda g: (g[inner],))


def slice_(x: Tensor, ranges: Sequence[tuple[int, int]]) -> Tensor:
    """Take ``x[lo0:hi0, lo1:hi1, ...]``; ``ranges`` covers leading axes."""
    if len(ranges) > x.ndim:
        raise ValueError(f"slice: {len(ranges)} ranges for a {x.ndim}-d tensor")
    index = []
    for (lo, hi), n in zip(ranges, x.shape):
        if not 0 <= lo < hi <= n:
            raise ValueError(f"slice: range {(lo, hi)} out of bounds for extent {n}")
        index.append(slice(lo, hi))
    index = tuple(index)

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[index] = g
        return (dx,)

    return make_result(x.data[index].copy(), (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise ValueError(f"reshape: cannot view {x.shape} as {shape}")
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


# -- reductions --------------------------------------------------------------


def mean_all(x: Tensor) -> Tensor:
    inv = x.dtype.type(1.0 / x.data.size)
    out = np.asarray(x.data.sum() * inv, dtype=x.dtype).reshape(())
    return make_result(out, (x,), lambda g: (np.full_like(x.data, g * inv),))


def sum_sq(x: Tensor) -> Tensor:
    out = np.asarray(np.vdot(x.data, x.data), dtype=x.dtype).reshape(())
    return make_result(out, (x,), lambda g: (2.0 * g * x.data,))


# -- attention ---------------------------------------------------------------


def _band_slices(f: int, d: int) -> tuple[slice, slice]:
    """Index pair (centre, neighbour) for frequency offset ``d``, clipped to range."""
    lo, hi = max(0, -d), min(f, f - d)
    return slice(lo, hi), slice(lo + d, hi + d)


def neighbour_attention_weights(q: np.ndarray, k: np.ndarray, radius: int = 1) -> np.ndarray:
    """Softmax weights ``[2r+1, T, F]`` over neighbouring bands; out-of-range bands get 0."""
    return _neighbour_scores(q, k, radius)[1]


def _neighbour_scores(q: np.ndarray, k: np.ndarray, radius: int):
    c, t, f = q.shape
    offsets = range(-radius, radius + 1)
    inv = q.dtype.type(1.0 / math.sqrt(c))
    scores = np.zeros((len(offsets), t, f), dtype=q.dtype)
    valid = np.zeros((len(offsets), 1, f), dtype=bool)
    for n, d in enumerate(offsets):
        ctr, nbr = _band_slices(f, d)
        scores[n, :, ctr] = np.einsum("ctf,ctf->tf", q[:, :, ctr], k[:, :, nbr]) * inv
        valid[n, :, ctr] = True
    valid = np.broadcast_to(valid, scores.shape)
    z = np.where(valid, scores, -np.inf)
    e = np.exp(z - z.max(axis=0, keepdims=True))
    return scores, e / e.sum(axis=0, keepdims=True)


def neighbour_attention(q: Tensor, k: Tensor, v: Tensor, radius: int = 1) -> Tensor:
    """Dot-product attention restricted to bands ``f-r .. f+r`` at each ``(t, f)``.

    Scores are ``<q[:, t, f], k[:, t, f+d]> / sqrt(C)``; bands outside ``[0, F)``
    are dropped and the softmax renormalizes over the rest.
    """
    for other in (k, v):
        _check_same_shape("neighbour_attention", q, other)
    c, t, f = q.shape
    if f < 2:
        raise ValueError(f"neighbour_attention: need at least 2 frequency bands, got {f}")
    _, a = _neighbour_scores(q.data, k.data, radius)
    inv = q.dtype.type(1.0 / math.sqrt(c))
    offsets = list(range(-radius, radius + 1))
    out = np.zeros_like(v.data)
    for n, d in enumerate(offsets):
        ctr, nbr = _band_slices(f, d)
        out[:, :, ctr] += a[n, None, :, ctr] * v.data[:, :, nbr]

    def backward(g):
        da = np.zeros_like(a)
        dv = np.zeros_like(v.data)
        for n, d in enumerate(offsets):
            ctr, nbr = _band_slices(f, d)
            da[n, :, ctr] = np.einsum("ctf,ctf->tf", g[:, :, ctr], v.data[:, :, nbr])
            dv[:, :, nbr] += a[n, None, :, ctr] * g[:, :, ctr]
        ds = a * (da - np.sum(a * da, axis=0, keepdims=True)) * inv
        dq = np.zeros_like(q.data)
        dk = np.zeros_like(k.data)
        for n, d in enumerate(offsets):
            ctr, nbr = _band_slices(f, d)
            dq[:, :, ctr] += ds[n, None, :, ctr] * k.data[:, :, nbr]
            dk[:, :, nbr] += ds[n, None, :, ctr] * q.data[:, :, ctr]
        return dq, dk, dv

    return make_result(out, (q, k, v), backward)


# -- recomputation -------------------------------------------------------------


def checkpoint(fn: Callable[..., Tensor], *inputs: Tensor) -> Tensor:
    """Evaluate ``fn(*inputs)`` without keeping its intermediates.

    The sub-graph is rebuilt during the backward pass. ``fn`` must be
    deterministic and must reach every differentiable tensor it uses through
    ``inputs`` (pass parameters explicitly, not by closure).
    """
    if not any(t.requires_grad for t in inputs):
        return fn(*inputs)
    detached = [Tensor(t.data, name=t.name) for t in inputs]
    out = fn(*detached).data

    def backward(g):
        leaves = [Tensor(t.data, requires_grad=t.requires_grad, name=t.name) for t in inputs]
        fn(*leaves).backward(g)
        return tuple(leaf.grad for leaf in leaves)

    return make_result(out, inputs, backward)
