"""Central finite-difference gradient checking."""

from __future__ import annotations

import zlib
from typing import Callable, Iterable, Optional

import numpy as np

from saf.tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def gradient_check(
    f: Callable[[], Tensor],
    x: Tensor,
    eps: float = 1e-4,
    indices: Optional[Iterable[int]] = None,
) -> float:
    """Max relative error between backprop and central differences w.r.t. ``x``.

    ``f`` is re-evaluated with ``x.data`` perturbed in place, so it must read
    ``x`` rather than close over a copy. ``indices`` restricts the check to the
    given flat coordinates (all by default). Other leaves' grads are left
    untouched except for whatever ``f().backward()`` accumulates.
    """
    x.requires_grad = True
    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    saved = x.grad
    x.grad = None
    f().backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = saved

    flat = x.data.reshape(-1)
    coords = range(flat.size) if indices is None else list(indices)
    worst = 0.0
    for idx in coords:
        orig = flat[idx]
        flat[idx] = orig + eps
        hi = float(f().data)
        flat[idx] = orig - eps
        lo = float(f().data)
        flat[idx] = orig
        numeric = (hi - lo) / (2.0 * eps)
        err = float(relative_error(np.array(analytic.reshape(-1)[idx]), np.array(numeric)))
        worst = max(worst, err)
    return worst


# -- randomized operator cases ------------------------------------------------
#
# Each builder draws float64 inputs from ``rng`` and returns ``(loss_fn, leaves)``
# where ``loss_fn`` reduces the operator output to a scalar through a fixed
# random projection, so every output element contributes a distinct weight.


def _leaf(rng, *shape, lo=-1.0, hi=1.0, away_from_zero=0.0):
    x = rng.uniform(lo, hi, size=shape)
    if away_from_zero:
        x = np.where(np.abs(x) < away_from_zero, np.copysign(away_from_zero, x) + x, x)
    return Tensor(x, requires_grad=True, dtype=np.float64)


def _projected(rng, build):
    from saf import ops

    probe = build()
    r = Tensor(rng.standard_normal(probe.shape), dtype=np.float64)
    return lambda: ops.mean_all(ops.mul(build(), r))


def _case_pointwise(rng):
    from saf import ops

    x, w, b = _leaf(rng, 3, 4, 5), _leaf(rng, 2, 3), _leaf(rng, 2)
    return _projected(rng, lambda: ops.conv2d_pointwise(x, w, b)), [x, w, b]


def _case_depthwise(rng):
    from saf import ops

    kt, kf = rng.choice([1, 3, 5]), rng.choice([1, 3])
    dil = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
    x, w, b = _leaf(rng, 3, 6, 7), _leaf(rng, 3, kt, kf), _leaf(rng, 3)
    return _projected(rng, lambda: ops.conv2d_depthwise(x, w, b, dil)), [x, w, b]


def _case_channel_norm(rng):
    from saf import ops

    x, g, b = _leaf(rng, 4, 3, 5), _leaf(rng, 4, lo=0.5, hi=1.5), _leaf(rng, 4)
    return _projected(rng, lambda: ops.channel_norm(x, g, b)), [x, g, b]


def _case_prelu(rng):
    from saf import ops

    x, a = _leaf(rng, 3, 4, 5, away_from_zero=1e-2), _leaf(rng, 3, lo=0.0, hi=0.5)
    return _projected(rng, lambda: ops.prelu(x, a)), [x, a]


def _unary(op_name, lo=-3.0, hi=3.0):
    def case(rng):
        from saf import ops

        x = _leaf(rng, 3, 4, 5, lo=lo, hi=hi)
        fn = getattr(ops, op_name)
        return _projected(rng, lambda: fn(x)), [x]

    return case


def _case_softmax(rng):
    from saf import ops

    x = _leaf(rng, 4, 3, 5, lo=-2, hi=2)
    axis = int(rng.integers(0, 3))
    return _projected(rng, lambda: ops.softmax(x, axis=axis)), [x]


def _binary(op_name):
    def case(rng):
        from saf import ops

        a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
        fn = getattr(ops, op_name)
        return _projected(rng, lambda: fn(a, b)), [a, b]

    return case


def _case_scale(rng):
    from saf import ops

    x, k = _leaf(rng, 3, 4), float(rng.uniform(-2, 2))
    return _projected(rng, lambda: ops.scale(x, k)), [x]


def _case_magnitude(rng):
    from saf import ops

    re, im = _leaf(rng, 4, 5, away_from_zero=0.1), _leaf(rng, 4, 5)
    return _projected(rng, lambda: ops.magnitude(re, im)), [re, im]


def _case_layout(rng):
    from saf import ops

    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 3, 3, 4)

    def build():
        y = ops.concat([a, b], axis=0)
        y = ops.pad(y, [(0, 0), (1, 2), (0, 1)])
        y = ops.slice_(y, [(1, 4), (0, 5)])
        return ops.reshape(y, (3, 25))

    return _projected(rng, build), [a, b]


def _case_reductions(rng):
    from saf import ops

    x, y = _leaf(rng, 3, 4, 5), _leaf(rng, 2, 6)
    return (lambda: ops.add(ops.sum_sq(x), ops.scale(ops.mean_all(y), 3.0))), [x, y]


def _case_attention(rng):
    from saf import ops

    q, k, v = _leaf(rng, 3, 2, 6), _leaf(rng, 3, 2, 6), _leaf(rng, 3, 2, 6)
    radius = int(rng.integers(1, 3))
    return _projected(rng, lambda: ops.neighbour_attention(q, k, v, radius)), [q, k, v]


def _case_checkpoint(rng):
    from saf import ops

    x, w = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    body = lambda x, w: ops.tanh(ops.mul(ops.gelu(x), w))  # noqa: E731
    return _projected(rng, lambda: ops.checkpoint(body, x, w)), [x, w]


OP_CASES: dict[str, Callable] = {
    "conv2d_pointwise": _case_pointwise,
    "conv2d_depthwise": _case_depthwise,
    "channel_norm": _case_channel_norm,
    "prelu": _case_prelu,
    "gelu": _unary("gelu"),
    "sigmoid": _unary("sigmoid"),
    "tanh": _unary("tanh"),
    "softmax": _case_softmax,
    "add": _binary("add"),
    "sub": _binary("sub"),
    "mul": _binary("mul"),
    "scale": _case_scale,
    "magnitude": _case_magnitude,
    "concat/pad/slice/reshape": _case_layout,
    "sum_sq/mean_all": _case_reductions,
    "neighbour_attention": _case_attention,
    "checkpoint": _case_checkpoint,
}


def check_op(name: str, seed: int, eps: float = 1e-4) -> float:
    """Max relative error of one randomized trial of ``OP_CASES[name]``."""
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    f, leaves = OP_CASES[name](rng)
    return max(gradient_check(f, leaf, eps) for leaf in leaves)


def end_to_end_check(cfg=None, n_frames: int = 8, seed: int = 0, per_tensor: int = 3,
                     eps: float = 1e-4) -> dict[str, float]:
    """Loss gradient vs central differences for every parameter tensor (float64).

    ``per_tensor`` coordinates are sampled from each tensor; returns the worst
    relative error per parameter name. The differences are taken with PReLU
    branches pinned to those of the unperturbed point (see
    :func:`saf.ops.prelu_branches`): with ~10^7 PReLU inputs some always sit
    within a perturbation's reach of zero, and a crossing would measure the
    kink rather than the gradient.
    """
    from saf import dsp, ops
    from saf.model import ModelConfig, cast_params, forward, init_params, loss

    cfg = cfg or ModelConfig()
    rng = np.random.default_rng(seed)
    n = (n_frames - 1) * dsp.HOP_LENGTH + dsp.WIN_LENGTH
    noisy = dsp.AudioClip(rng.standard_normal(n) * 0.1)
    clean = dsp.AudioClip(noisy.samples * 0.5 + 0.02 * rng.standard_normal(n))
    bundle = dsp.make_bundle(noisy, np.float64)
    target = dsp.make_target(clean, np.float64)
    params = cast_params(init_params(cfg, seed), np.float64)
    # Move off the symmetric init (unit gains, zero shifts, equal slopes).
    for p in params.values():
        p.data += 0.05 * rng.standard_normal(p.shape)

    def f():
        enh, _ = forward(bundle, params, cfg)
        return loss(enh, target).l_total

    with ops.prelu_branches() as masks:
        base = f()
    base.backward()

    def pinned():
        with ops.prelu_branches(masks):
            return f()

    out = {}
    for name, p in params.items():
        idx = rng.choice(p.data.size, size=min(per_tensor, p.data.size), replace=False)
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(pinned().data)
            flat[i] = orig - eps
            lo = float(pinned().data)
            flat[i] = orig
            num = (hi - lo) / (2.0 * eps)
            worst = max(worst, float(relative_error(np.array(grad[i]), np.array(num))))
        out[name] = worst
    return out
