"""Quick release checks: gradients, signal path, recombination identity, Adam."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from saf import dsp
from saf.gradcheck import OP_CASES, check_op, end_to_end_check
from saf.model import MaskAndBias, ModelConfig, count_params, recombine
from saf.tensor import Tensor
from saf.training import AdamState, TrainConfig, adam_step

GRAD_TOL = 1e-4
SIGNAL_TOL = 1e-6


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def _op_gradients(trials: int = 5) -> tuple[bool, str]:
    worst = {name: max(check_op(name, s) for s in range(trials)) for name in OP_CASES}
    bad = {k: v for k, v in worst.items() if not v < GRAD_TOL}
    return not bad, f"{len(OP_CASES)} ops x {trials} trials, max rel err {max(worst.values()):.2e}" + (
        f", failing: {', '.join(bad)}" if bad else ""
    )


def _model_gradients() -> tuple[bool, str]:
    cfg = ModelConfig(channels=8, tcn_hidden=16, tcn_dilations=(1, 2), tcn_repeats=1)
    errs = end_to_end_check(cfg, n_frames=8, per_tensor=1)
    worst = max(errs.values())
    return worst < GRAD_TOL, f"{len(errs)} tensors (reduced widths), max rel err {worst:.2e}"


def _stft_roundtrip() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(2 * dsp.WIN_LENGTH, 8000))
        x = rng.standard_normal(n)
        y = dsp.istft(dsp.stft(x), n)
        lo, hi = dsp.WIN_LENGTH, (dsp.n_frames_for(n) - 1) * dsp.HOP_LENGTH + dsp.HOP_LENGTH
        err = np.linalg.norm(y[lo:hi] - x[lo:hi]) / np.linalg.norm(x[lo:hi])
        worst = max(worst, float(err))
    return worst < SIGNAL_TOL, f"interior relative L2 error {worst:.2e}"


def _cola() -> tuple[bool, str]:
    w = dsp.hann_window()
    total = np.zeros(dsp.WIN_LENGTH * 4)
    total_sq = np.zeros_like(total)
    for s in range(0, total.size - dsp.WIN_LENGTH + 1, dsp.HOP_LENGTH):
        total[s : s + dsp.WIN_LENGTH] += w
        total_sq[s : s + dsp.WIN_LENGTH] += w * w
    interior = slice(dsp.WIN_LENGTH, -dsp.WIN_LENGTH)
    spread = float(np.ptp(total[interior]) / np.mean(total[interior]))
    floor = float(np.min(total_sq[interior]))
    ok = spread < SIGNAL_TOL and floor > 0.1
    return ok, f"window overlap-add {np.mean(total[interior]):.6f} (spread {spread:.1e}), min squared sum {floor:.3f}"


def _identity() -> tuple[bool, str]:
    rng = np.random.default_rng(1)
    bundle = dsp.make_bundle(dsp.AudioClip(rng.standard_normal(4000) * 0.1), np.float64)
    shape = bundle.M.shape
    mb = MaskAndBias(Tensor(np.ones(shape)), Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))
    enh = recombine(bundle, mb)
    err = max(
        float(np.max(np.abs(enh.s_r.data - bundle.S_r))),
        float(np.max(np.abs(enh.s_i.data - bundle.S_i))),
    )
    return err < SIGNAL_TOL, f"unit mask + zero bias max abs deviation {err:.1e}"


def adam_reference(grads: list[float], cfg: TrainConfig, p0: float = 0.0) -> list[float]:
    """Textbook scalar Adam, one float per step."""
    p, m, v, out = p0, 0.0, 0.0, []
    for t, g in enumerate(grads, 1):
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        lr_t = cfg.learning_rate * math.sqrt(1 - cfg.beta2**t) / (1 - cfg.beta1**t)
        p -= lr_t * m / (math.sqrt(v) + cfg.adam_eps)
        out.append(p)
    return out


def _adam() -> tuple[bool, str]:
    cfg = TrainConfig()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(10):
        grads = rng.standard_normal(100).tolist()
        p = Tensor(np.zeros(1), requires_grad=True, dtype=np.float64)
        state = AdamState()
        ref = adam_reference(grads, cfg)
        for g, r in zip(grads, ref):
            p.grad = np.array([g])
            adam_step({"p": p}, state, cfg)
            worst = max(worst, abs(float(p.data[0]) - r))
    return worst < 1e-12, f"100-step scalar trajectories, max deviation {worst:.1e}"


def _params_budget() -> tuple[bool, str]:
    n1, n2 = count_params(ModelConfig()), count_params(ModelConfig(af_layers=2))
    ok = 550_000 <= n1 <= 610_000 and 1_100_000 <= n2 <= 1_220_000
    return ok, f"default {n1:,}, two fusion layers {n2:,}"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "operator gradients": _op_gradients,
    "model gradients": _model_gradients,
    "stft round trip": _stft_roundtrip,
    "window overlap-add": _cola,
    "recombination identity": _identity,
    "adam reference": _adam,
    "parameter budget": _params_budget,
}


def run_all(emit: Callable[[str], None] = print) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as e:  # a crashing check is a failing check
            ok, detail = False, f"{type(e).__name__}: {e}"
        results.append(CheckResult(name, ok, detail))
        emit(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return results

