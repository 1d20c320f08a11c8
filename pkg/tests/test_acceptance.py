"""Acceptance criteria 1-9. Each test prints one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; criteria 2 and 6 take
several minutes each on a desktop CPU.
"""

import math

import numpy as np
import pytest

from saf import checkpoint, dsp, metrics, model, ops
from saf.dsp import AudioClip, TargetSpectra
from saf.enhance import enhance, inference_params
from saf.gradcheck import OP_CASES, check_op, end_to_end_check
from saf.model import MaskAndBias, ModelConfig
from saf.tensor import Tensor
from saf.training import PairedDataset, TrainConfig, read_loss_log, train

from conftest import noisy_pair


@pytest.fixture
def verdict(capsys):
    def emit(number: int, title: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number} ({title}): {detail}")
        assert ok, detail

    return emit


def _f64(a):
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


def test_criterion_1_parameter_budget(verdict):
    n1 = model.count_params(ModelConfig())
    n2 = model.count_params(ModelConfig(af_layers=2))
    ok = 550_000 <= n1 <= 610_000 and 1_100_000 <= n2 <= 1_220_000
    verdict(1, "parameter budget", ok, f"default {n1:,} in [550k, 610k]; af_layers=2 {n2:,} in [1.10M, 1.22M]")


@pytest.mark.slow
def test_criterion_2_gradient_correctness(verdict):
    op_worst = {name: max(check_op(name, seed) for seed in range(100)) for name in OP_CASES}
    e2e = end_to_end_check(ModelConfig(), n_frames=8, seed=0, per_tensor=3, eps=1e-4)
    groups: dict[str, float] = {}
    for name, err in e2e.items():
        group = model.module_of(name)
        groups[group] = max(groups.get(group, 0.0), err)
    worst_op, worst_e2e = max(op_worst.values()), max(e2e.values())
    ok = worst_op < 1e-4 and worst_e2e < 1e-4
    detail = (
        f"{len(OP_CASES)} operators x 100 trials max {worst_op:.2e}; end-to-end T=8 F=161 float64 over "
        f"{len(e2e)} tensors max {worst_e2e:.2e} (" + ", ".join(f"{g} {v:.1e}" for g, v in groups.items()) + ")"
    )
    verdict(2, "gradient correctness", ok, detail)


def test_criterion_3_signal_path(verdict):
    rng = np.random.default_rng(3)
    worst_rt = 0.0
    for _ in range(1000):
        n = int(rng.integers(2 * dsp.WIN_LENGTH, 16001))
        x = rng.standard_normal(n) * rng.uniform(1e-3, 1.0)
        y = dsp.istft(dsp.stft(x), n)
        end = (dsp.n_frames_for(n) - 1) * dsp.HOP_LENGTH + dsp.HOP_LENGTH
        sl = slice(dsp.WIN_LENGTH, end)
        worst_rt = max(worst_rt, float(np.linalg.norm(y[sl] - x[sl]) / np.linalg.norm(x[sl])))

    m = rng.uniform(1e-8, 1e4, 100_000)
    worst_comp = float(np.max(np.abs(dsp.decompress(dsp.compress(m)) - m) / m))

    x = rng.standard_normal(16000)
    spec, w = dsp.stft(x), dsp.hann_window()
    worst_parseval = 0.0
    for t in range(spec.shape[0]):
        seg = x[t * dsp.HOP_LENGTH : t * dsp.HOP_LENGTH + dsp.WIN_LENGTH] * w
        p = np.abs(spec[t]) ** 2
        spectral = (p[0] + p[-1] + 2 * p[1:-1].sum()) / dsp.N_FFT
        worst_parseval = max(worst_parseval, abs(spectral - np.sum(seg**2)) / np.sum(seg**2))

    ok = worst_rt < 1e-6 and worst_comp < 1e-6 and worst_parseval < 1e-6
    detail = (f"round trip over 1000 clips {worst_rt:.2e}; compression {worst_comp:.2e}; "
              f"Parseval {worst_parseval:.2e} (all < 1e-6)")
    verdict(3, "signal-path exactness", ok, detail)


def test_criterion_4_identity(verdict, tmp_path):
    mix = noisy_pair(1.0, seed=4)
    bundle = dsp.make_bundle(mix.noisy, np.float64)
    shape = bundle.M.shape
    enh = model.recombine(bundle, MaskAndBias(_f64(np.ones(shape)), _f64(np.zeros(shape)), _f64(np.zeros(shape))))
    spec_err = max(float(np.max(np.abs(enh.s_r.data - bundle.S_r))), float(np.max(np.abs(enh.s_i.data - bundle.S_i))))

    cfg = ModelConfig()
    params = model.init_params(cfg, seed=0)
    model.force_identity(params)
    path = checkpoint.save(tmp_path / "identity.saf", cfg, params)
    dsp.write_wav(tmp_path / "in.wav", mix.noisy)
    src = dsp.read_wav(tmp_path / "in.wav")
    ck = checkpoint.load(path)
    dsp.write_wav(tmp_path / "out.wav", enhance(src, inference_params(ck.params), ck.config))
    out = dsp.read_wav(tmp_path / "out.wav")
    wav_err = float(np.linalg.norm(out.samples - src.samples) / np.linalg.norm(src.samples))

    ok = spec_err < 1e-6 and wav_err < 1e-3 and len(out) == len(src)
    verdict(4, "recombination identity", ok,
            f"spectra max abs dev {spec_err:.1e} (< 1e-6); enhanced WAV rel L2 {wav_err:.2e} (< 1e-3), "
            f"{len(out)}/{len(src)} samples")


def test_criterion_5_loss_contract(verdict):
    rng = np.random.default_rng(5)
    bitwise = True
    for _ in range(200):
        shape = (int(rng.integers(1, 20)), dsp.N_BINS)
        target = TargetSpectra(np.abs(rng.standard_normal(shape)), rng.standard_normal(shape), rng.standard_normal(shape))
        s_r, s_i = _f64(rng.standard_normal(shape)), _f64(rng.standard_normal(shape))
        terms = model.loss(model.EnhancedSpectra(ops.magnitude(s_r, s_i), s_r, s_i, s_r, s_i), target)
        l_mag, l_ri, l_total = terms.values()
        bitwise &= l_total == 0.5 * l_mag + 0.5 * l_ri

    clip = noisy_pair(1.0, seed=5).clean
    b = dsp.make_bundle(clip, np.float64)
    target = dsp.make_target(clip, np.float64)
    s_r, s_i = _f64(b.S_r), _f64(b.S_i)
    l_mag, l_ri, l_total = model.loss(model.EnhancedSpectra(ops.magnitude(s_r, s_i), s_r, s_i, s_r, s_i), target).values()
    # the 1e-12 floor under the estimated magnitude is the only permitted residue
    ok = bitwise and l_ri == 0.0 and l_mag <= model.MAG_FLOOR and l_total <= model.MAG_FLOOR
    verdict(5, "loss contract", ok,
            f"0.5/0.5 combination bitwise on 200 random grids: {bitwise}; at target l_ri={l_ri} "
            f"l_mag={l_mag:.1e} l_total={l_total:.1e} (floor {model.MAG_FLOOR:g})")


def _moving_average(y, width=20):
    return np.convolve(y, np.ones(width) / width, mode="valid")


@pytest.mark.slow
def test_criterion_6_trainability(verdict, tmp_path):
    mix = noisy_pair(1.0, snr_db=5.0, seed=0)
    cfg = ModelConfig()
    tcfg = TrainConfig(epochs=1, batch_size=1, learning_rate=5e-4, beta1=0.95, beta2=0.999, seed=0)
    res = train(cfg, tcfg, PairedDataset([(mix.noisy, mix.clean)] * 500, seed=0), tmp_path)
    history = [l.l_total for _, l in read_loss_log(tmp_path / "loss.log")]
    drop = 1.0 - history[-1] / history[9]
    out = enhance(mix.noisy, inference_params(res.params), cfg)
    base, gain = metrics.ssnr(mix.clean, mix.noisy), metrics.ssnr(mix.clean, out)
    rises = int(np.sum(np.diff(_moving_average(np.array(history))) > 0))
    ok = len(history) == 500 and drop >= 0.9 and gain - base >= 5.0 and rises == 0
    verdict(6, "trainability", ok,
            f"500 steps, l_total {history[9]:.4g} at step 10 -> {history[-1]:.4g} at step 500 "
            f"(drop {100 * drop:.1f}%, need >= 90%); SSNR noisy {base:.2f} dB -> enhanced {gain:.2f} dB "
            f"(+{gain - base:.2f} dB, need >= +5); 20-step moving average rises {rises} times")


def test_criterion_7_ablation_plumbing(verdict, tmp_path):
    variants = {
        "default": ModelConfig(),
        "magnitude-only": ModelConfig(use_phase_input=False),
        "af_layers=2": ModelConfig(af_layers=2),
        "af_layers=2+skip": ModelConfig(af_layers=2, af_outer_skip=True),
    }
    pairs = [(c.noisy, c.clean) for c in (noisy_pair(0.1, seed=s) for s in range(2))]
    counts, trained = {}, {}
    for name, cfg in variants.items():
        counts[name] = model.count_params(cfg)
        res = train(cfg, TrainConfig(epochs=1, batch_size=1, max_clip_seconds=0.1),
                    PairedDataset(pairs), tmp_path / name.replace("=", "").replace("+", "_"))
        trained[name] = len(res.history) == 2 and all(l.is_finite() for _, l in res.history)
    by_depth = {counts["default"], counts["af_layers=2"]}

    one, two = variants["default"], variants["af_layers=2+skip"]
    p1, p2 = model.init_params(one, seed=7), model.init_params(two, seed=7)
    for name, p in p2.items():
        p.data[...] = p1[name].data if name in p1 else 0.0
    bundle = dsp.make_bundle(noisy_pair(0.2, seed=7).noisy)
    e1, m1 = model.forward(bundle, p1, one)
    e2, m2 = model.forward(bundle, p2, two)
    bitwise = all(np.array_equal(a.data, b.data) for a, b in
                  ((e1.s_r, e2.s_r), (e1.s_i, e2.s_i), (m1.m_irm, m2.m_irm), (m1.bias_r, m2.bias_r)))

    ok = all(trained.values()) and len(by_depth) == 2 and bitwise
    verdict(7, "ablation plumbing", ok,
            "trained: " + ", ".join(f"{k} {'ok' if v else 'FAILED'} ({counts[k]:,} params)" for k, v in trained.items())
            + f"; zeroed second layer with skip reproduces one layer bitwise: {bitwise}")


def test_criterion_8_metric_sanity(verdict):
    rng = np.random.default_rng(8)
    worst_id = worst_gain = worst_sdr = 0.0
    clamp_ok = True
    for _ in range(100):
        n = int(rng.integers(12000, 24000))
        env = np.abs(np.sin(np.pi * rng.uniform(2, 6) * np.arange(n) / 16000)) ** 2
        x = rng.standard_normal(n) * env * rng.uniform(0.05, 0.5)
        y = x + rng.uniform(0.05, 2.0) * np.std(x) * rng.standard_normal(n)
        worst_id = max(worst_id, abs(metrics.stoi(x, x) - 1.0))
        worst_gain = max(worst_gain, abs(metrics.stoi(x, rng.uniform(0.01, 100) * y) - metrics.stoi(x, y)))
        worst_sdr = max(worst_sdr, abs(metrics.si_sdr(x, rng.uniform(1e-3, 1e3) * y) - metrics.si_sdr(x, y)))
        s = [metrics.ssnr(x, x), metrics.ssnr(x, -rng.uniform(40, 400) * x), metrics.ssnr(x, y)]
        clamp_ok &= s[0] == 35.0 and s[1] == -10.0 and -10.0 <= s[2] <= 35.0
    ok = worst_id <= 1e-6 and worst_gain <= 1e-6 and worst_sdr <= 1e-9 and clamp_ok
    verdict(8, "metric sanity", ok,
            f"100 clips: |STOI(x,x)-1| max {worst_id:.1e}; STOI gain drift {worst_gain:.1e}; "
            f"SSNR clamps at 35/-10 dB: {clamp_ok}; SI-SDR scale drift {worst_sdr:.1e}")


def test_criterion_9_determinism(verdict, tmp_path):
    mix = noisy_pair(0.3, seed=9)
    pairs = [(mix.noisy, mix.clean), (noisy_pair(0.25, seed=10).noisy, noisy_pair(0.25, seed=10).clean)]
    tcfg = TrainConfig(epochs=2, batch_size=2, seed=11)
    cfg = ModelConfig()
    runs = []
    for tag in ("a", "b"):
        res = train(cfg, tcfg, PairedDataset(pairs, seed=11), tmp_path / tag)
        ck = checkpoint.load(res.final_checkpoint)
        dsp.write_wav(tmp_path / tag / "enhanced.wav", enhance(mix.noisy, inference_params(ck.params), cfg))
        runs.append(tmp_path / tag)
    files = ("loss.log", "epoch_001.saf", "epoch_002.saf", "final.saf", "enhanced.wav")
    same = {f: (runs[0] / f).read_bytes() == (runs[1] / f).read_bytes() for f in files}

    ck = checkpoint.load(runs[0] / "final.saf")
    resaved = checkpoint.save(tmp_path / "resaved.saf", ck.config, ck.params, ck.state, ck.adam_m, ck.adam_v)
    round_trip = resaved.read_bytes() == (runs[0] / "final.saf").read_bytes()
    ok = all(same.values()) and round_trip
    verdict(9, "determinism", ok,
            "identical across two seeded runs: " + ", ".join(f"{f} {v}" for f, v in same.items())
            + f"; save/load round trip bit-exact: {round_trip}")
