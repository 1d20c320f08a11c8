import numpy as np
import pytest

from saf import dsp, model, ops
from saf.dsp import AudioClip, SpectraBundle, TargetSpectra
from saf.model import MaskAndBias, ModelConfig
from saf.tensor import Tensor

SMALL = ModelConfig(channels=8, tcn_hidden=16, tcn_dilations=(1, 2), tcn_repeats=1)


def bundle(rng, n_frames=6, dtype=np.float32):
    n = dsp.WIN_LENGTH + (n_frames - 1) * dsp.HOP_LENGTH
    return dsp.make_bundle(AudioClip(rng.standard_normal(n) * 0.1), dtype)


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


def test_parameter_budgets():
    assert 550_000 <= model.count_params(ModelConfig()) <= 610_000
    assert 1_100_000 <= model.count_params(ModelConfig(af_layers=2)) <= 1_220_000


def test_count_by_module_sums_to_total():
    cfg = ModelConfig()
    assert sum(model.count_by_module(cfg).values()) == model.count_params(cfg)


def test_init_matches_spec_shapes():
    cfg = SMALL
    params = model.init_params(cfg, seed=3)
    model.check_params(params, cfg)
    assert sum(p.data.size for p in params.values()) == model.count_params(cfg)
    del params[next(iter(params))]
    with pytest.raises(ValueError):
        model.check_params(params, cfg)


def test_invalid_configs():
    with pytest.raises(ValueError, match="af_outer_skip"):
        ModelConfig(af_outer_skip=True)
    with pytest.raises(ValueError, match="161"):
        ModelConfig(freq_bins=257)
    with pytest.raises(ValueError, match="odd"):
        ModelConfig(modulation_kernel=10)


def test_encoder_shapes_and_zero_bundle(rng):
    cfg = ModelConfig()
    params = model.init_params(cfg)
    for b in (bundle(rng, 3), dsp.make_bundle(AudioClip(np.zeros(dsp.WIN_LENGTH + 2 * dsp.HOP_LENGTH)))):
        feats = model.encode(b, params, cfg)
        assert feats.x_mp.shape == (64, 3, 161)
        assert feats.x_ri.shape == (64, 3, 161)
        assert feats.x_mpri.shape == (128, 3, 161)
        assert np.all(np.isfinite(feats.x_mpri.data))


def test_encoder_rejects_wrong_grid():
    b = SpectraBundle(*(np.zeros((2, 100), np.float32) for _ in range(4)))
    with pytest.raises(ValueError, match="161"):
        model.encode(b, model.init_params(SMALL), SMALL)


def test_forward_shapes_and_ranges(rng):
    cfg = ModelConfig()
    params = model.init_params(cfg, seed=1)
    b = bundle(rng, 4)
    feats = model.encode(b, params, cfg)
    x_spec = model.attention_fusion(feats.x_mpri, params, cfg)
    assert x_spec.shape == (64, 4, 161)
    mask = model.decode_mask(x_spec, params, cfg).data
    assert mask.shape == (4, 161)
    assert np.all((mask > 0) & (mask < 1))
    br, bi = model.decode_bias(x_spec, params, cfg)
    both = np.concatenate([br.data.ravel(), bi.data.ravel()])
    assert both.min() < 0 < both.max()


def test_forward_deterministic(rng):
    params = model.init_params(SMALL, seed=2)
    b = bundle(rng, 5)
    e1, _ = model.forward(b, params, SMALL)
    e2, _ = model.forward(b, params, SMALL)
    np.testing.assert_array_equal(e1.s_r.data, e2.s_r.data)
    np.testing.assert_array_equal(e1.s_i.data, e2.s_i.data)


def test_modulation_degenerates_to_linear(rng):
    c = 4
    x = T(rng.standard_normal((c, 3, 7)))
    P = {
        "m.value.weight": T(np.eye(c)), "m.value.bias": T(np.zeros(c)),
        "m.gate.weight": T(np.zeros((c, c))), "m.gate.bias": T(np.zeros(c)),
        "m.dw.weight": T(np.zeros((c, 11, 11))), "m.dw.bias": T(np.ones(c)),
        "m.proj.weight": T(rng.standard_normal((c, c))), "m.proj.bias": T(rng.standard_normal(c)),
    }
    z = model.modulation(x, P, "m").data
    ref = np.einsum("oc,ctf->otf", P["m.proj.weight"].data, x.data) + P["m.proj.bias"].data[:, None, None]
    np.testing.assert_allclose(z, ref, atol=1e-12)


def test_local_attention_translation_symmetry(rng):
    cfg = SMALL
    params = model.cast_params(model.init_params(cfg, seed=4), np.float64)
    column = rng.standard_normal((cfg.channels, 3, 1))
    x = T(np.repeat(column, 20, axis=2))
    out = model.local_attention(x, params, "af.0.la", cfg).data
    interior = out[:, :, 1:-1]
    np.testing.assert_allclose(interior, np.repeat(interior[:, :, :1], 18, axis=2), atol=1e-12)


def test_receptive_field():
    assert model.tcn_receptive_field(ModelConfig()) == 509


def test_zero_tcn_branches_are_identity(rng):
    cfg = SMALL
    params = model.cast_params(model.init_params(cfg, seed=5), np.float64)
    for name, p in params.items():
        if ".tcn." in name and name.endswith(".project.weight") or ".tcn." in name and name.endswith(".project.bias"):
            p.data[...] = 0.0
    x = T(rng.standard_normal((cfg.channels, 9, 161)))
    np.testing.assert_array_equal(model.tcn_stack(x, params, "af.0.tcn", cfg).data, x.data)


def test_zeroed_second_layer_reproduces_one_layer(rng):
    one = ModelConfig()
    two = ModelConfig(af_layers=2, af_outer_skip=True)
    p1 = model.init_params(one, seed=7)
    p2 = model.init_params(two, seed=7)
    for name, p in p2.items():
        if name in p1:
            p.data[...] = p1[name].data
        else:
            assert name.startswith("af.1.")
            p.data[...] = 0.0
    b = bundle(rng, 3)
    e1, m1 = model.forward(b, p1, one)
    e2, m2 = model.forward(b, p2, two)
    np.testing.assert_array_equal(e1.s_r.data, e2.s_r.data)
    np.testing.assert_array_equal(m1.m_irm.data, m2.m_irm.data)


def _flat_bundle(M, theta):
    return SpectraBundle(M, theta, M * np.cos(theta), M * np.sin(theta))


def test_recombine_examples(rng):
    b = bundle(rng, 4, np.float64)
    shape = b.M.shape
    ones, zeros = T(np.ones(shape)), T(np.zeros(shape))
    enh = model.recombine(b, MaskAndBias(ones, zeros, zeros))
    np.testing.assert_allclose(enh.s_r.data, b.S_r, atol=1e-6)
    np.testing.assert_allclose(enh.s_i.data, b.S_i, atol=1e-6)
    enh = model.recombine(b, MaskAndBias(zeros, zeros, zeros))
    assert not np.any(enh.s_r.data) and not np.any(enh.s_i.data)

    flat = _flat_bundle(np.full((2, 161), 2.0), np.zeros((2, 161)))
    enh = model.recombine(flat, MaskAndBias(T(np.full((2, 161), 0.5)), T(np.full((2, 161), 0.1)), T(np.zeros((2, 161)))))
    np.testing.assert_allclose(enh.s_r.data, 1.1)
    np.testing.assert_array_equal(enh.s_i.data, 0.0)
    np.testing.assert_array_equal(enh.s_r.data, enh.s_init_r.data + 0.1)


def test_recombine_grid_mismatch(rng):
    b = bundle(rng, 4, np.float64)
    bad = T(np.ones((3, 161)))
    with pytest.raises(ValueError, match="grid"):
        model.recombine(b, MaskAndBias(bad, bad, bad))


def _enhanced(s_r, s_i):
    s_r, s_i = T(s_r), T(s_i)
    return model.EnhancedSpectra(ops.magnitude(s_r, s_i), s_r, s_i, s_r, s_i)


def test_loss_single_bin():
    target = TargetSpectra(np.ones((1, 1)), np.ones((1, 1)), np.zeros((1, 1)))
    terms = model.loss(_enhanced(np.zeros((1, 1)), np.zeros((1, 1))), target)
    # the 1e-12 magnitude floor puts the estimate at 1e-6, not 0
    assert terms.values() == pytest.approx((1.0, 1.0, 1.0), abs=3e-6)
    assert terms.l_mag.item() == pytest.approx((1 - 1e-6) ** 2, rel=1e-12)


def test_loss_zero_at_target(rng):
    b = bundle(rng, 4, np.float64)
    target = TargetSpectra(b.M, b.S_r, b.S_i)
    l_mag, l_ri, l_total = model.loss(_enhanced(b.S_r, b.S_i), target).values()
    assert l_ri == 0.0
    assert l_mag < 1e-10 and l_total < 1e-10  # only the magnitude floor remains


def test_loss_combination_is_exact(rng):
    for _ in range(50):
        shape = (int(rng.integers(1, 5)), 161)
        target = TargetSpectra(np.abs(rng.standard_normal(shape)), rng.standard_normal(shape), rng.standard_normal(shape))
        t = model.loss(_enhanced(rng.standard_normal(shape), rng.standard_normal(shape)), target)
        assert t.l_total.item() == 0.5 * t.l_mag.item() + 0.5 * t.l_ri.item()
        assert t.l_mag.item() >= 0 and t.l_ri.item() >= 0


def test_partial_losses_sum_to_batch_loss(rng):
    pairs = []
    for n in (2, 3):
        shape = (n, 161)
        target = TargetSpectra(np.abs(rng.standard_normal(shape)), rng.standard_normal(shape), rng.standard_normal(shape))
        pairs.append((_enhanced(rng.standard_normal(shape), rng.standard_normal(shape)), target))
    whole = model.batch_loss(pairs).values()
    parts = [model.partial_loss(e, t, 5 * 161).values() for e, t in pairs]
    np.testing.assert_allclose(np.sum(parts, axis=0), whole, rtol=1e-12)


def test_force_identity_emits_unit_mask(rng):
    params = model.init_params(SMALL, seed=0)
    model.force_identity(params)
    b = bundle(rng, 3)
    _, mb = model.forward(b, params, SMALL)
    np.testing.assert_array_equal(mb.m_irm.data, 1.0)
    np.testing.assert_array_equal(mb.bias_r.data, 0.0)


def test_magnitude_only_variant_ignores_phase(rng):
    cfg = ModelConfig(use_phase_input=False, **{k: getattr(SMALL, k) for k in ("channels", "tcn_hidden", "tcn_dilations", "tcn_repeats")})
    params = model.init_params(cfg, seed=0)
    b = bundle(rng, 3)
    other = SpectraBundle(b.M, -b.theta, b.S_r, b.S_i)
    f1 = model.encode(b, params, cfg).x_mp.data
    f2 = model.encode(other, params, cfg).x_mp.data
    np.testing.assert_array_equal(f1, f2)
