"""Spectrum Attention Fusion network.

Pipeline: two spectrum encoders (magnitude/phase and real/imaginary), an
attention-fusion trunk (convolutional modulation, 3-band local attention and a
dilated TCN), then mask and bias decoders whose outputs are recombined with the
noisy spectra. Parameters live in a flat ``{path: Tensor}`` map so the same
functions run in float32 for training and float64 for gradient checks.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from saf import ops
from saf.dsp import N_BINS, SpectraBundle, TargetSpectra
from saf.tensor import Tensor

MAG_FLOOR = 1e-12
MASK_SATURATION_LOGIT = 40.0


@dataclass
class ModelConfig:
    channels: int = 64
    af_layers: int = 1
    af_outer_skip: bool = False
    use_phase_input: bool = True
    tcn_hidden: int = 256
    tcn_dilations: tuple = (1, 2, 4, 8, 16, 32, 64)
    tcn_repeats: int = 2
    local_attention_window: int = 3
    modulation_kernel: int = 11
    encoder_dw_kernel: tuple = (1, 3)
    encoder_dw_layers: int = 4
    freq_bins: int = N_BINS
    norm_eps: float = 1e-5

    def __post_init__(self):
        self.tcn_dilations = tuple(int(d) for d in self.tcn_dilations)
        self.encoder_dw_kernel = tuple(int(k) for k in self.encoder_dw_kernel)
        self.validate()

    def validate(self) -> None:
        widths = (self.channels, self.tcn_hidden, self.tcn_repeats, self.af_layers, self.encoder_dw_layers)
        if min(widths) < 1 or not self.tcn_dilations or min(self.tcn_dilations) < 1:
            raise ValueError(f"model widths, depths and dilations must be positive: {self}")
        if self.af_outer_skip and self.af_layers < 2:
            raise ValueError("af_outer_skip requires af_layers >= 2")
        if self.local_attention_window % 2 == 0:
            raise ValueError(f"local_attention_window must be odd, got {self.local_attention_window}")
        kernels = (self.modulation_kernel, *self.encoder_dw_kernel)
        if any(k % 2 == 0 or k < 1 for k in kernels):
            raise ValueError(f"kernel extents must be odd and positive, got {kernels}")
        if self.freq_bins != N_BINS:
            raise ValueError(f"freq_bins is fixed at {N_BINS} by the STFT front-end, got {self.freq_bins}")

    def to_items(self) -> list[tuple[str, str]]:
        """Flat ``key=value`` view (also the checkpoint config echo)."""
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            out.append((f.name, str(v)))
        return out


# -- parameter layout ---------------------------------------------------------


@dataclass(frozen=True)
class ParamSpec:
    shape: tuple
    init: str  # "uniform", "ones", "zeros" or "slope"
    fan_in: int = 1


def _pw(spec, name, c_in, c_out):
    spec[f"{name}.weight"] = ParamSpec((c_out, c_in), "uniform", c_in)
    spec[f"{name}.bias"] = ParamSpec((c_out,), "uniform", c_in)


def _dw(spec, name, c, kernel):
    fan_in = kernel[0] * kernel[1]
    spec[f"{name}.weight"] = ParamSpec((c, *kernel), "uniform", fan_in)
    spec[f"{name}.bias"] = ParamSpec((c,), "uniform", fan_in)


def _norm(spec, name, c):
    spec[f"{name}.gain"] = ParamSpec((c,), "ones")
    spec[f"{name}.shift"] = ParamSpec((c,), "zeros")


def _prelu(spec, name, c):
    spec[f"{name}.slope"] = ParamSpec((c,), "slope")


def _encoder_spec(spec, name, cfg: ModelConfig):
    c = cfg.channels
    _pw(spec, f"{name}.in0.conv", 2, c)
    _norm(spec, f"{name}.in0.norm", c)
    _prelu(spec, f"{name}.in0.act", c)
    _pw(spec, f"{name}.in1.conv", c, c)
    _norm(spec, f"{name}.in1.norm", c)
    _prelu(spec, f"{name}.in1.act", c)
    for k in range(cfg.encoder_dw_layers):
        _dw(spec, f"{name}.dw{k}.conv", c, cfg.encoder_dw_kernel)
        _norm(spec, f"{name}.dw{k}.norm", c)
        _prelu(spec, f"{name}.dw{k}.act", c)
    _pw(spec, f"{name}.out.conv", c, c)
    _norm(spec, f"{name}.out.norm", c)
    _prelu(spec, f"{name}.out.act", c)


def _af_layer_spec(spec, name, cfg: ModelConfig):
    c, h = cfg.channels, cfg.tcn_hidden
    k = cfg.modulation_kernel
    _pw(spec, f"{name}.cm.value", c, c)
    _pw(spec, f"{name}.cm.gate", c, c)
    _dw(spec, f"{name}.cm.dw", c, (k, k))
    _pw(spec, f"{name}.cm.proj", c, c)
    _norm(spec, f"{name}.cm.norm", c)
    _pw(spec, f"{name}.cm.ff", c, c)
    for p in ("query", "key", "value", "out"):
        _pw(spec, f"{name}.la.{p}", c, c)
    for b in range(len(cfg.tcn_dilations) * cfg.tcn_repeats):
        blk = f"{name}.tcn.{b}"
        _pw(spec, f"{blk}.expand", c, h)
        _prelu(spec, f"{blk}.act1", h)
        _norm(spec, f"{blk}.norm1", h)
        _dw(spec, f"{blk}.dw", h, (3, 1))
        _prelu(spec, f"{blk}.act2", h)
        _norm(spec, f"{blk}.norm2", h)
        _pw(spec, f"{blk}.project", h, c)


def _decoder_spec(spec, name, cfg: ModelConfig, out_channels: int):
    c = cfg.channels
    _dw(spec, f"{name}.ds_dw", c, (1, 3))
    _pw(spec, f"{name}.ds_pw", c, c)
    _pw(spec, f"{name}.gate_sigmoid", c, c)
    _pw(spec, f"{name}.gate_tanh", c, c)
    _pw(spec, f"{name}.proj", c, c)
    _norm(spec, f"{name}.norm", c)
    _pw(spec, f"{name}.head", c, out_channels)


def param_spec(cfg: ModelConfig) -> "OrderedDict[str, ParamSpec]":
    spec: OrderedDict[str, ParamSpec] = OrderedDict()
    _encoder_spec(spec, "enc_mp", cfg)
    _encoder_spec(spec, "enc_ri", cfg)
    _pw(spec, "af.stem", 2 * cfg.channels, cfg.channels)
    for layer in range(cfg.af_layers):
        _af_layer_spec(spec, f"af.{layer}", cfg)
    _decoder_spec(spec, "dec_mask", cfg, 1)
    _decoder_spec(spec, "dec_bias", cfg, 2)
    return spec


def count_params(cfg: ModelConfig) -> int:
    return sum(math.prod(s.shape) for s in param_spec(cfg).values())


def module_of(name: str) -> str:
    """Reporting group for a parameter path, e.g. ``af.0.tcn`` or ``enc_mp``."""
    parts = name.split(".")
    if parts[0] == "af" and parts[1].isdigit():
        return ".".join(parts[:3])
    if parts[0] == "af":
        return "af.stem"
    return parts[0]


def count_by_module(cfg: ModelConfig) -> "OrderedDict[str, int]":
    counts: OrderedDict[str, int] = OrderedDict()
    for name, s in param_spec(cfg).items():
        key = module_of(name)
        counts[key] = counts.get(key, 0) + math.prod(s.shape)
    return counts


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> "OrderedDict[str, Tensor]":
    """Fan-in uniform kernels and biases, unit norm gains, PReLU slopes 0.25."""
    rng = np.random.default_rng(seed)
    params: OrderedDict[str, Tensor] = OrderedDict()
    for name, s in param_spec(cfg).items():
        if s.init == "uniform":
            bound = math.sqrt(1.0 / s.fan_in)
            data = rng.uniform(-bound, bound, size=s.shape)
        elif s.init == "ones":
            data = np.ones(s.shape)
        elif s.init == "zeros":
            data = np.zeros(s.shape)
        else:
            data = np.full(s.shape, 0.25)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return params


def check_params(params, cfg: ModelConfig) -> None:
    """Raise if ``params`` does not have exactly the layout ``cfg`` implies."""
    spec = param_spec(cfg)
    missing = [n for n in spec if n not in params]
    extra = [n for n in params if n not in spec]
    if missing or extra:
        raise ValueError(f"parameters do not match config: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, s in spec.items():
        if params[name].shape != s.shape:
            raise ValueError(f"parameter {name} has shape {params[name].shape}, config expects {s.shape}")


def cast_params(params, dtype, requires_grad: bool = True) -> "OrderedDict[str, Tensor]":
    return OrderedDict(
        (n, Tensor(p.data.astype(dtype), requires_grad=requires_grad, name=n)) for n, p in params.items()
    )


def force_identity(params) -> None:
    """Make the decoders emit mask 1 and bias 0 (the recombination identity case)."""
    for head, bias in (("dec_mask", MASK_SATURATION_LOGIT), ("dec_bias", 0.0)):
        params[f"{head}.head.weight"].data[...] = 0.0
        params[f"{head}.head.bias"].data[...] = bias


# -- building blocks ----------------------------------------------------------


def _pointwise(x, P, name):
    return ops.conv2d_pointwise(x, P[f"{name}.weight"], P[f"{name}.bias"])


def _depthwise(x, P, name, dilation=(1, 1)):
    return ops.conv2d_depthwise(x, P[f"{name}.weight"], P[f"{name}.bias"], dilation)


def _cnorm(x, P, name, cfg):
    return ops.channel_norm(x, P[f"{name}.gain"], P[f"{name}.shift"], cfg.norm_eps)


def _act(x, P, name):
    return ops.prelu(x, P[f"{name}.slope"])


def _stage(x, P, name, cfg, depthwise=False):
    y = _depthwise(x, P, f"{name}.conv") if depthwise else _pointwise(x, P, f"{name}.conv")
    return _act(_cnorm(y, P, f"{name}.norm", cfg), P, f"{name}.act")


def spectrum_encoder(x: Tensor, P, name: str, cfg: ModelConfig) -> Tensor:
    """Pointwise up-projection, depthwise (1,3) stack, pointwise output, each with norm + PReLU."""
    y = _stage(x, P, f"{name}.in0", cfg)
    y = _stage(y, P, f"{name}.in1", cfg)
    for k in range(cfg.encoder_dw_layers):
        y = _stage(y, P, f"{name}.dw{k}", cfg, depthwise=True)
    return _stage(y, P, f"{name}.out", cfg)


@dataclass
class EncodedFeatures:
    x_mp: Tensor
    x_ri: Tensor
    x_mpri: Tensor
    x_spec: Optional[Tensor] = None


def _const(a: np.ndarray, dtype) -> Tensor:
    return Tensor(np.ascontiguousarray(a, dtype=dtype))


def encode(bundle: SpectraBundle, P, cfg: ModelConfig) -> EncodedFeatures:
    if bundle.n_bins != cfg.freq_bins:
        raise ValueError(f"bundle has {bundle.n_bins} bins, model expects {cfg.freq_bins}")
    dtype = P["af.stem.weight"].dtype
    second = bundle.theta if cfg.use_phase_input else bundle.M
    x_mp = spectrum_encoder(_const(np.stack([bundle.M, second]), dtype), P, "enc_mp", cfg)
    x_ri = spectrum_encoder(_const(np.stack([bundle.S_r, bundle.S_i]), dtype), P, "enc_ri", cfg)
    return EncodedFeatures(x_mp, x_ri, ops.concat([x_ri, x_mp], axis=0))


def modulation(x: Tensor, P, name: str) -> Tensor:
    """Convolutional attention: ``proj(dw(gelu(gate(x))) * value(x))``."""
    v = _pointwise(x, P, f"{name}.value")
    a = _depthwise(ops.gelu(_pointwise(x, P, f"{name}.gate")), P, f"{name}.dw")
    return _pointwise(ops.mul(a, v), P, f"{name}.proj")


def conv_modulation(x: Tensor, P, name: str, cfg: ModelConfig) -> Tensor:
    """Modulation with residual, then norm + pointwise feed-forward with residual."""
    u = ops.add(x, modulation(x, P, name))
    return ops.add(u, _pointwise(_cnorm(u, P, f"{name}.norm", cfg), P, f"{name}.ff"))


def local_attention(x: Tensor, P, name: str, cfg: ModelConfig) -> Tensor:
    q = _pointwise(x, P, f"{name}.query")
    k = _pointwise(x, P, f"{name}.key")
    v = _pointwise(x, P, f"{name}.value")
    att = ops.neighbour_attention(q, k, v, radius=cfg.local_attention_window // 2)
    return ops.add(x, _pointwise(att, P, f"{name}.out"))


def _tcn_branch(x: Tensor, P, name: str, dilation: int, cfg: ModelConfig) -> Tensor:
    y = _cnorm(_act(_pointwise(x, P, f"{name}.expand"), P, f"{name}.act1"), P, f"{name}.norm1", cfg)
    y = _depthwise(y, P, f"{name}.dw", dilation=(dilation, 1))
    y = _cnorm(_act(y, P, f"{name}.act2"), P, f"{name}.norm2", cfg)
    return ops.add(x, _pointwise(y, P, f"{name}.project"))


def tcn_block(x: Tensor, P, name: str, dilation: int, cfg: ModelConfig) -> Tensor:
    """Residual dilated block; its wide hidden activations are recomputed in backward."""
    names = [n for n in P if n.startswith(f"{name}.")]

    def run(x, *tensors):
        return _tcn_branch(x, dict(zip(names, tensors)), name, dilation, cfg)

    return ops.checkpoint(run, x, *(P[n] for n in names))


def tcn_dilation_schedule(cfg: ModelConfig) -> list[int]:
    return list(cfg.tcn_dilations) * cfg.tcn_repeats


def tcn_receptive_field(cfg: ModelConfig) -> int:
    """Frames seen along time by the TCN stack (kernel 3 per block)."""
    return 1 + 2 * sum(tcn_dilation_schedule(cfg))


def time_context(cfg: ModelConfig) -> int:
    """Frames on each side that can influence one output frame of the network."""
    per_layer = cfg.modulation_kernel // 2 + sum(tcn_dilation_schedule(cfg))
    return cfg.encoder_dw_layers * (cfg.encoder_dw_kernel[0] // 2) + cfg.af_layers * per_layer


def tcn_stack(x: Tensor, P, name: str, cfg: ModelConfig) -> Tensor:
    for b, d in enumerate(tcn_dilation_schedule(cfg)):
        x = tcn_block(x, P, f"{name}.{b}", d, cfg)
    return x


def af_layer(x: Tensor, P, name: str, cfg: ModelConfig) -> Tensor:
    x = conv_modulation(x, P, f"{name}.cm", cfg)
    x = local_attention(x, P, f"{name}.la", cfg)
    return tcn_stack(x, P, f"{name}.tcn", cfg)


def attention_fusion(x_mpri: Tensor, P, cfg: ModelConfig) -> Tensor:
    """Stem projection to ``channels`` followed by ``af_layers`` fusion layers.

    With ``af_outer_skip`` every layer after the first is wrapped as
    ``0.5 * (h + layer(h))``, so a layer whose weights are all zero (an exact
    identity, given the internal residuals) leaves ``h`` bitwise unchanged.
    """
    if x_mpri.shape[0] != 2 * cfg.channels:
        raise ValueError(f"attention_fusion expects {2 * cfg.channels} channels, got {x_mpri.shape[0]}")
    h = _pointwise(x_mpri, P, "af.stem")
    for layer in range(cfg.af_layers):
        out = af_layer(h, P, f"af.{layer}", cfg)
        h = ops.scale(ops.add(h, out), 0.5) if (cfg.af_outer_skip and layer > 0) else out
    return h


def _decoder_trunk(x: Tensor, P, name: str, cfg: ModelConfig) -> Tensor:
    y = _pointwise(_depthwise(x, P, f"{name}.ds_dw"), P, f"{name}.ds_pw")
    gated = ops.mul(ops.sigmoid(_pointwise(y, P, f"{name}.gate_sigmoid")), ops.tanh(_pointwise(y, P, f"{name}.gate_tanh")))
    y = _cnorm(_pointwise(gated, P, f"{name}.proj"), P, f"{name}.norm", cfg)
    return _pointwise(y, P, f"{name}.head")


def decode_mask(x_spec: Tensor, P, cfg: ModelConfig) -> Tensor:
    """``T x F`` ratio mask in (0, 1)."""
    m = ops.sigmoid(_decoder_trunk(x_spec, P, "dec_mask", cfg))
    return ops.reshape(m, m.shape[1:])


def decode_bias(x_spec: Tensor, P, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Signed real/imaginary bias spectra (linear head)."""
    b = _decoder_trunk(x_spec, P, "dec_bias", cfg)
    _, t, f = b.shape
    return (
        ops.reshape(ops.slice_(b, [(0, 1)]), (t, f)),
        ops.reshape(ops.slice_(b, [(1, 2)]), (t, f)),
    )


# -- recombination and loss ---------------------------------------------------


@dataclass
class MaskAndBias:
    m_irm: Tensor
    bias_r: Tensor
    bias_i: Tensor


@dataclass
class EnhancedSpectra:
    m_tilde: Tensor
    s_init_r: Tensor
    s_init_i: Tensor
    s_r: Tensor
    s_i: Tensor


@dataclass
class LossTerms:
    l_mag: Tensor
    l_ri: Tensor
    l_total: Tensor

    def values(self) -> tuple[float, float, float]:
        return float(self.l_mag.data), float(self.l_ri.data), float(self.l_total.data)


def recombine(bundle: SpectraBundle, mb: MaskAndBias) -> EnhancedSpectra:
    """Mask the noisy magnitude, reattach the noisy phase, add the bias."""
    grid = (bundle.n_frames, bundle.n_bins)
    for t in (mb.m_irm, mb.bias_r, mb.bias_i):
        if t.shape != grid:
            raise ValueError(f"recombine: decoder output {t.shape} does not match bundle grid {grid}")
    dtype = mb.m_irm.dtype
    m_tilde = ops.mul(_const(bundle.M, dtype), mb.m_irm)
    s_init_r = ops.mul(m_tilde, _const(np.cos(bundle.theta), dtype))
    s_init_i = ops.mul(m_tilde, _const(np.sin(bundle.theta), dtype))
    return EnhancedSpectra(m_tilde, s_init_r, s_init_i, ops.add(s_init_r, mb.bias_r), ops.add(s_init_i, mb.bias_i))


def _error_sums(enh: EnhancedSpectra, target: TargetSpectra) -> tuple[Tensor, Tensor, int]:
    if target.M_star.shape != enh.s_r.shape:
        raise ValueError(f"loss: target grid {target.M_star.shape} != estimate grid {enh.s_r.shape}")
    dtype = enh.s_r.dtype
    mag = ops.magnitude(enh.s_r, enh.s_i, MAG_FLOOR)
    e_mag = ops.sum_sq(ops.sub(_const(target.M_star, dtype), mag))
    e_r = ops.sum_sq(ops.sub(_const(target.S_star_r, dtype), enh.s_r))
    e_i = ops.sum_sq(ops.sub(_const(target.S_star_i, dtype), enh.s_i))
    return e_mag, ops.add(e_r, e_i), target.M_star.size


def combine_losses(l_mag: Tensor, l_ri: Tensor) -> LossTerms:
    return LossTerms(l_mag, l_ri, ops.add(ops.scale(l_mag, 0.5), ops.scale(l_ri, 0.5)))


def loss(enh: EnhancedSpectra, target: TargetSpectra) -> LossTerms:
    """Magnitude and RI squared errors, averaged over bins, combined 0.5/0.5."""
    return batch_loss([(enh, target)])


def batch_loss(pairs) -> LossTerms:
    """Loss over several clips, averaged over all of their (unpadded) bins."""
    sums_mag, sums_ri, n = [], [], 0
    for enh, target in pairs:
        e_mag, e_ri, count = _error_sums(enh, target)
        sums_mag.append(e_mag)
        sums_ri.append(e_ri)
        n += count
    total_mag, total_ri = sums_mag[0], sums_ri[0]
    for a, b in zip(sums_mag[1:], sums_ri[1:]):
        total_mag, total_ri = ops.add(total_mag, a), ops.add(total_ri, b)
    return combine_losses(ops.scale(total_mag, 1.0 / n), ops.scale(total_ri, 1.0 / n))


def partial_loss(enh: EnhancedSpectra, target: TargetSpectra, n_total: int) -> LossTerms:
    """One clip's share of a batch loss whose bins number ``n_total``.

    Backpropagating each share separately accumulates the same gradient as
    :func:`batch_loss` without holding every clip's graph at once.
    """
    e_mag, e_ri, _ = _error_sums(enh, target)
    return combine_losses(ops.scale(e_mag, 1.0 / n_total), ops.scale(e_ri, 1.0 / n_total))


def forward(bundle: SpectraBundle, P, cfg: ModelConfig) -> tuple[EnhancedSpectra, MaskAndBias]:
    feats = encode(bundle, P, cfg)
    x_spec = attention_fusion(feats.x_mpri, P, cfg)
    bias_r, bias_i = decode_bias(x_spec, P, cfg)
    mb = MaskAndBias(decode_mask(x_spec, P, cfg), bias_r, bias_i)
    return recombine(bundle, mb), mb
