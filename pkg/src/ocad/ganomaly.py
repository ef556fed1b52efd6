"""Encoder-decoder-encoder anomaly detector with a discriminator.

The generator autoencoder maps an image X to a latent code z and back to a
reconstruction X'; a twin encoder re-embeds X' as z'. Training is one-class
(on the reference class only) and minimizes a weighted sum of the latent
discrepancy, the pixel reconstruction error, and a discriminator
feature-matching term. At test time the anomaly score is the squared latent
discrepancy ||z - z'||^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    AdamState,
    NetworkGraph,
    adam_step,
    backward,
    conv2d,
    conv2d_transpose,
    flatten,
    forward,
    leaky_relu,
    relu,
    sigmoid,
    spatial_norm,
    tanh,
)

_BCE_EPS = 1e-12


@dataclass
class GanomalyConfig:
    nz: int = 100
    ngf: int = 64
    input_size: int = 64
    w_adv: float = 1.0
    w_ctx: float = 50.0
    w_enc: float = 1.0
    epochs: int = 60
    batch_size: int = 1
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if min(self.w_adv, self.w_ctx, self.w_enc) < 0:
            raise ValueError("loss weights must be >= 0")
        size = self.input_size
        if size < 16 or (size & (size - 1)) != 0:
            raise ValueError("input size must be a power of two >= 16")
        if self.batch_size != 1:
            raise ValueError("only batch size 1 is supported")
        if self.nz < 1 or self.ngf < 1 or self.epochs < 0:
            raise ValueError("invalid config")


def encoder_specs(input_size, in_channels, out_dim, nf):
    """Stride-2 4x4 conv stack halving the spatial size down to 4x4, then a
    4x4 conv to `out_dim` channels. Returns (specs, feature_layer_index)
    where the feature index names the last activation before the final conv."""
    n_down = int(math.log2(input_size)) - 2
    specs = [conv2d(in_channels, nf, 4, 2, 1), leaky_relu(0.2)]
    ch = nf
    for _ in range(n_down - 1):
        specs += [conv2d(ch, ch * 2, 4, 2, 1), spatial_norm(), leaky_relu(0.2)]
        ch *= 2
    feature_index = len(specs) - 1
    specs += [conv2d(ch, out_dim, 4, 1, 0), flatten()]
    return specs, feature_index


def decoder_specs(input_size, out_channels, in_dim, nf):
    """Mirror of the encoder: transposed convs doubling 4x4 up to the input
    size, ending in tanh."""
    n_up = int(math.log2(input_size)) - 2
    ch = nf * 2 ** (n_up - 1)
    specs = [conv2d_transpose(in_dim, ch, 4, 1, 0), spatial_norm(), relu()]
    for _ in range(n_up - 1):
        specs += [conv2d_transpose(ch, ch // 2, 4, 2, 1), spatial_norm(), relu()]
        ch //= 2
    specs += [conv2d_transpose(ch, out_channels, 4, 2, 1), tanh()]
    return specs


def discriminator_specs(input_size, in_channels, nf):
    specs, feature_index = encoder_specs(input_size, in_channels, 1, nf)
    specs = specs[:-1] + [sigmoid(), flatten()]
    return specs, feature_index


@dataclass
class GanomalyModel:
    cfg: GanomalyConfig
    g_enc: NetworkGraph         # X -> z
    g_dec: NetworkGraph         # z -> X'
    enc2: NetworkGraph          # X' -> z'
    disc: NetworkGraph          # image -> sigmoid logit; features at d_feature
    d_feature: int
    opt_g: AdamState
    opt_d: AdamState
    step: int = 0
    d_resets: int = 0
    epochs_done: int = 0

    def named_parameters(self):
        """Stable (name, array) enumeration for serialization."""
        out = []
        for net_name, net in (("g_enc", self.g_enc), ("g_dec", self.g_dec),
                              ("enc2", self.enc2), ("disc", self.disc)):
            for pname in net.param_names():
                out.append((f"{net_name}.{pname}", net.params[pname]))
        return out

    def load_parameters(self, table):
        nets = {"g_enc": self.g_enc, "g_dec": self.g_dec,
                "enc2": self.enc2, "disc": self.disc}
        for name, value in table.items():
            net_name, _, pname = name.partition(".")
            net = nets[net_name]
            if net.params[pname].shape != value.shape:
                raise ValueError(f"parameter shape mismatch for {name}")
            net.params[pname] = np.array(value, dtype=np.float64)


def build_model(cfg: GanomalyConfig) -> GanomalyModel:
    size, nz, nf = cfg.input_size, cfg.nz, cfg.ngf
    img_shape = (1, size, size)
    enc_specs, _ = encoder_specs(size, 1, nz, nf)
    d_specs, d_feat = discriminator_specs(size, 1, nf)
    g_enc = NetworkGraph(img_shape, enc_specs, seed=cfg.seed)
    g_dec = NetworkGraph((nz, 1, 1), decoder_specs(size, 1, nz, nf),
                         seed=cfg.seed + 1)
    enc2 = NetworkGraph(img_shape, enc_specs, seed=cfg.seed + 2)
    disc = NetworkGraph(img_shape, d_specs, seed=cfg.seed + 3)
    gen_params = _gen_param_view(g_enc, g_dec, enc2)
    opt_g = AdamState.for_params(gen_params, lr=cfg.lr, beta1=cfg.beta1,
                                 beta2=cfg.beta2, eps=cfg.adam_eps)
    opt_d = AdamState.for_params(
        {f"disc.{k}": v for k, v in disc.params.items()},
        lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    return GanomalyModel(cfg=cfg, g_enc=g_enc, g_dec=g_dec, enc2=enc2,
                         disc=disc, d_feature=d_feat, opt_g=opt_g, opt_d=opt_d)


def _gen_param_view(g_enc, g_dec, enc2):
    view = {}
    for prefix, net in (("g_enc", g_enc), ("g_dec", g_dec), ("enc2", enc2)):
        for k, v in net.params.items():
            view[f"{prefix}.{k}"] = v
    return view


def generator_pass(model: GanomalyModel, x):
    """(z, X', z') for input image x."""
    z = forward(model.g_enc, x).output
    xr = forward(model.g_dec, z.reshape(model.cfg.nz, 1, 1)).output
    zp = forward(model.enc2, xr).output
    return z, xr, zp


def _disc_features(model, x):
    trace = forward(model.disc, x)
    feat = trace.acts[model.d_feature + 1].reshape(-1)
    prob = float(trace.output[0])
    return trace, feat, prob


@dataclass
class LossParts:
    enc: float
    ctx: float
    adv: float
    gen: float
    disc: float


def loss_components(z, zp, x, xr, fx, fxr):
    """The three generator loss terms from raw pass outputs: mean squared
    latent error, mean absolute reconstruction error, mean squared
    discriminator-feature error."""
    l_enc = float(np.mean((z - zp) ** 2))
    l_ctx = float(np.mean(np.abs(x - xr)))
    l_adv = float(np.mean((fx - fxr) ** 2))
    return l_enc, l_ctx, l_adv


def _bce(prob, target):
    p = min(max(prob, _BCE_EPS), 1.0 - _BCE_EPS)
    return -(target * math.log(p) + (1.0 - target) * math.log(1.0 - p))


def discriminator_loss(prob_real, prob_fake):
    """Binary cross-entropy, averaged over the real/fake pair."""
    return 0.5 * (_bce(prob_real, 1.0) + _bce(prob_fake, 0.0))


def losses(model: GanomalyModel, x) -> LossParts:
    """All five training losses at the current parameters (no updates)."""
    z, xr, zp = generator_pass(model, x)
    _, fx, px = _disc_features(model, x)
    _, fxr, pxr = _disc_features(model, xr)
    l_enc, l_ctx, l_adv = loss_components(z, zp, x, xr, fx, fxr)
    cfg = model.cfg
    l_g = cfg.w_adv * l_adv + cfg.w_ctx * l_ctx + cfg.w_enc * l_enc
    parts = LossParts(enc=l_enc, ctx=l_ctx, adv=l_adv, gen=l_g,
                      disc=discriminator_loss(px, pxr))
    for val in (parts.enc, parts.ctx, parts.adv, parts.gen, parts.disc):
        if not math.isfinite(val):
            raise FloatingPointError("non-finite loss")
    return parts


def _generator_step(model: GanomalyModel, x):
    """One generator update (G_E, G_D, E). Returns the loss parts and the
    cached reconstruction for the discriminator step."""
    cfg = model.cfg
    tr_ge = forward(model.g_enc, x)
    z = tr_ge.output
    tr_gd = forward(model.g_dec, z.reshape(cfg.nz, 1, 1))
    xr = tr_gd.output
    tr_e = forward(model.enc2, xr)
    zp = tr_e.output
    tr_dx, fx, px = _disc_features(model, x)
    tr_dxr, fxr, pxr = _disc_features(model, xr)

    l_enc, l_ctx, l_adv = loss_components(z, zp, x, xr, fx, fxr)
    l_g = cfg.w_adv * l_adv + cfg.w_ctx * l_ctx + cfg.w_enc * l_enc
    if not math.isfinite(l_g):
        raise FloatingPointError("non-finite generator loss")

    # cotangents of the three terms
    nz_ = z.size
    g_zp = cfg.w_enc * 2.0 * (zp - z) / nz_
    g_z_direct = cfg.w_enc * 2.0 * (z - zp) / nz_
    g_xr_ctx = cfg.w_ctx * np.sign(xr - x) / x.size
    feat_shape = tr_dxr.acts[model.d_feature + 1].shape
    g_feat = (cfg.w_adv * 2.0 * (fxr - fx) / fx.size).reshape(feat_shape)

    grads_e, g_xr_from_e = backward(model.enc2, tr_e, g_zp)
    _, g_xr_from_d = backward(model.disc, tr_dxr, g_feat,
                              from_layer=model.d_feature)
    g_xr = g_xr_ctx + g_xr_from_e + g_xr_from_d
    grads_gd, g_z_in = backward(model.g_dec, tr_gd, g_xr)
    g_z = g_z_direct + g_z_in.reshape(z.shape)
    grads_ge, _ = backward(model.g_enc, tr_ge, g_z)

    grads = {}
    for prefix, gdict in (("g_enc", grads_ge), ("g_dec", grads_gd),
                          ("enc2", grads_e)):
        for k, v in gdict.items():
            grads[f"{prefix}.{k}"] = v
    params = _gen_param_view(model.g_enc, model.g_dec, model.enc2)
    adam_step(params, grads, model.opt_g)
    l_d = discriminator_loss(px, pxr)
    return LossParts(enc=l_enc, ctx=l_ctx, adv=l_adv, gen=l_g, disc=l_d), xr


def _discriminator_step(model: GanomalyModel, x, xr):
    """One discriminator update on the real image and a detached
    reconstruction. Returns the discriminator loss."""
    tr_real = forward(model.disc, x)
    tr_fake = forward(model.disc, xr)
    p_real = float(np.clip(tr_real.output[0], _BCE_EPS, 1.0 - _BCE_EPS))
    p_fake = float(np.clip(tr_fake.output[0], _BCE_EPS, 1.0 - _BCE_EPS))
    l_d = 0.5 * (_bce(p_real, 1.0) + _bce(p_fake, 0.0))
    if not math.isfinite(l_d):
        raise FloatingPointError("non-finite discriminator loss")
    g_real = np.array([0.5 * (p_real - 1.0) / (p_real * (1.0 - p_real))])
    g_fake = np.array([0.5 * p_fake / (p_fake * (1.0 - p_fake))])
    grads_r, _ = backward(model.disc, tr_real, g_real)
    grads_f, _ = backward(model.disc, tr_fake, g_fake)
    grads = {f"disc.{k}": grads_r[k] + grads_f[k] for k in grads_r}
    params = {f"disc.{k}": v for k, v in model.disc.params.items()}
    adam_step(params, grads, model.opt_d)
    return l_d


# A collapsed discriminator (loss ~ 0) stops producing useful features for
# the adversarial term and destabilizes late training; below this loss it is
# deterministically re-initialized, as in standard GANomaly practice. With
# per-sample float64 BCE the observed collapse floor is ~3e-5, so the guard
# triggers at 1e-4 — just before the instability onset.
_D_COLLAPSE_THRESHOLD = 1e-4


def _reinit_discriminator(model: GanomalyModel):
    model.d_resets += 1
    cfg = model.cfg
    d_specs, _ = discriminator_specs(cfg.input_size, 1, cfg.ngf)
    fresh = NetworkGraph((1, cfg.input_size, cfg.input_size), d_specs,
                         seed=cfg.seed + 3 + 1000003 * model.d_resets)
    model.disc.params = fresh.params
    model.opt_d = AdamState.for_params(
        {f"disc.{k}": v for k, v in model.disc.params.items()},
        lr=model.opt_d.lr, beta1=cfg.beta1, beta2=cfg.beta2,
        eps=cfg.adam_eps)


# Fraction of the configured epochs trained at the full learning rate
# before the linear decay to zero begins.
_DECAY_START_FRAC = 0.5


def _set_epoch_lr(model: GanomalyModel, epoch):
    """Learning-rate schedule: constant for the first half of the configured
    epochs, then linear decay to zero. Late adversarial dynamics (including
    discriminator re-initializations) are the dominant source of end-of-run
    instability; annealing the step size freezes the model near its mid-run
    optimum instead of letting a late shock undo it."""
    total = max(model.cfg.epochs, 1)
    half = int(total * _DECAY_START_FRAC)
    if epoch < half:
        factor = 1.0
    else:
        factor = max((total - epoch) / max(total - half, 1), 0.0)
    model.opt_g.lr = model.cfg.lr * factor
    model.opt_d.lr = model.cfg.lr * factor


def train(model: GanomalyModel, inputs, labels, epochs=None, log=None):
    """One-class training: generator update then discriminator update per
    sample, seed-determined shuffle per epoch.

    `inputs` are (1, size, size) tensors; every label must be the reference
    class 'pd'. Returns the per-epoch means of the five losses.
    """
    for i, lab in enumerate(labels):
        if lab != "pd":
            raise ValueError(
                f"one-class contract violated: sample {i} has label {lab!r}")
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    n_epochs = model.cfg.epochs if epochs is None else epochs
    history = []
    for _ in range(n_epochs):
        epoch = model.epochs_done
        rng = np.random.default_rng((model.cfg.seed, 7919, epoch))
        order = rng.permutation(len(inputs))
        _set_epoch_lr(model, epoch)
        # The collapse guard only runs during the constant-lr phase: once
        # the decay has begun, a re-initialized discriminator injects noise
        # the annealed generator can no longer train through, while a
        # saturated discriminator at a shrinking step size is harmless.
        guard = epoch < int(max(model.cfg.epochs, 1) * _DECAY_START_FRAC)
        sums = np.zeros(5)
        for idx in order:
            x = inputs[idx]
            try:
                parts, xr = _generator_step(model, x)
                l_d = _discriminator_step(model, x, xr)
            except FloatingPointError as exc:
                raise FloatingPointError(
                    f"divergence at epoch {epoch}, step {model.step}: {exc}"
                ) from exc
            if guard and l_d < _D_COLLAPSE_THRESHOLD:
                _reinit_discriminator(model)
            model.step += 1
            sums += (parts.enc, parts.ctx, parts.adv, parts.gen, l_d)
        means = sums / max(len(inputs), 1)
        record = {"epoch": epoch, "enc": means[0], "ctx": means[1],
                  "adv": means[2], "gen": means[3], "disc": means[4]}
        history.append(record)
        model.epochs_done += 1
        if log is not None:
            log(record)
    return history


def score_from_latents(z, zp):
    """Squared latent discrepancy ||z - z'||_2^2."""
    d = np.asarray(z, dtype=np.float64) - np.asarray(zp, dtype=np.float64)
    return float(np.sum(d * d))


def anomaly_score(model: GanomalyModel, x):
    z, _, zp = generator_pass(model, x)
    return score_from_latents(z, zp)


def score_components(model: GanomalyModel, x):
    """(enc, ctx, adv) loss terms for one sample, no gradients."""
    z, xr, zp = generator_pass(model, x)
    _, fx, _ = _disc_features(model, x)
    _, fxr, _ = _disc_features(model, xr)
    return loss_components(z, zp, x, xr, fx, fxr)


def normalize_scores(scores):
    """Min-max normalization of a score cohort onto [0, 1]."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size < 2:
        raise ValueError("need at least two scores")
    lo, hi = float(scores.min()), float(scores.max())
    if hi == lo:
        raise ValueError("all scores equal; no scale to normalize by")
    return ((scores - lo) / (hi - lo)).tolist()


@dataclass
class ScoredSample:
    subject_id: str
    eye: str
    orientation: str
    label: str
    raw: float
    components: tuple = (0.0, 0.0, 0.0)
    normalized: float = 0.0
