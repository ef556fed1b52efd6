"""Plain-GAN anomaly detection baseline with latent-space inversion scoring.

A standard generator/discriminator pair is trained on the reference class;
at inference the latent code best reconstructing a test image is found by
gradient descent and the final inversion loss is the anomaly score.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ganomaly import _bce, decoder_specs, discriminator_specs
from .numerics import AdamState, NetworkGraph, adam_step, backward, forward

_BCE_EPS = 1e-12


@dataclass
class AnoganConfig:
    nz: int = 100
    ngf: int = 64
    input_size: int = 64
    epochs: int = 60
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    invert_steps: int = 500
    invert_lambda: float = 0.1
    invert_step_size: float = 0.01
    seed: int = 0

    def __post_init__(self):
        size = self.input_size
        if size < 16 or (size & (size - 1)) != 0:
            raise ValueError("input size must be a power of two >= 16")
        if not (0.0 <= self.invert_lambda <= 1.0):
            raise ValueError("invert_lambda must be in [0, 1]")
        if self.invert_steps < 1:
            raise ValueError("invert_steps must be >= 1")


@dataclass
class AnoganModel:
    cfg: AnoganConfig
    gen: NetworkGraph           # (nz,1,1) -> image in (-1,1)
    disc: NetworkGraph
    d_feature: int
    opt_g: AdamState
    opt_d: AdamState
    step: int = 0

    def named_parameters(self):
        out = []
        for net_name, net in (("gen", self.gen), ("disc", self.disc)):
            for pname in net.param_names():
                out.append((f"{net_name}.{pname}", net.params[pname]))
        return out

    def load_parameters(self, table):
        nets = {"gen": self.gen, "disc": self.disc}
        for name, value in table.items():
            net_name, _, pname = name.partition(".")
            net = nets[net_name]
            if net.params[pname].shape != value.shape:
                raise ValueError(f"parameter shape mismatch for {name}")
            net.params[pname] = np.array(value, dtype=np.float64)


def build_anogan(cfg: AnoganConfig) -> AnoganModel:
    size, nz, nf = cfg.input_size, cfg.nz, cfg.ngf
    gen = NetworkGraph((nz, 1, 1), decoder_specs(size, 1, nz, nf),
                       seed=cfg.seed + 10)
    d_specs, d_feat = discriminator_specs(size, 1, nf)
    disc = NetworkGraph((1, size, size), d_specs, seed=cfg.seed + 11)
    opt_g = AdamState.for_params(gen.params, lr=cfg.lr, beta1=cfg.beta1,
                                 beta2=cfg.beta2, eps=cfg.adam_eps)
    opt_d = AdamState.for_params(disc.params, lr=cfg.lr, beta1=cfg.beta1,
                                 beta2=cfg.beta2, eps=cfg.adam_eps)
    return AnoganModel(cfg=cfg, gen=gen, disc=disc, d_feature=d_feat,
                       opt_g=opt_g, opt_d=opt_d)


def _disc_prob(model, x):
    trace = forward(model.disc, x)
    return trace, float(np.clip(trace.output[0], _BCE_EPS, 1.0 - _BCE_EPS))


def train_gan(model: AnoganModel, inputs, labels, epochs=None, log=None):
    """Alternating standard GAN updates (discriminator, then generator) on a
    one-class reference manifest. Returns per-epoch mean loss history."""
    for i, lab in enumerate(labels):
        if lab != "pd":
            raise ValueError(
                f"one-class contract violated: sample {i} has label {lab!r}")
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    cfg = model.cfg
    n_epochs = cfg.epochs if epochs is None else epochs
    history = []
    for epoch in range(n_epochs):
        rng = np.random.default_rng((cfg.seed, 104729, epoch))
        order = rng.permutation(len(inputs))
        sums = np.zeros(2)
        for idx in order:
            x = inputs[idx]
            z = rng.standard_normal((cfg.nz, 1, 1))

            # discriminator step on real x vs detached fake
            fake = forward(model.gen, z).output
            tr_r, p_r = _disc_prob(model, x)
            tr_f, p_f = _disc_prob(model, fake)
            l_d = 0.5 * (_bce(p_r, 1.0) + _bce(p_f, 0.0))
            if not math.isfinite(l_d):
                raise FloatingPointError(
                    f"divergence at epoch {epoch}, step {model.step}")
            g_r = np.array([0.5 * (p_r - 1.0) / (p_r * (1.0 - p_r))])
            g_f = np.array([0.5 * p_f / (p_f * (1.0 - p_f))])
            gr, _ = backward(model.disc, tr_r, g_r)
            gf, _ = backward(model.disc, tr_f, g_f)
            adam_step(model.disc.params,
                      {k: gr[k] + gf[k] for k in gr}, model.opt_d)

            # generator step: fool the updated discriminator
            tr_g = forward(model.gen, z)
            tr_d, p_g = _disc_prob(model, tr_g.output)
            l_g = _bce(p_g, 1.0)
            if not math.isfinite(l_g):
                raise FloatingPointError(
                    f"divergence at epoch {epoch}, step {model.step}")
            g_out = np.array([(p_g - 1.0) / (p_g * (1.0 - p_g))])
            _, g_img = backward(model.disc, tr_d, g_out)
            grads_g, _ = backward(model.gen, tr_g, g_img)
            adam_step(model.gen.params, grads_g, model.opt_g)

            model.step += 1
            sums += (l_d, l_g)
        means = sums / max(len(inputs), 1)
        record = {"epoch": epoch, "disc": means[0], "gen": means[1]}
        history.append(record)
        if log is not None:
            log(record)
    return history


def _inversion_loss_and_grad(model: AnoganModel, x, z, lam, feat_x):
    """Combined inversion loss at z and its gradient with respect to z."""
    tr_g = forward(model.gen, z)
    xg = tr_g.output
    tr_d = forward(model.disc, xg)
    feat_shape = tr_d.acts[model.d_feature + 1].shape
    feat_g = tr_d.acts[model.d_feature + 1].reshape(-1)

    res = float(np.mean(np.abs(x - xg)))
    fm = float(np.mean((feat_x - feat_g) ** 2))
    loss = (1.0 - lam) * res + lam * fm
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite inversion loss")

    g_img = (1.0 - lam) * np.sign(xg - x) / x.size
    if lam > 0.0:
        g_feat = (lam * 2.0 * (feat_g - feat_x) / feat_x.size).reshape(feat_shape)
        _, g_from_d = backward(model.disc, tr_d, g_feat,
                               from_layer=model.d_feature)
        g_img = g_img + g_from_d
    _, g_z = backward(model.gen, tr_g, g_img)
    return loss, g_z


def invert_latent(model: AnoganModel, x, steps=None, lam=None, seed=0,
                  z_init=None, step_size=None):
    """Gradient descent on the latent code minimizing a blend of the pixel
    residual and the discriminator feature residual. Returns the best code
    found and the per-step loss history."""
    cfg = model.cfg
    steps = cfg.invert_steps if steps is None else steps
    lam = cfg.invert_lambda if lam is None else lam
    step_size = cfg.invert_step_size if step_size is None else step_size
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not (0.0 <= lam <= 1.0):
        raise ValueError("lambda must be in [0, 1]")
    x = np.asarray(x, dtype=np.float64)
    if z_init is not None:
        z = np.array(z_init, dtype=np.float64).reshape(cfg.nz, 1, 1)
    else:
        rng = np.random.default_rng((cfg.seed, 15485863, seed))
        z = rng.standard_normal((cfg.nz, 1, 1))
    feat_x = forward(model.disc, x).acts[model.d_feature + 1].reshape(-1)

    history = []
    best_loss = math.inf
    best_z = z.copy()
    for _ in range(steps):
        loss, g_z = _inversion_loss_and_grad(model, x, z, lam, feat_x)
        history.append(loss)
        if loss < best_loss:
            best_loss = loss
            best_z = z.copy()
        z = z - step_size * g_z
    return best_z, history


def anogan_score(model: AnoganModel, x, steps=None, lam=None, seed=0,
                 z_init=None, step_size=None):
    """Final combined inversion loss at the best latent code found."""
    lam_val = model.cfg.invert_lambda if lam is None else lam
    x = np.asarray(x, dtype=np.float64)
    z_best, _ = invert_latent(model, x, steps=steps, lam=lam_val, seed=seed,
                              z_init=z_init, step_size=step_size)
    feat_x = forward(model.disc, x).acts[model.d_feature + 1].reshape(-1)
    loss, _ = _inversion_loss_and_grad(model, x, z_best, lam_val, feat_x)
    return loss
