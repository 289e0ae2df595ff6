"""Feature-space identity swapper and its adversarial training.

``g(x, z) = decoder(injector(encoder(x) || z))`` edits a feature vector so
that the ensemble extractor reads identity ``z`` from it. Phase 1 teaches
the swapper to inject identities; phase 2 adds the obfuscator and the
utility experts and fine-tunes everything jointly.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from deidkit import nn, ops
from deidkit import obfuscator as obf
from deidkit.errors import ConfigurationError, DimensionError, TrainingError
from deidkit.world import EnsembleExtractor, ExpertModel, merge_distill_loss, penultimate_net

CRITIC_CLAMP = 1.0 - 1e-7
_LOG_FLOOR = 1e-12


@dataclass
class LossWeights:
    lambda_id: float = 30.0
    lambda_deid: float = 30.0
    lambda_mix: float = 10.0
    lambda_uti: tuple = (2.0, 2.0)
    lambda_kld: float = 0.2
    lambda_gen: float = 1.0
    lambda_rec: float = 10.0  # phase 1 only
    l1_mean: bool = True  # average l1 terms over feature dimensions inside the objectives
    kld_reference_dim: int | None = 512  # KLD rescaled to this latent width; None keeps the raw sum

    def __post_init__(self):
        self.lambda_uti = tuple(float(v) for v in self.lambda_uti)
        values = [v for k, v in asdict(self).items() if k not in ("lambda_uti", "l1_mean", "kld_reference_dim")] + list(self.lambda_uti)
        if any(v < 0 for v in values):
            raise ConfigurationError("loss weights must be nonnegative")

    def kld_weight(self, n_v: int) -> float:
        """lambda_kld scaled so the summed KLD weighs as it would at the reference width."""
        if not self.kld_reference_dim:
            return self.lambda_kld
        return self.lambda_kld * self.kld_reference_dim / n_v

    def all_zero(self) -> bool:
        scalars = [v for k, v in asdict(self).items() if k not in ("lambda_uti", "l1_mean", "kld_reference_dim")]
        return not any(scalars) and not any(self.lambda_uti)


@dataclass
class SwapModel:
    encoder: nn.DenseNet
    injector: nn.DenseNet
    decoder: nn.DenseNet

    def __post_init__(self):
        if self.injector.in_dim <= self.encoder.out_dim:
            raise DimensionError("injector input must hold the residual code and an identity vector")
        if self.decoder.in_dim != self.injector.out_dim:
            raise DimensionError("decoder input must match injector output")
        if self.decoder.out_dim != self.encoder.in_dim:
            raise DimensionError("decoder must return features of the input width")

    @property
    def n_feature(self) -> int:
        return self.encoder.in_dim

    @property
    def n_z(self) -> int:
        return self.injector.in_dim - self.encoder.out_dim

    def nets(self):
        return [self.encoder, self.injector, self.decoder]

    def named_nets(self):
        return {"encoder": self.encoder, "injector": self.injector, "decoder": self.decoder}

    def copy(self):
        return SwapModel(*(n.copy() for n in self.nets()))


def make_swap_model(n_feature=64, n_z=64, n_nu=32, n_code=64, hidden=64, seed=0) -> SwapModel:
    ss = np.random.SeedSequence([seed, 51]).generate_state(3)
    enc = nn.init_network([n_feature, hidden, n_nu], final_activation="tanh", seed=int(ss[0]))
    inj = nn.init_network([n_nu + n_z, 2 * hidden, n_code], final_activation="tanh", seed=int(ss[1]))
    dec = nn.init_network([n_code, 2 * hidden, n_feature], final_activation="linear", seed=int(ss[2]))
    return SwapModel(enc, inj, dec)


def make_critics(n_feature=64, hidden=64, k_d=1, seed=0) -> list[nn.DenseNet]:
    ss = np.random.SeedSequence([seed, 61]).generate_state(k_d)
    return [
        nn.init_network([2 * n_feature, hidden, 1], final_activation="sigmoid", seed=int(s)) for s in ss
    ]


# --- forward / backward ----------------------------------------------------------

def _swap_forward(model: SwapModel, x, z):
    nu, c_enc = nn.forward(model.encoder, x)
    code, c_inj = nn.forward(model.injector, np.concatenate([nu, z], axis=-1))
    out, c_dec = nn.forward(model.decoder, code)
    return out, (c_enc, c_inj, c_dec)


def _swap_backward(model: SwapModel, caches, d_out):
    """Returns ([enc, inj, dec] param grads, d_z)."""
    c_enc, c_inj, c_dec = caches
    g_dec, d_code = nn.backward(model.decoder, c_dec, d_out)
    g_inj, d_in = nn.backward(model.injector, c_inj, d_code)
    n_nu = model.encoder.out_dim
    g_enc, _ = nn.backward(model.encoder, c_enc, d_in[..., :n_nu])
    return [g_enc, g_inj, g_dec], d_in[..., n_nu:]


def swap_forward(model: SwapModel, x, z_inj):
    x = np.asarray(x, dtype=np.float64)
    z_inj = np.asarray(z_inj, dtype=np.float64)
    if x.shape[-1] != model.n_feature or z_inj.shape[-1] != model.n_z:
        raise DimensionError(
            f"swap model expects features {model.n_feature} and identity {model.n_z}, "
            f"got {x.shape[-1]} and {z_inj.shape[-1]}"
        )
    if x.ndim == 1:
        return _swap_forward(model, x[None, :], z_inj[None, :])[0][0]
    return _swap_forward(model, x, z_inj)[0]


def _critic_forward(critics, x, x_tilde):
    pair = np.concatenate([x, x_tilde], axis=-1)
    outs = [nn.forward(c, pair) for c in critics]
    return [o[0][..., 0] for o in outs], [o[1] for o in outs]


# --- losses --------------------------------------------------------------------

def _rows(a):
    return np.atleast_2d(np.asarray(a, dtype=np.float64))


def loss_mix(model: SwapModel, x, z, z_tilde) -> float:
    x, z, zt = _rows(x), _rows(z), _rows(z_tilde)
    return float(np.mean(ops.l1_rows(swap_forward(model, x, zt), swap_forward(model, x, z))))


def loss_gen(critics, x, x_tilde) -> float:
    d, _ = _critic_forward(critics, _rows(x), _rows(x_tilde))
    return float(np.mean(sum(np.log(1.0 - np.minimum(di, CRITIC_CLAMP)) for di in d)))


def critic_loss(critics, real_pair, fake_pair) -> float:
    """Non-saturating discriminator objective summed over critics, batch-mean."""
    dr, _ = _critic_forward(critics, *map(_rows, real_pair))
    df, _ = _critic_forward(critics, *map(_rows, fake_pair))
    total = sum(-np.log(np.maximum(r, _LOG_FLOOR)) - np.log(np.maximum(1.0 - f, _LOG_FLOOR)) for r, f in zip(dr, df))
    return float(np.mean(total))


def critic_loss_and_grads(critics, real_pair, fake_pair):
    dr, cr = _critic_forward(critics, *real_pair)
    df, cf = _critic_forward(critics, *fake_pair)
    n = dr[0].shape[0]
    loss = 0.0
    grads = []
    for c, r, f, crc, cfc in zip(critics, dr, df, cr, cf):
        loss += np.mean(-np.log(np.maximum(r, _LOG_FLOOR)) - np.log(np.maximum(1.0 - f, _LOG_FLOOR)))
        # d/dD of -log D is -1/D; of -log(1-D) is 1/(1-D); floors make the gradient vanish.
        g_r = np.where(r > _LOG_FLOOR, -1.0 / np.maximum(r, _LOG_FLOOR), 0.0) / n
        g_f = np.where(1.0 - f > _LOG_FLOOR, 1.0 / np.maximum(1.0 - f, _LOG_FLOOR), 0.0) / n
        gr, _ = nn.backward(c, crc, g_r[:, None])
        gf, _ = nn.backward(c, cfc, g_f[:, None])
        grads.append([a + b for a, b in zip(gr, gf)])
    return float(loss), grads


def loss_id(extractor: EnsembleExtractor, model: SwapModel, x, z, z_tilde) -> float:
    x, z, zt = _rows(x), _rows(z), _rows(z_tilde)
    total = 0.0
    for zh in (z, zt):
        c, _ = ops.cosine(zh, extractor.extract(swap_forward(model, x, zh)))
        total = total + (1.0 - c)
    return float(np.mean(total))


def _check_uti(utility_experts, weights):
    if len(utility_experts) != len(weights):
        raise ConfigurationError(
            f"{len(utility_experts)} utility experts but {len(weights)} utility weights"
        )


def loss_uti(utility_experts, weights, x, x_tilde) -> float:
    _check_uti(utility_experts, weights)
    x, xt = _rows(x), _rows(x_tilde)
    total = 0.0
    for e, lam in zip(utility_experts, weights):
        pen = penultimate_net(e)
        total = total + lam * ops.l1_rows(nn.predict(pen, x), nn.predict(pen, xt))
    return float(np.mean(total))


# --- full objectives --------------------------------------------------------------

@dataclass
class Objective:
    loss: float
    terms: dict
    swap_grads: list
    psi_grads: list = field(default_factory=list)


def _id_term(extractor, zh, xh, scale):
    """(1 - cos(zh, h(xh))) with gradients w.r.t. zh and xh; ``scale`` per row."""
    zr, st = extractor.forward(xh)
    c, norms = ops.cosine(zh, zr)
    dzh, dzr = ops.cosine_backward(zh, zr, c, norms, -scale)
    return 1.0 - c, dzh, extractor.backward(st, dzr)


def _gen_term(critics, x, xt, scale):
    d, caches = _critic_forward(critics, x, xt)
    total = 0.0
    dxt = np.zeros_like(xt)
    nf = x.shape[-1]
    for c, di, ci in zip(critics, d, caches):
        clamped = np.minimum(di, CRITIC_CLAMP)
        total = total + np.log(1.0 - clamped)
        # d log(1 - D) / dD = -1 / (1 - D), zero where the clamp is active.
        g = np.where(di < CRITIC_CLAMP, -1.0 / (1.0 - clamped), 0.0) * scale
        _, dpair = nn.backward(c, ci, g[:, None])
        dxt += dpair[:, nf:]
    return total, dxt


def _uti_term(utility_experts, lambdas, x, xt, scale, mean=False):
    total = 0.0
    dxt = np.zeros_like(xt)
    for e, lam in zip(utility_experts, lambdas):
        if lam == 0:
            continue
        pen = penultimate_net(e)
        ref = nn.predict(pen, x)
        out, cache = nn.forward(pen, xt)
        k = 1.0 / out.shape[-1] if mean else 1.0
        total = total + lam * k * ops.l1_rows(out, ref)
        _, d = nn.backward(pen, cache, ops.l1_rows_backward(out, ref, lam * k * scale))
        dxt += d
    return total, dxt


def _add(acc, grads):
    if acc is None:
        return [[g.copy() for g in net] for net in grads]
    for a_net, g_net in zip(acc, grads):
        for a, g in zip(a_net, g_net):
            a += g
    return acc


def phase1_objective(model, critics, extractor, x, z, z_other, weights: LossWeights) -> Objective:
    """Identity-injection pretraining on a batch.

    ``z`` is the extractor's reading of ``x``; ``z_other`` holds identities
    borrowed from other samples. Terms: L_id over {z, z_other}, L_mix between
    the two swaps, an l1 reconstruction term for the self swap and L_gen on
    the borrowed-identity swap.
    """
    n = x.shape[0]
    s = np.full(n, 1.0 / n)
    x_self, c_self = _swap_forward(model, x, z)
    x_swap, c_swap = _swap_forward(model, x, z_other)

    id_self, _, dx_self = _id_term(extractor, z, x_self, weights.lambda_id * s)
    id_swap, _, dx_swap = _id_term(extractor, z_other, x_swap, weights.lambda_id * s)
    k = 1.0 / x.shape[-1] if weights.l1_mean else 1.0
    mix = k * ops.l1_rows(x_swap, x_self)
    dmix = ops.l1_rows_backward(x_swap, x_self, weights.lambda_mix * k * s)
    dx_swap += dmix
    dx_self -= dmix
    rec = k * ops.l1_rows(x_self, x)
    dx_self += ops.l1_rows_backward(x_self, x, weights.lambda_rec * k * s)
    gen, dgen = _gen_term(critics, x, x_swap, weights.lambda_gen * s)
    dx_swap += dgen

    terms = {
        "id": float(np.mean(id_self + id_swap)),
        "id_self": float(np.mean(id_self)),
        "mix": float(np.mean(mix)),
        "rec": float(np.mean(rec)),
        "gen": float(np.mean(gen)),
    }
    loss = (
        weights.lambda_id * terms["id"]
        + weights.lambda_mix * terms["mix"]
        + weights.lambda_rec * terms["rec"]
        + weights.lambda_gen * terms["gen"]
    )
    grads = _add(None, _swap_backward(model, c_self, dx_self)[0])
    grads = _add(grads, _swap_backward(model, c_swap, dx_swap)[0])
    return Objective(float(loss), terms, grads)


def phase2_objective(model, critics, spec, extractor, utility_experts, x, z, noise, weights: LossWeights) -> Objective:
    """Joint objective with z_tilde = psi(z) drawn from the given noise.

    lambda_id L_id + lambda_deid L_deid + lambda_mix L_mix + lambda_gen L_gen
    + sum_i lambda_uti_i L_uti_i (+ lambda_kld L_kld for ved). Gradients flow
    through the swapper into the obfuscator; experts and merge net stay fixed.
    """
    _check_uti(utility_experts, weights.lambda_uti)
    n = x.shape[0]
    s = np.full(n, 1.0 / n)
    pst = obf.psi_forward(spec, z, noise)
    zt = pst.z_tilde
    x_t, c_t = _swap_forward(model, x, zt)
    x_z, c_z = _swap_forward(model, x, z)

    id_z, _, dx_z = _id_term(extractor, z, x_z, weights.lambda_id * s)
    id_t, dzt, dx_t = _id_term(extractor, zt, x_t, weights.lambda_id * s)

    cd, cnorms = ops.cosine(z, zt)
    deid = 1.0 + cd
    _, dzt_deid = ops.cosine_backward(z, zt, cd, cnorms, weights.lambda_deid * s)
    dzt = dzt + dzt_deid

    k = 1.0 / x.shape[-1] if weights.l1_mean else 1.0
    mix = k * ops.l1_rows(x_t, x_z)
    dmix = ops.l1_rows_backward(x_t, x_z, weights.lambda_mix * k * s)
    dx_t += dmix
    dx_z -= dmix

    gen, dgen = _gen_term(critics, x, x_t, weights.lambda_gen * s)
    dx_t += dgen
    uti, duti = _uti_term(utility_experts, weights.lambda_uti, x, x_t, s, weights.l1_mean)
    dx_t += duti

    g_t, dzt_swap = _swap_backward(model, c_t, dx_t)
    g_z, _ = _swap_backward(model, c_z, dx_z)
    dzt = dzt + dzt_swap

    d_mu = d_lv = None
    kld = np.zeros(n)
    if spec.variant == "ved":
        kld = ops.kld_rows(pst.mu, pst.logvar)
        d_mu, d_lv = ops.kld_rows_backward(pst.mu, pst.logvar, weights.kld_weight(spec.n_v) * s)
    psi_grads = obf.psi_backward(spec, pst, dzt, d_mu, d_lv)

    terms = {
        "id": float(np.mean(id_z + id_t)),
        "deid": float(np.mean(deid)),
        "mix": float(np.mean(mix)),
        "gen": float(np.mean(gen)),
        "uti": float(np.mean(uti)),
        "kld": float(np.mean(kld)),
    }
    loss = (
        weights.lambda_id * terms["id"]
        + weights.lambda_deid * terms["deid"]
        + weights.lambda_mix * terms["mix"]
        + weights.lambda_gen * terms["gen"]
        + terms["uti"]
        + (weights.kld_weight(spec.n_v) * terms["kld"] if spec.variant == "ved" else 0.0)
    )
    grads = _add(_add(None, g_t), g_z)
    return Objective(float(loss), terms, grads, psi_grads)


# --- training loops ---------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    learning_rate: float = 1e-3
    critic_learning_rate: float = 1e-3
    merge_learning_rate: float = 1e-3
    beta1: float = 0.0
    beta2: float = 0.999


def _check(loss, what):
    if not np.isfinite(loss):
        raise TrainingError(f"{what} diverged (non-finite loss)")


def _critic_step(critics, opt, x, x_fake, rng):
    # Real pairs match each sample with a different real sample of the batch.
    perm = np.roll(np.arange(x.shape[0]), 1)
    loss, grads = critic_loss_and_grads(critics, (x, x[perm]), (x, x_fake))
    _check(loss, "critic")
    opt.step(grads)
    return loss


def train_phase1(model, critics, extractor, world, steps=2000, seed=0, weights=None, config=None):
    """Pretrain the swapper (and co-train the merge net). Returns a trace of dicts."""
    weights = weights or LossWeights()
    cfg = config or TrainConfig(steps=steps)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 71]))
    g_opt = nn.Trainable(model.nets(), learning_rate=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2)
    d_opt = nn.Trainable(critics, learning_rate=cfg.critic_learning_rate, beta1=cfg.beta1, beta2=cfg.beta2)
    m_opt = nn.Trainable([extractor.merge_net], learning_rate=cfg.merge_learning_rate, beta1=cfg.beta1, beta2=cfg.beta2)
    feats = world.train.features
    trace = []
    for _ in range(steps):
        idx = rng.integers(0, feats.shape[0], size=cfg.batch_size)
        x = feats[idx]
        m_loss, m_grads = merge_distill_loss(extractor, x)
        _check(m_loss, "merge distillation")
        m_opt.step([m_grads])

        z = extractor.extract(x)
        z_other = np.roll(z, 1, axis=0)
        obj = phase1_objective(model, critics, extractor, x, z, z_other, weights)
        _check(obj.loss, "phase 1 generator")
        g_opt.step(obj.swap_grads)
        x_fake = _swap_forward(model, x, z_other)[0]
        d_loss = _critic_step(critics, d_opt, x, x_fake, rng)
        trace.append({"loss": obj.loss, **obj.terms, "critic": d_loss, "merge": m_loss})
    return trace


def train_phase2(
    model,
    critics,
    spec,
    extractor,
    utility_experts,
    weights,
    world,
    steps=2000,
    seed=0,
    config=None,
):
    """Jointly fine-tune swapper and obfuscator (experts and merge net frozen)."""
    cfg = config or TrainConfig(steps=steps)
    _check_uti(utility_experts, weights.lambda_uti)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 81]))
    g_opt = nn.Trainable(model.nets() + spec.nets(), learning_rate=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2)
    d_opt = nn.Trainable(critics, learning_rate=cfg.critic_learning_rate, beta1=cfg.beta1, beta2=cfg.beta2)
    feats = world.train.features
    Z = extractor.extract(feats)
    trace = []
    for _ in range(steps):
        idx = rng.integers(0, feats.shape[0], size=cfg.batch_size)
        x, z = feats[idx], Z[idx]
        noise = obf.draw_train_noise(spec, cfg.batch_size, rng)
        obj = phase2_objective(model, critics, spec, extractor, utility_experts, x, z, noise, weights)
        _check(obj.loss, "phase 2 generator")
        g_opt.step(obj.swap_grads + obj.psi_grads)
        zt = obf.psi_forward(spec, z, noise).z_tilde
        x_fake = _swap_forward(model, x, zt)[0]
        d_loss = _critic_step(critics, d_opt, x, x_fake, rng)
        trace.append({"loss": obj.loss, **obj.terms, "critic": d_loss})
    return trace
