"""Identity transformations and their Laplace-noise privacy machinery.

Three variants map an identity vector ``z`` to a synthetic ``z_tilde``:

* ``opp``: ``-z``; maximal distance, trivially invertible.
* ``mlp``: ``normalize(tanh-MLP(z + Lap(beta)^n))``.
* ``ved``: variational encoder-decoder; Gaussian latent noise while training,
  ``mu + sigma * Lap(alpha)^n_v`` at inference.

Noise scales relate to a privacy budget through ``scale = sensitivity / epsilon``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from deidkit import nn, ops
from deidkit.checkpoint import load_checkpoint, save_checkpoint
from deidkit.errors import ConfigurationError, DimensionError, NumericError, TrainingError

VARIANTS = ("opp", "mlp", "ved")
LOGVAR_CLAMP = 10.0
TRAIN_MODES = ("train_noised", "train_gaussian")


# --- Laplace noise -------------------------------------------------------------

def _open_uniform(rng, size):
    """Uniform draws on (-0.5, 0.5); the single closed endpoint is redrawn."""
    r = rng.random(size)
    bad = r == 0.0
    while np.any(bad):
        r[bad] = rng.random(int(np.count_nonzero(bad)))
        bad = r == 0.0
    return 0.5 - r


def laplace_from_uniform(u, scale):
    u = np.asarray(u, dtype=np.float64)
    return -scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def laplace_noise(scale, shape, rng) -> np.ndarray:
    """I.i.d. Laplace(0, scale) by inverse-CDF sampling; scale 0 gives exact zeros."""
    if scale < 0:
        raise ConfigurationError(f"Laplace scale must be nonnegative, got {scale}")
    if scale == 0:
        return np.zeros(shape)
    return laplace_from_uniform(_open_uniform(rng, shape), scale)


def sample_laplace(scale, rng) -> float:
    if scale < 0:
        raise ConfigurationError(f"Laplace scale must be nonnegative, got {scale}")
    if scale == 0:
        return 0.0
    return float(laplace_from_uniform(_open_uniform(rng, 1), scale)[0])


# --- specs ---------------------------------------------------------------------

@dataclass
class ObfuscatorSpec:
    variant: str
    n_z: int
    mlp_net: nn.DenseNet | None = None
    beta: float = 0.0
    ved_encoder: nn.DenseNet | None = None
    ved_decoder: nn.DenseNet | None = None
    alpha: float = 0.0
    n_v: int = 0
    delta_psi: float | None = None
    epsilon: float | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown obfuscator variant {self.variant!r}")
        if self.beta < 0 or self.alpha < 0:
            raise ConfigurationError("noise scales must be nonnegative")
        if self.variant == "mlp":
            if self.mlp_net is None or self.mlp_net.in_dim != self.n_z or self.mlp_net.out_dim != self.n_z:
                raise DimensionError("mlp obfuscator must map n_z -> n_z")
        if self.variant == "ved":
            if self.ved_encoder is None or self.ved_decoder is None:
                raise ConfigurationError("ved obfuscator needs an encoder and a decoder")
            if self.ved_encoder.in_dim != self.n_z or self.ved_encoder.out_dim != 2 * self.n_v:
                raise DimensionError("ved encoder must map n_z -> 2 * n_v")
            if self.ved_decoder.in_dim != self.n_v or self.ved_decoder.out_dim != self.n_z:
                raise DimensionError("ved decoder must map n_v -> n_z")

    def nets(self) -> list[nn.DenseNet]:
        if self.variant == "mlp":
            return [self.mlp_net]
        if self.variant == "ved":
            return [self.ved_encoder, self.ved_decoder]
        return []

    def named_nets(self) -> dict[str, nn.DenseNet]:
        names = {"mlp": ["mlp"], "ved": ["encoder", "decoder"], "opp": []}[self.variant]
        return dict(zip(names, self.nets()))

    def copy(self) -> "ObfuscatorSpec":
        c = ObfuscatorSpec(**{**self.__dict__})
        c.mlp_net = self.mlp_net.copy() if self.mlp_net is not None else None
        c.ved_encoder = self.ved_encoder.copy() if self.ved_encoder is not None else None
        c.ved_decoder = self.ved_decoder.copy() if self.ved_decoder is not None else None
        return c

    def sidecar(self) -> dict:
        return {
            "variant": self.variant,
            "n_z": self.n_z,
            "beta": self.beta,
            "alpha": self.alpha,
            "n_v": self.n_v,
            "delta_psi": self.delta_psi,
            "epsilon": self.epsilon,
        }


def make_opp(n_z=64) -> ObfuscatorSpec:
    return ObfuscatorSpec("opp", n_z)


def make_mlp(n_z=64, hidden=(256, 128), beta=0.0, seed=0) -> ObfuscatorSpec:
    net = nn.init_network([n_z, *hidden, n_z], final_activation="tanh", seed=seed)
    return ObfuscatorSpec("mlp", n_z, mlp_net=net, beta=beta)


def make_ved(n_z=64, n_v=32, encoder_hidden=(128, 128), decoder_hidden=(128, 128), alpha=1.0, seed=0) -> ObfuscatorSpec:
    ss = np.random.SeedSequence([seed, 31]).generate_state(2)
    enc = nn.init_network([n_z, *encoder_hidden, 2 * n_v], final_activation="linear", seed=int(ss[0]))
    dec = nn.init_network([n_v, *decoder_hidden, n_z], final_activation="tanh", seed=int(ss[1]))
    return ObfuscatorSpec("ved", n_z, ved_encoder=enc, ved_decoder=dec, alpha=alpha, n_v=n_v)


# --- mechanisms ----------------------------------------------------------------

def _check_z(spec, z):
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != spec.n_z:
        raise DimensionError(f"identity vector width {z.shape[-1]} != n_z {spec.n_z}")
    return z


def _finite(out, what):
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite {what}")
    return out


def psi_opp(z):
    return -np.asarray(z, dtype=np.float64)


def psi_mlp(spec: ObfuscatorSpec, z, mode="deterministic", rng=None):
    if spec.variant != "mlp":
        raise ConfigurationError("psi_mlp requires an mlp spec")
    z = _check_z(spec, z)
    if mode not in ("deterministic", "train_noised", "infer_noised"):
        raise ConfigurationError(f"unknown psi_mlp mode {mode!r}")
    if mode != "deterministic" and spec.beta > 0:
        z = z + laplace_noise(spec.beta, z.shape, rng)
    out = nn.predict(spec.mlp_net, z)
    return _finite(out / np.linalg.norm(out, axis=-1, keepdims=True), "mlp output")


def ved_encode(spec: ObfuscatorSpec, z):
    if spec.variant != "ved":
        raise ConfigurationError("ved_encode requires a ved spec")
    z = _check_z(spec, z)
    h = nn.predict(spec.ved_encoder, z)
    mu = h[..., : spec.n_v]
    logvar = np.clip(h[..., spec.n_v:], -LOGVAR_CLAMP, LOGVAR_CLAMP)
    return mu, logvar


def ved_sample(mu, logvar, mode="infer_laplace", alpha=0.0, rng=None):
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.exp(0.5 * np.asarray(logvar, dtype=np.float64))
    if mode == "train_gaussian":
        eta = rng.standard_normal(mu.shape)
    elif mode == "infer_laplace":
        if alpha < 0:
            raise ConfigurationError("alpha must be nonnegative")
        if alpha == 0:
            return mu.copy()
        eta = laplace_noise(alpha, mu.shape, rng)
    else:
        raise ConfigurationError(f"unknown ved_sample mode {mode!r}")
    return mu + sigma * eta


def ved_decode(spec: ObfuscatorSpec, v):
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != spec.n_v:
        raise DimensionError(f"latent width {v.shape[-1]} != n_v {spec.n_v}")
    out = nn.predict(spec.ved_decoder, v)
    return _finite(out / np.linalg.norm(out, axis=-1, keepdims=True), "ved output")


def psi_ved(spec: ObfuscatorSpec, z, mode="infer_laplace", rng=None):
    """Full VED map; ``mode='deterministic'`` decodes the latent mean."""
    mu, logvar = ved_encode(spec, z)
    v = mu if mode == "deterministic" else ved_sample(mu, logvar, mode, spec.alpha, rng)
    return ved_decode(spec, v)


def apply(spec: ObfuscatorSpec, z, mode="infer", rng=None):
    """Obfuscate with the variant's inference noise (``mode='infer'``) or none."""
    if spec.variant == "opp":
        return psi_opp(_check_z(spec, z))
    if spec.variant == "mlp":
        return psi_mlp(spec, z, "deterministic" if mode == "deterministic" else "infer_noised", rng)
    return psi_ved(spec, z, "deterministic" if mode == "deterministic" else "infer_laplace", rng)


def deterministic_core(spec: ObfuscatorSpec):
    return lambda z: apply(spec, z, "deterministic")


# --- differentiable path used by training ---------------------------------------

@dataclass
class PsiState:
    z_tilde: np.ndarray
    caches: list = field(default_factory=list)
    mu: np.ndarray | None = None
    logvar: np.ndarray | None = None
    eta: np.ndarray | None = None
    clamp_mask: np.ndarray | None = None
    norm: np.ndarray | None = None


def draw_train_noise(spec: ObfuscatorSpec, batch: int, rng):
    """Noise consumed by one training-mode forward pass."""
    if spec.variant == "mlp":
        return laplace_noise(spec.beta, (batch, spec.n_z), rng)
    if spec.variant == "ved":
        return rng.standard_normal((batch, spec.n_v))
    return None


def psi_forward(spec: ObfuscatorSpec, z, noise=None) -> PsiState:
    """Training-mode forward on a batch with explicit noise (constant for gradients)."""
    z = _check_z(spec, z)
    if spec.variant == "opp":
        return PsiState(-z)
    if spec.variant == "mlp":
        inp = z if noise is None else z + noise
        h, cache = nn.forward(spec.mlp_net, inp)
        zt, norm = ops.normalize(h)
        return PsiState(_finite(zt, "mlp output"), [cache], norm=norm)
    h, ecache = nn.forward(spec.ved_encoder, z)
    mu = h[:, : spec.n_v]
    raw_lv = h[:, spec.n_v:]
    logvar = np.clip(raw_lv, -LOGVAR_CLAMP, LOGVAR_CLAMP)
    clamp_mask = (raw_lv > -LOGVAR_CLAMP) & (raw_lv < LOGVAR_CLAMP)
    eta = np.zeros_like(mu) if noise is None else noise
    v = mu + np.exp(0.5 * logvar) * eta
    out, dcache = nn.forward(spec.ved_decoder, v)
    zt, norm = ops.normalize(out)
    return PsiState(_finite(zt, "ved output"), [ecache, dcache], mu, logvar, eta, clamp_mask, norm)


def psi_backward(spec: ObfuscatorSpec, st: PsiState, dz_tilde, d_mu=None, d_logvar=None):
    """Parameter gradients (``spec.nets()`` order, each in ``params()`` order)."""
    if spec.variant == "opp":
        return []
    dh = ops.normalize_backward(st.z_tilde, st.norm, dz_tilde)
    if spec.variant == "mlp":
        grads, _ = nn.backward(spec.mlp_net, st.caches[0], dh)
        return [grads]
    ecache, dcache = st.caches
    dgrads, dv = nn.backward(spec.ved_decoder, dcache, dh)
    sigma = np.exp(0.5 * st.logvar)
    dmu = dv.copy()
    dlv = dv * st.eta * sigma * 0.5
    if d_mu is not None:
        dmu += d_mu
    if d_logvar is not None:
        dlv += d_logvar
    dlv = dlv * st.clamp_mask
    egrads, _ = nn.backward(spec.ved_encoder, ecache, np.concatenate([dmu, dlv], axis=1))
    return [egrads, dgrads]


# --- losses --------------------------------------------------------------------

def loss_deid(z, z_tilde) -> float:
    """1 + cos(z, z_tilde); 0 when opposite, 2 when equal."""
    c, _ = ops.cosine(np.atleast_2d(z), np.atleast_2d(z_tilde))
    out = 1.0 + c
    return float(out[0]) if np.ndim(z) == 1 and np.ndim(z_tilde) == 1 else out


def loss_kld(mu, logvar) -> float:
    out = ops.kld_rows(np.asarray(mu, dtype=np.float64), np.asarray(logvar, dtype=np.float64))
    return float(out) if np.ndim(out) == 0 else out


def obfuscation_objective(spec: ObfuscatorSpec, z, noise, lambda_deid=30.0, lambda_kld=0.2):
    """Batch-mean of lambda_deid * L_deid (+ lambda_kld * L_kld for ved) and its gradients."""
    st = psi_forward(spec, z, noise)
    n = z.shape[0]
    c, norms = ops.cosine(z, st.z_tilde)
    loss = lambda_deid * np.mean(1.0 + c)
    _, dzt = ops.cosine_backward(z, st.z_tilde, c, norms, np.full(n, lambda_deid / n))
    d_mu = d_lv = None
    if spec.variant == "ved":
        loss += lambda_kld * np.mean(ops.kld_rows(st.mu, st.logvar))
        d_mu, d_lv = ops.kld_rows_backward(st.mu, st.logvar, np.full(n, lambda_kld / n))
    return float(loss), psi_backward(spec, st, dzt, d_mu, d_lv)


def train_obfuscator(
    spec: ObfuscatorSpec,
    extractor,
    world,
    steps: int = 2000,
    lambda_deid: float = 30.0,
    lambda_kld: float = 0.2,
    seed: int = 0,
    learning_rate: float = 1e-3,
    batch_size: int = 4,
):
    """Fit a standalone mlp/ved transform on the train split's identity vectors.

    Returns ``(spec, trace)`` with one objective value per step; ``spec`` is
    updated in place.
    """
    if spec.variant not in ("mlp", "ved"):
        raise ConfigurationError("only mlp and ved obfuscators are trainable")
    Z = extractor.extract(world.train.features)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 41]))
    opt = nn.Trainable(spec.nets(), learning_rate=learning_rate)
    trace = []
    for _ in range(steps):
        idx = rng.integers(0, Z.shape[0], size=batch_size)
        noise = draw_train_noise(spec, batch_size, rng)
        loss, grads = obfuscation_objective(spec, Z[idx], noise, lambda_deid, lambda_kld)
        if not np.isfinite(loss):
            raise TrainingError("obfuscator objective diverged")
        opt.step(grads)
        trace.append(loss)
    return spec, trace


# --- sensitivity and budgets ----------------------------------------------------

@dataclass
class SensitivityEstimate:
    delta_psi: float
    pair: tuple[np.ndarray, np.ndarray]
    n_evaluated: int


def estimate_sensitivity(psi, id_vectors, n_pairs=100_000, seed=0, include_antipodes=True) -> SensitivityEstimate:
    """Lower bound on sup ||psi(z) - psi(z')||_1 over sampled pairs (noise off)."""
    if n_pairs < 1:
        raise ConfigurationError("n_pairs must be >= 1")
    Z = np.asarray(id_vectors, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise ConfigurationError("need at least two identity vectors")
    Y = np.asarray(psi(Z), dtype=np.float64)
    rng = np.random.default_rng(seed)
    i = rng.integers(0, Z.shape[0], size=n_pairs)
    j = rng.integers(0, Z.shape[0], size=n_pairs)
    d = np.abs(Y[i] - Y[j]).sum(axis=1)
    k = int(np.argmax(d))
    best, pair = float(d[k]), (Z[i[k]], Z[j[k]])
    n_eval = n_pairs
    if include_antipodes:
        Ya = np.asarray(psi(-Z), dtype=np.float64)
        da = np.abs(Y - Ya).sum(axis=1)
        ka = int(np.argmax(da))
        n_eval += Z.shape[0]
        if da[ka] > best:
            best, pair = float(da[ka]), (Z[ka], -Z[ka])
    return SensitivityEstimate(best, pair, n_eval)


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta_psi: float
    noise_scale: float


def budget(delta_psi: float, epsilon: float) -> PrivacyBudget:
    if not epsilon > 0:
        raise ConfigurationError("epsilon must be positive")
    if not delta_psi > 0:
        raise ConfigurationError("sensitivity must be positive")
    return PrivacyBudget(float(epsilon), float(delta_psi), delta_psi / epsilon)


def scale_to_epsilon(delta_psi: float, scale: float) -> float:
    if not scale > 0:
        raise ConfigurationError("noise scale must be positive")
    if not delta_psi > 0:
        raise ConfigurationError("sensitivity must be positive")
    return delta_psi / scale


# --- persistence ---------------------------------------------------------------

def save_obfuscator(spec: ObfuscatorSpec, path) -> Path:
    path = Path(path)
    save_checkpoint(path, spec.named_nets(), kind=f"obfuscator-{spec.variant}", meta=spec.sidecar())
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(spec.sidecar(), indent=2, sort_keys=True) + "\n")
    return path


def load_obfuscator(path) -> ObfuscatorSpec:
    ckpt = load_checkpoint(path)
    meta = ckpt.meta
    nets = ckpt.nets
    return ObfuscatorSpec(
        meta["variant"],
        meta["n_z"],
        mlp_net=nets.get("mlp"),
        beta=meta["beta"],
        ved_encoder=nets.get("encoder"),
        ved_decoder=nets.get("decoder"),
        alpha=meta["alpha"],
        n_v=meta["n_v"],
        delta_psi=meta["delta_psi"],
        epsilon=meta["epsilon"],
    )
