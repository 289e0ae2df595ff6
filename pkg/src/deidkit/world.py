"""Synthetic identity world, frozen expert embedders and the ensemble extractor.

A world draws one unit identity latent per person and a fresh Gaussian
utility latent per sample, then renders feature vectors through a frozen
random mixing network. Experts are small nets trained to read one latent
back out; they stand in for pretrained recognition and task models.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from deidkit import metrics, nn, ops
from deidkit.errors import (
    CheckpointError,
    ChecksumError,
    ConfigurationError,
    DimensionError,
    ExpertQualityError,
    TruncatedFileError,
    UnsupportedArchitectureError,
    VersionError,
)

WORLD_FORMAT_VERSION = 1
TRAIN_FRACTION = 0.8


@dataclass(frozen=True)
class WorldConfig:
    n_id_latent: int = 16
    n_util_latent: int = 8
    n_feature: int = 64
    n_identities: int = 200
    samples_per_identity: int = 10
    within_identity_noise: float = 0.1
    seed: int = 0
    mixing_hidden: int = 64

    def __post_init__(self):
        for name in ("n_id_latent", "n_util_latent", "n_feature", "n_identities", "samples_per_identity", "mixing_hidden"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be a positive integer")
        if self.n_feature < self.n_id_latent + self.n_util_latent:
            raise ConfigurationError("n_feature must be >= n_id_latent + n_util_latent")
        if self.within_identity_noise < 0:
            raise ConfigurationError("within_identity_noise must be nonnegative")
        if self.n_identities < 2:
            raise ConfigurationError("need at least two identities for a train/eval split")

    @property
    def n_samples(self) -> int:
        return self.n_identities * self.samples_per_identity

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Sample:
    feature: np.ndarray
    identity_label: int
    id_latent_truth: np.ndarray
    util_latent_truth: np.ndarray


@dataclass
class Split:
    """Aligned per-sample arrays; ``labels`` are global identity indices."""

    features: np.ndarray
    labels: np.ndarray
    id_latent: np.ndarray
    util_latent: np.ndarray

    def __len__(self):
        return self.labels.size

    def __getitem__(self, i) -> Sample:
        return Sample(self.features[i], int(self.labels[i]), self.id_latent[i], self.util_latent[i])

    def subset(self, mask) -> "Split":
        return Split(self.features[mask], self.labels[mask], self.id_latent[mask], self.util_latent[mask])

    def identities(self) -> set[int]:
        return set(np.unique(self.labels).tolist())


@dataclass
class World:
    config: WorldConfig
    samples: Split
    train_identities: np.ndarray

    @property
    def train(self) -> Split:
        return self.samples.subset(np.isin(self.samples.labels, self.train_identities))

    @property
    def eval(self) -> Split:
        return self.samples.subset(~np.isin(self.samples.labels, self.train_identities))


def _unit_rows(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def mixing_net(config: WorldConfig) -> nn.DenseNet:
    """The frozen renderer from (identity, utility) latents to features."""
    seed = np.random.SeedSequence([config.seed, 1]).generate_state(1)[0]
    return nn.init_network(
        [config.n_id_latent + config.n_util_latent, config.mixing_hidden, config.n_feature],
        final_activation="linear",
        seed=int(seed),
    )


def render(config: WorldConfig, id_latent, util_latent):
    # Identity coordinates are scaled to unit variance so they weigh as much as utility ones.
    z = np.concatenate([np.sqrt(config.n_id_latent) * id_latent, util_latent], axis=1)
    return nn.predict(mixing_net(config), z)


def generate_world(config: WorldConfig) -> World:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    centers = _unit_rows(rng, config.n_identities, config.n_id_latent)
    labels = np.repeat(np.arange(config.n_identities), config.samples_per_identity)
    id_latent = centers[labels]
    if config.within_identity_noise > 0:
        jitter = config.within_identity_noise * rng.standard_normal(id_latent.shape)
        id_latent = id_latent + jitter
        id_latent /= np.linalg.norm(id_latent, axis=1, keepdims=True)
    util_latent = rng.standard_normal((labels.size, config.n_util_latent))
    features = render(config, id_latent, util_latent)
    order = rng.permutation(config.n_identities)
    n_train = int(round(TRAIN_FRACTION * config.n_identities))
    n_train = min(max(n_train, 1), config.n_identities - 1)
    train_ids = np.sort(order[:n_train])
    return World(config, Split(features, labels, id_latent, util_latent), train_ids)


# --- world files ---------------------------------------------------------------

def _fmt(a):
    return " ".join(repr(v) for v in np.asarray(a, dtype=np.float64).tolist())


def dumps_world(world: World) -> str:
    cfg = world.config
    train = set(world.train_identities.tolist())
    s = world.samples
    lines = [
        f"deidkit-world {WORLD_FORMAT_VERSION}",
        "config " + json.dumps(asdict(cfg), sort_keys=True),
        f"records {len(s)}",
    ]
    for i in range(len(s)):
        lab = int(s.labels[i])
        split = "train" if lab in train else "eval"
        lines.append(f"{lab} {split} | {_fmt(s.id_latent[i])} | {_fmt(s.util_latent[i])} | {_fmt(s.features[i])}")
    body = "\n".join(lines) + "\n"
    return body + f"sha256 {hashlib.sha256(body.encode()).hexdigest()}\n"


def loads_world(text: str) -> World:
    lines = text.rstrip("\n").split("\n")
    head = lines[0].split()
    if len(head) != 2 or head[0] != "deidkit-world":
        raise CheckpointError("not a deidkit world file")
    if int(head[1]) != WORLD_FORMAT_VERSION:
        raise VersionError(f"world format {head[1]} unsupported")
    if not lines[-1].startswith("sha256 "):
        raise TruncatedFileError("world file has no checksum trailer")
    body = "\n".join(lines[:-1]) + "\n"
    if hashlib.sha256(body.encode()).hexdigest() != lines[-1].split()[1]:
        raise ChecksumError("world file checksum mismatch")
    cfg = WorldConfig(**json.loads(lines[1].split(" ", 1)[1]))
    n = int(lines[2].split()[1])
    records = lines[3:-1]
    if len(records) != n:
        raise TruncatedFileError(f"expected {n} records, found {len(records)}")
    labels, train_ids, idl, utl, feats = [], set(), [], [], []
    for rec in records:
        head, a, b, c = rec.split(" | ")
        lab, split = head.split()
        labels.append(int(lab))
        if split == "train":
            train_ids.add(int(lab))
        idl.append([float(v) for v in a.split()])
        utl.append([float(v) for v in b.split()])
        feats.append([float(v) for v in c.split()])
    samples = Split(np.array(feats), np.array(labels), np.array(idl), np.array(utl))
    return World(cfg, samples, np.array(sorted(train_ids), dtype=np.int64))


def save_world(world: World, path) -> Path:
    path = Path(path)
    path.write_text(dumps_world(world))
    return path


def load_world(path) -> World:
    return loads_world(Path(path).read_text())


# --- experts -------------------------------------------------------------------

@dataclass
class ExpertModel:
    """A frozen embedder. Identity experts emit l2-normalised embeddings."""

    net: nn.DenseNet
    kind: str
    readout: np.ndarray  # fixed map from the ground-truth latent to the regression target
    seed: int = 0
    frozen: bool = True

    @property
    def embedding_dim(self) -> int:
        return self.net.out_dim

    def target(self, latent):
        t = latent @ self.readout.T
        if self.kind == "identity":
            t = t / np.linalg.norm(t, axis=-1, keepdims=True)
        return t

    def embed(self, x):
        out = nn.predict(self.net, x)
        if self.kind == "identity":
            out = out / np.linalg.norm(out, axis=-1, keepdims=True)
        return out

    def embed_with_cache(self, x):
        raw, cache = nn.forward(self.net, x)
        if self.kind == "identity":
            u, norm = ops.normalize(raw)
            return u, (cache, u, norm)
        return raw, (cache, None, None)

    def embed_backward(self, state, d_out):
        """Gradient of the embedding w.r.t. the expert input (parameters stay frozen)."""
        cache, u, norm = state
        if u is not None:
            d_out = ops.normalize_backward(u, norm, d_out)
        return nn.backward(self.net, cache, d_out)[1]


def _readout(rng, out_dim, in_dim):
    """Random matrix with orthonormal columns (or rows when ``out_dim < in_dim``)."""
    if out_dim >= in_dim:
        q, _ = np.linalg.qr(rng.standard_normal((out_dim, in_dim)))
        return q
    q, _ = np.linalg.qr(rng.standard_normal((in_dim, out_dim)))
    return q.T


def expert_penultimate(expert: ExpertModel, x):
    """Activations entering the expert's final layer."""
    if expert.net.n_layers < 2:
        raise UnsupportedArchitectureError("expert needs at least two layers to expose penultimate features")
    _, cache = nn.forward(expert.net, x)
    feats = cache.activations[-2]
    return feats[0] if cache.vector_input else feats


def penultimate_net(expert: ExpertModel) -> nn.DenseNet:
    """The expert truncated before its last layer (shares parameter arrays)."""
    if expert.net.n_layers < 2:
        raise UnsupportedArchitectureError("expert needs at least two layers to expose penultimate features")
    net = expert.net
    return nn.DenseNet(net.layer_sizes[:-1], net.weights[:-1], net.biases[:-1], net.hidden_activation, net.hidden_activation)


def identity_verification_accuracy(embeddings, labels, n_pairs=2000, seed=0) -> float:
    scores = metrics.pair_distances(embeddings, labels, n_pairs, n_pairs, seed)
    return metrics.verification_accuracy(scores)


def train_expert(
    world: World,
    kind: str,
    embedding_dim: int,
    arch=(64,),
    epochs: int = 40,
    seed: int = 0,
    learning_rate: float = 1e-3,
    batch_size: int = 32,
    quality_gate: float = 95.0,
) -> ExpertModel:
    """Regress a fixed random readout of the hidden latent; identity experts are
    gated on held-out verification accuracy (percent)."""
    if kind not in ("identity", "utility"):
        raise ConfigurationError(f"unknown expert kind {kind!r}")
    train = world.train
    if len(train) == 0:
        raise ConfigurationError("world has an empty train split")
    cfg = world.config
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    latent_dim = cfg.n_id_latent if kind == "identity" else cfg.n_util_latent
    readout = _readout(rng, embedding_dim, latent_dim)
    final = "tanh" if kind == "identity" else "linear"
    sizes = [cfg.n_feature, *arch, embedding_dim]
    net = nn.init_network(sizes, final_activation=final, seed=int(rng.integers(2**31)))
    expert = ExpertModel(net, kind, readout, seed=seed, frozen=False)

    latent = train.id_latent if kind == "identity" else train.util_latent
    targets = expert.target(latent)
    opt = nn.Trainable([net], learning_rate=learning_rate, beta1=0.9)
    n = len(train)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            out, cache = nn.forward(net, train.features[idx])
            grads, _ = nn.backward(net, cache, 2.0 * (out - targets[idx]) / idx.size)
            opt.step([grads])
    expert.frozen = True

    if kind == "identity":
        held = world.eval
        acc = identity_verification_accuracy(expert.embed(held.features), held.labels, seed=seed)
        if acc < quality_gate:
            raise ExpertQualityError(
                f"identity expert reached {acc:.2f}% held-out verification accuracy (< {quality_gate}%)", acc
            )
    return expert


def expert_nets(expert: ExpertModel) -> dict:
    return {"net": expert.net}


def expert_meta(expert: ExpertModel) -> dict:
    return {"kind": expert.kind, "seed": expert.seed, "readout": expert.readout.tolist(), "frozen": expert.frozen}


def expert_from_checkpoint(ckpt) -> ExpertModel:
    return ExpertModel(
        ckpt.nets["net"], ckpt.meta["kind"], np.array(ckpt.meta["readout"]), ckpt.meta["seed"], ckpt.meta["frozen"]
    )


# --- ensemble extractor --------------------------------------------------------

@dataclass
class EnsembleExtractor:
    """z = normalize(merge_net(concat of identity-expert embeddings))."""

    experts: list[ExpertModel]
    merge_net: nn.DenseNet
    distill: np.ndarray = field(default=None)  # fixed orthonormal map used to pretrain merge_net

    def __post_init__(self):
        if not self.experts:
            raise ConfigurationError("an ensemble needs at least one identity expert")
        if any(e.kind != "identity" for e in self.experts):
            raise ConfigurationError("ensemble members must be identity experts")
        width = sum(e.embedding_dim for e in self.experts)
        if self.merge_net.in_dim != width:
            raise DimensionError(f"merge_net expects {self.merge_net.in_dim} inputs, experts emit {width}")

    @property
    def n_z(self) -> int:
        return self.merge_net.out_dim

    @property
    def in_dim(self) -> int:
        return self.experts[0].net.in_dim

    def concat_embeddings(self, x):
        return np.concatenate([e.embed(x) for e in self.experts], axis=-1)

    def extract(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"extractor expects features of width {self.in_dim}, got {x.shape[-1]}")
        h = nn.predict(self.merge_net, self.concat_embeddings(x))
        return h / np.linalg.norm(h, axis=-1, keepdims=True)

    def forward(self, x):
        """Batched extraction keeping what :meth:`backward` needs."""
        embs, states = [], []
        for e in self.experts:
            emb, st = e.embed_with_cache(x)
            embs.append(emb)
            states.append(st)
        h, mcache = nn.forward(self.merge_net, np.concatenate(embs, axis=-1))
        z, norm = ops.normalize(h)
        return z, (states, mcache, z, norm)

    def backward(self, state, dz, merge_grads=False):
        """Gradient w.r.t. the input features (and optionally merge_net params)."""
        states, mcache, z, norm = state
        dh = ops.normalize_backward(z, norm, dz)
        mgrads, dcat = nn.backward(self.merge_net, mcache, dh)
        dx = 0.0
        start = 0
        for e, st in zip(self.experts, states):
            d = dcat[..., start:start + e.embedding_dim]
            start += e.embedding_dim
            dx = dx + e.embed_backward(st, d)
        return (dx, mgrads) if merge_grads else dx


def ensemble_extract(extractor: EnsembleExtractor, x):
    return extractor.extract(x)


def build_extractor(experts, n_z=64, hidden=(64,), seed=0) -> EnsembleExtractor:
    width = sum(e.embedding_dim for e in experts)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 21]))
    merge = nn.init_network([width, *hidden, n_z], final_activation="tanh", seed=int(rng.integers(2**31)))
    distill = _readout(rng, n_z, width)
    return EnsembleExtractor(list(experts), merge, distill)


def merge_distill_loss(extractor: EnsembleExtractor, x):
    """Loss and merge_net gradients for 1 - cos(z, normalize(distill @ concat)).

    Keeps the merged space a geometry-preserving view of the experts'
    embeddings while the merge net trains alongside the swap model.
    """
    cat = extractor.concat_embeddings(x)
    target = cat @ extractor.distill.T
    h, cache = nn.forward(extractor.merge_net, cat)
    c, norms = ops.cosine(h, target)
    loss = float(np.mean(1.0 - c))
    dh, _ = ops.cosine_backward(h, target, c, norms, -np.ones_like(c) / c.size)
    grads, _ = nn.backward(extractor.merge_net, cache, dh)
    return loss, grads
