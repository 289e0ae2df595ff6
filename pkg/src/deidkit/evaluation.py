"""Privacy and utility verdicts for a trained pipeline.

Covers de-identification reports against held-out identity experts,
utility drift, inversion attackers and a histogram-based LDP ratio audit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from deidkit import metrics, nn
from deidkit.errors import ConfigurationError, InsufficientSamplesError, ProtocolError
from deidkit.obfuscator import laplace_noise
from deidkit.world import ExpertModel, Split, penultimate_net

DEFAULT_FPR = 1e-3
AUDIT_SLACK = 0.15


def _check_disjoint(heldout, used):
    used_hashes = {e.net.param_hash() for e in used}
    for e in heldout:
        if e.net.param_hash() in used_hashes:
            raise ProtocolError("held-out expert also used in training (train/eval overlap)")


def _round(x, nd=6):
    return float(round(float(x), nd))


def verification_row(scores: metrics.ScoreSet, fpr_target=DEFAULT_FPR) -> dict:
    """TPR over all impostors; accuracy on a balanced genuine/impostor subset."""
    n = min(scores.genuine.size, scores.impostor.size)
    balanced = metrics.ScoreSet(scores.genuine[:n], scores.impostor[:n])
    return {
        "tpr_at_fpr": _round(metrics.tpr_at_fpr(scores, fpr_target)),
        "verification_accuracy": _round(metrics.verification_accuracy(balanced)),
        "n_genuine": int(scores.genuine.size),
        "n_impostor": int(scores.impostor.size),
    }


def anonymization_scores(expert: ExpertModel, x, x_tilde, labels, n_impostor, seed) -> metrics.ScoreSet:
    """Genuine: (original, anonymised) of one sample; impostor: originals of two identities."""
    e_orig = expert.embed(x)
    e_anon = expert.embed(x_tilde)
    genuine = np.linalg.norm(e_anon - e_orig, axis=1)
    rng = np.random.default_rng(seed)
    i, j = metrics.sample_impostor_pairs(labels, n_impostor, rng)
    impostor = np.linalg.norm(e_orig[i] - e_orig[j], axis=1)
    return metrics.ScoreSet(genuine, impostor)


def utility_drift(utility_experts, x, x_tilde) -> list[dict]:
    """Per utility expert: prediction MAE and mean l1 penultimate-feature gap."""
    rows = []
    for k, e in enumerate(utility_experts):
        pred_gap = np.abs(e.embed(x) - e.embed(x_tilde))
        pen = penultimate_net(e)
        feat_gap = np.abs(nn.predict(pen, x) - nn.predict(pen, x_tilde)).sum(axis=1)
        rows.append({"expert": k, "prediction_mae": _round(pred_gap.mean()), "penultimate_l1": _round(feat_gap.mean())})
    return rows


def deid_report(
    pipeline,
    split: Split,
    heldout_experts,
    seed: int = 0,
    fpr_target: float = DEFAULT_FPR,
    n_impostor: int = 20_000,
    anonymized=None,
    scores_out: list | None = None,
    **obfuscation_overrides,
) -> dict:
    """Per held-out expert TPR@FPR and verification accuracy, plus utility drift.

    ``scores_out``, when given, receives each expert's :class:`ScoreSet`.
    """
    _check_disjoint(heldout_experts, list(pipeline.extractor.experts) + list(pipeline.utility_experts))
    x = split.features
    x_tilde = anonymized if anonymized is not None else pipeline.anonymize(x, seed=seed, **obfuscation_overrides)
    rows = []
    for k, e in enumerate(heldout_experts):
        scores = anonymization_scores(e, x, x_tilde, split.labels, n_impostor, seed + 1000 * (k + 1))
        if scores_out is not None:
            scores_out.append(scores)
        rows.append({"expert": k, **verification_row(scores, fpr_target)})
    average = {
        "tpr_at_fpr": _round(np.mean([r["tpr_at_fpr"] for r in rows])),
        "verification_accuracy": _round(np.mean([r["verification_accuracy"] for r in rows])),
    }
    return {
        "fpr_target": fpr_target,
        "per_heldout_expert": rows,
        "average": average,
        "utility_drift": utility_drift(pipeline.utility_experts, x, x_tilde),
        "seed": seed,
    }


# --- inversion attack -----------------------------------------------------------

def train_inversion_attacker(
    inputs,
    targets,
    labels,
    arch=None,
    epochs: int = 100,
    learning_rate: float = 1e-3,
    seed: int = 0,
    batch_size: int = 32,
    forbidden_labels=None,
) -> nn.DenseNet:
    """Supervised l2 regression from obfuscated to original embeddings.

    ``forbidden_labels`` are the identities reserved for evaluation; any
    overlap with ``labels`` is a protocol error.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if forbidden_labels is not None and set(np.unique(labels).tolist()) & set(np.unique(forbidden_labels).tolist()):
        raise ProtocolError("attacker training identities overlap the evaluation identities")
    d_in, d_out = inputs.shape[1], targets.shape[1]
    sizes = arch or [d_in, 4 * d_in, 2 * d_in, d_out]
    if sizes[0] != d_in or sizes[-1] != d_out:
        raise ConfigurationError("attacker architecture does not match the data widths")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 91]))
    net = nn.init_network(sizes, final_activation="tanh", seed=int(rng.integers(2**31)))
    opt = nn.Trainable([net], learning_rate=learning_rate, beta1=0.9)
    n = inputs.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            out, cache = nn.forward(net, inputs[idx])
            grads, _ = nn.backward(net, cache, 2.0 * (out - targets[idx]) / idx.size)
            opt.step([grads])
    return net


def _unit(v):
    return v / np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), 1e-12)


def inversion_scores(attacker, e_anon, e_orig, labels, n_impostor, seed) -> metrics.ScoreSet:
    """Recovered identity of sample i against the original of i (genuine) or of
    another identity (impostor)."""
    recovered = _unit(nn.predict(attacker, e_anon))
    return metrics.cross_distances(recovered, e_orig, labels, n_impostor, seed)


def inversion_report(
    attackers,
    split: Split,
    x_tilde,
    heldout_experts,
    seed: int = 0,
    fpr_target: float = DEFAULT_FPR,
    n_impostor: int = 20_000,
) -> dict:
    rows = []
    for k, (att, e) in enumerate(zip(attackers, heldout_experts)):
        scores = inversion_scores(att, e.embed(x_tilde), e.embed(split.features), split.labels, n_impostor, seed + 1000 * (k + 1))
        rows.append({"expert": k, **verification_row(scores, fpr_target)})
    return {
        "fpr_target": fpr_target,
        "per_heldout_expert": rows,
        "average": {
            "tpr_at_fpr": _round(np.mean([r["tpr_at_fpr"] for r in rows])),
            "verification_accuracy": _round(np.mean([r["verification_accuracy"] for r in rows])),
        },
    }


def run_inversion_attack(
    pipeline,
    split_a: Split,
    split_b: Split,
    heldout_experts,
    seed: int = 0,
    epochs: int = 100,
    learning_rate: float = 1e-3,
    fpr_target: float = DEFAULT_FPR,
    n_impostor: int = 20_000,
    arch=None,
    **obfuscation_overrides,
) -> dict:
    """Train one attacker per held-out expert on split A, report on split B."""
    if split_a.identities() & split_b.identities():
        raise ProtocolError("attack splits share identities")
    xa = pipeline.anonymize(split_a.features, seed=seed + 1, **obfuscation_overrides)
    xb = pipeline.anonymize(split_b.features, seed=seed + 2, **obfuscation_overrides)
    attackers = []
    for k, e in enumerate(heldout_experts):
        attackers.append(
            train_inversion_attacker(
                e.embed(xa), e.embed(split_a.features), split_a.labels,
                arch=arch, epochs=epochs, learning_rate=learning_rate,
                seed=seed + k, forbidden_labels=split_b.labels,
            )
        )
    return inversion_report(attackers, split_b, xb, heldout_experts, seed, fpr_target, n_impostor)


# --- LDP audit --------------------------------------------------------------------

@dataclass
class AuditResult:
    max_log_ratio: float
    epsilon_claimed: float
    slack: float
    n_bins_compared: int

    @property
    def passed(self) -> bool:
        return self.max_log_ratio <= self.epsilon_claimed + self.slack

    def as_dict(self) -> dict:
        return {
            "max_log_ratio": self.max_log_ratio if np.isfinite(self.max_log_ratio) else "inf",
            "epsilon_claimed": self.epsilon_claimed,
            "slack": self.slack,
            "n_bins_compared": self.n_bins_compared,
            "passed": self.passed,
        }


def ldp_ratio_audit(
    mechanism,
    z,
    z_prime,
    n_samples: int = 1_000_000,
    n_bins: int = 200,
    epsilon_claimed: float = 1.0,
    seed: int = 0,
    slack: float = AUDIT_SLACK,
    min_count: int = 1000,
    min_samples: int = 100_000,
) -> AuditResult:
    """Empirical max |log P(M(z) in bin) / P(M(z') in bin)|.

    ``mechanism(value, rng, n)`` returns ``n`` scalar outputs. Both sample sets
    are binned over their pooled range; only bins holding at least
    ``min_count`` samples from each side are compared. Disjoint supports give
    an infinite ratio.
    """
    if n_samples < min_samples:
        raise InsufficientSamplesError(f"audit needs >= {min_samples} samples, got {n_samples}")
    rng_a = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    rng_b = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    a = np.asarray(mechanism(z, rng_a, n_samples), dtype=np.float64).ravel()
    b = np.asarray(mechanism(z_prime, rng_b, n_samples), dtype=np.float64).ravel()
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi == lo:
        return AuditResult(0.0, epsilon_claimed, slack, 1)
    ca, _ = np.histogram(a, bins=n_bins, range=(lo, hi))
    cb, _ = np.histogram(b, bins=n_bins, range=(lo, hi))
    joint = (ca >= min_count) & (cb >= min_count)
    if not np.any(joint):
        if not np.any((ca > 0) & (cb > 0)):
            return AuditResult(float("inf"), epsilon_claimed, slack, 0)
        raise InsufficientSamplesError("no bin holds enough samples from both inputs")
    ratio = np.abs(np.log(ca[joint] / a.size) - np.log(cb[joint] / b.size))
    return AuditResult(float(ratio.max()), epsilon_claimed, slack, int(joint.sum()))


def laplace_mechanism(scale):
    """Scalar ``M(v) = v + Lap(scale)`` in the audit's calling convention."""

    def mech(value, rng, n):
        return value + laplace_noise(scale, n, rng)

    return mech
