"""The assembled de-identification pipeline and its on-disk bundle.

``x_tilde = g(x, psi(h(x)))``: extract the identity, obfuscate it, swap it in.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from deidkit import obfuscator as obf
from deidkit.checkpoint import load_checkpoint, save_checkpoint
from deidkit.errors import CheckpointError
from deidkit.swap import LossWeights, SwapModel, swap_forward
from deidkit.world import EnsembleExtractor, ExpertModel, expert_from_checkpoint, expert_meta

BUNDLE_VERSION = 1


@dataclass
class Pipeline:
    extractor: EnsembleExtractor
    swap: SwapModel
    critics: list
    spec: obf.ObfuscatorSpec
    utility_experts: list[ExpertModel]
    weights: LossWeights = field(default_factory=LossWeights)
    manifest: dict = field(default_factory=dict)

    def identity_vectors(self, x):
        return self.extractor.extract(x)

    def obfuscate(self, z, rng, alpha=None, beta=None):
        spec = self.spec
        if alpha is not None or beta is not None:
            spec = obf.ObfuscatorSpec(**{**spec.__dict__})
            if alpha is not None:
                spec.alpha = float(alpha)
            if beta is not None:
                spec.beta = float(beta)
        return obf.apply(spec, z, "infer", rng)

    def anonymize(self, x, seed=0, alpha=None, beta=None):
        """Inference-mode pipeline; noise comes from ``default_rng(seed)``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        z = self.identity_vectors(x)
        zt = self.obfuscate(z, np.random.default_rng(seed), alpha=alpha, beta=beta)
        return swap_forward(self.swap, x, zt)

    def frozen_hashes(self) -> dict:
        return {
            "identity_experts": [e.net.param_hash() for e in self.extractor.experts],
            "utility_experts": [e.net.param_hash() for e in self.utility_experts],
        }


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_bundle(pipeline: Pipeline, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(d / "swap.ckpt", pipeline.swap.named_nets(), kind="swap")
    save_checkpoint(d / "critic.ckpt", {f"critic{i}": c for i, c in enumerate(pipeline.critics)}, kind="critic")
    obf.save_obfuscator(pipeline.spec, d / "obfuscator.ckpt")
    ex = pipeline.extractor
    save_checkpoint(
        d / "extractor.ckpt",
        {"merge": ex.merge_net, **{f"expert{i}": e.net for i, e in enumerate(ex.experts)}},
        kind="extractor",
        meta={
            "experts": [expert_meta(e) for e in ex.experts],
            "distill": ex.distill.tolist() if ex.distill is not None else None,
        },
    )
    save_checkpoint(
        d / "utility.ckpt",
        {f"expert{i}": e.net for i, e in enumerate(pipeline.utility_experts)},
        kind="utility-experts",
        meta={"experts": [expert_meta(e) for e in pipeline.utility_experts]},
    )
    manifest = {
        "bundle_version": BUNDLE_VERSION,
        "weights": asdict(pipeline.weights),
        "obfuscator": pipeline.spec.sidecar(),
        **pipeline.manifest,
    }
    manifest["files"] = {
        name: hashlib.sha256((d / name).read_bytes()).hexdigest()
        for name in ("swap.ckpt", "critic.ckpt", "obfuscator.ckpt", "extractor.ckpt", "utility.ckpt")
    }
    _write_json(d / "manifest.json", manifest)
    return d


def _experts_from(ckpt) -> list[ExpertModel]:
    out = []
    for i, meta in enumerate(ckpt.meta["experts"]):
        sub = type(ckpt)(ckpt.kind, {"net": ckpt.nets[f"expert{i}"]}, meta)
        out.append(expert_from_checkpoint(sub))
    return out


def load_bundle(directory) -> Pipeline:
    d = Path(directory)
    manifest_path = d / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"{d} has no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("bundle_version") != BUNDLE_VERSION:
        raise CheckpointError(f"unsupported bundle version {manifest.get('bundle_version')}")
    for name, digest in manifest.get("files", {}).items():
        if hashlib.sha256((d / name).read_bytes()).hexdigest() != digest:
            raise CheckpointError(f"{name} does not match the manifest digest")
    swap_ck = load_checkpoint(d / "swap.ckpt")
    swap = SwapModel(swap_ck.nets["encoder"], swap_ck.nets["injector"], swap_ck.nets["decoder"])
    critic_ck = load_checkpoint(d / "critic.ckpt")
    critics = [critic_ck.nets[f"critic{i}"] for i in range(len(critic_ck.nets))]
    spec = obf.load_obfuscator(d / "obfuscator.ckpt")
    ex_ck = load_checkpoint(d / "extractor.ckpt")
    experts = _experts_from(ex_ck)
    distill = ex_ck.meta.get("distill")
    extractor = EnsembleExtractor(experts, ex_ck.nets["merge"], None if distill is None else np.array(distill))
    utility = _experts_from(load_checkpoint(d / "utility.ckpt"))
    w = manifest["weights"]
    weights = LossWeights(**w)
    extra = {k: v for k, v in manifest.items() if k not in ("bundle_version", "weights", "obfuscator", "files")}
    return Pipeline(extractor, swap, critics, spec, utility, weights, extra)
