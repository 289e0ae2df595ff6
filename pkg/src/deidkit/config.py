"""Run configuration: JSON schema with defaults, strict keys and a stable hash.

Every stage seed derives from ``master_seed`` through a named substream, so
changing one stage's seed (``seeds.<stage>``) leaves the others untouched.
"""
from __future__ import annotations

import copy
import hashlib
import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from deidkit.errors import ConfigurationError, MissingArtifactError
from deidkit.swap import LossWeights, TrainConfig
from deidkit.world import WorldConfig

STAGES = ("world", "experts", "extractor", "phase1", "phase2", "eval", "attack", "audit")
EXPERT_ROLES = ("identity", "heldout", "utility")

DEFAULTS: dict = {
    "master_seed": 0,
    "output_dir": "runs/default",
    "world": {
        "n_id_latent": 16,
        "n_util_latent": 8,
        "n_feature": 64,
        "n_identities": 200,
        "samples_per_identity": 10,
        "within_identity_noise": 0.1,
        "mixing_hidden": 64,
    },
    "experts": [
        {"role": "identity", "dim": 32, "arch": [64], "epochs": 20},
        {"role": "identity", "dim": 32, "arch": [64], "epochs": 20},
        {"role": "heldout", "dim": 32, "arch": [64], "epochs": 20},
        {"role": "heldout", "dim": 32, "arch": [64], "epochs": 20},
        {"role": "utility", "dim": 8, "arch": [32], "epochs": 20},
        {"role": "utility", "dim": 8, "arch": [32], "epochs": 20},
    ],
    "extractor": {"n_z": 64, "hidden": [64]},
    "obfuscator": {
        "variant": "ved",
        "beta": 0.0,
        "alpha": 1.0,
        "n_v": 32,
        "mlp_hidden": [256, 128],
        "encoder_hidden": [128, 128],
        "decoder_hidden": [128, 128],
    },
    "weights": {
        "lambda_id": 30.0,
        "lambda_deid": 30.0,
        "lambda_mix": 10.0,
        "lambda_uti": [2.0, 2.0],
        "lambda_kld": 0.2,
        "lambda_gen": 1.0,
        "lambda_rec": 10.0,
        "l1_mean": True,
        "kld_reference_dim": 512,
    },
    "phases": {
        "phase1_steps": 2000,
        "phase2_steps": 2000,
        "batch_size": 4,
        "learning_rate": 1e-3,
        "critic_learning_rate": 1e-3,
        "merge_learning_rate": 1e-3,
    },
    "eval": {
        "fpr_target": 1e-3,
        "n_pairs": 20000,
        "attack_epochs": 100,
        "attack_learning_rate": 1e-3,
        "attack_arch": None,
    },
    "audit": {
        "z": 0.0,
        "z_prime": 1.0,
        "scale": 1.0,
        "epsilon_claimed": None,
        "n_samples": 1000000,
        "n_bins": 200,
    },
    "seeds": {stage: None for stage in STAGES},
}

_EXPERT_KEYS = {"role", "dim", "arch", "epochs", "seed", "learning_rate"}


def _merge(base: dict, override: dict, path: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigurationError(f"unknown config key {where!r}")
        if key == "experts" and not path:
            out[key] = [_expert_entry(e, f"{where}[{i}]") for i, e in enumerate(value)]
        elif isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"{where} must be an object")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def _expert_entry(entry, where) -> dict:
    if not isinstance(entry, dict):
        raise ConfigurationError(f"{where} must be an object")
    unknown = set(entry) - _EXPERT_KEYS
    if unknown:
        raise ConfigurationError(f"unknown config key {where}.{sorted(unknown)[0]!r}")
    if entry.get("role") not in EXPERT_ROLES:
        raise ConfigurationError(f"{where}.role must be one of {EXPERT_ROLES}")
    defaults = {"dim": 32 if entry["role"] != "utility" else 8, "arch": [64], "epochs": 20}
    return {**defaults, **entry}


@dataclass(frozen=True)
class RunConfig:
    data: dict

    # construction ----------------------------------------------------------
    @classmethod
    def from_dict(cls, raw: dict | None = None) -> "RunConfig":
        cfg = cls(_merge(DEFAULTS, raw or {}, ""))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        try:
            raw = json.loads(p.read_text())
        except FileNotFoundError as exc:
            raise MissingArtifactError(f"config file {p} does not exist") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{p} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError("config root must be an object")
        return cls.from_dict(raw)

    def replace(self, **sections) -> "RunConfig":
        """New config with the given sections deep-merged over this one."""
        return RunConfig.from_dict(_merge(self.data, sections, ""))

    def with_seed(self, seed: int) -> "RunConfig":
        return self.replace(master_seed=int(seed))

    def validate(self) -> None:
        d = self.data
        roles = [e["role"] for e in d["experts"]]
        if "identity" not in roles:
            raise ConfigurationError("at least one identity expert is required for the extractor")
        n_uti = roles.count("utility")
        if len(d["weights"]["lambda_uti"]) != n_uti:
            raise ConfigurationError(f"weights.lambda_uti needs {n_uti} entries (one per utility expert)")
        if d["obfuscator"]["variant"] not in ("opp", "mlp", "ved"):
            raise ConfigurationError("obfuscator.variant must be opp, mlp or ved")
        if not 0 < d["eval"]["fpr_target"] < 1:
            raise ConfigurationError("eval.fpr_target must lie in (0, 1)")
        for key in ("phase1_steps", "phase2_steps", "batch_size"):
            if int(d["phases"][key]) < (1 if key == "batch_size" else 0):
                raise ConfigurationError(f"phases.{key} is out of range")
        # Typed views raise on bad values.
        self.world_config()
        self.loss_weights()

    # views ------------------------------------------------------------------
    def canonical(self) -> str:
        """Sorted compact JSON of everything that affects results (not ``output_dir``)."""
        body = {k: v for k, v in self.data.items() if k != "output_dir"}
        return json.dumps(body, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def seed(self, stage: str, index: int = 0) -> int:
        """Named substream of the master seed, unless ``seeds.<stage>`` pins it."""
        if stage not in STAGES:
            raise ConfigurationError(f"unknown seed stage {stage!r}")
        pinned = self.data["seeds"].get(stage)
        base = int(pinned) if pinned is not None else None
        if base is None:
            ss = np.random.SeedSequence([int(self.data["master_seed"]), zlib.crc32(stage.encode())])
            base = int(ss.generate_state(1)[0])
        if index == 0:
            return base
        return int(np.random.SeedSequence([base, index]).generate_state(1)[0])

    def world_config(self) -> WorldConfig:
        return WorldConfig(**self.data["world"], seed=self.seed("world"))

    def loss_weights(self) -> LossWeights:
        return LossWeights(**self.data["weights"])

    def train_config(self, phase: str) -> TrainConfig:
        p = self.data["phases"]
        return TrainConfig(
            steps=int(p[f"{phase}_steps"]),
            batch_size=int(p["batch_size"]),
            learning_rate=float(p["learning_rate"]),
            critic_learning_rate=float(p["critic_learning_rate"]),
            merge_learning_rate=float(p["merge_learning_rate"]),
        )

    def __getitem__(self, key):
        return self.data[key]

    @property
    def output_dir(self) -> Path:
        return Path(self.data["output_dir"])


def default_config() -> RunConfig:
    return RunConfig.from_dict({})


def dump_default(path) -> Path:
    p = Path(path)
    p.write_text(json.dumps(DEFAULTS, indent=2) + "\n")
    return p
