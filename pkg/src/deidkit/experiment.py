"""Stage-by-stage orchestration of a run, shared by the CLI and the test suites.

A :class:`Runner` memoises the expensive, obfuscator-independent stages
(world, experts, phase 1) so a sweep over obfuscators or loss weights
pretrains the swapper once per seed.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from deidkit import evaluation as ev
from deidkit import metrics, swap
from deidkit import obfuscator as obf
from deidkit.checkpoint import load_checkpoint, save_checkpoint
from deidkit.config import EXPERT_ROLES, RunConfig
from deidkit.errors import ConfigurationError, MissingArtifactError
from deidkit.pipeline import Pipeline
from deidkit.world import (
    EnsembleExtractor,
    ExpertModel,
    World,
    build_extractor,
    expert_from_checkpoint,
    expert_meta,
    generate_world,
    load_world,
    save_world,
    train_expert,
)

PHASE1_WEIGHTS = ("lambda_id", "lambda_mix", "lambda_gen", "lambda_rec", "l1_mean")


@dataclass
class ExpertSet:
    identity: list[ExpertModel]
    heldout: list[ExpertModel]
    utility: list[ExpertModel]


@dataclass
class Pretrained:
    extractor: EnsembleExtractor
    model: swap.SwapModel
    critics: list
    trace: list = field(default_factory=list)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def make_world(cfg: RunConfig) -> World:
    return generate_world(cfg.world_config())


def train_experts(cfg: RunConfig, world: World) -> ExpertSet:
    out = ExpertSet([], [], [])
    for i, entry in enumerate(cfg["experts"]):
        seed = entry.get("seed")
        seed = cfg.seed("experts", i + 1) if seed is None else int(seed)
        kind = "utility" if entry["role"] == "utility" else "identity"
        expert = train_expert(
            world, kind, int(entry["dim"]), arch=tuple(entry["arch"]), epochs=int(entry["epochs"]),
            seed=seed, learning_rate=float(entry.get("learning_rate", 1e-3)),
        )
        getattr(out, entry["role"]).append(expert)
    return out


def copy_extractor(extractor: EnsembleExtractor) -> EnsembleExtractor:
    distill = None if extractor.distill is None else extractor.distill.copy()
    return EnsembleExtractor(list(extractor.experts), extractor.merge_net.copy(), distill)


def pretrain(cfg: RunConfig, world: World, experts: ExpertSet) -> Pretrained:
    """Build the extractor and run phase 1."""
    ex_cfg = cfg["extractor"]
    extractor = build_extractor(experts.identity, n_z=int(ex_cfg["n_z"]), hidden=tuple(ex_cfg["hidden"]), seed=cfg.seed("extractor"))
    seed = cfg.seed("phase1")
    init = np.random.SeedSequence([seed, 1]).generate_state(2)
    n_feature = cfg["world"]["n_feature"]
    model = swap.make_swap_model(n_feature=n_feature, n_z=extractor.n_z, seed=int(init[0]))
    critics = swap.make_critics(n_feature=n_feature, seed=int(init[1]))
    tc = cfg.train_config("phase1")
    trace = swap.train_phase1(model, critics, extractor, world, steps=tc.steps, seed=seed, weights=cfg.loss_weights(), config=tc)
    return Pretrained(extractor, model, critics, trace)


def make_obfuscator(cfg: RunConfig, n_z: int) -> obf.ObfuscatorSpec:
    o = cfg["obfuscator"]
    seed = cfg.seed("phase2", 1)
    if o["variant"] == "opp":
        return obf.make_opp(n_z)
    if o["variant"] == "mlp":
        return obf.make_mlp(n_z, hidden=tuple(o["mlp_hidden"]), beta=float(o["beta"]), seed=seed)
    return obf.make_ved(
        n_z, n_v=int(o["n_v"]), encoder_hidden=tuple(o["encoder_hidden"]),
        decoder_hidden=tuple(o["decoder_hidden"]), alpha=float(o["alpha"]), seed=seed,
    )


def epsilon_accounting(spec: obf.ObfuscatorSpec, id_vectors, seed: int) -> dict:
    """Sensitivity of the deterministic core and the epsilon it implies.

    ``epsilon`` follows scale = delta / epsilon; ``epsilon_scale_times_delta``
    is the alternative product convention, echoed for comparison only.
    """
    scale = {"opp": 0.0, "mlp": spec.beta, "ved": spec.alpha}[spec.variant]
    if spec.variant == "mlp":
        # Noise enters at the input, whose l1 sensitivity on the unit sphere is 2 sqrt(n_z).
        delta = 2.0 * float(np.sqrt(spec.n_z))
    else:
        delta = obf.estimate_sensitivity(obf.deterministic_core(spec), id_vectors, seed=seed).delta_psi
    eps = obf.scale_to_epsilon(delta, scale) if scale > 0 else None
    return {
        "variant": spec.variant,
        "noise_scale": scale,
        "delta_psi": round(delta, 6),
        "epsilon": None if eps is None else round(eps, 6),
        "epsilon_scale_times_delta": round(delta * scale, 6) if scale > 0 else None,
    }


def finetune(cfg: RunConfig, world: World, experts: ExpertSet, pre: Pretrained) -> Pipeline:
    """Phase 2 on copies of the pretrained state; ``pre`` is left untouched."""
    extractor = copy_extractor(pre.extractor)
    model = pre.model.copy()
    critics = [c.copy() for c in pre.critics]
    spec = make_obfuscator(cfg, extractor.n_z)
    weights = cfg.loss_weights()
    tc = cfg.train_config("phase2")
    trace = swap.train_phase2(
        model, critics, spec, extractor, experts.utility, weights, world, steps=tc.steps, seed=cfg.seed("phase2"), config=tc
    )
    acct = epsilon_accounting(spec, extractor.extract(world.eval.features), cfg.seed("eval", 7))
    spec.delta_psi, spec.epsilon = acct["delta_psi"], acct["epsilon"]
    manifest = {
        "config_hash": cfg.hash(),
        "master_seed": cfg["master_seed"],
        "world_config_hash": world.config.digest(),
        "seeds": {s: cfg.seed(s) for s in ("world", "experts", "extractor", "phase1", "phase2")},
        "final_loss": round(float(np.mean([t["loss"] for t in trace[-100:]])) if trace else float("nan"), 6),
    }
    return Pipeline(extractor, model, critics, spec, experts.utility, weights, manifest)


def report_header(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.hash(), "master_seed": cfg["master_seed"]}


def evaluate(cfg: RunConfig, pipeline: Pipeline, world: World, heldout) -> dict:
    e = cfg["eval"]
    seed = cfg.seed("eval")
    rep = ev.deid_report(pipeline, world.eval, heldout, seed=seed, fpr_target=e["fpr_target"], n_impostor=int(e["n_pairs"]))
    acct = epsilon_accounting(pipeline.spec, pipeline.identity_vectors(world.eval.features), cfg.seed("eval", 7))
    return {**report_header(cfg), "kind": "deid", **rep, "epsilon_accounting": acct}


def attack(cfg: RunConfig, pipeline: Pipeline, world: World, heldout, **overrides) -> dict:
    e = cfg["eval"]
    seed = cfg.seed("attack")
    rep = ev.run_inversion_attack(
        pipeline, world.train, world.eval, heldout, seed=seed, epochs=int(e["attack_epochs"]),
        learning_rate=float(e["attack_learning_rate"]), fpr_target=e["fpr_target"],
        n_impostor=int(e["n_pairs"]), arch=e["attack_arch"], **overrides,
    )
    return {**report_header(cfg), "kind": "inversion", "overrides": overrides, **rep}


class Runner:
    """Memoising stage runner; cache keys cover exactly the config each stage reads."""

    def __init__(self):
        self._worlds: dict = {}
        self._experts: dict = {}
        self._pre: dict = {}
        self._pipes: dict = {}

    def _world_key(self, cfg):
        return _digest([cfg["world"], cfg.seed("world")])

    def world(self, cfg: RunConfig) -> World:
        key = self._world_key(cfg)
        if key not in self._worlds:
            self._worlds[key] = make_world(cfg)
        return self._worlds[key]

    def _experts_key(self, cfg):
        return _digest([self._world_key(cfg), cfg["experts"], cfg.seed("experts")])

    def experts(self, cfg: RunConfig) -> ExpertSet:
        key = self._experts_key(cfg)
        if key not in self._experts:
            self._experts[key] = train_experts(cfg, self.world(cfg))
        return self._experts[key]

    def pretrained(self, cfg: RunConfig) -> Pretrained:
        phases = {k: v for k, v in cfg["phases"].items() if k != "phase2_steps"}
        weights = {k: cfg["weights"][k] for k in PHASE1_WEIGHTS}
        key = _digest([self._experts_key(cfg), cfg["extractor"], phases, weights, cfg.seed("extractor"), cfg.seed("phase1")])
        if key not in self._pre:
            self._pre[key] = pretrain(cfg, self.world(cfg), self.experts(cfg))
        return self._pre[key]

    def pipeline(self, cfg: RunConfig) -> Pipeline:
        key = cfg.hash()
        if key not in self._pipes:
            self._pipes[key] = finetune(cfg, self.world(cfg), self.experts(cfg), self.pretrained(cfg))
        return self._pipes[key]


SWEEP_PARAMETERS = {"beta": ("mlp", "beta"), "alpha": ("ved", "alpha")}


def sweep(cfg: RunConfig, parameter: str, values, seeds, runner: Runner | None = None) -> list[dict]:
    """Per value: de-id and inversion metrics averaged over ``seeds``.

    Sweeping ``beta`` retrains an mlp pipeline per value (its noise enters
    training); ``alpha`` only changes ved inference noise, so one ved pipeline
    per seed is attacked at every value.
    """
    if parameter not in SWEEP_PARAMETERS:
        raise ConfigurationError(f"sweep parameter must be one of {sorted(SWEEP_PARAMETERS)}")
    variant, key = SWEEP_PARAMETERS[parameter]
    runner = runner or Runner()
    per_value = {float(v): [] for v in values}
    for seed in seeds:
        base = cfg.replace(master_seed=int(seed), obfuscator={"variant": variant})
        world = runner.world(base)
        heldout = runner.experts(base).heldout
        shared = runner.pipeline(base) if parameter == "alpha" else None
        for v in per_value:
            run_cfg = base.replace(obfuscator={key: v})
            pipe = shared if shared is not None else runner.pipeline(run_cfg)
            over = {key: v} if shared is not None else {}
            deid = ev.deid_report(pipe, world.eval, heldout, seed=run_cfg.seed("eval"),
                                  fpr_target=cfg["eval"]["fpr_target"], n_impostor=int(cfg["eval"]["n_pairs"]), **over)
            inv = attack(run_cfg, pipe, world, heldout, **over)
            per_value[v].append((deid["average"], inv["average"], deid["utility_drift"]))
    rows = []
    for v, runs in per_value.items():
        rows.append({
            parameter: v,
            "n_seeds": len(runs),
            "deid_tpr_at_fpr": round(float(np.mean([r[0]["tpr_at_fpr"] for r in runs])), 6),
            "deid_accuracy": round(float(np.mean([r[0]["verification_accuracy"] for r in runs])), 6),
            "inverted_tpr_at_fpr": round(float(np.mean([r[1]["tpr_at_fpr"] for r in runs])), 6),
            "inverted_accuracy": round(float(np.mean([r[1]["verification_accuracy"] for r in runs])), 6),
            "utility_mae": round(float(np.mean([[d["prediction_mae"] for d in r[2]] for r in runs])), 6),
        })
    return rows


# --- on-disk artifacts --------------------------------------------------------------

WORLD_FILE = "world.txt"
EXPERTS_DIR = "experts"
BUNDLE_DIR = "bundle"
REPORTS_DIR = "reports"


def experts_key(cfg: RunConfig) -> str:
    return _digest([cfg["world"], cfg.seed("world"), cfg["experts"], cfg.seed("experts")])


def obtain_world(cfg: RunConfig, out, create: bool = True) -> World:
    """Load ``out/world.txt`` (it must match the config) or build and save it."""
    path = Path(out) / WORLD_FILE
    if path.exists():
        world = load_world(path)
        if world.config != cfg.world_config():
            raise ConfigurationError(f"{path} was generated from a different world config")
        return world
    if not create:
        raise MissingArtifactError(f"{path} does not exist (run world-gen first)")
    world = make_world(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_world(world, path)
    return world


def save_experts(cfg: RunConfig, experts: ExpertSet, out) -> Path:
    d = Path(out) / EXPERTS_DIR
    d.mkdir(parents=True, exist_ok=True)
    files = []
    for role in EXPERT_ROLES:
        for k, e in enumerate(getattr(experts, role)):
            name = f"{role}_{k}.ckpt"
            meta = {**expert_meta(e), "role": role, "config_hash": cfg.hash(), "master_seed": cfg["master_seed"]}
            save_checkpoint(d / name, {"net": e.net}, kind="expert", meta=meta)
            files.append(name)
    (d / "index.json").write_text(json.dumps({"key": experts_key(cfg), "files": files}, indent=2, sort_keys=True) + "\n")
    return d


def load_experts(cfg: RunConfig, out) -> ExpertSet:
    d = Path(out) / EXPERTS_DIR
    index_path = d / "index.json"
    if not index_path.exists():
        raise MissingArtifactError(f"{index_path} does not exist (run expert-train first)")
    index = json.loads(index_path.read_text())
    if index.get("key") != experts_key(cfg):
        raise ConfigurationError(f"{d} was trained from a different world/expert config")
    out_set = ExpertSet([], [], [])
    for name in index["files"]:
        ckpt = load_checkpoint(d / name)
        getattr(out_set, ckpt.meta["role"]).append(expert_from_checkpoint(ckpt))
    return out_set


def obtain_experts(cfg: RunConfig, out, world: World, create: bool = True) -> ExpertSet:
    if (Path(out) / EXPERTS_DIR / "index.json").exists() or not create:
        return load_experts(cfg, out)
    experts = train_experts(cfg, world)
    save_experts(cfg, experts, out)
    return experts


def histogram_rows(pipeline: Pipeline, world: World, heldout, cfg: RunConfig, deid_scores, n_bins: int = 50) -> list[dict]:
    """Distance histograms per held-out expert: original genuine/impostor pairs
    and (original, anonymised) pairs."""
    split = world.eval
    n = int(cfg["eval"]["n_pairs"])
    edges = np.linspace(0.0, 2.0, n_bins + 1)
    rows = []
    for k, (e, anon) in enumerate(zip(heldout, deid_scores)):
        orig = metrics.pair_distances(e.embed(split.features), split.labels, n, n, cfg.seed("eval", 100 + k))
        cols = {
            "original_genuine": metrics.histogram(orig.genuine, n_bins),
            "original_impostor": metrics.histogram(orig.impostor, n_bins),
            "anonymized_genuine": metrics.histogram(anon.genuine, n_bins),
        }
        for b in range(n_bins):
            rows.append({
                "expert": k, "bin_lo": round(float(edges[b]), 6), "bin_hi": round(float(edges[b + 1]), 6),
                **{name: int(c[b]) for name, c in cols.items()},
            })
    return rows


def roc_rows(deid_scores, max_points: int = 200) -> list[dict]:
    rows = []
    for k, s in enumerate(deid_scores):
        pts = metrics.roc_points(s)
        keep = np.unique(np.linspace(0, len(pts) - 1, min(max_points, len(pts))).astype(int))
        for thr, fpr, tpr in pts[keep]:
            rows.append({"expert": k, "threshold": round(float(thr), 9), "fpr": round(float(fpr), 9), "tpr": round(float(tpr), 9)})
    return rows
