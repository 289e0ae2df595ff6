"""Command-line entry point: ``deidkit <command> [--config PATH] [--out DIR] ...``.

Exit codes: 0 success, 1 failed LDP audit, 2 configuration, 3 protocol,
4 numeric, 5 I/O or checkpoint, 64 usage. Failures print one JSON object
on stderr: ``{"error": <class>, "message": ..., "exit_code": n}``.
"""
from __future__ import annotations

import os
import sys

from deidkit import _threads

_threads.apply_cap(os.environ)

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
from pathlib import Path  # noqa: E402

from deidkit import evaluation as ev  # noqa: E402
from deidkit import experiment as X  # noqa: E402
from deidkit import kernels, reporting  # noqa: E402
from deidkit.config import RunConfig, default_config  # noqa: E402
from deidkit.errors import ConfigurationError, DeidError, MissingArtifactError  # noqa: E402
from deidkit.pipeline import load_bundle, save_bundle  # noqa: E402

EXIT_USAGE = 64
EXIT_AUDIT_FAILED = 1
log = logging.getLogger("deidkit")

DEID_COLUMNS = ["expert", "tpr_at_fpr", "verification_accuracy", "n_genuine", "n_impostor"]
SWEEP_COLUMNS = ["deid_tpr_at_fpr", "deid_accuracy", "inverted_tpr_at_fpr", "inverted_accuracy", "utility_mae", "n_seeds"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p):
    p.add_argument("--config", type=Path, help="JSON run config (defaults apply to missing keys)")
    p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    p.add_argument("--seed", type=int, help="master seed (overrides master_seed)")
    p.add_argument("--quiet", action="store_true", help="suppress progress messages")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deidkit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    specs = {
        "world-gen": "generate the synthetic identity world",
        "expert-train": "train and freeze the identity, held-out and utility experts",
        "train": "phase 1 then phase 2; writes the pipeline bundle",
        "eval": "de-identification report for a bundle",
        "attack": "inversion attack against a bundle",
        "audit-ldp": "histogram ratio audit of the raw Laplace mechanism",
        "sweep": "de-id and inversion metrics across noise scales",
        "default-config": "print the default config",
    }
    cmds = {}
    for name, help_text in specs.items():
        cmds[name] = sub.add_parser(name, help=help_text, description=help_text)
        if name != "default-config":
            _common(cmds[name])
    for name in ("eval", "attack"):
        cmds[name].add_argument("--bundle", type=Path, help="bundle directory (default <out>/bundle)")
    cmds["attack"].add_argument("--alpha", type=float, help="override the ved inference noise scale")
    cmds["attack"].add_argument("--beta", type=float, help="override the mlp inference noise scale")
    cmds["sweep"].add_argument("--parameter", required=True, choices=sorted(X.SWEEP_PARAMETERS))
    cmds["sweep"].add_argument("--values", required=True, help="comma-separated noise scales")
    cmds["sweep"].add_argument("--seeds", help="comma-separated master seeds (default: seed, seed+1, seed+2)")
    return parser


def _floats(text, what):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--{what} expects comma-separated numbers") from exc


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = cfg.replace(output_dir=str(args.out))
    return cfg


def _header(cfg):
    return {"config_hash": cfg.hash(), "master_seed": cfg["master_seed"]}


def _emit(obj):
    sys.stdout.write(reporting.dumps_json(obj))


# --- commands -------------------------------------------------------------------------

def cmd_world_gen(cfg, args):
    out = cfg.output_dir
    world = X.obtain_world(cfg, out)
    log.info("world: %d samples, %d identities", len(world.samples), world.config.n_identities)
    return {**_header(cfg), "world": str(out / X.WORLD_FILE), "n_samples": len(world.samples),
            "n_train": len(world.train), "n_eval": len(world.eval)}


def cmd_expert_train(cfg, args):
    out = cfg.output_dir
    world = X.obtain_world(cfg, out, create=False)
    experts = X.train_experts(cfg, world)
    d = X.save_experts(cfg, experts, out)
    return {**_header(cfg), "experts": str(d), "counts": {r: len(getattr(experts, r)) for r in ("identity", "heldout", "utility")}}


def cmd_train(cfg, args):
    out = cfg.output_dir
    world = X.obtain_world(cfg, out)
    experts = X.obtain_experts(cfg, out, world)
    log.info("phase 1: %d steps", cfg["phases"]["phase1_steps"])
    pre = X.pretrain(cfg, world, experts)
    log.info("phase 2: %d steps (%s)", cfg["phases"]["phase2_steps"], cfg["obfuscator"]["variant"])
    pipe = X.finetune(cfg, world, experts, pre)
    bundle = save_bundle(pipe, out / X.BUNDLE_DIR)
    reporting.write_json(bundle / "config.json", cfg.data)
    return {**_header(cfg), "bundle": str(bundle), "obfuscator": pipe.spec.sidecar(), "final_loss": pipe.manifest["final_loss"]}


def _bundle_and_config(args):
    cfg = load_config(args)
    bundle_dir = args.bundle or cfg.output_dir / X.BUNDLE_DIR
    if not (bundle_dir / "manifest.json").exists():
        raise MissingArtifactError(f"{bundle_dir} is not a pipeline bundle")
    if args.config is None and (bundle_dir / "config.json").exists():
        stored = json.loads((bundle_dir / "config.json").read_text())
        cfg = RunConfig.from_dict(stored)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.out is not None:
            cfg = cfg.replace(output_dir=str(args.out))
    return cfg, load_bundle(bundle_dir)


def _heldout(cfg):
    out = cfg.output_dir
    world = X.obtain_world(cfg, out)
    experts = X.obtain_experts(cfg, out, world)
    return world, experts.heldout


def cmd_eval(cfg_unused, args):
    cfg, pipe = _bundle_and_config(args)
    world, heldout = _heldout(cfg)
    if cfg["eval"]["n_pairs"] < 10 / cfg["eval"]["fpr_target"]:
        log.warning("only %d impostor pairs for FPR target %g; TPR resolution is coarse",
                    cfg["eval"]["n_pairs"], cfg["eval"]["fpr_target"])
    scores = []
    rep = ev.deid_report(pipe, world.eval, heldout, seed=cfg.seed("eval"), fpr_target=cfg["eval"]["fpr_target"],
                         n_impostor=int(cfg["eval"]["n_pairs"]), scores_out=scores)
    rep = {**_header(cfg), "kind": "deid", "backend": kernels.BACKEND, **rep,
           "epsilon_accounting": X.epsilon_accounting(pipe.spec, pipe.identity_vectors(world.eval.features), cfg.seed("eval", 7))}
    d = cfg.output_dir / X.REPORTS_DIR
    reporting.write_json(d / "deid.json", rep)
    rows = rep["per_heldout_expert"] + [{"expert": "average", **rep["average"]}]
    reporting.write_csv(d / "deid.csv", DEID_COLUMNS, rows, _header(cfg))
    drift_cols = ["expert", "prediction_mae", "penultimate_l1"]
    reporting.write_csv(d / "utility_drift.csv", drift_cols, rep["utility_drift"], _header(cfg))
    hist = X.histogram_rows(pipe, world, heldout, cfg, scores)
    reporting.write_csv(d / "histogram.csv", list(hist[0]), hist, _header(cfg))
    reporting.write_csv(d / "roc.csv", ["expert", "threshold", "fpr", "tpr"], X.roc_rows(scores), _header(cfg))
    return {**_header(cfg), "report": str(d / "deid.json"), "average": rep["average"]}


def cmd_attack(cfg_unused, args):
    cfg, pipe = _bundle_and_config(args)
    world, heldout = _heldout(cfg)
    overrides = {k: getattr(args, k) for k in ("alpha", "beta") if getattr(args, k) is not None}
    rep = {**X.attack(cfg, pipe, world, heldout, **overrides), "backend": kernels.BACKEND}
    d = cfg.output_dir / X.REPORTS_DIR
    suffix = "".join(f"_{k}{v:g}" for k, v in sorted(overrides.items()))
    reporting.write_json(d / f"inversion{suffix}.json", rep)
    rows = rep["per_heldout_expert"] + [{"expert": "average", **rep["average"]}]
    reporting.write_csv(d / f"inversion{suffix}.csv", DEID_COLUMNS, rows, _header(cfg))
    return {**_header(cfg), "report": str(d / f"inversion{suffix}.json"), "average": rep["average"]}


def cmd_audit_ldp(cfg, args):
    a = cfg["audit"]
    z, zp, scale = float(a["z"]), float(a["z_prime"]), float(a["scale"])
    if scale < 0:
        raise ConfigurationError("audit.scale must be nonnegative")
    claimed = a["epsilon_claimed"]
    if claimed is None:
        if scale == 0:
            raise ConfigurationError("audit.epsilon_claimed is required when audit.scale is 0")
        claimed = abs(z - zp) / scale
    mech = ev.laplace_mechanism(scale) if scale > 0 else (lambda value, rng, n: [value] * n)
    res = ev.ldp_ratio_audit(mech, z, zp, n_samples=int(a["n_samples"]), n_bins=int(a["n_bins"]),
                             epsilon_claimed=float(claimed), seed=cfg.seed("audit"))
    rep = {**_header(cfg), "kind": "ldp_audit", "z": z, "z_prime": zp, "scale": scale, **res.as_dict()}
    reporting.write_json(cfg.output_dir / X.REPORTS_DIR / "audit.json", rep)
    return rep


def cmd_sweep(cfg, args):
    values = _floats(args.values, "values")
    if not values:
        raise UsageError("--values is empty")
    base = int(cfg["master_seed"])
    seeds = [int(s) for s in _floats(args.seeds, "seeds")] if args.seeds else [base, base + 1, base + 2]
    rows = X.sweep(cfg, args.parameter, values, seeds)
    d = cfg.output_dir / X.REPORTS_DIR
    header = {**_header(cfg), "seeds": "|".join(map(str, seeds))}
    reporting.write_csv(d / f"sweep_{args.parameter}.csv", [args.parameter, *SWEEP_COLUMNS], rows, header)
    reporting.write_json(d / f"sweep_{args.parameter}.json", {**header, "parameter": args.parameter, "rows": rows})
    return {**header, "rows": rows}


COMMANDS = {
    "world-gen": cmd_world_gen,
    "expert-train": cmd_expert_train,
    "train": cmd_train,
    "eval": cmd_eval,
    "attack": cmd_attack,
    "audit-ldp": cmd_audit_ldp,
    "sweep": cmd_sweep,
}


def _fail(exc, code):
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(exc, EXIT_USAGE)
    if args.command == "default-config":
        _emit(default_config().data)
        return 0
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args)
        result = COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        return _fail(exc, EXIT_USAGE)
    except DeidError as exc:
        return _fail(exc, exc.exit_code)
    except OSError as exc:
        return _fail(exc, MissingArtifactError.exit_code)
    _emit(result)
    if args.command == "audit-ldp" and not result["passed"]:
        return EXIT_AUDIT_FAILED
    return 0


if __name__ == "__main__":
    sys.exit(main())
