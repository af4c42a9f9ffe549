"""Command-line entry point: ``scopealign <command> [--config FILE] [--set k=v]``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import experiments
from .config import COMMANDS, ConfigError, ExperimentConfig, parse_config
from .data import Dataset, load_csv, make_blobs
from .engine import NumericError, TrainingDiverged, dumps_checkpoint, init_mlp, load_checkpoint, metrics_csv, train
from .federated import ClientError, PartitionError, run_federation
from .merge import barrier, landscape_grid, match_weights, scale_layer
from .regularizers import RegularizerConfigError, RegularizerSpec
from .scope import ScopeTarget, WeightScope, scope_estimate, scope_fuse

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_NUMERIC = 4
EXIT_EXISTS = 5

# convenience flags: (flag, config key, type)
SHORTCUTS = {
    "train": [("--epochs", "train.epochs", int), ("--lam", "regularizer.lam", float),
              ("--regularizer", "regularizer.kind", str)],
    "scope": [("--model", "models.a", str)],
    "fuse-scope": [],
    "interpolate": [("--model-a", "models.a", str), ("--model-b", "models.b", str)],
    "match": [("--model-a", "models.a", str), ("--model-b", "models.b", str)],
    "scale": [("--model", "models.a", str), ("--layer", "scale.layer", int), ("--alpha", "scale.alpha", float)],
    "landscape": [("--origin", "models.a", str), ("--model-a", "models.b", str), ("--model-b", "models.c", str)],
    "fl": [("--rounds", "fl.rounds", int), ("--algorithm", "fl.algorithm", str), ("--lam", "fl.lam", float),
           ("--init", "fl.init", str)],
    "study": [("--name", "study.name", str)],
}


class OutputExists(RuntimeError):
    pass


class Run:
    """Write-once artifact sink named ``<command>_seed<seed>_<artifact>``."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.dir = Path(cfg.output_dir)
        self.prefix = f"{cfg.command.replace('-', '_')}_seed{cfg.seed}_"
        self.written: List[str] = []

    def path(self, artifact: str) -> Path:
        return self.dir / (self.prefix + artifact)

    def write(self, artifact: str, text: str) -> Path:
        p = self.path(artifact)
        self.dir.mkdir(parents=True, exist_ok=True)
        try:
            with open(p, "x", encoding="utf-8", newline="") as fh:
                fh.write(text)
        except FileExistsError as exc:
            raise OutputExists(f"refusing to overwrite {p}") from exc
        self.written.append(str(p))
        return p

    def json(self, artifact: str, obj) -> Path:
        return self.write(artifact, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _dataset(cfg: ExperimentConfig):
    d = cfg["data"]
    if d["train_csv"]:
        tr = load_csv(d["train_csv"], d["num_classes"], "train")
        te = load_csv(d["test_csv"], d["num_classes"], "test") if d["test_csv"] else tr
        return tr, te
    return make_blobs(d["num_classes"], d["dim"], d["per_class"], d["spread"], seed=d["seed"],
                      modes_per_class=d["modes_per_class"])


def _model_path(cfg: ExperimentConfig, slot: str) -> str:
    p = cfg["models"][slot]
    if not p:
        raise ValueError(f"models.{slot} must name a checkpoint for command {cfg.command!r}")
    return p


def _fresh_model(cfg: ExperimentConfig, train_set: Dataset):
    sizes = [train_set.dim, *cfg["model"]["hidden"], train_set.num_classes]
    return init_mlp(sizes, seed=cfg.seed, init=cfg["model"]["init"])


def _regularizer(cfg: ExperimentConfig, init) -> Optional[RegularizerSpec]:
    r = cfg["regularizer"]
    kind = r["kind"]
    if kind == "none":
        return None
    if kind == "wsa":
        if r["target"]:
            target = ScopeTarget.from_dict(json.loads(Path(r["target"]).read_text()))
        else:
            target = ScopeTarget.from_scope(scope_estimate(init, weights_only=r["weights_only"]))
        return RegularizerSpec("wsa", r["lam"], target=target, weights_only=r["weights_only"])
    if kind == "proximal":
        anchor = load_checkpoint(r["anchor"]) if r["anchor"] else init
        return RegularizerSpec("proximal", r["lam"], anchor=anchor)
    return RegularizerSpec(kind, r["lam"], mu=r["mu"], sigma=r["sigma"], weights_only=r["weights_only"])


def cmd_train(cfg: ExperimentConfig, run: Run) -> None:
    tr, _ = _dataset(cfg)
    init = _fresh_model(cfg, tr)
    model, log = train(init, tr, cfg.train_config(), _regularizer(cfg, init), rng_seed=cfg.seed)
    run.write("model.json", dumps_checkpoint(model, cfg.seed))
    run.write("metrics.csv", metrics_csv(log))
    run.json("scope.json", scope_estimate(model).report(model.arch_id))


def cmd_scope(cfg: ExperimentConfig, run: Run) -> None:
    path = _model_path(cfg, "a")
    model = load_checkpoint(path)
    run.json("scope.json", scope_estimate(model, weights_only=cfg["scope"]["weights_only"]).report(path))


def cmd_fuse(cfg: ExperimentConfig, run: Run) -> None:
    paths = [p for p in cfg["fuse"]["scopes"] if p]
    if not paths:
        raise ValueError("fuse.scopes must list at least one scope report")
    scopes = [WeightScope.from_report(json.loads(Path(p).read_text())) for p in paths]
    run.json("target.json", scope_fuse(scopes).to_dict())


def cmd_interpolate(cfg: ExperimentConfig, run: Run) -> None:
    _, te = _dataset(cfg)
    w1, w2 = load_checkpoint(_model_path(cfg, "a")), load_checkpoint(_model_path(cfg, "b"))
    perm = match_weights(w1, w2, cfg["match"]["max_sweeps"]).permutation if cfg["interpolate"]["match"] else None
    rep, curve = barrier(w1, w2, te, permutation=perm, grid_size=cfg["interpolate"]["grid_size"])
    run.write("curve.csv", curve.to_csv())
    run.json("barrier.json", {**rep.to_dict(), "matched": perm is not None})


def cmd_match(cfg: ExperimentConfig, run: Run) -> None:
    _, te = _dataset(cfg)
    w1, w2 = load_checkpoint(_model_path(cfg, "a")), load_checkpoint(_model_path(cfg, "b"))
    res = match_weights(w1, w2, cfg["match"]["max_sweeps"])
    before, _ = barrier(w1, w2, te)
    after, _ = barrier(w1, w2, te, permutation=res.permutation)
    run.json("permutation.json", {
        **res.permutation.to_dict(),
        "objectives": res.objectives,
        "sweeps": res.sweeps,
        "converged": res.converged,
        "barrier_before": before.to_dict(),
        "barrier_after": after.to_dict(),
    })


def cmd_scale(cfg: ExperimentConfig, run: Run) -> None:
    model = load_checkpoint(_model_path(cfg, "a"))
    s = cfg["scale"]
    scaled = scale_layer(model, s["layer"], s["alpha"])
    run.write("model.json", dumps_checkpoint(scaled, cfg.seed))
    run.json("scope.json", {"before": scope_estimate(model).report(), "after": scope_estimate(scaled).report()})


def cmd_landscape(cfg: ExperimentConfig, run: Run) -> None:
    _, te = _dataset(cfg)
    o, a, b = (load_checkpoint(_model_path(cfg, k)) for k in ("a", "b", "c"))
    grid = landscape_grid(o, a, b, te, cfg["landscape"]["resolution"], cfg["landscape"]["margin"])
    run.write("landscape.csv", grid.to_csv())


def cmd_fl(cfg: ExperimentConfig, run: Run) -> None:
    tr, te = _dataset(cfg)
    init = load_checkpoint(cfg["fl"]["init"]) if cfg["fl"]["init"] else _fresh_model(cfg, tr)
    res = run_federation(cfg.fl_config(), tr, init, te, dirichlet_alpha=cfg["fl"]["dirichlet_alpha"])
    run.write("round_log.csv", res.round_log_csv())
    run.write("scope_trajectory.csv", res.scope_trajectory_csv())
    run.write("model.json", dumps_checkpoint(res.model, cfg.seed))


def cmd_study(cfg: ExperimentConfig, run: Run) -> None:
    name = cfg["study"]["name"]
    seeds = tuple(cfg["study"]["seeds"])
    fn = experiments.STUDIES[name]
    if name == "conditions":
        report = experiments.run_condition_matrix(experiments.default_condition_specs(seeds))[1]
    elif name in ("scaling", "wsa_barrier"):
        pairs = tuple((seeds[i], seeds[i + 1]) for i in range(0, len(seeds) - 1, 2))
        report = fn(seed_pairs=pairs)
    elif name == "window":
        report = fn(seed=seeds[0])
    else:
        report = fn(seeds=seeds)
    run.write(f"{name}.csv", report.to_csv())
    run.write(f"{name}.json", report.to_json())


HANDLERS = {
    "train": cmd_train,
    "scope": cmd_scope,
    "fuse-scope": cmd_fuse,
    "interpolate": cmd_interpolate,
    "match": cmd_match,
    "scale": cmd_scale,
    "landscape": cmd_landscape,
    "fl": cmd_fl,
    "study": cmd_study,
}


def _assign(text: str, dotted: str, value: str) -> str:
    """Append or merge a ``section.key = value`` override into TOML text."""
    import tomli_w

    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib

    data = tomllib.loads(text) if text.strip() else {}
    try:
        parsed = tomllib.loads(f"v = {value}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value
    node = data
    parts = dotted.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = parsed
    return tomli_w.dumps(data)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scopealign", description="Weight-scope alignment experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML experiment config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. fl.rounds=10")
        p.add_argument("--output-dir")
        p.add_argument("--seed", type=int)
        for flag, key, typ in SHORTCUTS[name]:
            p.add_argument(flag, dest="short_" + key.replace(".", "__"), type=typ, metavar=key.split(".")[-1].upper(),
                           help=f"shortcut for --set {key}=...")
        if name == "fuse-scope":
            p.add_argument("scopes", nargs="*", help="scope report JSON files")
    return parser


def resolve(args: argparse.Namespace) -> ExperimentConfig:
    text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
    overrides = [("command", json.dumps(args.command))]
    if args.seed is not None:
        overrides.append(("seed", str(args.seed)))
    for flag, key, typ in SHORTCUTS[args.command]:
        v = getattr(args, "short_" + key.replace(".", "__"))
        if v is not None:
            overrides.append((key, json.dumps(v)))
    if getattr(args, "scopes", None):
        overrides.append(("fuse.scopes", json.dumps(list(args.scopes))))
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides.append((k.strip(), v.strip()))
    for k, v in overrides:
        text = _assign(text, k, v)
    cfg = parse_config(text)
    out = args.output_dir or os.environ.get("SCOPEALIGN_OUTPUT_DIR") or cfg.output_dir or "runs"
    cfg.output_dir = out
    threads = os.environ.get("SCOPEALIGN_THREADS")
    if threads:
        try:
            cfg["fl"]["threads"] = max(1, int(threads))
        except ValueError as exc:
            raise ConfigError(f"SCOPEALIGN_THREADS must be an integer, got {threads!r}", field="threads") from exc
    return cfg


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, RegularizerConfigError)):
        return EXIT_CONFIG
    if isinstance(exc, OutputExists):
        return EXIT_EXISTS
    if isinstance(exc, (NumericError, TrainingDiverged)) or isinstance(exc.__cause__, (NumericError, TrainingDiverged)):
        return EXIT_NUMERIC
    if isinstance(exc, (ValueError, FileNotFoundError, PartitionError, ClientError, KeyError)):
        return EXIT_INPUT
    return EXIT_INTERNAL


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        run = Run(cfg)
        # the resolved copy goes first so a failed run still records its inputs
        run.write("config.toml", cfg.to_toml())
        HANDLERS[cfg.command](cfg, run)
    except Exception as exc:  # noqa: BLE001 - mapped to an exit code below
        code = _exit_code(exc)
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
        field = getattr(exc, "field", None)
        if field:
            err["field"] = field
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return code
    print(json.dumps({"status": "ok", "artifacts": run.written}, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
