"""Command-line front end: ``cfx synth | label | train | effects | report | eval | gradcheck``.

Configuration is a flat set of keys (see ``RunConfig``). Values come from, in
increasing precedence: built-in defaults, the ``CFX_SEED`` environment
variable (seed only), a ``--config`` file of ``key = value`` lines, and
command-line flags. Every output carries the resolved configuration, a hash
of it (plus the digests of the input files) and the seed.

Exit codes: 0 success, 1 usage error, 2 data or contract error, 3 numerical
failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .dataset import load_dataset, split_indices, write_dataset
from .effects import (GROUPING_PRESETS, Grouping, estimate_effects, grouping_preset,
                      stratified_report, write_factual_distribution, write_group_report,
                      write_ite_csv, write_summary_json)
from .errors import CfxError, ContractError, DataError, NumericalError
from .network import ModelConfig, load_checkpoint, save_checkpoint
from .propensity import MatchPolicy, assign_preliminary_labels, load_labeled, write_labeled
from .scenario import Scenario
from .synthbench import SynthConfig, benchmark_metrics, generate_synthetic, load_truth, write_truth
from .training import (LossWeights, TrainConfig, gradient_check, random_small_config, split_labeled,
                       train, write_training_log)

log = logging.getLogger("cfx")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # model
    shared_layers: int = 4
    neurons: int = 128
    head_hidden: int = 256
    dropout: float = 0.3
    latent_dim: int = 10
    # training
    batch_size: int = 64
    epochs: int = 200
    patience: int = 20
    lr: float = 0.001
    lr_decay: float = 1.0
    split_train: float = 0.8
    split_val: float = 0.1
    split_test: float = 0.1
    # loss
    lambda1: float = 0.65
    lambda2: float = 0.35
    lambda_reg: float = 0.01
    # matching; caliper 0 means caliper_scale times the std of the logit scores
    caliper: float = 0.0
    caliper_scale: float = 0.1
    fallback: str = "nearest-euclidean"
    exact_treatments: bool = False
    propensity_iters: int = 3000
    # synthetic data
    n: int = 5000
    noise_scale: float = 1.0
    income_minority_corr: float = -0.4
    # inference
    mc_samples: int = 50
    # gradient check
    gradcheck_configs: int = 10
    gradcheck_tolerance: float = 1e-4

    def model_config(self) -> ModelConfig:
        return ModelConfig(shared_layers=self.shared_layers, neurons=self.neurons,
                           head_hidden=self.head_hidden, dropout=self.dropout,
                           latent_dim=self.latent_dim)

    def train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, epochs=self.epochs, patience=self.patience,
                           seed=self.seed, lr=self.lr, lr_decay=self.lr_decay)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda_reg)

    def match_policy(self) -> MatchPolicy:
        return MatchPolicy(caliper=self.caliper or None, caliper_scale=self.caliper_scale,
                           fallback=self.fallback, exact_treatments=self.exact_treatments,
                           iters=self.propensity_iters)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(n=self.n, seed=self.seed, noise_scale=self.noise_scale,
                           income_minority_corr=self.income_minority_corr)

    @property
    def split(self) -> tuple[float, float, float]:
        return (self.split_train, self.split_val, self.split_test)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


CONFIG_FIELDS = {f.name: f for f in fields(RunConfig)}
DEFAULTS = RunConfig()

# which keys each subcommand exposes as flags (all keys are accepted in --config files)
SECTIONS = {
    "model": ("shared_layers", "neurons", "head_hidden", "dropout", "latent_dim"),
    "train": ("batch_size", "epochs", "patience", "lr", "lr_decay",
              "split_train", "split_val", "split_test"),
    "loss": ("lambda1", "lambda2", "lambda_reg"),
    "match": ("caliper", "caliper_scale", "fallback", "exact_treatments", "propensity_iters"),
    "synth": ("n", "noise_scale", "income_minority_corr"),
    "infer": ("mc_samples",),
    "gradcheck": ("gradcheck_configs", "gradcheck_tolerance"),
}

KEY_HELP = {
    "shared_layers": "number of shared ReLU layers",
    "neurons": "units per shared layer",
    "head_hidden": "hidden units in each outcome head",
    "dropout": "dropout rate during training",
    "latent_dim": "dimension of the latent noise input",
    "batch_size": "mini-batch size",
    "epochs": "maximum training epochs",
    "patience": "early-stopping patience in epochs",
    "lr": "Adam learning rate",
    "lr_decay": "per-epoch learning-rate multiplier",
    "split_train": "training fraction",
    "split_val": "validation fraction",
    "split_test": "test fraction",
    "lambda1": "factual loss weight",
    "lambda2": "counterfactual loss weight",
    "lambda_reg": "L2 weight on head weight matrices",
    "caliper": "matching caliper on the logit score, 0 for caliper-scale x std",
    "caliper_scale": "caliper as a multiple of the logit-score std",
    "fallback": "when no donor is in the caliper: nearest-euclidean or reject",
    "exact_treatments": "prefer donors agreeing on all other treatments",
    "propensity_iters": "gradient-descent iterations per propensity fit",
    "n": "number of synthetic records",
    "noise_scale": "scale of the outcome noise",
    "income_minority_corr": "latent correlation of income and minority share",
    "mc_samples": "latent draws averaged per prediction",
    "gradcheck_configs": "number of random small networks to check",
    "gradcheck_tolerance": "maximum allowed relative gradient error",
}


def _convert(key: str, raw: str):
    kind = type(getattr(DEFAULTS, key))
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw.strip())
    except ValueError:
        raise UsageError(f"bad value for {key}: {raw!r} (expected {kind.__name__})") from None


def read_config_file(path: str | Path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read config file {path}: {e.strerror}") from None
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path} line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_FIELDS:
            raise UsageError(f"{path} line {lineno}: unknown config key {key!r}")
        out[key] = _convert(key, value)
    return out


def resolve_config(file_values: dict | None = None, flag_values: dict | None = None,
                   environ: dict | None = None) -> RunConfig:
    environ = os.environ if environ is None else environ
    values = {}
    if environ.get("CFX_SEED", "").strip():
        values["seed"] = _convert("seed", environ["CFX_SEED"])
    values.update(file_values or {})
    values.update({k: v for k, v in (flag_values or {}).items() if v is not None})
    unknown = set(values) - set(CONFIG_FIELDS)
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    return RunConfig(**values)


def file_digest(path: str | Path) -> str:
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror}") from None


def config_hash(cfg: RunConfig, command: str, inputs: Sequence[str] = (), extra: dict | None = None) -> str:
    doc = {"command": command, "config": cfg.to_dict(), "inputs": list(inputs), "extra": extra or {}}
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class RunContext:
    command: str
    config: RunConfig
    hash: str
    extra: dict

    @property
    def metadata(self) -> dict:
        return {"cfx_version": __version__, "command": self.command, "config_hash": self.hash,
                "seed": self.config.seed, "config": self.config.to_dict(), **self.extra}

    @property
    def comments(self) -> list[str]:
        return [f"cfx {self.command} config_hash={self.hash} seed={self.config.seed}",
                "config=" + json.dumps(self.config.to_dict(), sort_keys=True, separators=(",", ":")),
                *(f"{k}={json.dumps(v, sort_keys=True)}" for k, v in sorted(self.extra.items()))]


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser, sections: Sequence[str]) -> None:
    g = p.add_argument_group("configuration (override --config and CFX_SEED)")
    g.add_argument("--config", metavar="PATH", default=None,
                   help="flat key = value file (default: none)")
    g.add_argument("--seed", type=str, default=None,
                   help=f"global seed (default: $CFX_SEED if set, else {DEFAULTS.seed})")
    for sec in sections:
        for key in SECTIONS[sec]:
            default = getattr(DEFAULTS, key)
            shown = "auto" if key == "caliper" else default
            g.add_argument(_flag(key), dest=key, type=str, default=None, metavar="V",
                           help=f"{KEY_HELP[key]} (default: {shown})")


def _io(p, name, help, default=None, required=False):
    shown = "required" if required else (default or "derived from --out")
    p.add_argument(name, required=required, default=default, help=f"{help} (default: {shown})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cfx", description="Counterfactual severity-effect pipeline.")
    parser.add_argument("--version", action="version", version=f"cfx {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging (default: off)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset and its ground truth")
    _io(p, "--out", "dataset CSV to write", required=True)
    _io(p, "--truth", "ground-truth sidecar CSV")
    _add_config_flags(p, ["synth"])

    p = sub.add_parser("label", help="attach matched counterfactual labels to a dataset")
    _io(p, "--data", "input dataset CSV", required=True)
    _io(p, "--out", "labeled CSV to write", required=True)
    _add_config_flags(p, ["match"])

    p = sub.add_parser("train", help="train the two-head network on a labeled CSV")
    _io(p, "--data", "labeled CSV", required=True)
    _io(p, "--out", "checkpoint to write", required=True)
    _io(p, "--log", "training-log CSV")
    _add_config_flags(p, ["model", "train", "loss"])

    p = sub.add_parser("effects", help="per-record and average effects of a scenario")
    _io(p, "--model", "checkpoint", required=True)
    _io(p, "--data", "dataset CSV", required=True)
    _io(p, "--out", "per-record ITE CSV to write", required=True)
    _io(p, "--summary", "summary JSON")
    p.add_argument("--set", action="append", default=[], metavar="VAR=LEVEL",
                   help="treatment delta, repeatable (default: none, the identity scenario)")
    p.add_argument("--split", choices=("all", "train", "val", "test"), default="all",
                   help="records to use, by the checkpoint's split (default: all)")
    _add_config_flags(p, ["infer"])

    p = sub.add_parser("report", help="effects stratified by a confounder")
    _io(p, "--model", "checkpoint", required=True)
    _io(p, "--data", "dataset CSV", required=True)
    _io(p, "--out", "group report CSV to write", required=True)
    _io(p, "--factual-out", "observed severity distribution per bin")
    p.add_argument("--scenario", action="append", default=[], metavar="VAR=LEVEL[,VAR=LEVEL]",
                   help="scenario, repeatable (default: identity only)")
    p.add_argument("--group", required=True, metavar="PRESET|VAR:E0,E1,...",
                   help=f"grouping: one of {', '.join(GROUPING_PRESETS)} or explicit edges (default: required)")
    p.add_argument("--split", choices=("all", "train", "val", "test"), default="all",
                   help="records to use, by the checkpoint's split (default: all)")
    _add_config_flags(p, ["infer"])

    p = sub.add_parser("eval", help="factual and counterfactual error of the model and the matching baseline")
    _io(p, "--model", "checkpoint", required=True)
    _io(p, "--data", "labeled CSV the model was trained from", required=True)
    _io(p, "--truth", "ground-truth sidecar; without it y_star is the counterfactual reference")
    _io(p, "--out", "metrics JSON to write", required=True)
    _add_config_flags(p, ["infer"])

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients on small random networks")
    _io(p, "--out", "report JSON (default: standard output)")
    _add_config_flags(p, ["loss", "gradcheck"])
    return parser


def _derived(path: str, suffix: str) -> str:
    p = Path(path)
    return str(p.with_name(p.stem + suffix))


def _context(args, command: str, inputs: Sequence[str] = (), extra: dict | None = None) -> RunContext:
    file_values = read_config_file(args.config) if args.config else {}
    flags = {}
    for key in CONFIG_FIELDS:
        raw = getattr(args, key, None)
        if raw is not None:
            flags[key] = _convert(key, raw)
    try:
        cfg = resolve_config(file_values, flags)
    except ContractError as e:
        raise UsageError(str(e)) from None
    digests = [file_digest(p) for p in inputs]
    extra = extra or {}
    return RunContext(command, cfg, config_hash(cfg, command, digests, extra), extra)


def _write_json(doc: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _need(path: str) -> str:
    if not Path(path).is_file():
        raise DataError(f"no such file: {path}")
    return path


def _select(model, dataset, which: str):
    if which == "all":
        return dataset
    split = model.meta.get("split")
    if not split:
        raise DataError("checkpoint records no split; use --split all")
    if split["n"] != dataset.n:
        raise DataError(f"checkpoint split covers {split['n']} records, dataset has {dataset.n}")
    parts = split_indices(dataset.n, split["ratios"], split["seed"])
    return dataset.subset(parts[("train", "val", "test").index(which)])


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    ctx = _context(args, "synth")
    ds, truth = generate_synthetic(ctx.config.synth_config())
    write_dataset(ds, args.out, ctx.comments)
    write_truth(truth, args.truth or _derived(args.out, ".truth.csv"), ds.schema, ctx.comments)
    log.info("wrote %d records to %s", ds.n, args.out)
    return EXIT_OK


def cmd_label(args) -> int:
    ctx = _context(args, "label", [_need(args.data)])
    ds = load_dataset(args.data)
    labeled = assign_preliminary_labels(ds, ctx.config.match_policy(), ctx.config.seed)
    write_labeled(labeled, args.out, ctx.comments)
    if labeled.in_caliper is not None:
        log.info("labeled %d records, %d matched within the caliper",
                 labeled.n, int(labeled.in_caliper.sum()))
    return EXIT_OK


def cmd_train(args) -> int:
    ctx = _context(args, "train", [_need(args.data)])
    cfg = ctx.config
    labeled = load_labeled(args.data)
    tr, va, _ = split_labeled(labeled, cfg.split, cfg.seed)
    model = train(tr, va, cfg.model_config(), cfg.train_config(), cfg.loss_weights())
    model.meta.update(ctx.metadata)
    model.meta["split"] = {"n": labeled.n, "ratios": list(cfg.split), "seed": cfg.seed}
    save_checkpoint(model, args.out)
    write_training_log(model.log, args.log or _derived(args.out, ".log.csv"), ctx.comments)
    log.info("best epoch %d of %d", model.meta["best_epoch"], model.meta["epochs_run"])
    return EXIT_OK


def cmd_effects(args) -> int:
    ctx = _context(args, "effects", [_need(args.model), _need(args.data)],
                   {"scenario": sorted(args.set), "split": args.split})
    model = load_checkpoint(args.model)
    ds = _select(model, load_dataset(args.data, model.schema), args.split)
    scenario = Scenario.parse(args.set, model.schema)
    est = estimate_effects(model, ds, scenario, ctx.config.mc_samples, ctx.config.seed)
    write_ite_csv(est, args.out, ctx.comments)
    write_summary_json(est, args.summary or _derived(args.out, ".summary.json"), ctx.metadata)
    if est.unchanged_subset_empty:
        log.warning("every record changed severity level; ate_prob is reported as 0")
    return EXIT_OK


def _grouping(spec: str, dataset) -> Grouping:
    if spec in GROUPING_PRESETS:
        return grouping_preset(spec, dataset)
    if ":" not in spec:
        raise ContractError(
            f"unknown grouping {spec!r}; use one of {', '.join(GROUPING_PRESETS)} or VAR:E0,E1,...")
    var, edges = spec.split(":", 1)
    try:
        values = tuple(float(e) for e in edges.split(","))
    except ValueError:
        raise ContractError(f"bad bin edges in {spec!r}") from None
    return Grouping(var.strip(), values, spec)


def cmd_report(args) -> int:
    scen = args.scenario or ["identity"]
    ctx = _context(args, "report", [_need(args.model), _need(args.data)],
                   {"scenarios": scen, "group": args.group, "split": args.split})
    model = load_checkpoint(args.model)
    ds = _select(model, load_dataset(args.data, model.schema), args.split)
    scenarios = [Scenario.parse(s, model.schema) for s in scen]
    report = stratified_report(model, ds, scenarios, _grouping(args.group, ds),
                               ctx.config.mc_samples, ctx.config.seed)
    write_group_report(report, args.out, ctx.comments)
    write_factual_distribution(report, args.factual_out or _derived(args.out, ".factual.csv"),
                               ctx.comments)
    return EXIT_OK


def cmd_eval(args) -> int:
    inputs = [_need(args.model), _need(args.data)] + ([_need(args.truth)] if args.truth else [])
    ctx = _context(args, "eval", inputs)
    model = load_checkpoint(args.model)
    labeled = load_labeled(args.data, model.schema)
    split = model.meta.get("split") or {}
    if split.get("n") != labeled.n:
        raise DataError("labeled CSV does not match the checkpoint's training data")
    tr, _, te = split_labeled(labeled, split["ratios"], split["seed"])
    truth = load_truth(args.truth, model.schema) if args.truth else None
    rows = benchmark_metrics(model, tr, te, truth, ctx.config.mc_samples, ctx.config.seed)
    reference = "potential_outcomes" if truth is not None else "y_star"
    _write_json({"metadata": ctx.metadata, "n_test": te.n, "counterfactual_reference": reference,
                 "rows": rows}, args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ctx = _context(args, "gradcheck")
    cfg = ctx.config
    rng = np.random.default_rng(cfg.seed)
    results = []
    for i in range(cfg.gradcheck_configs):
        mc = random_small_config(rng)
        r = gradient_check(mc, seed=cfg.seed * 1000 + i, tolerance=cfg.gradcheck_tolerance,
                           w=cfg.loss_weights())
        results.append({"model_config": dataclasses.asdict(mc), "max_rel_error": r.max_rel_error,
                        "worst": r.worst, "n_checked": r.n_checked, "passed": r.passed})
    worst = max((r["max_rel_error"] for r in results), default=0.0)
    passed = all(r["passed"] for r in results)
    doc = {"metadata": ctx.metadata, "max_rel_error": worst, "tolerance": cfg.gradcheck_tolerance,
           "passed": passed, "configs": results}
    if args.out:
        _write_json(doc, args.out)
    else:
        json.dump(doc, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")
    if not passed:
        log.error("gradient check failed: max relative error %.3g > %.3g", worst, cfg.gradcheck_tolerance)
        return EXIT_NUMERICAL
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "label": cmd_label, "train": cmd_train, "effects": cmd_effects,
            "report": cmd_report, "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def run_cli(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as e:  # --help and --version
            return EXIT_OK if e.code in (None, 0) else EXIT_USAGE
        if args.command is None:
            raise UsageError("cfx: a subcommand is required: " + " | ".join(COMMANDS))
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="cfx: %(levelname)s: %(message)s", stream=sys.stderr)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"cfx: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (CfxError, OSError) as e:
        print(f"cfx: error: {e}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
