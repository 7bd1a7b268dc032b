"""Command-line entry point: ``swgcn {preprocess,synth,train,eval,report}``.

Every command writes ``manifest.json`` into its output directory with the
resolved configuration, seed and package version. Failures exit nonzero after
printing one line ``error[<category>]: <message>`` to stderr.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, fields

from . import __version__
from .data import (
    DataError,
    SyntheticConfig,
    generate_synthetic,
    load_interactions,
    load_split,
    preprocess,
    save_split,
    temporal_split,
    write_interactions,
)
from .training import TrainConfig, TrainingError, fit


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


EXIT_CODES = {"config": 2, "data": 3, "io": 4, "training": 5, "report": 6}


@dataclass
class RunConfig(TrainConfig):
    """Training hyperparameters plus data and output plumbing."""
    dataset: str = ""
    raw: str = ""
    behaviors: tuple = ()
    columns: tuple = ("user", "item", "behavior", "timestamp")
    delimiter: str = "\t"
    skip_header: bool = False
    min_target_count: int = 0
    dedup: bool = True
    filter_items: bool = True
    out: str = "run"
    checkpoint_every: int = 0

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        values = asdict(base) if base else {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split(" #", 1)[0].strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise CliError("config", f"line {n}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            values[key] = raw
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise CliError("config", f"unknown config keys: {', '.join(sorted(unknown))}")
        parsed = {k: _parse(v, known[k].default) for k, v in values.items()}
        try:
            return cls(**parsed)
        except ValueError as exc:
            raise CliError("config", str(exc)) from None


def _format(v) -> str:
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if v == "\t":
        return "tab"
    return str(v)


def _parse(raw, default):
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("on", "off", "true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("on", "true", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(int(s) for s in items) if default and isinstance(default[0], int) else tuple(items)
    except ValueError:
        raise CliError("config", f"cannot parse {raw!r}") from None
    return "\t" if raw == "tab" else raw


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

# flag -> RunConfig key; flags always win over the config file
FLAG_KEYS = {
    "dataset": "dataset", "raw": "raw", "behaviors": "behaviors", "variant": "variant",
    "lambda_s": "lambda_s", "lambda_a": "lambda_a", "p_message": "p_message",
    "sat_mode": "sat_penalty_mode", "degree_mode": "degree_mode", "k_list": "k_list",
    "seed": "seed", "mask_train": "mask_train", "out": "out", "epochs": "max_epochs",
    "patience": "patience", "batch_size": "batch_size", "lr": "learning_rate", "dim": "d",
    "min_target_count": "min_target_count", "checkpoint_every": "checkpoint_every",
}


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat 'key = value' config file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)


def _train_flags(p: argparse.ArgumentParser):
    p.add_argument("--dataset", help="split directory written by preprocess/synth")
    p.add_argument("--variant", choices=["base", "swgcn_t", "no_sat", "no_tpw"])
    p.add_argument("--lambda_s", "--lambda-s", dest="lambda_s")
    p.add_argument("--lambda_a", "--lambda-a", dest="lambda_a")
    p.add_argument("--p-message", "--p_message", dest="p_message")
    p.add_argument("--sat-mode", dest="sat_mode", choices=["signed", "squared"])
    p.add_argument("--degree-mode", dest="degree_mode", choices=["weighted", "structural"])
    p.add_argument("--k-list", dest="k_list", help="comma-separated cutoffs")
    p.add_argument("--mask-train", dest="mask_train", choices=["on", "off"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swgcn", description="Synergy-weighted multi-behavior GCN recommender")
    parser.add_argument("--version", action="version", version=f"swgcn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="raw interaction log -> deduplicated, filtered temporal split")
    _common(p)
    p.add_argument("--raw", help="raw interaction file")
    p.add_argument("--behaviors", help="ordered behavior labels, target last")
    p.add_argument("--min-target-count", dest="min_target_count")

    p = sub.add_parser("synth", help="planted-synergy synthetic dataset plus affinity oracle")
    _common(p)
    p.add_argument("--users", type=int, default=500)
    p.add_argument("--items", type=int, default=300)
    p.add_argument("--counts", default="2500,1500,3000", help="edges per behavior, target last")
    p.add_argument("--synergy", type=float, default=0.9)

    p = sub.add_parser("train", help="fit a model with early stopping and evaluate on test")
    _common(p)
    _train_flags(p)
    p.add_argument("--epochs")
    p.add_argument("--patience")
    p.add_argument("--batch-size", dest="batch_size")
    p.add_argument("--lr")
    p.add_argument("--dim")
    p.add_argument("--checkpoint-every", dest="checkpoint_every")

    p = sub.add_parser("eval", help="score a checkpoint on the val or test split")
    _common(p)
    _train_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["val", "test"], default="test")

    p = sub.add_parser("report", help="per-user interaction-weight table by behavior combination")
    _common(p)
    p.add_argument("--dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--users", required=True, help="comma-separated external user ids")
    p.add_argument("--plot", action="store_true", help="also write a heat-map PNG")
    return parser


def resolve_config(args) -> RunConfig:
    base = RunConfig()
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                base = RunConfig.from_text(fh.read())
        except OSError as exc:
            raise CliError("io", f"cannot read config: {exc}") from None
    overrides = {}
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value if isinstance(value, str) else str(value)
    return RunConfig.from_mapping({**asdict(base), **overrides}) if overrides else base


def write_manifest(out: str, command: str, config: RunConfig, extra: dict | None = None,
                   name: str = "manifest.json"):
    os.makedirs(out, exist_ok=True)
    cfg = asdict(config)
    cfg["delimiter"] = _format(cfg["delimiter"])
    man = {"command": command, "version": __version__, "seed": config.seed, "config": cfg}
    man.update(extra or {})
    with open(os.path.join(out, name), "w", encoding="utf-8") as fh:
        json.dump(man, fh, indent=1, sort_keys=True)
    with open(os.path.join(out, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(config.to_text())


def _counts_only(man: dict) -> dict:
    return {k: v for k, v in man.items() if k not in ("user_ids", "item_ids", "eval_users")}


def _load_dataset(cfg: RunConfig):
    if not cfg.dataset:
        raise CliError("config", "no dataset given (--dataset or 'dataset =' in the config)")
    if not os.path.exists(os.path.join(cfg.dataset, "manifest.json")):
        raise CliError("io", f"{cfg.dataset} is not a split directory (manifest.json missing)")
    return load_split(cfg.dataset)


def _load_model(path):
    from .model import load_checkpoint
    if not os.path.isfile(path):
        raise CliError("io", f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError("io", f"unreadable checkpoint {path}: {exc}") from None


def _write_eval(out: str, report, stem: str):
    with open(os.path.join(out, f"{stem}.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    with open(os.path.join(out, f"{stem}.csv"), "w", encoding="utf-8") as fh:
        fh.write(report.to_csv())


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_preprocess(args) -> int:
    cfg = resolve_config(args)
    if not cfg.raw or not cfg.behaviors:
        raise CliError("config", "preprocess needs a raw file and a behavior vocabulary")
    records = load_interactions(cfg.raw, cfg.behaviors, cfg.columns, cfg.delimiter, cfg.skip_header)
    dataset = preprocess(records, cfg.behaviors, cfg.min_target_count, cfg.dedup, cfg.filter_items)
    split = temporal_split(dataset)
    # the split's own manifest.json is what load_split reads, so the run manifest gets another name
    man = save_split(split, cfg.out)
    write_manifest(cfg.out, "preprocess", cfg, {"dataset": _counts_only(man)}, name="run_manifest.json")
    print(f"{man['num_users']} users, {man['num_items']} items, counts {man['counts']}")
    return 0


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    counts = [int(c) for c in args.counts.split(",")]
    syn = SyntheticConfig(num_users=args.users, num_items=args.items, num_behaviors=len(counts),
                          interactions_per_behavior=counts, synergy_strength=args.synergy, seed=cfg.seed)
    records, affinity = generate_synthetic(syn)
    os.makedirs(cfg.out, exist_ok=True)
    write_interactions(os.path.join(cfg.out, "interactions.tsv"), records, syn.behavior_names)
    affinity.save(os.path.join(cfg.out, "affinity.npz"))
    split = temporal_split(preprocess(records, syn.behavior_names))
    man = save_split(split, cfg.out)
    cfg = RunConfig.from_mapping({**asdict(cfg), "behaviors": tuple(syn.behavior_names)})
    write_manifest(cfg.out, "synth", cfg, {"synthetic": asdict(syn), "dataset": _counts_only(man)},
                   name="run_manifest.json")
    print(f"{len(records)} interactions, {man['num_eval_users']} evaluation users -> {cfg.out}")
    return 0


def cmd_train(args) -> int:
    from .evaluation import evaluate
    from .model import save_checkpoint

    cfg = resolve_config(args)
    split = _load_dataset(cfg)
    tc = cfg.train_config()
    os.makedirs(cfg.out, exist_ok=True)
    write_manifest(cfg.out, "train", cfg)
    result = fit(split, tc, log_path=os.path.join(cfg.out, "metrics.jsonl"),
                 checkpoint_path=os.path.join(cfg.out, "checkpoint_last.npz"),
                 checkpoint_every=cfg.checkpoint_every)
    save_checkpoint(result.model, os.path.join(cfg.out, "checkpoint.npz"), asdict(tc), tc.seed)
    report = evaluate(result.model, split, tc, which="test")
    _write_eval(cfg.out, report, "report_test")
    print(f"best epoch {result.best_epoch}, val HR@10 {result.best_val_hr:.4f}, "
          f"test HR@10 {report.hr.get(10, float('nan')):.4f}")
    return 0


def _checkpoint_config(args, meta) -> RunConfig:
    """Config file/flags over the hyperparameters stored in the checkpoint."""
    stored = {k: v for k, v in meta.get("hyperparameters", {}).items() if k in {f.name for f in fields(RunConfig)}}
    base = RunConfig.from_mapping(stored)
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            base = RunConfig.from_text(fh.read(), base)
    overrides = {key: str(getattr(args, flag)) for flag, key in FLAG_KEYS.items()
                 if getattr(args, flag, None) is not None}
    return RunConfig.from_mapping({**asdict(base), **overrides})


def cmd_eval(args) -> int:
    from .evaluation import evaluate

    model, meta = _load_model(args.checkpoint)
    cfg = _checkpoint_config(args, meta)
    split = _load_dataset(cfg)
    if (split.train.num_users, split.train.num_items) != (model.num_users, model.num_items):
        raise CliError("data", "checkpoint and dataset disagree on user/item counts")
    report = evaluate(model, split, cfg.train_config(), which=args.split)
    write_manifest(cfg.out, "eval", cfg, {"checkpoint": os.path.abspath(args.checkpoint)})
    _write_eval(cfg.out, report, f"report_{args.split}")
    sys.stdout.write(report.to_text())
    return 0


def cmd_report(args) -> int:
    from .evaluation import plot_synergy, synergy_report

    model, meta = _load_model(args.checkpoint)
    cfg = _checkpoint_config(args, meta)
    split = _load_dataset(cfg)
    users = [u.strip() for u in args.users.split(",") if u.strip()]
    try:
        report = synergy_report(model, split.train, users)
    except KeyError as exc:
        raise CliError("report", str(exc.args[0])) from None
    write_manifest(cfg.out, "report", cfg, {"checkpoint": os.path.abspath(args.checkpoint), "users": users})
    with open(os.path.join(cfg.out, "synergy.csv"), "w", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    if args.plot:
        plot_synergy(report, os.path.join(cfg.out, "synergy.png"))
    sys.stdout.write(report.to_csv())
    return 0


COMMANDS = {"preprocess": cmd_preprocess, "synth": cmd_synth, "train": cmd_train,
            "eval": cmd_eval, "report": cmd_report}


def main(argv=None) -> int:
    threads = os.environ.get("SWGCN_THREADS")
    args = build_parser().parse_args(argv)
    try:
        if threads:
            import torch
            try:
                torch.set_num_threads(max(1, int(threads)))
            except ValueError:
                raise CliError("config", f"SWGCN_THREADS must be an integer, got {threads!r}") from None
        return COMMANDS[args.command](args)
    except CliError as exc:
        category, message = exc.category, str(exc)
    except DataError as exc:
        category, message = "data", str(exc)
    except TrainingError as exc:
        category, message = "training", str(exc)
    except ValueError as exc:
        category, message = "config", str(exc)
    except OSError as exc:
        category, message = "io", str(exc)
    print(f"error[{category}]: {' '.join(message.split())}", file=sys.stderr)
    return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
