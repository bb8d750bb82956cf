"""Command line: generate, train, eval, export-attention and ablation-grid.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.
``MULTIPAR_SEED`` overrides the seed in config files; explicit flags override both.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from .data import DataError, load_jsonl, split_by_group
from .export import export_attention
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .study import SWEEPS, VARIANTS, run_grid, summarize, write_grid_csv, write_summary_csv
from .synthetic import PRESETS, ContingencySpec, load_truth, preset, save_dataset
from .tensor import ConfigError, DegenerateRowError, NumericalError, ShapeError
from .training import FocalConfig, LeakageError, OptimizerConfig, configs_to_dict, evaluate, train

log = logging.getLogger("multipar")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

ABLATIONS = {"no-cpa": VARIANTS["no-cpa"], "no-self": VARIANTS["no-self"],
             "reverse-direction": VARIANTS["reverse-direction"]}


# -- manifest ---------------------------------------------------------------


def git_blob_hash(path) -> str:
    """SHA-1 of ``blob <size>\\0<content>``, the content id git would give the file."""
    data = Path(path).read_bytes()
    h = hashlib.sha1(f"blob {len(data)}\0".encode())
    h.update(data)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int | None
    datasets: dict[str, str] = field(default_factory=dict)  # path -> content hash
    outputs: list[str] = field(default_factory=list)
    started: str = ""
    finished: str = ""

    def write(self, out_dir: Path) -> Path:
        self.finished = _now()
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2))
        return path


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


# -- config -----------------------------------------------------------------

RUN_KEYS = {"model", "optimizer", "focal", "split"}


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            out = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(out, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return out


def _env_seed() -> int | None:
    raw = os.environ.get("MULTIPAR_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"MULTIPAR_SEED must be an integer, got {raw!r}") from exc


def _build(cls, values: dict, section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def load_run_config(path, args) -> tuple[ModelConfig, OptimizerConfig, FocalConfig, dict]:
    """Merge file, environment and flag values into the three configs plus split settings."""
    raw = _read_json(path) if path else {}
    unknown = set(raw) - RUN_KEYS
    if unknown:
        raise ConfigError(f"config: unknown sections {sorted(unknown)}; expected {sorted(RUN_KEYS)}")
    model = dict(raw.get("model", {}))
    optim = dict(raw.get("optimizer", {}))
    focal = dict(raw.get("focal", {}))
    split = {"val_fraction": 0.25, "seed": 0, **raw.get("split", {})}
    env = _env_seed()
    if env is not None:
        model["seed"] = env
    if getattr(args, "seed", None) is not None:
        model["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        optim["epochs"] = args.epochs
    if getattr(args, "lr", None) is not None:
        optim["lr0"] = args.lr
    if getattr(args, "ablate", None):
        model.update(ABLATIONS[args.ablate])
    if not 0 < float(split["val_fraction"]) < 1:
        raise ConfigError(f"split.val_fraction must lie in (0, 1), got {split['val_fraction']}")
    return (_build(ModelConfig, model, "model"), _build(OptimizerConfig, optim, "optimizer"),
            _build(FocalConfig, focal, "focal"), split)


def _load_data(path):
    samples = load_jsonl(path)
    if not samples:
        raise DataError(f"{path}: dataset is empty")
    return samples


def _splits(args, split: dict):
    data = _load_data(args.data)
    datasets = {str(args.data): git_blob_hash(args.data)}
    if args.val:
        val = _load_data(args.val)
        datasets[str(args.val)] = git_blob_hash(args.val)
        return data, val, datasets
    fr = float(split["val_fraction"])
    tr, va = split_by_group(data, [1 - fr, fr], int(split["seed"]))
    if not tr or not va:
        raise DataError(f"{args.data}: too few groups for a train/validation split")
    return tr, va, datasets


def _fit_dims(cfg: ModelConfig, sample) -> ModelConfig:
    """Take P, k and F from the data."""
    P, k, F = sample.features.shape
    return dataclasses.replace(cfg, P=P, k=k, F=F)


def _write_confusion(conf, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred", "0", "1", "2", "3"])
        for c, row in enumerate(conf):
            w.writerow([c, *[int(v) for v in row]])


# -- commands ---------------------------------------------------------------


def cmd_generate(args) -> int:
    out = Path(args.out)
    if args.spec:
        spec_dict = _read_json(args.spec)
    else:
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
        spec_dict = preset(args.preset).to_dict()
    seed = args.seed if args.seed is not None else _env_seed()
    if seed is not None:
        spec_dict["seed"] = seed
    spec = ContingencySpec.from_dict(spec_dict)
    if args.n < 1:
        raise ConfigError(f"--n must be >= 1, got {args.n}")
    manifest = RunManifest("generate", sys.argv[1:], {"spec": spec.to_dict(), "n": args.n}, spec.seed,
                           started=_now())
    data, truth = save_dataset(spec, args.n, out)
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2))
    manifest.datasets = {str(data): git_blob_hash(data), str(truth): git_blob_hash(truth)}
    manifest.outputs = [data.name, truth.name, "spec.json"]
    manifest.write(out)
    print(f"wrote {args.n} windows to {data}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, opt, focal, split = load_run_config(args.config, args)
    tr, va, datasets = _splits(args, split)
    cfg = _fit_dims(cfg, tr[0])
    variant = args.ablate or "full"
    run_dir = Path(args.out) / f"{variant}-seed{cfg.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("train", sys.argv[1:], {**configs_to_dict(cfg, opt, focal), "split": split},
                           cfg.seed, datasets, started=_now())
    metrics_path = run_dir / "metrics.jsonl"
    with open(metrics_path, "w") as fh:
        def on_epoch(row):
            fh.write(json.dumps(row) + "\n")
            fh.flush()
            log.info("epoch %d macro_f1 %.4f", row["epoch"], row["macro_f1"])
        result = train(cfg, opt, focal, tr, va, on_epoch=on_epoch)
    save_checkpoint(result.model, run_dir / "checkpoint.json",
                    extra={"best_epoch": result.best_epoch, "best_macro_f1": result.best_macro_f1})
    _write_confusion(result.history[result.best_epoch]["confusion"], run_dir / "confusion.csv")
    manifest.outputs = ["checkpoint.json", "metrics.jsonl", "confusion.csv"]
    manifest.write(run_dir)
    print(json.dumps({"run_dir": str(run_dir), "best_epoch": result.best_epoch,
                      "best_macro_f1": result.best_macro_f1}))
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    samples = _load_data(args.data)
    shape = samples[0].features.shape
    want = (model.cfg.P, model.cfg.k, model.cfg.F)
    if shape != want:
        raise ShapeError(f"data has (P, k, F) = {shape} but the checkpoint expects {want}")
    report = evaluate(model, samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2))
    _write_confusion(report.confusion, out / "confusion.csv")
    RunManifest("eval", sys.argv[1:], {"model": model.cfg.to_dict()}, model.cfg.seed,
                {str(args.data): git_blob_hash(args.data), str(args.checkpoint): git_blob_hash(args.checkpoint)},
                ["metrics.json", "confusion.csv"], started=_now()).write(out)
    print(json.dumps(report.to_dict()))
    return EXIT_OK


def cmd_export_attention(args) -> int:
    model = load_checkpoint(args.checkpoint)
    samples = _load_data(args.data)
    if not 0 <= args.sample < len(samples):
        raise DataError(f"sample {args.sample} not in {args.data} ({len(samples)} windows)")
    if not 0 <= args.target < model.cfg.P:
        raise ConfigError(f"target {args.target} out of range for P={model.cfg.P}")
    truth_path = Path(args.truth) if args.truth else Path(args.data).with_name("truth.jsonl")
    truth = None
    if truth_path.exists():
        records = load_truth(truth_path)
        if len(records) != len(samples):
            raise DataError(f"{truth_path} has {len(records)} records for {len(samples)} windows")
        truth = records[args.sample]
    out = Path(args.out)
    summary = export_attention(model, samples[args.sample], args.target, out, str(args.sample), truth)
    RunManifest("export-attention", sys.argv[1:], {"model": model.cfg.to_dict()}, model.cfg.seed,
                {str(args.data): git_blob_hash(args.data)}, summary["files"], started=_now()).write(out)
    print(json.dumps({k: v for k, v in summary.items() if k != "files"}))
    return EXIT_OK


def cmd_ablation_grid(args) -> int:
    cfg, opt, focal, split = load_run_config(args.config, args)
    tr, va, datasets = _splits(args, split)
    cfg = _fit_dims(cfg, tr[0])
    variants = dict(VARIANTS)
    if args.sweeps:
        variants.update(SWEEPS)
    seeds = args.seeds if args.seeds else [cfg.seed, cfg.seed + 1, cfg.seed + 2]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("ablation-grid", sys.argv[1:],
                           {**configs_to_dict(cfg, opt, focal), "split": split, "variants": variants,
                            "seeds": seeds}, cfg.seed, datasets, started=_now())
    results = run_grid(cfg, opt, focal, tr, va, variants, seeds, jobs=args.jobs)
    write_grid_csv(results, out / "grid.csv")
    summary = summarize(results)
    write_summary_csv(summary, out / "summary.csv")
    manifest.outputs = ["grid.csv", "summary.csv"]
    manifest.write(out)
    for row in summary:
        print(f"{row['variant']:>18}  macro-F1 {row['macro_f1_mean']:.4f} ± {row['macro_f1_sd']:.4f}")
    return EXIT_OK


# -- entry ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multipar", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic contingency dataset")
    src = g.add_mutually_exclusive_group()
    src.add_argument("--spec", help="ContingencySpec JSON file")
    src.add_argument("--preset", default="default", help=f"one of {sorted(PRESETS)}")
    g.add_argument("--n", type=int, required=True, help="number of windows")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    def run_flags(q):
        q.add_argument("--config", help="JSON with model / optimizer / focal / split sections")
        q.add_argument("--data", required=True, help="training JSONL")
        q.add_argument("--val", help="validation JSONL; default is a group split of --data")
        q.add_argument("--out", required=True)
        q.add_argument("--seed", type=int)
        q.add_argument("--epochs", type=int)
        q.add_argument("--lr", type=float)

    t = sub.add_parser("train", help="train one model")
    run_flags(t)
    t.add_argument("--ablate", choices=sorted(ABLATIONS))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-attention", help="write attention maps of one window and target")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--sample", type=int, required=True, help="window index in --data")
    x.add_argument("--target", type=int, required=True)
    x.add_argument("--truth", help="truth JSONL; default is truth.jsonl next to --data")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_attention)

    a = sub.add_parser("ablation-grid", help="train every variant over several seeds")
    run_flags(a)
    a.add_argument("--seeds", type=int, nargs="+")
    a.add_argument("--sweeps", action="store_true", help="add the M and d_x sweeps")
    a.add_argument("--jobs", type=int, default=1)
    a.set_defaults(func=cmd_ablation_grid)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NumericalError, DegenerateRowError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, LeakageError, ShapeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
