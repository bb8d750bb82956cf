"""Ablation grids: train model variants over several seeds and tabulate macro-F1."""

from __future__ import annotations

import csv
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .data import GroupWindow
from .model import ModelConfig
from .training import FocalConfig, OptimizerConfig, train

__all__ = ["VARIANTS", "SWEEPS", "CellResult", "variant_config", "run_cell", "run_grid", "summarize",
           "write_grid_csv", "write_summary_csv"]

# model-config overrides per named variant
VARIANTS: dict[str, dict] = {
    "full": {},
    "no-cpa": {"use_cpa": False},
    "no-self": {"use_self_attention": False},
    "reverse-direction": {"direction": "self_to_other"},
}

SWEEPS: dict[str, dict] = {
    "M1": {"M": 1},
    "M2": {"M": 2},
    "M3": {"M": 3},
    "dx20": {"d_x": 20},
    "dx100": {"d_x": 100},
}


@dataclass
class CellResult:
    variant: str
    seed: int
    macro_f1: float
    weighted_f1: float
    accuracy: float
    best_epoch: int
    seconds: float


def variant_config(base: ModelConfig, overrides: dict, seed: int | None = None) -> ModelConfig:
    d = {**base.to_dict(), **overrides}
    if seed is not None:
        d["seed"] = seed
    return ModelConfig.from_dict(d)


def run_cell(name: str, cfg: ModelConfig, opt: OptimizerConfig, focal: FocalConfig,
             train_samples: Sequence[GroupWindow], val_samples: Sequence[GroupWindow]) -> CellResult:
    t0 = time.perf_counter()
    res = train(cfg, opt, focal, train_samples, val_samples)
    best = res.history[res.best_epoch]
    return CellResult(name, cfg.seed, res.best_macro_f1, best["weighted_f1"], best["accuracy"],
                      res.best_epoch, time.perf_counter() - t0)


def run_grid(base: ModelConfig, opt: OptimizerConfig, focal: FocalConfig,
             train_samples: Sequence[GroupWindow], val_samples: Sequence[GroupWindow],
             variants: dict[str, dict], seeds: Sequence[int], jobs: int = 1) -> list[CellResult]:
    """One training run per (variant, seed); cells share nothing, so ``jobs > 1`` runs them in processes."""
    cells = [(name, variant_config(base, over, s)) for name, over in variants.items() for s in seeds]
    if jobs <= 1:
        return [run_cell(name, cfg, opt, focal, train_samples, val_samples) for name, cfg in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(run_cell, name, cfg, opt, focal, train_samples, val_samples)
                   for name, cfg in cells]
        return [f.result() for f in futures]


def summarize(results: Sequence[CellResult]) -> list[dict]:
    """Mean and sample standard deviation of macro-F1 per variant, in first-seen order."""
    out = []
    for name in dict.fromkeys(r.variant for r in results):
        vals = np.array([r.macro_f1 for r in results if r.variant == name])
        sd = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out.append({"variant": name, "n": len(vals), "macro_f1_mean": float(vals.mean()), "macro_f1_sd": sd})
    return out


def write_grid_csv(results: Sequence[CellResult], path) -> None:
    fields = list(CellResult.__dataclass_fields__)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in results:
            w.writerow(asdict(r))


def write_summary_csv(summary: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["variant", "n", "macro_f1_mean", "macro_f1_sd"])
        w.writeheader()
        w.writerows(summary)
