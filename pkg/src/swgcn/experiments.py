"""Scaled-down multi-seed experiments on planted-synergy synthetic data.

Used by the acceptance suite and the demo scripts; each call trains one model
per (setting, seed) pair and reports median test HR@10.
"""
from __future__ import annotations

import gc
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import SyntheticConfig, generate_synthetic, preprocess, temporal_split
from .evaluation import evaluate
from .graph import BehaviorGraph
from .model import SWGCN, forward
from .training import TrainConfig, fit

# 25 fits (ablation plus self-loop sweep) take roughly 7 minutes on one core.
SYNTH_DEFAULTS = dict(num_users=500, num_items=300, num_behaviors=3,
                      interactions_per_behavior=[2500, 1500, 3000], synergy_strength=0.9)
TRAIN_DEFAULTS = dict(d=32, batch_size=256, learning_rate=5e-3, p_message=0.2,
                      max_epochs=80, patience=20, k_list=(10,))


def planted_split(seed: int, **overrides):
    cfg = SyntheticConfig(**{**SYNTH_DEFAULTS, **overrides, "seed": seed})
    records, _ = generate_synthetic(cfg)
    return temporal_split(preprocess(records, cfg.behavior_names))


@dataclass
class SweepResult:
    settings: list[str]
    seeds: list[int]
    hr: dict[str, list[float]] = field(default_factory=dict)
    seconds: float = 0.0

    def median(self, name: str) -> float:
        return float(np.median(self.hr[name]))

    def table(self) -> str:
        lines = [f"{'setting':<14} median  " + "  ".join(f"s{s}" for s in self.seeds)]
        for name in self.settings:
            vals = "  ".join(f"{v:.3f}" for v in self.hr[name])
            lines.append(f"{name:<14} {self.median(name):.4f}  {vals}")
        return "\n".join(lines)


def sweep(settings: dict[str, dict], seeds=range(5), train_overrides=None, synth_overrides=None,
          verbose: bool = False) -> SweepResult:
    """Fit every named setting on every seed's dataset; data and init share the seed."""
    seeds = list(seeds)
    result = SweepResult(list(settings), seeds, {name: [] for name in settings})
    start = time.perf_counter()
    for seed in seeds:
        split = planted_split(seed, **(synth_overrides or {}))
        for name, changes in settings.items():
            cfg = TrainConfig(**{**TRAIN_DEFAULTS, **(train_overrides or {}), **changes, "seed": seed})
            res = fit(split, cfg)
            hr = evaluate(res.model, split, cfg, which="test", k_list=(10,)).hr[10]
            result.hr[name].append(hr)
            if verbose:
                print(f"seed {seed} {name}: test HR@10 {hr:.4f} (best epoch {res.best_epoch})", flush=True)
    result.seconds = time.perf_counter() - start
    return result


ABLATION = {"base": {"variant": "base"}, "no_sat": {"variant": "no_sat"}, "no_tpw": {"variant": "no_tpw"}}
SELF_LOOP = {f"lambda_s={v}": {"lambda_s": v} for v in (0.0, 0.2, 0.5, 1.0)}


def forward_time_ratio(scale: int = 2, num_users: int = 400, num_items: int = 300,
                       edges: int = 6000, num_behaviors: int = 3, dim: int = 16,
                       repeats: int = 15, seed: int = 0) -> float:
    """Best-of-``repeats`` forward time at ``scale``x users, items and edges over
    the time at 1x. The two sizes are timed alternately so background load
    hits both alike."""
    rng = np.random.default_rng(seed)
    setups = []
    for s in (1, scale):
        nu, ni = num_users * s, num_items * s
        graphs = []
        for r in range(num_behaviors):
            cells = rng.choice(nu * ni, edges * s, replace=False)
            graphs.append(BehaviorGraph(r, nu, ni, cells // ni, cells % ni))
        setups.append((SWGCN(nu, ni, dim, num_behaviors, seed=seed), graphs))
    best = [float("inf"), float("inf")]
    gc.collect()
    with torch.no_grad():
        for model, graphs in setups:
            forward(model, graphs)
        for _ in range(repeats):
            for k, (model, graphs) in enumerate(setups):
                t0 = time.perf_counter()
                forward(model, graphs)
                best[k] = min(best[k], time.perf_counter() - t0)
    return best[1] / best[0]
