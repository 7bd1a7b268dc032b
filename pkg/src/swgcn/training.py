"""Losses, negative sampling, the Adam training loop, early stopping and the
finite-difference gradient check."""
from __future__ import annotations

import copy
import json
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from .graph import BehaviorGraph, graphs_from_dataset
from .model import VARIANTS, SWGCN, forward, sat_behaviors, score_pairs

SAT_MODES = ("signed", "squared")


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    pass


class SamplingError(ValueError):
    pass


@dataclass
class TrainConfig:
    lambda_a: float = 0.5
    lambda_s: float = 1.0
    gamma1: float = 1e-5
    gamma2: float = 1e-5
    learning_rate: float = 1e-3
    batch_size: int = 2048
    neg_samples: int = 4
    L: int = 3
    d: int = 32
    p_message: float = 0.2
    patience: int = 50
    max_epochs: int = 1000
    seed: int = 0
    variant: str = "base"
    sat_penalty_mode: str = "squared"
    degree_mode: str = "weighted"
    mask_train: bool = True
    k_list: tuple = (10, 20, 50, 100, 200)
    bpr_reduction: str = "sum"

    def __post_init__(self):
        self.k_list = tuple(int(k) for k in self.k_list)
        self.validate()

    def validate(self):
        checks = [
            (0.0 <= self.lambda_a <= 1.0, "lambda_a must lie in [0, 1]"),
            (self.lambda_s >= 0.0, "lambda_s must be non-negative"),
            (self.gamma1 >= 0.0 and self.gamma2 >= 0.0, "gamma1/gamma2 must be non-negative"),
            (self.learning_rate >= 0.0, "learning_rate must be non-negative"),
            (self.batch_size >= 1 and self.neg_samples >= 1, "batch_size/neg_samples must be positive"),
            (self.L >= 1 and self.d >= 1, "L and d must be positive"),
            (0.0 <= self.p_message < 1.0, "p_message must lie in [0, 1)"),
            (self.patience >= 1 and self.max_epochs >= 1, "patience/max_epochs must be positive"),
            (self.variant in VARIANTS, f"variant must be one of {VARIANTS}"),
            (self.sat_penalty_mode in SAT_MODES, f"sat_penalty_mode must be one of {SAT_MODES}"),
            (self.degree_mode in ("weighted", "structural"), "degree_mode must be weighted or structural"),
            (len(self.k_list) > 0 and min(self.k_list) >= 1, "k_list needs positive entries"),
            (self.bpr_reduction in ("sum", "mean"), "bpr_reduction must be sum or mean"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    def replace(self, **changes) -> "TrainConfig":
        return type(self)(**{**asdict(self), **changes})


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def sat_loss(tpw_maps, apv_maps, gamma1: float, included, mode: str = "squared") -> torch.Tensor:
    """Alignment between weigher weights and auxiliary distance scores.

    Mean per-edge penalty averaged over the included behaviors, plus
    ``gamma1 / |included|`` times the summed squared scores on observed edges.
    """
    if mode not in SAT_MODES:
        raise ValueError(f"mode must be one of {SAT_MODES}")
    included = list(included)
    if not included:
        return torch.zeros((), dtype=torch.float64)
    align, reg = 0.0, 0.0
    for r in included:
        w, w_aux = tpw_maps[r], apv_maps[r]
        if w.shape != w_aux.shape:
            raise ValueError(f"behavior {r}: weight maps cover different edge sets "
                             f"({tuple(w.shape)} vs {tuple(w_aux.shape)})")
        if w.numel() == 0:
            continue
        diff = w - w_aux
        delta = diff if mode == "signed" else diff ** 2
        align = align + delta.mean()
        reg = reg + (w_aux ** 2).sum()
    n = len(included)
    out = align / n + gamma1 * reg / n
    return out if torch.is_tensor(out) else torch.tensor(float(out), dtype=torch.float64)


def l2_norm_sq(params) -> torch.Tensor:
    if isinstance(params, torch.nn.Module):
        params = list(params.parameters())
    return sum((p ** 2).sum() for p in params)


def bpr_loss(pos_scores, neg_scores, params=(), gamma2: float = 0.0,
             reduction: str = "sum") -> torch.Tensor:
    """Summed ``-ln sigmoid(pos - neg)`` over triples plus ``gamma2 * ||params||^2``.

    ``reduction="mean"`` averages the pairwise term over triples instead, which
    keeps its scale independent of the batch size.
    """
    pos = torch.as_tensor(pos_scores, dtype=torch.float64).reshape(-1)
    neg = torch.as_tensor(neg_scores, dtype=torch.float64).reshape(-1)
    if pos.shape != neg.shape:
        raise ValueError("positive and negative scores must be aligned")
    pairwise = -torch.nn.functional.logsigmoid(pos - neg)
    loss = pairwise.mean() if reduction == "mean" and len(pairwise) else pairwise.sum()
    if gamma2:
        loss = loss + gamma2 * l2_norm_sq(params)
    return loss


def joint_loss(l_sat, l_bpr, lambda_a: float, variant: str = "base"):
    if variant in ("no_sat", "no_tpw"):
        return l_bpr
    return lambda_a * l_sat + (1.0 - lambda_a) * l_bpr


# ---------------------------------------------------------------------------
# negative sampling
# ---------------------------------------------------------------------------

class PositiveIndex:
    """Sorted ``user * num_items + item`` keys for fast membership tests."""

    def __init__(self, users, items, num_users: int, num_items: int):
        self.num_items = num_items
        self.keys = np.unique(np.asarray(users, np.int64) * num_items + np.asarray(items, np.int64))
        self.counts = np.bincount(np.asarray(users, np.int64), minlength=num_users)

    def contains(self, users, items) -> np.ndarray:
        keys = np.asarray(users, np.int64) * self.num_items + np.asarray(items, np.int64)
        if len(self.keys) == 0:
            return np.zeros(keys.shape, dtype=bool)
        pos = np.minimum(np.searchsorted(self.keys, keys), len(self.keys) - 1)
        return self.keys[pos] == keys


def sample_negatives(user: int, train_positive_items, count: int, num_items: int,
                     rng: np.random.Generator) -> list[int]:
    """``count`` items drawn uniformly (with replacement) among the user's non-positives."""
    positives = set(int(i) for i in train_positive_items)
    if len(positives) >= num_items:
        raise SamplingError(f"user {user} is positive on every item")
    out = []
    while len(out) < count:
        j = int(rng.integers(num_items))
        if j not in positives:
            out.append(j)
    return out


def sample_negative_batch(users: np.ndarray, index: PositiveIndex, count: int,
                          rng: np.random.Generator) -> np.ndarray:
    """Vectorized rejection sampling, shape ``(len(users), count)``."""
    users = np.asarray(users, np.int64)
    if np.any(index.counts[users] >= index.num_items):
        bad = users[index.counts[users] >= index.num_items][0]
        raise SamplingError(f"user {bad} is positive on every item")
    neg = rng.integers(index.num_items, size=(len(users), count))
    rows = np.repeat(users[:, None], count, axis=1)
    bad = index.contains(rows, neg)
    while bad.any():
        neg[bad] = rng.integers(index.num_items, size=int(bad.sum()))
        bad[bad] = index.contains(rows[bad], neg[bad])
    return neg


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def compute_losses(model: SWGCN, graphs, users, pos_items, neg_items, config: TrainConfig,
                   training: bool = True, generator=None) -> dict:
    """Forward pass plus all loss terms for a batch of ``(u, i, j)`` triples."""
    out = forward(model, graphs, config.lambda_s, config.L, config.p_message, training,
                  config.variant, config.degree_mode, generator)
    users = torch.as_tensor(users, dtype=torch.long)
    pos = score_pairs(out.fused, users, torch.as_tensor(pos_items, dtype=torch.long))
    neg = score_pairs(out.fused, users, torch.as_tensor(neg_items, dtype=torch.long))
    l_bpr = bpr_loss(pos, neg, model.parameters(), config.gamma2, config.bpr_reduction)
    included = sat_behaviors(config.variant, model.num_behaviors)
    l_sat = sat_loss(out.tpw, out.apv, config.gamma1, included, config.sat_penalty_mode)
    loss = joint_loss(l_sat, l_bpr, config.lambda_a, config.variant)
    return {"loss": loss, "sat": l_sat, "bpr": l_bpr, "forward": out}


@dataclass
class TrainState:
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    generator: torch.Generator
    epoch: int = 0
    best_hr: float = -1.0
    best_epoch: int = 0
    since_improvement: int = 0
    history: list = field(default_factory=list)


def new_state(model: SWGCN, config: TrainConfig) -> TrainState:
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    return TrainState(opt, np.random.default_rng(config.seed + 1),
                      torch.Generator().manual_seed(config.seed + 2))


def train_epoch(model: SWGCN, state: TrainState, split, config: TrainConfig,
                graphs: list[BehaviorGraph] | None = None, positives: PositiveIndex | None = None):
    """One pass over the shuffled target training edges.

    Returns ``(model, state, stats)`` where ``stats`` holds the mean loss terms
    over the epoch's batches. Parameters are updated in place.
    """
    train = split.train
    if graphs is None:
        graphs = graphs_from_dataset(train)
    edges = train.edges[train.target]
    if positives is None:
        positives = PositiveIndex(edges[:, 0], edges[:, 1], train.num_users, train.num_items)
    state.epoch += 1
    model.train()
    order = state.rng.permutation(len(edges))
    totals = {"loss": 0.0, "sat": 0.0, "bpr": 0.0}
    batches = 0
    for start in range(0, len(order), config.batch_size):
        batch = edges[order[start:start + config.batch_size]]
        neg = sample_negative_batch(batch[:, 0], positives, config.neg_samples, state.rng)
        users = np.repeat(batch[:, 0], config.neg_samples)
        pos_items = np.repeat(batch[:, 1], config.neg_samples)
        terms = compute_losses(model, graphs, users, pos_items, neg.reshape(-1), config,
                               training=True, generator=state.generator)
        loss = terms["loss"]
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite loss {loss.item()} at epoch {state.epoch}, "
                                  f"batch {batches}")
        state.optimizer.zero_grad()
        loss.backward()
        state.optimizer.step()
        for k in totals:
            totals[k] += float(terms[k].detach())
        batches += 1
    stats = {k: v / max(batches, 1) for k, v in totals.items()}
    stats["batches"] = batches
    return model, state, stats


@dataclass
class FitResult:
    model: SWGCN
    history: list
    best_epoch: int
    best_val_hr: float


def fit(split, config: TrainConfig, log_path=None, checkpoint_path=None,
        checkpoint_every: int = 0, verbose: bool = False) -> FitResult:
    """Train with per-epoch validation and early stopping on validation HR@10.

    The returned model holds the parameters of the best validation epoch.
    """
    from .evaluation import evaluate
    from .model import save_checkpoint

    if not split.eval_users:
        raise TrainingError("split has no evaluation users")
    train = split.train
    model = SWGCN(train.num_users, train.num_items, config.d, train.num_behaviors, seed=config.seed)
    graphs = graphs_from_dataset(train)
    edges = train.edges[train.target]
    positives = PositiveIndex(edges[:, 0], edges[:, 1], train.num_users, train.num_items)
    state = new_state(model, config)
    best_state = copy.deepcopy(model.state_dict())
    log = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        while state.epoch < config.max_epochs:
            t0 = time.perf_counter()
            model, state, stats = train_epoch(model, state, split, config, graphs, positives)
            report = evaluate(model, split, config, which="val", k_list=(10,), graphs=graphs)
            hr, ndcg = report.hr[10], report.ndcg[10]
            entry = {"epoch": state.epoch, "sat": stats["sat"], "bpr": stats["bpr"],
                     "loss": stats["loss"], "val_hr@10": hr, "val_ndcg@10": ndcg,
                     "wall_time": time.perf_counter() - t0}
            state.history.append(entry)
            if log:
                log.write(json.dumps(entry) + "\n")
                log.flush()
            if verbose:
                print(f"epoch {state.epoch:4d} loss {stats['loss']:.4f} val HR@10 {hr:.4f}")
            if hr > state.best_hr:
                state.best_hr, state.best_epoch, state.since_improvement = hr, state.epoch, 0
                best_state = copy.deepcopy(model.state_dict())
            else:
                state.since_improvement += 1
            if checkpoint_path and checkpoint_every and state.epoch % checkpoint_every == 0:
                save_checkpoint(model, checkpoint_path, asdict(config), config.seed)
            if state.since_improvement >= config.patience:
                break
    finally:
        if log:
            log.close()
    model.load_state_dict(best_state)
    return FitResult(model, state.history, state.best_epoch, state.best_hr)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def tiny_instance(num_users: int = 6, num_items: int = 7, num_behaviors: int = 3,
                  density: float = 0.4, seed: int = 0):
    """Random graphs with every user holding at least one target edge and one
    non-positive item, plus one ``(u, i, j)`` triple per target edge."""
    rng = np.random.default_rng(seed)
    graphs = []
    for r in range(num_behaviors):
        A = rng.random((num_users, num_items)) < density
        if r == num_behaviors - 1:
            for u in range(num_users):
                if not A[u].any():
                    A[u, rng.integers(num_items)] = True
                if A[u].all():
                    A[u, rng.integers(num_items)] = False
        u, i = np.nonzero(A)
        graphs.append(BehaviorGraph(r, num_users, num_items, u, i))
    tg = graphs[-1]
    index = PositiveIndex(tg.users, tg.items, num_users, num_items)
    neg = sample_negative_batch(tg.users, index, 1, rng)[:, 0]
    return graphs, (tg.users.copy(), tg.items.copy(), neg)


def gradient_check(config: TrainConfig, num_users: int = 6, num_items: int = 7,
                   num_behaviors: int = 3, seed: int = 0, step: float = 1e-5,
                   model: SWGCN | None = None, instance=None) -> float:
    """Max relative error between autograd and central finite differences of the
    joint loss over every parameter entry (float64, no dropout)."""
    if num_users > 8 or num_items > 8 or config.d > 4:
        raise ValueError("gradient check is meant for <= 8x8 instances with d <= 4")
    graphs, (users, pos, neg) = instance or tiny_instance(num_users, num_items, num_behaviors,
                                                          seed=seed)
    if model is None:
        model = SWGCN(num_users, num_items, config.d, len(graphs), seed=seed)
    cfg = config.replace(p_message=0.0)

    def loss_value():
        return compute_losses(model, graphs, users, pos, neg, cfg, training=False)["loss"]

    model.zero_grad()
    loss_value().backward()
    worst = 0.0
    with torch.no_grad():
        for p in model.parameters():
            analytic = p.grad.detach().clone().reshape(-1)
            flat = p.data.view(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + step
                up = loss_value().item()
                flat[k] = orig - step
                down = loss_value().item()
                flat[k] = orig
                numeric = (up - down) / (2 * step)
                a = analytic[k].item()
                err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
                worst = max(worst, err)
    return worst


def config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
