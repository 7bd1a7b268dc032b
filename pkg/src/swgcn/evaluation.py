"""Full-ranking HR@K / NDCG@K evaluation and the per-user weight case study."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .graph import graphs_from_dataset
from .model import FusedEmbeddings, SWGCN, forward, target_preference_weights

DEFAULT_K = (10, 20, 50, 100, 200)


class ReportError(ValueError):
    pass


def rank_items(scores, K_max: int | None = None, mask=None) -> np.ndarray:
    """Item indices by descending score, ties by ascending index, masked items dropped."""
    scores = np.asarray(scores, dtype=np.float64)
    idx = np.arange(len(scores))
    if mask is not None and len(mask):
        keep = np.ones(len(scores), dtype=bool)
        keep[np.fromiter(mask, dtype=np.int64)] = False
        idx = idx[keep]
    order = idx[np.lexsort((idx, -scores[idx]))]
    return order if K_max is None else order[:K_max]


def rank_and_score(fused: FusedEmbeddings, user: int, K_max: int | None = None, mask=None) -> np.ndarray:
    with torch.no_grad():
        scores = (fused.items @ fused.users[user]).cpu().numpy()
    return rank_items(scores, K_max, mask)


def truth_rank(ranked, truth: int) -> float:
    """1-based position of ``truth`` in ``ranked``; ``inf`` when absent."""
    hits = np.flatnonzero(np.asarray(ranked) == truth)
    return float(hits[0] + 1) if len(hits) else math.inf


def hr_at_k(ranked, truth: int, K: int) -> int:
    if K < 1:
        raise ValueError("K must be at least 1")
    return int(truth in list(np.asarray(ranked)[:K]))


def ndcg_at_k(ranked, truth: int, K: int) -> float:
    if K < 1:
        raise ValueError("K must be at least 1")
    rank = truth_rank(np.asarray(ranked)[:K], truth)
    return 1.0 / math.log2(rank + 1) if rank <= K else 0.0


def truth_ranks(scores: np.ndarray, truths: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Rank of each row's truth item without sorting, same tie rule as ``rank_items``.

    ``scores`` and ``mask`` are ``(users, items)``; a masked truth gets rank ``inf``.
    """
    rows = np.arange(len(truths))
    t = scores[rows, truths][:, None]
    idx = np.arange(scores.shape[1])[None, :]
    ahead = (scores > t) | ((scores == t) & (idx < truths[:, None]))
    if mask is not None:
        ahead &= ~mask
    ranks = 1.0 + ahead.sum(axis=1)
    if mask is not None:
        ranks[mask[rows, truths]] = math.inf
    return ranks


@dataclass
class EvalReport:
    hr: dict[int, float]
    ndcg: dict[int, float]
    num_eval_users: int
    meta: dict = field(default_factory=dict)

    def rows(self):
        for K in sorted(self.hr):
            yield "HR", K, self.hr[K]
            yield "NDCG", K, self.ndcg[K]

    def to_text(self) -> str:
        lines = [f"# {k}: {v}" for k, v in sorted(self.meta.items())]
        lines.append(f"# num_eval_users: {self.num_eval_users}")
        lines += [f"{m}\t{K}\t{v:.10f}" for m, K, v in self.rows()]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "K", "value"])
        for m, K, v in self.rows():
            w.writerow([m, K, repr(float(v))])
        return buf.getvalue()


def fused_embeddings(model: SWGCN, graphs, config) -> FusedEmbeddings:
    with torch.no_grad():
        return forward(model, graphs, config.lambda_s, config.L, 0.0, False, config.variant,
                       config.degree_mode).fused


def evaluate(model: SWGCN, split, config, which: str = "test", k_list=None, graphs=None,
             mask_train: bool | None = None, fused: FusedEmbeddings | None = None,
             chunk: int = 2048) -> EvalReport:
    """Rank every item for each evaluation user and average HR/NDCG over users."""
    truth_map = split.test if which == "test" else split.val
    users = np.array([u for u in split.eval_users if u in truth_map], dtype=np.int64)
    if len(users) == 0:
        raise ReportError(f"no evaluation users with a {which} item")
    k_list = tuple(sorted(k_list or getattr(config, "k_list", DEFAULT_K)))
    mask_train = getattr(config, "mask_train", True) if mask_train is None else mask_train
    train = split.train
    if fused is None:
        fused = fused_embeddings(model, graphs or graphs_from_dataset(train), config)
    U = fused.users.detach().cpu().numpy()
    I = fused.items.detach().cpu().numpy()
    truths = np.array([truth_map[u] for u in users], dtype=np.int64)
    pos = train.edges[train.target]

    ranks = np.empty(len(users))
    for start in range(0, len(users), chunk):
        block = users[start:start + chunk]
        scores = U[block] @ I.T
        mask = None
        if mask_train:
            mask = np.zeros(scores.shape, dtype=bool)
            lookup = np.full(train.num_users, -1, dtype=np.int64)
            lookup[block] = np.arange(len(block))
            sel = lookup[pos[:, 0]] >= 0
            mask[lookup[pos[sel, 0]], pos[sel, 1]] = True
        ranks[start:start + len(block)] = truth_ranks(scores, truths[start:start + chunk], mask)

    hr = {K: float(np.mean(ranks <= K)) for K in k_list}
    gains = np.where(np.isfinite(ranks), 1.0 / np.log2(np.where(np.isfinite(ranks), ranks, 1.0) + 1), 0.0)
    ndcg = {K: float(np.mean(np.where(ranks <= K, gains, 0.0))) for K in k_list}
    meta = {"split": which, "variant": getattr(config, "variant", "base"),
            "mask_train": bool(mask_train),
            "sat_penalty_mode": getattr(config, "sat_penalty_mode", "squared")}
    return EvalReport(hr, ndcg, len(users), meta)


# ---------------------------------------------------------------------------
# case study
# ---------------------------------------------------------------------------

@dataclass
class SynergyCell:
    user: str
    cell: str
    behaviors: tuple
    item_count: int
    mean_weight: float
    behavior_means: dict


@dataclass
class SynergyReport:
    behaviors: list[str]
    cells: list[SynergyCell]

    def for_user(self, user: str) -> list[SynergyCell]:
        return [c for c in self.cells if c.user == user]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["user", "cell", "item_count", "mean_weight"]
                   + [f"mean_weight_{b}" for b in self.behaviors])
        for c in self.cells:
            w.writerow([c.user, c.cell, c.item_count, repr(c.mean_weight)]
                       + [repr(c.behavior_means[b]) if b in c.behavior_means else ""
                          for b in self.behaviors])
        return buf.getvalue()


def edge_weights(model: SWGCN, graphs) -> list[np.ndarray]:
    with torch.no_grad():
        return [target_preference_weights(model.embeddings[r], model.beta[r], g).cpu().numpy()
                for r, g in enumerate(graphs)]


def synergy_report(model: SWGCN, dataset, users, graphs=None) -> SynergyReport:
    """Group each user's items by the exact set of behaviors linking them and
    average the learned edge weights inside every non-empty group."""
    graphs = graphs or graphs_from_dataset(dataset)
    weights = edge_weights(model, graphs)
    names = list(dataset.behaviors)
    cells = []
    for user in users:
        u = dataset.user_index(user) if isinstance(user, str) else int(user)
        if not 0 <= u < dataset.num_users:
            raise KeyError(f"unknown user {user!r}")
        per_item: dict[int, dict[int, float]] = {}
        for r, g in enumerate(graphs):
            lo, hi = g._user_ptr[u], g._user_ptr[u + 1]
            for i, w in zip(g.items[lo:hi].tolist(), weights[r][lo:hi].tolist()):
                per_item.setdefault(i, {})[r] = w
        groups: dict[tuple, list[dict]] = {}
        for i in sorted(per_item):
            groups.setdefault(tuple(sorted(per_item[i])), []).append(per_item[i])
        for subset in sorted(groups, key=lambda s: (len(s), s)):
            members = groups[subset]
            all_w = [w for m in members for w in m.values()]
            by_b = {names[r]: float(np.mean([m[r] for m in members])) for r in subset}
            cells.append(SynergyCell(dataset.user_ids[u], "+".join(names[r] for r in subset), subset,
                                     len(members), float(np.mean(all_w)), by_b))
    return SynergyReport(names, cells)


def plot_synergy(report: SynergyReport, path):
    """Heat map of mean weight per (user, cell); deterministic PNG output."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    users = list(dict.fromkeys(c.user for c in report.cells))
    labels = sorted({c.cell for c in report.cells}, key=lambda s: (s.count("+"), s))
    grid = np.full((len(users), len(labels)), np.nan)
    for c in report.cells:
        grid[users.index(c.user), labels.index(c.cell)] = c.mean_weight
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(labels), 1.0 + 0.4 * len(users)))
    im = ax.imshow(grid, cmap="Reds", aspect="auto")
    ax.set_xticks(range(len(labels)), labels, rotation=45, ha="right")
    ax.set_yticks(range(len(users)), users)
    fig.colorbar(im, ax=ax, label="mean interaction weight")
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def read_synergy_csv(path) -> SynergyReport:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    behaviors = [h[len("mean_weight_"):] for h in header[4:]]
    cells = []
    for row in rows[1:]:
        means = {b: float(v) for b, v in zip(behaviors, row[4:]) if v != ""}
        subset = tuple(behaviors.index(b) for b in row[1].split("+"))
        cells.append(SynergyCell(row[0], row[1], subset, int(row[2]), float(row[3]), means))
    return SynergyReport(behaviors, cells)
