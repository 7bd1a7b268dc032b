"""Interaction records, preprocessing, temporal splitting and synthetic data.

Behaviors are indexed ``0 .. R-1`` internally; the last index is always the
target behavior (e.g. purchase), the others are auxiliary behaviors.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class DataError(ValueError):
    """Raised for malformed input files or unusable datasets."""


class ParseError(DataError):
    pass


class VocabularyError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class SplitError(DataError):
    pass


class ConfigError(DataError):
    pass


@dataclass(frozen=True)
class InteractionRecord:
    user: str
    item: str
    behavior: int
    timestamp: int

    def __post_init__(self):
        if self.behavior < 0:
            raise VocabularyError(f"behavior index must be non-negative, got {self.behavior}")
        if self.timestamp < 0:
            raise ParseError(f"timestamp must be non-negative, got {self.timestamp}")


@dataclass
class InteractionDataset:
    """Densely reindexed multi-behavior interactions.

    ``edges[r]`` is an ``(n, 2)`` int array of unique ``(user, item)`` pairs for
    behavior ``r`` and ``timestamps[r]`` holds the provenance timestamp of each.
    Edge order follows the order in which the interaction was first kept, which
    is what breaks timestamp ties during splitting.
    """

    num_users: int
    num_items: int
    behaviors: list[str]
    edges: list[np.ndarray]
    timestamps: list[np.ndarray]
    user_ids: list[str]
    item_ids: list[str]
    _user_index: dict = field(default=None, init=False, repr=False, compare=False)
    _item_index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.edges) != len(self.behaviors) or len(self.timestamps) != len(self.behaviors):
            raise DataError("one edge array and one timestamp array per behavior required")
        self.edges = [np.asarray(e, dtype=np.int64).reshape(-1, 2) for e in self.edges]
        self.timestamps = [np.asarray(t, dtype=np.int64).reshape(-1) for t in self.timestamps]
        for e in self.edges:
            if len(e) and (e[:, 0].max() >= self.num_users or e[:, 1].max() >= self.num_items
                           or e.min() < 0):
                raise DataError("edge index out of range")
        if len(self.user_ids) != self.num_users or len(self.item_ids) != self.num_items:
            raise DataError("id maps do not match dataset dimensions")
        self._user_index = {u: n for n, u in enumerate(self.user_ids)}
        self._item_index = {i: n for n, i in enumerate(self.item_ids)}
        if len(self._user_index) != self.num_users or len(self._item_index) != self.num_items:
            raise DataError("external ids must be unique")

    @property
    def num_behaviors(self) -> int:
        return len(self.behaviors)

    @property
    def target(self) -> int:
        return self.num_behaviors - 1

    def user_index(self, user_id: str) -> int:
        try:
            return self._user_index[user_id]
        except KeyError:
            raise KeyError(f"unknown user {user_id!r}") from None

    def item_index(self, item_id: str) -> int:
        try:
            return self._item_index[item_id]
        except KeyError:
            raise KeyError(f"unknown item {item_id!r}") from None

    def matrix(self, behavior: int) -> sp.csr_matrix:
        """Binary ``num_users x num_items`` interaction matrix of one behavior."""
        e = self.edges[behavior]
        data = np.ones(len(e), dtype=np.float64)
        return sp.csr_matrix((data, (e[:, 0], e[:, 1])), shape=(self.num_users, self.num_items))

    def counts(self) -> dict[str, int]:
        return {name: int(len(e)) for name, e in zip(self.behaviors, self.edges)}

    def to_records(self) -> list[InteractionRecord]:
        out = []
        for r, (e, t) in enumerate(zip(self.edges, self.timestamps)):
            for (u, i), ts in zip(e.tolist(), t.tolist()):
                out.append(InteractionRecord(self.user_ids[u], self.item_ids[i], r, ts))
        return out


@dataclass
class SplitDataset:
    train: InteractionDataset
    val: dict[int, int]
    test: dict[int, int]
    eval_users: list[int]
    val_timestamps: dict[int, int] = field(default_factory=dict)
    test_timestamps: dict[int, int] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

DEFAULT_COLUMNS = ("user", "item", "behavior", "timestamp")


def load_interactions(path, behaviors: Sequence[str], columns: Sequence[str] = DEFAULT_COLUMNS,
                      delimiter: str = "\t", skip_header: bool = False) -> list[InteractionRecord]:
    """Parse a delimited interaction file into records.

    ``behaviors`` is the ordered behavior vocabulary (last entry = target).
    ``columns`` names the role of each field; fields named anything other than
    user/item/behavior/timestamp are ignored, so e.g. the raw Taobao dump can
    be read with ``columns=("user", "item", "category", "behavior", "timestamp")``
    and ``delimiter=","``.
    """
    vocab = {label: r for r, label in enumerate(behaviors)}
    missing = set(DEFAULT_COLUMNS) - set(columns)
    if missing:
        raise ConfigError(f"column spec lacks {sorted(missing)}")
    pos = {name: columns.index(name) for name in DEFAULT_COLUMNS}
    width = len(columns)

    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if skip_header and lineno == 1:
                continue
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split(delimiter)
            if len(fields) != width:
                raise ParseError(f"line {lineno}: expected {width} fields, got {len(fields)}")
            label = fields[pos["behavior"]]
            if label not in vocab:
                raise VocabularyError(f"line {lineno}: unknown behavior {label!r}")
            try:
                ts = int(fields[pos["timestamp"]])
            except ValueError:
                raise ParseError(f"line {lineno}: timestamp {fields[pos['timestamp']]!r} "
                                 "is not an integer") from None
            if ts < 0:
                raise ParseError(f"line {lineno}: negative timestamp {ts}")
            user, item = fields[pos["user"]], fields[pos["item"]]
            if not user or not item:
                raise ParseError(f"line {lineno}: empty user or item id")
            records.append(InteractionRecord(user, item, vocab[label], ts))
    return records


def write_interactions(path, records: Iterable[InteractionRecord], behaviors: Sequence[str]):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(f"{rec.user}\t{rec.item}\t{behaviors[rec.behavior]}\t{rec.timestamp}\n")


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def _id_sort_key(ext_id: str):
    # numeric ids sort numerically, everything else lexicographically after them
    return (0, int(ext_id), "") if ext_id.isdigit() else (1, 0, ext_id)


def preprocess(records: Sequence[InteractionRecord], behaviors: Sequence[str],
               min_target_count: int = 0, dedup: bool = True,
               filter_items: bool = True) -> InteractionDataset:
    """Deduplicate, filter sparse entities and reindex.

    With ``dedup`` every repeated ``(user, item, behavior)`` triple collapses to
    its earliest-timestamp instance; without it the first occurrence in input
    order is kept (the matrices are binary either way). Users, and items when
    ``filter_items`` is set, with fewer than ``min_target_count`` target edges
    are removed repeatedly until no further removal happens.
    """
    if not records:
        raise EmptyDatasetError("no records to preprocess")
    R = len(behaviors)
    target = R - 1
    for rec in records:
        if rec.behavior >= R:
            raise VocabularyError(f"behavior index {rec.behavior} outside vocabulary of size {R}")

    kept: dict[tuple, tuple[int, int]] = {}   # (u, i, r) -> (timestamp, first position)
    for pos, rec in enumerate(records):
        key = (rec.user, rec.item, rec.behavior)
        prev = kept.get(key)
        if prev is None:
            kept[key] = (rec.timestamp, pos)
        elif dedup and rec.timestamp < prev[0]:
            kept[key] = (rec.timestamp, prev[1])
    triples = sorted(kept.items(), key=lambda kv: kv[1][1])

    alive = triples
    if min_target_count > 0:
        while True:
            ucount: dict[str, int] = {}
            icount: dict[str, int] = {}
            for (u, i, r), _ in alive:
                if r == target:
                    ucount[u] = ucount.get(u, 0) + 1
                    icount[i] = icount.get(i, 0) + 1
            bad_u = {u for (u, _, _), _ in alive if ucount.get(u, 0) < min_target_count}
            bad_i = ({i for (_, i, _), _ in alive if icount.get(i, 0) < min_target_count}
                     if filter_items else set())
            if not bad_u and not bad_i:
                break
            alive = [t for t in alive if t[0][0] not in bad_u and t[0][1] not in bad_i]
            if not alive:
                break
    if not alive:
        raise EmptyDatasetError("all records were filtered out")

    user_ids = sorted({u for (u, _, _), _ in alive}, key=_id_sort_key)
    item_ids = sorted({i for (_, i, _), _ in alive}, key=_id_sort_key)
    uidx = {u: n for n, u in enumerate(user_ids)}
    iidx = {i: n for n, i in enumerate(item_ids)}
    edges = [[] for _ in range(R)]
    stamps = [[] for _ in range(R)]
    for (u, i, r), (ts, _) in alive:
        edges[r].append((uidx[u], iidx[i]))
        stamps[r].append(ts)
    return InteractionDataset(len(user_ids), len(item_ids), list(behaviors),
                              [np.array(e, dtype=np.int64).reshape(-1, 2) for e in edges],
                              [np.array(t, dtype=np.int64) for t in stamps],
                              user_ids, item_ids)


def temporal_split(dataset: InteractionDataset, min_history: int = 3) -> SplitDataset:
    """Leave-one-out split on the target behavior by timestamp.

    Users with at least ``min_history`` target edges contribute their latest
    target item to test and the second latest to validation; ties keep the
    dataset's edge order. Auxiliary edges always stay in train.
    """
    t = dataset.target
    e, ts = dataset.edges[t], dataset.timestamps[t]
    order = np.lexsort((np.arange(len(e)), ts, e[:, 0]))   # by user, time, position
    keep = np.ones(len(e), dtype=bool)
    val, test, val_ts, test_ts = {}, {}, {}, {}
    users = e[order, 0]
    bounds = np.flatnonzero(np.diff(users)) + 1
    for block in np.split(order, bounds):
        if len(block) < min_history:
            continue
        u = int(e[block[0], 0])
        test[u] = int(e[block[-1], 1])
        val[u] = int(e[block[-2], 1])
        test_ts[u] = int(ts[block[-1]])
        val_ts[u] = int(ts[block[-2]])
        keep[block[-2:]] = False
    if not test:
        raise SplitError(f"no user has at least {min_history} target interactions")

    edges = list(dataset.edges)
    stamps = list(dataset.timestamps)
    edges[t] = e[keep]
    stamps[t] = ts[keep]
    train = InteractionDataset(dataset.num_users, dataset.num_items, list(dataset.behaviors),
                               edges, stamps, list(dataset.user_ids), list(dataset.item_ids))
    return SplitDataset(train, val, test, sorted(test), val_ts, test_ts)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def manifest(split: SplitDataset) -> dict:
    tr = split.train
    counts = tr.counts()
    counts_total = dict(counts)
    counts_total[tr.behaviors[tr.target]] += len(split.val) + len(split.test)
    return {
        "num_users": tr.num_users,
        "num_items": tr.num_items,
        "num_behaviors": tr.num_behaviors,
        "behaviors": list(tr.behaviors),
        "train_counts": counts,
        "counts": counts_total,
        "total_interactions": int(sum(counts_total.values())),
        "num_eval_users": len(split.eval_users),
        "eval_users": [tr.user_ids[u] for u in split.eval_users],
    }


def save_split(split: SplitDataset, directory) -> dict:
    """Write ``train.tsv``, ``val.tsv``, ``test.tsv`` and ``manifest.json``."""
    os.makedirs(directory, exist_ok=True)
    tr = split.train
    write_interactions(os.path.join(directory, "train.tsv"), tr.to_records(), tr.behaviors)
    for name, truth, stamps in (("val", split.val, split.val_timestamps),
                                ("test", split.test, split.test_timestamps)):
        recs = [InteractionRecord(tr.user_ids[u], tr.item_ids[i], tr.target, stamps.get(u, 0))
                for u, i in sorted(truth.items())]
        write_interactions(os.path.join(directory, f"{name}.tsv"), recs, tr.behaviors)
    man = manifest(split)
    man["user_ids"] = list(tr.user_ids)
    man["item_ids"] = list(tr.item_ids)
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(man, fh, indent=1)
    return man


def load_split(directory) -> SplitDataset:
    with open(os.path.join(directory, "manifest.json"), encoding="utf-8") as fh:
        man = json.load(fh)
    behaviors = man["behaviors"]
    user_ids, item_ids = man["user_ids"], man["item_ids"]
    uidx = {u: n for n, u in enumerate(user_ids)}
    iidx = {i: n for n, i in enumerate(item_ids)}
    R = len(behaviors)
    edges = [[] for _ in range(R)]
    stamps = [[] for _ in range(R)]
    for rec in load_interactions(os.path.join(directory, "train.tsv"), behaviors):
        edges[rec.behavior].append((uidx[rec.user], iidx[rec.item]))
        stamps[rec.behavior].append(rec.timestamp)
    train = InteractionDataset(len(user_ids), len(item_ids), behaviors,
                               [np.array(e, dtype=np.int64).reshape(-1, 2) for e in edges],
                               [np.array(t, dtype=np.int64) for t in stamps], user_ids, item_ids)
    truths = {}
    for name in ("val", "test"):
        truth, ts = {}, {}
        for rec in load_interactions(os.path.join(directory, f"{name}.tsv"), behaviors):
            truth[uidx[rec.user]] = iidx[rec.item]
            ts[uidx[rec.user]] = rec.timestamp
        truths[name] = (truth, ts)
    return SplitDataset(train, truths["val"][0], truths["test"][0], sorted(truths["test"][0]),
                        truths["val"][1], truths["test"][1])


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass
class SyntheticConfig:
    num_users: int = 200
    num_items: int = 150
    num_behaviors: int = 3
    latent_dim: int = 8
    interactions_per_behavior: list[int] = field(default_factory=lambda: [3000, 1500, 1000])
    synergy_strength: float = 0.9
    seed: int = 0
    # share of auxiliary edges drawn uniformly at random instead of by affinity
    aux_noise: float = 0.3
    # share of each user's auxiliary items that counts as "top affinity"
    top_fraction: float = 0.5

    def validate(self):
        if self.num_users < 1 or self.num_items < 1 or self.latent_dim < 1:
            raise ConfigError("dimensions must be positive")
        if self.num_behaviors < 1 or len(self.interactions_per_behavior) != self.num_behaviors:
            raise ConfigError("need one interaction count per behavior")
        cells = self.num_users * self.num_items
        for n in self.interactions_per_behavior:
            if n < 1 or n > cells:
                raise ConfigError(f"cannot place {n} edges in a {self.num_users}x{self.num_items} grid")
        if self.interactions_per_behavior[-1] < 3 * self.num_users:
            raise ConfigError("target behavior needs at least 3 interactions per user")
        if self.num_items < 3:
            raise ConfigError("need at least 3 items")
        if not 0.0 <= self.synergy_strength <= 1.0:
            raise ConfigError("synergy_strength must lie in [0, 1]")
        if not 0.0 <= self.aux_noise <= 1.0 or not 0.0 < self.top_fraction <= 1.0:
            raise ConfigError("aux_noise must lie in [0, 1] and top_fraction in (0, 1]")

    @property
    def behavior_names(self) -> list[str]:
        return [f"aux{r}" for r in range(1, self.num_behaviors)] + ["target"]


class Affinity:
    """Ground-truth user-item affinity of a synthetic instance, keyed by external id."""

    def __init__(self, matrix: np.ndarray, user_ids: Sequence[str], item_ids: Sequence[str]):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.user_ids = list(user_ids)
        self.item_ids = list(item_ids)
        self._u = {u: n for n, u in enumerate(self.user_ids)}
        self._i = {i: n for n, i in enumerate(self.item_ids)}

    def __call__(self, user: str, item: str) -> float:
        return float(self.matrix[self._u[user], self._i[item]])

    def for_dataset(self, dataset: InteractionDataset) -> np.ndarray:
        """Affinity matrix reindexed to ``dataset``'s dense indices."""
        rows = [self._u[u] for u in dataset.user_ids]
        cols = [self._i[i] for i in dataset.item_ids]
        return self.matrix[np.ix_(rows, cols)]

    def save(self, path):
        np.savez(path, matrix=self.matrix, user_ids=np.array(self.user_ids),
                 item_ids=np.array(self.item_ids))

    @classmethod
    def load(cls, path) -> "Affinity":
        with np.load(path) as z:
            return cls(z["matrix"], [str(u) for u in z["user_ids"]], [str(i) for i in z["item_ids"]])


def _weighted_sample(rng, weights: np.ndarray, n: int) -> np.ndarray:
    # n distinct indices, inclusion driven by weights (Gumbel top-k)
    keys = np.log(weights) - np.log(-np.log(rng.random(weights.shape)))
    return np.argpartition(-keys, n - 1)[:n] if n < len(weights) else np.arange(len(weights))


def generate_synthetic(config: SyntheticConfig) -> tuple[list[InteractionRecord], Affinity]:
    """Draw a planted-synergy multi-behavior instance.

    Auxiliary edges follow a mixture of latent affinity and uniform noise.
    Each target edge is, with probability ``synergy_strength``, taken from the
    top-affinity part of the user's auxiliary items; otherwise it is uniform
    over all items, so at strength 0 the target edges carry no information
    about auxiliary co-occurrence. Every user receives at least three target
    edges with distinct timestamps.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    nu, ni, k, R = config.num_users, config.num_items, config.latent_dim, config.num_behaviors
    U = rng.standard_normal((nu, k))
    V = rng.standard_normal((ni, k))
    affinity = U @ V.T / np.sqrt(k)
    width = len(str(max(nu, ni) - 1))
    user_ids = [f"u{n:0{width}d}" for n in range(nu)]
    item_ids = [f"i{n:0{width}d}" for n in range(ni)]

    soft = np.exp(2.0 * (affinity - affinity.max()))
    soft /= soft.sum()
    mixture = (1.0 - config.aux_noise) * soft + config.aux_noise / (nu * ni)
    horizon = 10 * max(config.interactions_per_behavior)

    aux = np.zeros((nu, ni), dtype=bool)
    records = []
    for r in range(R - 1):
        cells = np.sort(_weighted_sample(rng, mixture.ravel(), config.interactions_per_behavior[r]))
        aux.flat[cells] = True
        stamps = rng.integers(0, horizon, size=len(cells))
        for c, ts in zip(cells.tolist(), stamps.tolist()):
            records.append(InteractionRecord(user_ids[c // ni], item_ids[c % ni], r, ts))

    # target counts: 3 per user, remainder spread uniformly and capped at ni
    n_target = config.interactions_per_behavior[-1]
    per_user = np.full(nu, 3, dtype=np.int64)
    extra = n_target - 3 * nu
    while extra > 0:
        room = np.flatnonzero(per_user < ni)
        if len(room) == 0:
            raise ConfigError("target count exceeds grid")
        add = rng.multinomial(extra, np.full(len(room), 1.0 / len(room)))
        per_user[room] = np.minimum(per_user[room] + add, ni)
        extra = n_target - int(per_user.sum())

    target_records = []
    for u in range(nu):
        aux_items = np.flatnonzero(aux[u])
        if len(aux_items):
            order = aux_items[np.argsort(-affinity[u, aux_items], kind="stable")]
            top = order[:max(1, int(np.ceil(config.top_fraction * len(order))))]
        else:
            top = aux_items
        chosen: list[int] = []
        taken = np.zeros(ni, dtype=bool)
        for _ in range(per_user[u]):
            pool = top[~taken[top]] if len(top) else top
            if len(pool) == 0 and len(aux_items):
                # top slice used up: fall back to the best remaining auxiliary item
                rest = order[~taken[order]]
                pool = rest[:1]
            if len(pool) and rng.random() < config.synergy_strength:
                j = int(pool[rng.integers(len(pool))])
            else:
                free = np.flatnonzero(~taken)
                j = int(free[rng.integers(len(free))])
            taken[j] = True
            chosen.append(j)
        stamps = np.sort(rng.choice(horizon, size=len(chosen), replace=False))
        for j, ts in zip(chosen, stamps.tolist()):
            target_records.append(InteractionRecord(user_ids[u], item_ids[j], R - 1, ts))
    records.extend(target_records)
    return records, Affinity(affinity, user_ids, item_ids)
