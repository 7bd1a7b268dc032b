"""Bipartite behavior graphs, self-looped weighted adjacency and its normalization.

Node ordering in every square matrix is users first (``0 .. N_u-1``) then
items (``N_u .. N_u+N_i-1``).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

DEGREE_MODES = ("weighted", "structural")


class GraphConsistencyError(ValueError):
    pass


class BehaviorGraph:
    """Edges of one behavior with neighbor lists in both directions.

    Edge ids are assigned row-major over the sorted ``(user, item)`` pairs.
    """

    def __init__(self, behavior: int, num_users: int, num_items: int, users, items):
        users = np.asarray(users, dtype=np.int64).reshape(-1)
        items = np.asarray(items, dtype=np.int64).reshape(-1)
        order = np.lexsort((items, users))
        self.behavior = behavior
        self.num_users = num_users
        self.num_items = num_items
        self.users = users[order]
        self.items = items[order]
        keys = self.users * num_items + self.items
        if len(keys) > 1 and np.any(keys[1:] == keys[:-1]):
            raise GraphConsistencyError("duplicate edges")
        self._keys = keys
        self._user_ptr = np.searchsorted(self.users, np.arange(num_users + 1))
        by_item = np.lexsort((self.users, self.items))
        self._item_order = by_item
        self._item_ptr = np.searchsorted(self.items[by_item], np.arange(num_items + 1))

    @property
    def num_edges(self) -> int:
        return len(self.users)

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    def user_neighbors(self, u: int) -> np.ndarray:
        return self.items[self._user_ptr[u]:self._user_ptr[u + 1]]

    def item_neighbors(self, i: int) -> np.ndarray:
        return self.users[self._item_order[self._item_ptr[i]:self._item_ptr[i + 1]]]

    def user_degree(self) -> np.ndarray:
        return np.diff(self._user_ptr)

    def item_degree(self) -> np.ndarray:
        return np.diff(self._item_ptr)

    def edge_id(self, u: int, i: int) -> int:
        key = u * self.num_items + i
        pos = int(np.searchsorted(self._keys, key))
        if pos == len(self._keys) or self._keys[pos] != key:
            raise KeyError(f"no edge ({u}, {i}) in behavior {self.behavior}")
        return pos

    def has_edges(self, users, items) -> np.ndarray:
        keys = np.asarray(users, dtype=np.int64) * self.num_items + np.asarray(items, dtype=np.int64)
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, max(len(self._keys) - 1, 0))
        return (self._keys[pos] == keys) if len(self._keys) else np.zeros(keys.shape, bool)

    def biadjacency(self) -> sp.csr_matrix:
        return sp.csr_matrix((np.ones(self.num_edges), (self.users, self.items)),
                             shape=(self.num_users, self.num_items))

    @cached_property
    def torch_index(self):
        """``(user_rows, item_rows)`` as torch index tensors in node numbering."""
        import torch
        return (torch.from_numpy(self.users.copy()),
                torch.from_numpy(self.items + self.num_users))


def build_behavior_graph(A, behavior: int = 0) -> BehaviorGraph:
    """Graph from a (sparse or dense) binary ``N_u x N_i`` matrix."""
    A = sp.coo_matrix(A)
    A.sum_duplicates()
    mask = A.data != 0
    return BehaviorGraph(behavior, A.shape[0], A.shape[1], A.row[mask], A.col[mask])


def graphs_from_dataset(dataset) -> list[BehaviorGraph]:
    return [BehaviorGraph(r, dataset.num_users, dataset.num_items, e[:, 0], e[:, 1])
            for r, e in enumerate(dataset.edges)]


@dataclass
class EdgeWeightMap:
    """One scalar per edge id of ``graph``."""
    graph: BehaviorGraph
    values: np.ndarray

    def __getitem__(self, ui) -> float:
        return float(self.values[self.graph.edge_id(*ui)])

    def as_dict(self) -> dict:
        return {(int(u), int(i)): float(w)
                for u, i, w in zip(self.graph.users, self.graph.items, self.values)}


@dataclass
class WeightedAdjacency:
    behavior: int
    self_loop_weight: float
    num_users: int
    matrix: sp.csr_matrix


@dataclass
class NormalizedAdjacency:
    behavior: int
    num_users: int
    matrix: sp.csr_matrix


def assemble_weighted_adjacency(graph: BehaviorGraph, weights, lambda_s: float) -> WeightedAdjacency:
    """Block matrix ``[[lambda_s I, W*A], [(W*A)^T, lambda_s I]]``."""
    values = weights.values if isinstance(weights, EdgeWeightMap) else weights
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.shape != (graph.num_edges,) or not np.all(np.isfinite(values)):
        raise GraphConsistencyError(
            f"expected {graph.num_edges} finite edge weights, got shape {values.shape}")
    if lambda_s < 0:
        raise GraphConsistencyError("self-loop weight must be non-negative")
    n = graph.num_nodes
    item_rows = graph.items + graph.num_users
    diag = np.arange(n)
    rows = np.concatenate([graph.users, item_rows, diag])
    cols = np.concatenate([item_rows, graph.users, diag])
    data = np.concatenate([values, values, np.full(n, float(lambda_s))])
    if lambda_s == 0:
        keep = np.arange(len(data)) < 2 * graph.num_edges
        rows, cols, data = rows[keep], cols[keep], data[keep]
    M = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
    return WeightedAdjacency(graph.behavior, float(lambda_s), graph.num_users, M)


def degree_normalize(adj: WeightedAdjacency, degree_mode: str = "weighted") -> NormalizedAdjacency:
    """Symmetric ``D^-1/2 A D^-1/2`` with zero rows for zero-degree nodes.

    ``weighted`` degrees are row sums of the adjacency (self loop included);
    ``structural`` degrees count the nonzero entries of each row instead.
    """
    if degree_mode not in DEGREE_MODES:
        raise ValueError(f"degree_mode must be one of {DEGREE_MODES}")
    M = adj.matrix.tocsr()
    if degree_mode == "weighted":
        deg = np.asarray(M.sum(axis=1)).ravel()
    else:
        deg = np.diff((M != 0).tocsr().indptr).astype(np.float64)
    inv = np.zeros_like(deg)
    pos = deg > 0
    inv[pos] = deg[pos] ** -0.5
    D = sp.diags(inv)
    return NormalizedAdjacency(adj.behavior, adj.num_users, (D @ M @ D).tocsr())


def dump_coo(adj, path):
    """Write a (weighted or normalized) adjacency as ``row col value`` lines."""
    C = adj.matrix.tocoo()
    order = np.lexsort((C.col, C.row))
    with open(path, "w", encoding="utf-8") as fh:
        for r, c, v in zip(C.row[order], C.col[order], C.data[order]):
            fh.write(f"{r}\t{c}\t{float(v)!r}\n")
