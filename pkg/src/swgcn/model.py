"""Parameters and the differentiable forward pass.

Per behavior the forward pass learns edge weights from the layer-0
embeddings, propagates over the self-looped, degree-normalized weighted
graph, then fuses the behaviors node by node with a shared attention block
and sums them into one user/item embedding table.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .graph import DEGREE_MODES, BehaviorGraph, NormalizedAdjacency

VARIANTS = ("base", "swgcn_t", "no_sat", "no_tpw")


class ModelConfigError(ValueError):
    pass


def _xavier_uniform(shape, fan_in, fan_out, generator, dtype):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return (torch.rand(shape, generator=generator, dtype=dtype) * 2.0 - 1.0) * bound


class SWGCN(nn.Module):
    """Trainable tensors: per-behavior embedding tables, weigher vectors and the
    shared query/key/value matrices of the fusion block."""

    def __init__(self, num_users: int, num_items: int, dim: int = 32, num_behaviors: int = 4,
                 seed: int = 0, dtype=torch.float64):
        super().__init__()
        if min(num_users, num_items, dim, num_behaviors) < 1:
            raise ModelConfigError("all dimensions must be positive")
        self.num_users = num_users
        self.num_items = num_items
        self.dim = dim
        self.num_behaviors = num_behaviors
        g = torch.Generator().manual_seed(int(seed))
        n = num_users + num_items
        # embedding tables: fan_in = fan_out = d
        self.embeddings = nn.ParameterList(
            nn.Parameter(_xavier_uniform((n, dim), dim, dim, g, dtype)) for _ in range(num_behaviors))
        self.beta = nn.Parameter(_xavier_uniform((num_behaviors, dim), 1, dim, g, dtype))
        self.W_q = nn.Parameter(_xavier_uniform((dim, dim), dim, dim, g, dtype))
        self.W_k = nn.Parameter(_xavier_uniform((dim, dim), dim, dim, g, dtype))
        self.W_v = nn.Parameter(_xavier_uniform((dim, dim), dim, dim, g, dtype))

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    def named_tensors(self) -> dict[str, torch.Tensor]:
        return {name: p.detach() for name, p in self.named_parameters()}


def init_params(num_users: int, num_items: int, dim: int, num_behaviors: int, seed: int = 0,
                dtype=torch.float64) -> SWGCN:
    return SWGCN(num_users, num_items, dim, num_behaviors, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# edge weights
# ---------------------------------------------------------------------------

def segment_softmax(logits: torch.Tensor, segments: torch.Tensor, num_segments: int) -> torch.Tensor:
    """Softmax of ``logits`` within groups sharing a ``segments`` id."""
    if logits.numel() == 0:
        return logits
    seg_max = torch.full((num_segments,), -math.inf, dtype=logits.dtype)
    seg_max = seg_max.scatter_reduce(0, segments, logits.detach(), reduce="amax")
    ex = torch.exp(logits - seg_max[segments])
    denom = torch.zeros(num_segments, dtype=logits.dtype).index_add(0, segments, ex)
    return ex / denom[segments]


def target_preference_logits(emb0: torch.Tensor, beta: torch.Tensor,
                             graph: BehaviorGraph) -> torch.Tensor:
    urows, irows = graph.torch_index
    diff = torch.abs(emb0[urows] - emb0[irows])
    return F.elu(diff @ beta)


def target_preference_weights(emb0: torch.Tensor, beta: torch.Tensor,
                              graph: BehaviorGraph) -> torch.Tensor:
    """Per-edge weights, softmax-normalized over each user's neighbors."""
    logits = target_preference_logits(emb0, beta, graph)
    return segment_softmax(logits, graph.torch_index[0], graph.num_users)


def auxiliary_preference_scores(emb0: torch.Tensor, graph: BehaviorGraph) -> torch.Tensor:
    """Squared Euclidean distance between the endpoints of every edge."""
    urows, irows = graph.torch_index
    return ((emb0[urows] - emb0[irows]) ** 2).sum(dim=1)


# ---------------------------------------------------------------------------
# propagation
# ---------------------------------------------------------------------------

class Propagator:
    """Sparse symmetric operator ``D^-1/2 A D^-1/2`` stored as edge values plus
    a diagonal; applying it costs O((edges + nodes) * d)."""

    def __init__(self, rows: torch.Tensor, cols: torch.Tensor, values: torch.Tensor,
                 diagonal: torch.Tensor):
        self.rows = rows
        self.cols = cols
        self.values = values
        self.diagonal = diagonal

    @classmethod
    def from_graph(cls, graph: BehaviorGraph, weights: torch.Tensor, lambda_s: float,
                   degree_mode: str = "weighted") -> "Propagator":
        if degree_mode not in DEGREE_MODES:
            raise ModelConfigError(f"degree_mode must be one of {DEGREE_MODES}")
        if lambda_s < 0:
            raise ModelConfigError("self-loop weight must be non-negative")
        urows, irows = graph.torch_index
        n = graph.num_nodes
        dtype = weights.dtype
        if degree_mode == "weighted":
            deg = torch.full((n,), float(lambda_s), dtype=dtype)
            deg = deg.index_add(0, urows, weights).index_add(0, irows, weights)
        else:
            counts = torch.zeros(n, dtype=dtype)
            ones = torch.ones_like(weights)
            counts = counts.index_add(0, urows, ones).index_add(0, irows, ones)
            deg = counts + (1.0 if lambda_s > 0 else 0.0)
        positive = deg > 0
        inv_sqrt = torch.where(positive, torch.where(positive, deg, torch.ones_like(deg)).rsqrt(),
                               torch.zeros_like(deg))
        edge_vals = weights * inv_sqrt[urows] * inv_sqrt[irows]
        diagonal = float(lambda_s) * inv_sqrt * inv_sqrt
        rows = torch.cat([urows, irows])
        cols = torch.cat([irows, urows])
        return cls(rows, cols, torch.cat([edge_vals, edge_vals]), diagonal)

    @classmethod
    def from_normalized(cls, adj: NormalizedAdjacency, dtype=torch.float64) -> "Propagator":
        C = adj.matrix.tocoo()
        off = C.row != C.col
        n = adj.matrix.shape[0]
        diag = np.zeros(n)
        diag[C.row[~off]] = C.data[~off]
        return cls(torch.from_numpy(C.row[off].astype(np.int64)),
                   torch.from_numpy(C.col[off].astype(np.int64)),
                   torch.as_tensor(C.data[off], dtype=dtype), torch.as_tensor(diag, dtype=dtype))

    def __call__(self, E: torch.Tensor) -> torch.Tensor:
        out = self.diagonal.unsqueeze(1) * E
        return out.index_add(0, self.rows, self.values.unsqueeze(1) * E[self.cols])

    def dense(self) -> torch.Tensor:
        M = torch.diag(self.diagonal.detach().clone())
        M.index_put_((self.rows, self.cols), self.values.detach(), accumulate=True)
        return M


def message_dropout(E: torch.Tensor, p: float, generator: torch.Generator | None) -> torch.Tensor:
    if p == 0.0:
        return E
    keep = torch.rand(E.shape, generator=generator, dtype=E.dtype) >= p
    return E * keep / (1.0 - p)


def propagate(adjacency, E0: torch.Tensor, L: int, p_message: float = 0.0, training: bool = False,
              generator: torch.Generator | None = None) -> torch.Tensor:
    """Apply the normalized operator ``L`` times and return the last layer.

    In training mode every layer output (not the input) goes through inverted
    message dropout with rate ``p_message``.
    """
    if L < 1:
        raise ModelConfigError("need at least one propagation layer")
    if not 0.0 <= p_message < 1.0:
        raise ModelConfigError(f"p_message must lie in [0, 1), got {p_message}")
    op = adjacency if isinstance(adjacency, Propagator) else Propagator.from_normalized(adjacency, E0.dtype)
    E = E0
    for _ in range(L):
        E = op(E)
        if training:
            E = message_dropout(E, p_message, generator)
    return E


# ---------------------------------------------------------------------------
# fusion and prediction
# ---------------------------------------------------------------------------

def attention_weights(layers: torch.Tensor, W_q: torch.Tensor, W_k: torch.Tensor) -> torch.Tensor:
    """``(N, R, R)`` softmax over source behaviors for each node and query behavior."""
    d = layers.shape[-1]
    Q = layers @ W_q
    K = layers @ W_k
    scores = torch.einsum("rnd,snd->nrs", Q, K) / math.sqrt(d)
    return torch.softmax(scores, dim=-1)


def attention_fuse(layers, W_q, W_k, W_v) -> list[torch.Tensor]:
    """Residual per-node attention across behaviors."""
    H = torch.stack(list(layers)) if not torch.is_tensor(layers) else layers
    A = attention_weights(H, W_q, W_k)
    V = H @ W_v
    mixed = torch.einsum("nrs,snd->rnd", A, V)
    return list(H + mixed)


@dataclass
class FusedEmbeddings:
    per_behavior: list[torch.Tensor]
    merged: torch.Tensor
    users: torch.Tensor
    items: torch.Tensor

    @property
    def num_users(self) -> int:
        return self.users.shape[0]

    @property
    def num_items(self) -> int:
        return self.items.shape[0]


def merge_and_split(fused: list[torch.Tensor], num_users: int) -> FusedEmbeddings:
    merged = torch.stack(list(fused)).sum(dim=0)
    return FusedEmbeddings(list(fused), merged, merged[:num_users], merged[num_users:])


def predict(fused: FusedEmbeddings, u: int, i: int) -> torch.Tensor:
    if not (0 <= u < fused.num_users and 0 <= i < fused.num_items):
        raise IndexError(f"(user {u}, item {i}) outside {fused.num_users}x{fused.num_items}")
    return fused.users[u] @ fused.items[i]


def score_pairs(fused: FusedEmbeddings, users, items) -> torch.Tensor:
    return (fused.users[users] * fused.items[items]).sum(dim=-1)


# ---------------------------------------------------------------------------
# full forward
# ---------------------------------------------------------------------------

def sat_behaviors(variant: str, num_behaviors: int) -> list[int]:
    """Behaviors whose weights enter the alignment loss."""
    if variant == "base":
        return list(range(num_behaviors - 1))
    if variant == "swgcn_t":
        return list(range(num_behaviors))
    if variant in ("no_sat", "no_tpw"):
        return []
    raise ModelConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


@dataclass
class ForwardOutput:
    fused: FusedEmbeddings
    tpw: list[torch.Tensor]
    apv: dict[int, torch.Tensor] = field(default_factory=dict)


def forward(model: SWGCN, graphs: list[BehaviorGraph], lambda_s: float = 1.0, L: int = 3,
            p_message: float = 0.0, training: bool = False, variant: str = "base",
            degree_mode: str = "weighted", generator: torch.Generator | None = None) -> ForwardOutput:
    if len(graphs) != model.num_behaviors:
        raise ModelConfigError("one graph per behavior required")
    included = sat_behaviors(variant, model.num_behaviors)
    tpw, apv, layers = [], {}, []
    for r, graph in enumerate(graphs):
        E0 = model.embeddings[r]
        if variant == "no_tpw":
            w = torch.ones(graph.num_edges, dtype=E0.dtype)
        else:
            w = target_preference_weights(E0, model.beta[r], graph)
        tpw.append(w)
        if r in included:
            apv[r] = auxiliary_preference_scores(E0, graph)
        op = Propagator.from_graph(graph, w, lambda_s, degree_mode)
        layers.append(propagate(op, E0, L, p_message, training, generator))
    fused = attention_fuse(layers, model.W_q, model.W_k, model.W_v)
    return ForwardOutput(merge_and_split(fused, model.num_users), tpw, apv)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: SWGCN, path, hyperparameters: dict | None = None, seed: int = 0):
    """``.npz`` container of named float64 tensors plus a JSON metadata block."""
    meta = {
        "num_users": model.num_users, "num_items": model.num_items, "dim": model.dim,
        "num_behaviors": model.num_behaviors, "seed": int(seed),
        "hyperparameters": hyperparameters or {},
        "tensors": {k: list(v.shape) for k, v in model.named_tensors().items()},
    }
    arrays = {f"tensor/{k}": v.cpu().numpy() for k, v in model.named_tensors().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path) -> tuple[SWGCN, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        model = SWGCN(meta["num_users"], meta["num_items"], meta["dim"], meta["num_behaviors"])
        state = {k[len("tensor/"):]: torch.from_numpy(z[k].copy()) for k in z.files
                 if k.startswith("tensor/")}
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(state[name])
    return model, meta
