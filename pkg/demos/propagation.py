"""Walk through one forward pass on a toy graph and check it against dense algebra.

    python demos/propagation.py
"""
import numpy as np
import torch

from swgcn.graph import BehaviorGraph, assemble_weighted_adjacency, degree_normalize
from swgcn.model import SWGCN, Propagator, auxiliary_preference_scores, propagate, target_preference_weights

torch.set_num_threads(1)
np.set_printoptions(precision=4, suppress=True)

# Two users, three items, one behavior. User 0 touched items 0 and 1,
# user 1 touched items 1 and 2.
graph = BehaviorGraph(0, num_users=2, num_items=3, users=[0, 0, 1, 1], items=[0, 1, 1, 2])
model = SWGCN(2, 3, dim=4, num_behaviors=1, seed=0)
emb0, beta = model.embeddings[0], model.beta[0]

# Edge weights: a softmax over each user's neighbors of ELU(|e_u - e_i| . beta).
with torch.no_grad():
    weights = target_preference_weights(emb0, beta, graph)
    scores = auxiliary_preference_scores(emb0, graph)
print("edge weights        ", weights.numpy())
print("squared distances   ", scores.numpy())

# The weighted adjacency keeps a self loop of strength lambda_s on every node
# and is normalized symmetrically by its weighted degrees.
lambda_s = 0.5
adj = assemble_weighted_adjacency(graph, weights.numpy(), lambda_s)
norm = degree_normalize(adj)
print("normalized adjacency\n", norm.matrix.toarray())

# Three propagation steps equal the third matrix power applied to E0.
with torch.no_grad():
    op = Propagator.from_graph(graph, weights, lambda_s, "weighted")
    out = propagate(op, emb0, L=3).numpy()
dense = np.linalg.matrix_power(norm.matrix.toarray(), 3) @ emb0.detach().numpy()
print("max |sparse - dense| after 3 layers:", np.abs(out - dense).max())

# Without self loops, item 0 only ever hears from user 0 and the two sides swap
# information every layer; lambda_s keeps part of each node's own signal.
no_loop = degree_normalize(assemble_weighted_adjacency(graph, weights.numpy(), 0.0))
print("diagonal with lambda_s=0.5:", np.diag(norm.matrix.toarray()))
print("diagonal with lambda_s=0  :", np.diag(no_loop.matrix.toarray()))
