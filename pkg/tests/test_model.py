import math

import numpy as np
import pytest
import torch

from swgcn.graph import (
    BehaviorGraph,
    assemble_weighted_adjacency,
    degree_normalize,
)
from swgcn.model import (
    SWGCN,
    ModelConfigError,
    Propagator,
    attention_fuse,
    attention_weights,
    auxiliary_preference_scores,
    forward,
    init_params,
    load_checkpoint,
    merge_and_split,
    predict,
    propagate,
    save_checkpoint,
    target_preference_weights,
)

T = torch.float64


def t(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def random_graph(rng, nu, ni, density=0.4, behavior=0):
    A = rng.random((nu, ni)) < density
    u, i = np.nonzero(A)
    return BehaviorGraph(behavior, nu, ni, u, i)


def dense_normalized(graph, w, lam):
    """Independent dense oracle for D^-1/2 A D^-1/2."""
    n = graph.num_nodes
    M = np.zeros((n, n))
    for (u, i), x in zip(zip(graph.users, graph.items), w):
        M[u, graph.num_users + i] = x
        M[graph.num_users + i, u] = x
    M += lam * np.eye(n)
    d = M.sum(axis=1)
    inv = np.array([1 / math.sqrt(x) if x > 0 else 0.0 for x in d])
    return inv[:, None] * M * inv[None, :]


class TestInit:
    def test_deterministic(self):
        a, b = init_params(5, 6, 8, 3, seed=4), init_params(5, 6, 8, 3, seed=4)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and torch.equal(pa, pb)
        c = init_params(5, 6, 8, 3, seed=5)
        assert not torch.equal(a.embeddings[0], c.embeddings[0])

    def test_default_dim(self):
        m = SWGCN(10, 7)
        assert all(e.shape == (17, 32) for e in m.embeddings)
        assert m.beta.shape == (4, 32) and m.W_q.shape == (32, 32)

    def test_xavier_bounds_and_mean(self):
        d = 8
        m = init_params(600, 650, d, 1, seed=0)
        E = m.embeddings[0].detach().numpy().ravel()   # 10^4 entries
        bound = math.sqrt(6 / (2 * d))
        assert np.all(np.abs(E) <= bound)
        sigma = bound / math.sqrt(3) / math.sqrt(E.size)
        assert abs(E.mean()) < 3 * sigma
        assert np.all(np.abs(m.beta.detach().numpy()) <= math.sqrt(6 / (1 + d)))


class TestTargetPreferenceWeights:
    def test_single_neighbor(self):
        g = BehaviorGraph(0, 1, 1, [0], [0])
        w = target_preference_weights(torch.randn(2, 3, dtype=T), torch.randn(3, dtype=T), g)
        assert w.tolist() == [1.0]

    def test_identical_neighbors(self):
        g = BehaviorGraph(0, 1, 2, [0, 0], [0, 1])
        E = t([[0.3, -0.2], [1.0, 1.0], [1.0, 1.0]])
        w = target_preference_weights(E, t([0.4, -2.0]), g)
        assert w.tolist() == [0.5, 0.5]

    def test_scalar_example(self):
        g = BehaviorGraph(0, 1, 2, [0, 0], [0, 1])
        E = t([[0, 0], [1, 0], [0, 2]])
        w = target_preference_weights(E, t([1, 1]), g)
        # logits ELU(1)=1, ELU(2)=2
        expected = [math.exp(1) / (math.exp(1) + math.exp(2)), math.exp(2) / (math.exp(1) + math.exp(2))]
        np.testing.assert_allclose(w.numpy(), expected, atol=1e-12)
        np.testing.assert_allclose(w.numpy(), [0.2689, 0.7311], atol=1e-4)

    def test_negative_logits_use_elu(self):
        g = BehaviorGraph(0, 1, 2, [0, 0], [0, 1])
        E = t([[0, 0], [1, 0], [0, 2]])
        w = target_preference_weights(E, t([-1, -1]), g)
        l1, l2 = math.exp(-1) - 1, math.exp(-2) - 1
        expected = np.exp([l1, l2]) / np.exp([l1, l2]).sum()
        np.testing.assert_allclose(w.numpy(), expected, atol=1e-12)

    def test_normalization_on_1000_edges(self, rng):
        g = random_graph(rng, 80, 60, density=1000 / 4800)
        assert abs(g.num_edges - 1000) < 150
        E = torch.randn(140, 16, dtype=T)
        w = target_preference_weights(E, torch.randn(16, dtype=T) * 3, g).numpy()
        sums = np.bincount(g.users, weights=w, minlength=80)
        has = np.bincount(g.users, minlength=80) > 0
        np.testing.assert_allclose(sums[has], 1.0, atol=1e-6)
        assert np.all(w > 0) and np.all(w <= 1)

    def test_extreme_logits_stay_finite(self):
        g = BehaviorGraph(0, 1, 2, [0, 0], [0, 1])
        E = t([[0, 0], [400, 0], [0, 1]])
        w = target_preference_weights(E, t([3, 3]), g)
        assert torch.all(torch.isfinite(w)) and w.sum().item() == pytest.approx(1.0)


class TestAuxiliaryScores:
    def test_identical(self):
        g = BehaviorGraph(0, 1, 1, [0], [0])
        assert auxiliary_preference_scores(t([[1, 2], [1, 2]]), g).tolist() == [0.0]

    def test_analytic(self):
        g = BehaviorGraph(0, 1, 1, [0], [0])
        assert auxiliary_preference_scores(t([[1, 0], [0, 1]]), g).tolist() == [2.0]

    def test_loop_oracle(self, rng):
        g = BehaviorGraph(0, 1, 1, [0], [0])
        E = rng.standard_normal((2, 8))
        expected = sum((E[0, k] - E[1, k]) ** 2 for k in range(8))
        assert auxiliary_preference_scores(t(E), g).item() == pytest.approx(expected, abs=1e-12)


class TestPropagate:
    def _op(self, graph, w, lam):
        return Propagator.from_graph(graph, t(w), lam)

    def test_isolated_node_unchanged(self):
        g = BehaviorGraph(0, 1, 1, [], [])
        E = torch.randn(2, 4, dtype=T)
        assert torch.equal(propagate(self._op(g, [], 1.0), E, L=5), E)

    def test_single_edge_swaps(self):
        g = BehaviorGraph(0, 1, 1, [0], [0])
        E = t([[1, 2], [3, 4]])
        out = propagate(self._op(g, [1.0], 0.0), E, L=1)
        assert out.tolist() == [[3, 4], [1, 2]]

    def test_matrix_power_oracle(self, rng):
        g = random_graph(rng, 2, 2, density=0.7)
        w = rng.random(g.num_edges)
        E = rng.standard_normal((4, 3))
        expected = np.linalg.matrix_power(dense_normalized(g, w, 0.6), 3) @ E
        out = propagate(self._op(g, w, 0.6), t(E), L=3)
        np.testing.assert_allclose(out.numpy(), expected, atol=1e-10)

    def test_scipy_adjacency_input(self, rng):
        g = random_graph(rng, 3, 4)
        w = rng.random(g.num_edges)
        norm = degree_normalize(assemble_weighted_adjacency(g, w, 0.5))
        E = rng.standard_normal((7, 2))
        a = propagate(norm, t(E), L=2)
        b = propagate(self._op(g, w, 0.5), t(E), L=2)
        np.testing.assert_allclose(a.numpy(), b.numpy(), atol=1e-14)

    def test_operator_matches_scipy_normalization(self, rng):
        g = random_graph(rng, 6, 5)
        w = rng.random(g.num_edges)
        for lam in (0.0, 0.3):
            for mode in ("weighted", "structural"):
                ref = degree_normalize(assemble_weighted_adjacency(g, w, lam), mode).matrix.toarray()
                op = Propagator.from_graph(g, t(w), lam, mode)
                np.testing.assert_allclose(op.dense().numpy(), ref, atol=1e-14)

    def test_linearity(self, rng):
        g = random_graph(rng, 5, 6)
        op = self._op(g, rng.random(g.num_edges), 0.8)
        X, Y = torch.randn(11, 4, dtype=T), torch.randn(11, 4, dtype=T)
        lhs = propagate(op, 2.5 * X - 0.7 * Y, L=3)
        rhs = 2.5 * propagate(op, X, L=3) - 0.7 * propagate(op, Y, L=3)
        np.testing.assert_allclose(lhs.numpy(), rhs.numpy(), atol=1e-10)

    def test_bad_dropout_rate(self):
        g = BehaviorGraph(0, 1, 1, [0], [0])
        with pytest.raises(ModelConfigError):
            propagate(self._op(g, [1.0], 1.0), torch.zeros(2, 2, dtype=T), 1, p_message=1.0)
        with pytest.raises(ModelConfigError):
            propagate(self._op(g, [1.0], 1.0), torch.zeros(2, 2, dtype=T), 0)

    def test_eval_mode_ignores_dropout(self, rng):
        g = random_graph(rng, 4, 4)
        op = self._op(g, rng.random(g.num_edges), 1.0)
        E = torch.randn(8, 3, dtype=T)
        assert torch.equal(propagate(op, E, 2, 0.5, training=False), propagate(op, E, 2))

    def test_dropout_expectation(self, rng):
        g = random_graph(rng, 3, 3, density=0.6)
        op = self._op(g, rng.random(g.num_edges), 1.0)
        E = torch.randn(6, 2, dtype=T)
        gen = torch.Generator().manual_seed(0)
        n = 10_000
        draws = torch.stack([propagate(op, E, 2, 0.5, True, gen) for _ in range(n)])
        mean = draws.mean(0)
        se = draws.std(0) / math.sqrt(n)
        clean = propagate(op, E, 2)
        assert torch.all((mean - clean).abs() <= 3 * se + 1e-12)


def per_node_attention_oracle(H, Wq, Wk, Wv):
    R, N, d = H.shape
    out = np.zeros_like(H)
    for n in range(N):
        for r in range(R):
            q = sum(H[r, n, a] * Wq[a, :] for a in range(d))
            scores = []
            for s in range(R):
                k = H[s, n] @ Wk
                scores.append(sum(q[c] * k[c] for c in range(d)) / math.sqrt(d))
            m = max(scores)
            ex = [math.exp(x - m) for x in scores]
            z = sum(ex)
            acc = H[r, n].copy()
            for s in range(R):
                acc += ex[s] / z * (H[s, n] @ Wv)
            out[r, n] = acc
    return out


class TestAttention:
    def test_single_behavior(self):
        H = torch.randn(1, 5, 3, dtype=T)
        Wq, Wk, Wv = (torch.randn(3, 3, dtype=T) for _ in range(3))
        out = attention_fuse(H, Wq, Wk, Wv)
        np.testing.assert_allclose(out[0].numpy(), (H[0] + H[0] @ Wv).numpy(), atol=1e-14)

    def test_zero_query_uniform(self):
        H = torch.randn(3, 4, 2, dtype=T)
        Wk, Wv = torch.randn(2, 2, dtype=T), torch.randn(2, 2, dtype=T)
        out = attention_fuse(H, torch.zeros(2, 2, dtype=T), Wk, Wv)
        mean_v = (H @ Wv).mean(0)
        for r in range(3):
            np.testing.assert_allclose(out[r].numpy(), (H[r] + mean_v).numpy(), atol=1e-14)

    def test_scalar_oracle(self, rng):
        H = rng.standard_normal((2, 6, 2))
        W = [rng.standard_normal((2, 2)) for _ in range(3)]
        out = torch.stack(attention_fuse(t(H), *map(t, W))).numpy()
        np.testing.assert_allclose(out, per_node_attention_oracle(H, *W), atol=1e-10)

    def test_softmax_rows(self, rng):
        H = t(rng.standard_normal((4, 50, 8)) * 5)
        A = attention_weights(H, t(rng.standard_normal((8, 8))), t(rng.standard_normal((8, 8))))
        np.testing.assert_allclose(A.sum(-1).numpy(), 1.0, atol=1e-6)


class TestMergePredict:
    def test_single_behavior_identity(self):
        X = torch.randn(5, 3, dtype=T)
        f = merge_and_split([X], 2)
        assert torch.equal(f.merged, X) and f.users.shape == (2, 3) and f.items.shape == (3, 3)

    def test_cancellation(self):
        X = torch.randn(5, 3, dtype=T)
        assert torch.count_nonzero(merge_and_split([X, -X], 2).merged) == 0

    def test_sum_oracle(self, rng):
        parts = [rng.standard_normal((4, 3)) for _ in range(3)]
        f = merge_and_split([t(p) for p in parts], 1)
        expected = np.zeros((4, 3))
        for p in parts:
            for a in range(4):
                for b in range(3):
                    expected[a, b] += p[a, b]
        np.testing.assert_allclose(f.merged.numpy(), expected, atol=1e-15)

    def test_predict(self, rng):
        f = merge_and_split([t(np.vstack([np.zeros((1, 4)), np.eye(4)]))], 1)
        assert all(predict(f, 0, i).item() == 0 for i in range(4))
        g = merge_and_split([t(np.array([[0, 1.0, 0], [0, 1.0, 0]]))], 1)
        assert predict(g, 0, 0).item() == 1.0
        X = rng.standard_normal((2, 32))
        h = merge_and_split([t(X)], 1)
        assert predict(h, 0, 0).item() == pytest.approx(sum(X[0, k] * X[1, k] for k in range(32)),
                                                        abs=1e-12)
        with pytest.raises(IndexError):
            predict(h, 1, 0)
        with pytest.raises(IndexError):
            predict(h, 0, 1)


class TestForward:
    def test_no_tpw_matches_unweighted_oracle(self, rng):
        g = random_graph(rng, 4, 5)
        m = SWGCN(4, 5, 3, 1, seed=2)
        out = forward(m, [g], lambda_s=1.0, L=2, variant="no_tpw")
        E0 = m.embeddings[0].detach().numpy()
        H = np.linalg.matrix_power(dense_normalized(g, np.ones(g.num_edges), 1.0), 2) @ E0
        Wv = m.W_v.detach().numpy()
        np.testing.assert_allclose(out.fused.merged.detach().numpy(), H + H @ Wv, atol=1e-12)
        assert torch.all(out.tpw[0] == 1)

    def test_eval_deterministic_and_p0_training(self, rng):
        gs = [random_graph(rng, 5, 6, behavior=r) for r in range(3)]
        m = SWGCN(5, 6, 4, 3, seed=0)
        a = forward(m, gs, p_message=0.3).fused.merged
        b = forward(m, gs, p_message=0.3).fused.merged
        c = forward(m, gs, p_message=0.0, training=True).fused.merged
        assert torch.equal(a, b) and torch.equal(a, c)
        d = forward(m, gs, p_message=0.3, training=True,
                    generator=torch.Generator().manual_seed(1)).fused.merged
        assert not torch.equal(a, d)

    @pytest.mark.parametrize("variant,expected", [("base", [0, 1]), ("swgcn_t", [0, 1, 2]),
                                                  ("no_sat", []), ("no_tpw", [])])
    def test_apv_behaviors(self, rng, variant, expected):
        gs = [random_graph(rng, 4, 4, behavior=r) for r in range(3)]
        out = forward(SWGCN(4, 4, 2, 3), gs, variant=variant)
        assert sorted(out.apv) == expected
        for r in expected:
            assert out.apv[r].shape == out.tpw[r].shape
            assert torch.all(out.apv[r] >= 0)

    def test_unknown_variant(self, rng):
        gs = [random_graph(rng, 3, 3, behavior=r) for r in range(2)]
        with pytest.raises(ModelConfigError):
            forward(SWGCN(3, 3, 2, 2), gs, variant="nope")

    def test_linear_scaling(self):
        # forward cost grows about linearly with edge count
        from swgcn.experiments import forward_time_ratio
        assert forward_time_ratio(scale=2) <= 2.5


def _unique_graph(rng, r, nu, ni, n):
    cells = rng.choice(nu * ni, size=n, replace=False)
    return BehaviorGraph(r, nu, ni, cells // ni, cells % ni)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        m = SWGCN(3, 4, 5, 2, seed=9)
        save_checkpoint(m, tmp_path / "c.npz", {"lambda_s": 0.5}, seed=9)
        back, meta = load_checkpoint(tmp_path / "c.npz")
        for (n1, p1), (n2, p2) in zip(m.named_parameters(), back.named_parameters()):
            assert n1 == n2 and torch.equal(p1, p2)
        assert meta["hyperparameters"] == {"lambda_s": 0.5} and meta["seed"] == 9
        assert meta["tensors"]["W_q"] == [5, 5]
