from dataclasses import replace

import numpy as np
import pytest

from topnav.cggn import (
    CggnConfig, CggnModel, GraphState, TrajectoryPrediction, init_graph_state,
    majority_vote, mode_of_samples, train_cggn,
)
from topnav.graphs import ObservationGraph, lower_triangular
from topnav.numerics import AdamState, Tensor, backward, gradcheck, softmax
from topnav.worldgen import NUM_CLASSES, CggnSample, generate_environments, sample_cggn_example

TINY = CggnConfig(hidden=6, gnn_layers=2, node_mlp_hidden=5, K=2, B=3, max_obs=12)


def _chain(n, classes=None):
    x = np.zeros((n, NUM_CLASSES))
    x[np.arange(n), classes if classes is not None else np.arange(n)] = 1.0
    return ObservationGraph(x, lower_triangular(n, [(i - 1, i) for i in range(1, n)]))


def _dest(c=4):
    d = np.zeros(NUM_CLASSES)
    d[c] = 1.0
    return d


@pytest.fixture(scope="module")
def corpus():
    envs = generate_environments(20, 4)
    rng = np.random.default_rng(0)
    return [sample_cggn_example(envs[i % 20], rng, B=3) for i in range(10)]


def _feat(state, a, b):
    for k, (x, y) in enumerate(state.pairs):
        if (x, y) == (a, b):
            return state.pair_feat[k]
    raise KeyError((a, b))


def test_edge_features_and_candidate_count():
    cfg = CggnConfig(B=5)
    st = init_graph_state(_chain(3), _dest(), cfg)
    assert len(st.cand) == 5 * 3 + 10 == 25
    assert _feat(st, 0, 3)[:4].tolist() == [1, 0, 0, 1]   # existing -> new
    assert _feat(st, 3, 4)[:4].tolist() == [0, 1, 0, 1]   # new -> new
    assert _feat(st, 0, 1)[:4].tolist() == [1, 0, 1, 0]   # observed edge
    assert set(np.unique(st.pair_feat)) <= {0.0, 1.0}


def test_node_embedding_inputs():
    cfg = CggnConfig(B=2, max_obs=4)
    obs = _chain(3, [5, 6, 7])
    st = init_graph_state(obs, _dest(9), cfg)
    row = st.node_inputs[2]
    assert row[:4].tolist() == [0, 1, 0, 0]        # L_2 padded to width 4
    assert row[4 + 7] == 1 and row[4 + 30 + 9] == 1
    assert st.is_new.tolist() == [False] * 3 + [True] * 2


def test_too_wide_observation_rejected():
    with pytest.raises(ValueError):
        init_graph_state(_chain(13), _dest(), TINY)
    with pytest.raises(ValueError):
        init_graph_state(ObservationGraph(np.zeros((0, NUM_CLASSES)), np.zeros((0, 0))), _dest(), TINY)


def test_zero_rounds_is_initial_state():
    m = CggnModel(TINY, rng=0)
    st = init_graph_state(_chain(3), _dest(), TINY)
    h0 = m.initial_states(st).data
    assert np.array_equal(m.message_pass(st, rounds=0).data, h0)
    assert np.all(h0[st.is_new] == 0)


def test_isolated_node_sees_zero_message():
    m = CggnModel(replace(TINY, gnn_layers=1), rng=0)
    st = init_graph_state(_chain(1), _dest(), m.cfg)
    lonely = replace(st, pairs=np.zeros((0, 2), dtype=np.int64), pair_feat=np.zeros((0, m.cfg.edge_feat_dim)),
                     cand=np.zeros(0, dtype=np.int64))
    h0 = m.initial_states(lonely)
    expected = m.layers[0].gru(Tensor(np.zeros(h0.shape)), h0).data
    np.testing.assert_allclose(m.message_pass(lonely).data, expected, atol=1e-15)


def _permute(state: GraphState, perm: np.ndarray) -> GraphState:
    """Relabel node i as perm[i]."""
    inv = np.argsort(perm)
    return replace(state, node_inputs=state.node_inputs[inv], is_new=state.is_new[inv],
                   pairs=perm[state.pairs], new_nodes=perm[state.new_nodes])


@pytest.mark.parametrize("seed", range(5))
def test_message_passing_equivariance(seed):
    m = CggnModel(TINY, rng=seed)
    st = init_graph_state(_chain(2, [1, 2]), _dest(), TINY)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(st.num_nodes)
    h = m.message_pass(st).data
    hp = m.message_pass(_permute(st, perm)).data
    np.testing.assert_allclose(hp[perm], h, atol=1e-12)
    # outputs that index by slot are unchanged by relabeling
    np.testing.assert_allclose(m.predict_nodes(Tensor(hp), _permute(st, perm)).data,
                               m.predict_nodes(Tensor(h), st).data, atol=1e-12)


def test_alpha_simplex_and_k1():
    st = init_graph_state(_chain(3), _dest(), TINY)
    m = CggnModel(TINY, rng=1)
    la, th = m.predict_edges(m.message_pass(st), st)
    assert abs(np.exp(la.data).sum() - 1) < 1e-9
    assert th.shape == (len(st.cand), 2)
    m1 = CggnModel(replace(TINY, K=1), rng=1)
    _, alpha, theta, _ = m1.predict(_chain(3), _dest())
    assert alpha.tolist() == [1.0] and np.all((theta > 0) & (theta < 1))


def test_pair_difference_antisymmetry():
    st = init_graph_state(_chain(2), _dest(), TINY)
    m = CggnModel(TINY, rng=2)
    h = m.message_pass(st)
    d = m.pair_differences(h, st).data
    swapped = replace(st, pairs=st.pairs[:, ::-1].copy())
    np.testing.assert_array_equal(m.pair_differences(h, swapped).data, -d)


def test_node_predictions():
    st = init_graph_state(_chain(3), _dest(), TINY)
    m = CggnModel(TINY, rng=3)
    h = m.message_pass(st)
    p = softmax(m.predict_nodes(h, st)).data
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-12)
    same = Tensor(np.tile(h.data[st.new_nodes[0][0]], (h.shape[0], 1)))
    q = softmax(m.predict_nodes(same, st)).data
    assert np.array_equal(q[0], q[1])


class _PaddedGarbage(CggnSample):
    """Same sample, but padded slots carry arbitrary targets and rows."""

    def __init__(self, base: CggnSample, rng):
        super().__init__(**base.__dict__)
        self._pad = rng.integers(NUM_CLASSES, size=self.B)
        self.target_rows = list(base.target_rows) + [
            rng.integers(0, 2, size=base.n_obs + t).astype(np.int8) for t in range(self.valid_count, self.B)]

    def padded_targets(self):
        out = self._pad.copy()
        out[:self.valid_count] = self.target_classes
        return out


def test_loss_masking_bit_exact(corpus):
    m = CggnModel(TINY, rng=0)
    padded = [s for s in corpus if s.valid_count < s.B]
    assert padded
    e0, n0 = m.losses(padded)
    backward(e0 + n0)
    g0 = {k: v.grad.copy() for k, v in m.params.items()}
    m.params.zero_grad()
    garbage = [_PaddedGarbage(s, np.random.default_rng(i)) for i, s in enumerate(padded)]
    e1, n1 = m.losses(garbage)
    assert e1.item() == e0.item() and n1.item() == n0.item()
    backward(e1 + n1)
    for k, v in m.params.items():
        assert np.array_equal(v.grad, g0[k])


@pytest.mark.parametrize("seed", range(3))
def test_cggn_loss_gradcheck(corpus, seed):
    m = CggnModel(replace(TINY, gnn_layers=1), rng=seed)
    batch = corpus[:3]
    names = ["cggn.embed.w", "cggn.gnn.layer0.msg.edge.w", "cggn.gnn.layer0.gru.wn",
             "cggn.alpha.l0.w", "cggn.theta.l1.b", "cggn.node.l2.w"]

    def total():
        e, n = m.losses(batch)
        return e + n

    assert gradcheck(total, [m.params[k] for k in names]) < 1e-4


def test_loss_decreases(corpus):
    cfg = replace(TINY, hidden=16, node_mlp_hidden=16, gnn_layers=2, batch_size=10, lr=1e-2)
    m, curve = train_cggn(corpus, cfg, iterations=200, log_every=199)
    first = curve[0]["edge_nll"] + curve[0]["node_ce"]
    last = curve[-1]["edge_nll"] + curve[-1]["node_ce"]
    assert last < 0.5 * first


def test_train_step_rejects_empty():
    with pytest.raises(ValueError):
        CggnModel(TINY, rng=0).train_step([], AdamState())


def test_mode_of_samples_oracle():
    hits = 0
    for seed in range(100):
        bits = mode_of_samples([1.0], [[0.99, 0.01]], 100, np.random.default_rng(seed))
        hits += bits.tolist() == [1, 0]
    assert hits >= 99
    bits = mode_of_samples([0.3, 0.7], [[1.0, 0.0, 1.0], [1.0, 0.0, 1.0]], 100, np.random.default_rng(0))
    assert bits.tolist() == [1, 0, 1]


def test_majority_tie_counts_as_edge():
    assert majority_vote([[1, 0], [0, 0]]).tolist() == [1, 0]


def test_generate_trajectory_subgoal_and_rows():
    m = CggnModel(TINY, rng=0)
    pred = m.generate_trajectory(_chain(2), _dest(), rng=0, n_samples=20)
    assert isinstance(pred, TrajectoryPrediction)
    assert pred.subgoal is pred.node_probs[0] or np.array_equal(pred.subgoal, pred.node_probs[0])
    assert [len(r) for r in pred.sampled_adjacency] == [2, 3, 4]
    again = m.generate_trajectory(_chain(2), _dest(), rng=0, n_samples=20)
    assert all(np.array_equal(a, b) for a, b in zip(pred.sampled_adjacency, again.sampled_adjacency))


def test_kept_slots():
    pred = TrajectoryPrediction(np.zeros((3, 30)), np.ones(1), np.zeros((1, 1)), [],
                                [np.array([0, 1]), np.array([0, 0, 0]), np.array([0, 0, 0, 0])], 2)
    assert pred.kept_slots() == [0]
    pred.sampled_adjacency[2] = np.array([0, 0, 0, 1])
    assert pred.kept_slots() == [0, 1, 2]


def test_batching_matches_single(corpus):
    m = CggnModel(TINY, rng=5)
    e_b, n_b = m.losses(corpus[:4])
    singles = [m.losses([s]) for s in corpus[:4]]
    assert abs(e_b.item() - np.mean([e.item() for e, _ in singles])) < 1e-10
    assert abs(n_b.item() - np.mean([n.item() for _, n in singles])) < 1e-10


def test_save_load_round_trip(tmp_path):
    m = CggnModel(TINY, rng=7)
    m.save(tmp_path / "c.ckpt")
    back = CggnModel.load(tmp_path / "c.ckpt", TINY)
    a = m.predict(_chain(3), _dest())
    b = back.predict(_chain(3), _dest())
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[2], b[2])
