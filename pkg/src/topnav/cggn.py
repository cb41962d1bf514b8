"""Conditional graph generation network.

Given an observation graph and a destination class, predict a block of up to
B new room nodes (class distributions) and their edge rows. Edges use a
mixture of Bernoulli likelihood whose mixture weights are shared per graph.
Message passing follows the gated GNN + GRU recipe used by GRAN.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .graphs import ObservationGraph
from .numerics import (
    AdamState, GRUCell, Linear, MLP, NonFiniteError, ParamSet, Tensor, adam_step,
    backward, index, load_checkpoint, log_softmax, logsumexp, mul, no_grad,
    relu, save_checkpoint, segment_sum, sigmoid, softmax, softplus, tsum,
)
from .rng import as_rng, derive_rng
from .worldgen import NUM_CLASSES, CggnSample


@dataclass
class CggnConfig:
    B: int = 5
    hidden: int = 256
    gnn_layers: int = 5
    node_mlp_hidden: int = 128
    K: int = 2
    max_obs: int = 32
    batch_size: int = 60
    lr: float = 1e-3
    iterations: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.B < 1 or self.gnn_layers < 0 or self.K < 1 or self.hidden < 1 or self.max_obs < 1:
            raise ValueError(f"invalid CGGN config: {self}")

    @property
    def edge_feat_dim(self) -> int:
        # involvement code of both endpoints, then block-slot one-hots
        return 4 + 2 * self.B

    @property
    def input_dim(self) -> int:
        return self.max_obs + 2 * NUM_CLASSES


def _code(is_new: bool) -> list[float]:
    return [0.0, 1.0] if is_new else [1.0, 0.0]


@dataclass
class GraphState:
    """A (possibly batched) disjoint union of graphs ready for message passing.

    Node layout per graph: observed nodes first, then B new nodes. ``pairs``
    are undirected (first, second) node pairs with their edge features;
    candidate pairs are a subset, listed in row-major generation order.
    """

    node_inputs: np.ndarray   # (N, input_dim); rows of new nodes are ignored
    is_new: np.ndarray        # (N,) bool
    pairs: np.ndarray         # (P, 2) global node ids
    pair_feat: np.ndarray     # (P, edge_feat_dim)
    cand: np.ndarray          # (C,) indices into pairs
    cand_graph: np.ndarray    # (C,) graph index of each candidate
    cand_row: np.ndarray      # (C,) generated slot t
    cand_col: np.ndarray      # (C,) column j within row t
    new_nodes: np.ndarray     # (G, B) global ids of the new slots
    n_obs: list[int] = field(default_factory=list)

    @property
    def num_graphs(self) -> int:
        return self.new_nodes.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.is_new.shape[0]

    def candidate_count(self, g: int) -> int:
        return int(np.sum(self.cand_graph == g))


def candidate_order(n_obs: int, B: int) -> list[tuple[int, int]]:
    """(slot t, column j) for every candidate edge; j < n_obs is an observed node."""
    return [(t, j) for t in range(B) for j in range(n_obs + t)]


def init_graph_state(obs: ObservationGraph, d, cfg: CggnConfig) -> GraphState:
    return batch_graph_states([(obs, d)], cfg)


def batch_graph_states(items, cfg: CggnConfig) -> GraphState:
    B, W = cfg.B, cfg.max_obs
    inputs, is_new, pairs, feats = [], [], [], []
    cand, cand_graph, cand_row, cand_col, new_nodes, n_obs_list = [], [], [], [], [], []
    base = 0
    for g, (obs, d) in enumerate(items):
        n = obs.n
        if n < 1:
            raise ValueError("observation graph is empty")
        if n > W:
            raise ValueError(f"observation graph has {n} nodes, more than max width {W}")
        d = np.asarray(d, dtype=np.float64)
        rows = np.zeros((n + B, cfg.input_dim))
        rows[:n, :n] = obs.adj
        rows[:n, W:W + NUM_CLASSES] = obs.x
        rows[:n, W + NUM_CLASSES:] = d
        inputs.append(rows)
        is_new.append(np.arange(n + B) >= n)

        def feat(a, b):
            f = np.zeros(cfg.edge_feat_dim)
            f[:4] = _code(a >= n) + _code(b >= n)
            if a >= n:
                f[4 + a - n] = 1.0
            if b >= n:
                f[4 + B + b - n] = 1.0
            return f

        for j, i in obs.edges():
            pairs.append((base + j, base + i))
            feats.append(feat(j, i))
        for t, j in candidate_order(n, B):
            cand.append(len(pairs))
            cand_graph.append(g)
            cand_row.append(t)
            cand_col.append(j)
            pairs.append((base + j, base + n + t))
            feats.append(feat(j, n + t))
        new_nodes.append(base + n + np.arange(B))
        n_obs_list.append(n)
        base += n + B
    return GraphState(
        node_inputs=np.concatenate(inputs), is_new=np.concatenate(is_new),
        pairs=np.asarray(pairs, dtype=np.int64).reshape(-1, 2),
        pair_feat=np.asarray(feats).reshape(-1, cfg.edge_feat_dim),
        cand=np.asarray(cand, dtype=np.int64), cand_graph=np.asarray(cand_graph, dtype=np.int64),
        cand_row=np.asarray(cand_row, dtype=np.int64), cand_col=np.asarray(cand_col, dtype=np.int64),
        new_nodes=np.asarray(new_nodes, dtype=np.int64), n_obs=n_obs_list,
    )


def _directed(state: GraphState, B: int):
    """Both directions of every pair; the feature halves follow (receiver, sender)."""
    a, b = state.pairs[:, 0], state.pairs[:, 1]
    f = state.pair_feat
    swapped = np.concatenate([f[:, 2:4], f[:, 0:2], f[:, 4 + B:], f[:, 4:4 + B]], axis=1)
    dst = np.concatenate([a, b])
    src = np.concatenate([b, a])
    return dst, src, np.concatenate([f, swapped])


class GnnLayer:
    def __init__(self, params: ParamSet, name: str, hidden: int, edge_dim: int, rng):
        self.m_dst = Linear(params, f"{name}.msg.dst", hidden, hidden, rng)
        self.m_src = Linear(params, f"{name}.msg.src", hidden, hidden, rng, bias=False)
        self.m_edge = Linear(params, f"{name}.msg.edge", edge_dim, hidden, rng, bias=False)
        self.m_out = Linear(params, f"{name}.msg.out", hidden, hidden, rng)
        self.a_dst = Linear(params, f"{name}.gate.dst", hidden, hidden, rng)
        self.a_src = Linear(params, f"{name}.gate.src", hidden, hidden, rng, bias=False)
        self.a_edge = Linear(params, f"{name}.gate.edge", edge_dim, hidden, rng, bias=False)
        self.a_out = Linear(params, f"{name}.gate.out", hidden, hidden, rng)
        self.gru = GRUCell(params, f"{name}.gru", hidden, hidden, rng)

    def __call__(self, h: Tensor, dst, src, e: Tensor | None) -> Tensor:
        if e is None:
            return self.gru(Tensor(np.zeros(h.shape)), h)
        # first layer of MLP([h_dst, h_src, e]) split by input block, applied per node then gathered
        m = relu(index(self.m_dst(h), dst) + index(self.m_src(h), src) + self.m_edge(e))
        a = relu(index(self.a_dst(h), dst) + index(self.a_src(h), src) + self.a_edge(e))
        msg = mul(sigmoid(self.a_out(a)), self.m_out(m))
        agg = segment_sum(msg, dst, h.shape[0])
        return self.gru(agg, h)


@dataclass
class TrajectoryPrediction:
    node_probs: np.ndarray        # (B, 30)
    alpha: np.ndarray             # (K,)
    theta: np.ndarray             # (K, C) per candidate edge
    candidates: list[tuple[int, int]]
    sampled_adjacency: list[np.ndarray]  # one 0/1 row per slot, length n_obs + t
    n_obs: int

    @property
    def subgoal(self) -> np.ndarray:
        return self.node_probs[0]

    def kept_slots(self) -> list[int]:
        """Slots with at least one sampled incident edge."""
        B = len(self.sampled_adjacency)
        touched = [bool(self.sampled_adjacency[t].any()) for t in range(B)]
        for t in range(B):
            for s in range(t):
                if self.sampled_adjacency[t][self.n_obs + s]:
                    touched[s] = True
        return [t for t in range(B) if touched[t]]

    def to_json(self) -> dict:
        return {
            "node_probs": self.node_probs.tolist(), "alpha": self.alpha.tolist(),
            "theta": self.theta.tolist(), "candidates": [list(c) for c in self.candidates],
            "sampled_adjacency": [r.tolist() for r in self.sampled_adjacency],
            "n_obs": self.n_obs, "kept_slots": self.kept_slots(),
        }


class CggnModel:
    def __init__(self, cfg: CggnConfig | None = None, rng=None):
        self.cfg = cfg = cfg or CggnConfig()
        rng = as_rng(rng) if rng is not None else None
        p = self.params = ParamSet()
        H = cfg.hidden
        self.embed = Linear(p, "cggn.embed", cfg.input_dim, H, rng)
        self.layers = [GnnLayer(p, f"cggn.gnn.layer{r}", H, cfg.edge_feat_dim, rng)
                       for r in range(cfg.gnn_layers)]
        self.alpha_mlp = MLP(p, "cggn.alpha", (H, H, cfg.K), rng)
        self.theta_mlp = MLP(p, "cggn.theta", (H, H, cfg.K), rng)
        self.node_mlp = MLP(p, "cggn.node", (H, cfg.node_mlp_hidden, cfg.node_mlp_hidden, NUM_CLASSES), rng)

    # -- forward pieces -------------------------------------------------
    def initial_states(self, state: GraphState) -> Tensor:
        keep = (~state.is_new).astype(np.float64)[:, None]
        return mul(self.embed(Tensor(state.node_inputs)), keep)

    def message_pass(self, state: GraphState, rounds: int | None = None) -> Tensor:
        h = self.initial_states(state)
        rounds = len(self.layers) if rounds is None else rounds
        if rounds > len(self.layers):
            raise ValueError(f"model has {len(self.layers)} GNN layers, asked for {rounds}")
        dst, src, e = _directed(state, self.cfg.B)
        e = Tensor(e) if len(dst) else None
        for layer in self.layers[:rounds]:
            h = layer(h, dst, src, e)
        return h

    def pair_differences(self, h: Tensor, state: GraphState) -> Tensor:
        """h_new - h_other for every candidate edge."""
        pairs = state.pairs[state.cand]
        return index(h, pairs[:, 1]) - index(h, pairs[:, 0])

    def predict_edges(self, h: Tensor, state: GraphState) -> tuple[Tensor, Tensor]:
        """Returns (log_alpha (G, K), theta_logits (C, K))."""
        diff = self.pair_differences(h, state)
        summed = segment_sum(self.alpha_mlp(diff), state.cand_graph, state.num_graphs)
        return log_softmax(summed), self.theta_mlp(diff)

    def predict_nodes(self, h: Tensor, state: GraphState) -> Tensor:
        """Class logits, shape (G * B, 30), graph-major."""
        return self.node_mlp(index(h, state.new_nodes.reshape(-1)))

    def forward(self, state: GraphState):
        h = self.message_pass(state)
        log_alpha, theta_logits = self.predict_edges(h, state)
        return log_alpha, theta_logits, self.predict_nodes(h, state)

    # -- training -------------------------------------------------------
    def losses(self, samples: list[CggnSample]) -> tuple[Tensor, Tensor]:
        """(edge NLL, node CE), both averaged over the batch."""
        if not samples:
            raise ValueError("empty CGGN batch")
        cfg = self.cfg
        state = batch_graph_states([(s.observation, s.destination) for s in samples], cfg)
        log_alpha, theta_logits, node_logits = self.forward(state)
        labels = np.zeros(len(state.cand))
        valid = np.zeros(len(state.cand))
        for g, s in enumerate(samples):
            sel = np.nonzero(state.cand_graph == g)[0]
            rows, cols = state.cand_row[sel], state.cand_col[sel]
            ok = rows < s.valid_count
            valid[sel[ok]] = 1.0
            labels[sel[ok]] = [s.target_rows[t][j] for t, j in zip(rows[ok], cols[ok])]
        # per-candidate Bernoulli log-likelihood for each component, masked to valid rows
        ll = -(mul(softplus(-theta_logits), labels[:, None]) + mul(softplus(theta_logits), 1.0 - labels[:, None]))
        ll = mul(ll, valid[:, None])
        per_graph = segment_sum(ll, state.cand_graph, state.num_graphs) + log_alpha
        edge_nll = -tsum(logsumexp(per_graph)) * (1.0 / len(samples))
        tgt = np.concatenate([s.padded_targets() for s in samples])
        slot = np.tile(np.arange(cfg.B), len(samples))
        node_idx = np.nonzero(slot < np.repeat([s.valid_count for s in samples], cfg.B))[0]
        lp = log_softmax(index(node_logits, node_idx))
        node_ce = -tsum(index(lp, (np.arange(len(node_idx)), tgt[node_idx]))) * (1.0 / len(samples))
        return edge_nll, node_ce

    def train_step(self, samples: list[CggnSample], adam: AdamState) -> tuple[float, float]:
        edge_nll, node_ce = self.losses(samples)
        total = edge_nll + node_ce
        if not np.isfinite(total.data):
            raise NonFiniteError("CGGN loss is not finite")
        backward(total)
        adam_step(self.params, adam)
        return edge_nll.item(), node_ce.item()

    # -- inference ------------------------------------------------------
    def predict(self, obs: ObservationGraph, d) -> tuple[np.ndarray, np.ndarray, np.ndarray, GraphState]:
        state = init_graph_state(obs, d, self.cfg)
        with no_grad():
            log_alpha, theta_logits, node_logits = self.forward(state)
            node_probs = softmax(node_logits).data
        alpha = np.exp(log_alpha.data[0])
        theta = 1.0 / (1.0 + np.exp(-theta_logits.data.T))
        return node_probs, alpha / alpha.sum(), theta, state

    def generate_trajectory(self, obs: ObservationGraph, d, rng=None, n_samples: int = 100) -> TrajectoryPrediction:
        node_probs, alpha, theta, state = self.predict(obs, d)
        bits = mode_of_samples(alpha, theta, n_samples, as_rng(rng if rng is not None else 0))
        n = obs.n
        rows = [np.zeros(n + t, dtype=np.int8) for t in range(self.cfg.B)]
        for c, (t, j) in enumerate(zip(state.cand_row, state.cand_col)):
            rows[t][j] = bits[c]
        return TrajectoryPrediction(node_probs, alpha, theta,
                                    candidate_order(n, self.cfg.B), rows, n)

    def save(self, path) -> None:
        save_checkpoint(path, self.params)

    @classmethod
    def load(cls, path, cfg: CggnConfig) -> "CggnModel":
        m = cls(cfg)
        m.params.load_state(load_checkpoint(path))
        return m


def mode_of_samples(alpha, theta, n_samples: int, rng) -> np.ndarray:
    """Per-edge majority over samples (component k ~ alpha, then Bernoulli(theta_k)).

    Exactly half counts as present.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    ks = rng.choice(len(alpha), size=n_samples, p=alpha / alpha.sum())
    draws = rng.random((n_samples, theta.shape[1])) < theta[ks]
    return majority_vote(draws)


def majority_vote(draws) -> np.ndarray:
    draws = np.asarray(draws)
    return (2 * draws.sum(axis=0) >= draws.shape[0]).astype(np.int8)


# -- module-level API --------------------------------------------------------

def message_pass(model: CggnModel, state: GraphState, rounds: int | None = None) -> Tensor:
    return model.message_pass(state, rounds)


def predict_edges(model: CggnModel, h: Tensor, state: GraphState):
    return model.predict_edges(h, state)


def predict_nodes(model: CggnModel, h: Tensor, state: GraphState) -> Tensor:
    return model.predict_nodes(h, state)


def generate_trajectory(model: CggnModel, obs: ObservationGraph, d, rng=None,
                        n_samples: int = 100) -> TrajectoryPrediction:
    return model.generate_trajectory(obs, d, rng, n_samples)


def train_cggn(samples: list[CggnSample], cfg: CggnConfig | None = None, iterations: int | None = None,
               model: CggnModel | None = None, log=None, log_every: int = 100, adam: AdamState | None = None,
               start: int = 0, on_checkpoint=None, checkpoint_every: int = 0) -> tuple[CggnModel, list[dict]]:
    """Minibatch Adam over a fixed sample corpus. Returns the model and a loss curve.

    Batch order comes from its own stream, so passing the model and Adam state
    saved at iteration ``start`` continues the uninterrupted run exactly.
    ``on_checkpoint(model, adam, iterations_done)`` fires every ``checkpoint_every``.
    """
    cfg = cfg or CggnConfig()
    iterations = cfg.iterations if iterations is None else iterations
    if len(samples) < cfg.batch_size:
        raise ValueError(f"need at least batch_size={cfg.batch_size} samples, got {len(samples)}")
    model = model or CggnModel(cfg, as_rng(cfg.seed))
    adam = adam or AdamState(lr=cfg.lr)
    model.params.zero_grad()
    order_rng = derive_rng(cfg.seed, "cggn-order")
    order, pos = order_rng.permutation(len(samples)), 0
    curve = []
    for it in range(iterations):
        if pos + cfg.batch_size > len(samples):
            order, pos = order_rng.permutation(len(samples)), 0
        batch = [samples[i] for i in order[pos:pos + cfg.batch_size]]
        pos += cfg.batch_size
        if it < start:
            continue
        e, n = model.train_step(batch, adam)
        if it % log_every == 0 or it == iterations - 1:
            curve.append({"iteration": it, "edge_nll": e, "node_ce": n})
            if log:
                log(f"cggn iter {it}: edge {e:.4f} node {n:.4f}")
        if on_checkpoint and checkpoint_every and (it + 1) % checkpoint_every == 0:
            on_checkpoint(model, adam, it + 1)
    return model, curve


def cggn_config_json(cfg: CggnConfig) -> str:
    return json.dumps(asdict(cfg), sort_keys=True)
