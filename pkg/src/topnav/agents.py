"""Area-goal navigation agents over room graphs.

Three policies share one episode runner: a uniform RANDOM walker, the
Baseline LSTM (instruction, current observation and previous action only)
and the Full agent, which additionally attends over the online scene graph
plus the CGGN's predicted trajectory nodes and receives the predicted
subgoal. The informed mechanisms (subgoal G, perception-gated stop P and
map-prioritised exploration M) are switched per evaluation.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .evaluation import EpisodeResult, make_result
from .graphs import ObservationGraph, lower_triangular
from .mapping import OracleLocalizer, SceneGraph
from .numerics import (
    AdamState, LSTMCell, Linear, MLP, NonFiniteError, ParamSet, Tensor, adam_step, backward,
    concat, cross_entropy, matmul, mul, no_grad, reshape, softmax, tanh, transpose,
)
from .perception import Observer
from .rng import derive_rng
from .worldgen import NUM_CLASSES, NavPair, RoomGraph

NODE_FEAT_DIM = NUM_CLASSES + 2  # belief, predicted flag, visited flag


class ExplorationExhausted(RuntimeError):
    """No visited room has an unvisited neighbor."""


@dataclass
class InformedConfig:
    use_subgoal: bool = False
    use_perception_gate: bool = False
    use_map: bool = False
    topk: int = 5
    max_steps: int | None = 15  # None: unbounded

    def __post_init__(self):
        if self.topk < 1:
            raise ValueError("topk must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    def label(self) -> str:
        flags = [n for n, on in (("G", self.use_subgoal), ("P", self.use_perception_gate), ("M", self.use_map)) if on]
        return "[" + ",".join(flags) + "]"


@dataclass
class AgentConfig:
    hidden: int = 256
    episodes: int = 4000
    batch_episodes: int = 10
    lr: float = 1e-3
    seed: int = 0
    max_steps: int = 15
    cggn_samples: int = 100


class PolicyModel:
    """LSTM policy; ``kind`` is "baseline" (no graph input) or "full"."""

    def __init__(self, kind: str = "full", hidden: int = 256, rng=None):
        if kind not in ("baseline", "full"):
            raise ValueError(f"unknown policy kind {kind!r}")
        self.kind, self.hidden = kind, hidden
        H, C = hidden, NUM_CLASSES
        p = self.params = ParamSet()
        self.mlp_h = MLP(p, "agent.mlp_h", (C, H, H, H), rng)
        self.mlp_c = MLP(p, "agent.mlp_c", (C, H, H, H), rng)
        self.w2 = Linear(p, "agent.w2", 2 * H, H, rng)
        self.w3 = Linear(p, "agent.w3", H, H, rng, bias=False)
        self.w4 = Linear(p, "agent.w4", C, H, rng, bias=False)
        self.w5 = Linear(p, "agent.w5", H, 1, rng, bias=False)
        self.lstm = LSTMCell(p, "agent.lstm", H + 3 * C, H, rng)
        if kind == "full":
            self.w1 = Linear(p, "agent.w1", H, H, rng, bias=False)
            self.node_enc = Linear(p, "agent.node.enc", NODE_FEAT_DIM, H, rng)
            self.sa_q = Linear(p, "agent.node.sa.q", H, H, rng, bias=False)
            self.sa_k = Linear(p, "agent.node.sa.k", H, H, rng, bias=False)
            self.sa_v = Linear(p, "agent.node.sa.v", H, H, rng, bias=False)

    @property
    def uses_graph(self) -> bool:
        return self.kind == "full"


def encode_instruction(model: PolicyModel, d) -> tuple[Tensor, Tensor]:
    d = Tensor(np.asarray(d, dtype=np.float64))
    return model.mlp_h(d), model.mlp_c(d)


def encode_nodes(model: PolicyModel, node_feats: np.ndarray) -> Tensor:
    """Linear node encoding followed by one residual self-attention layer."""
    v = model.node_enc(Tensor(node_feats))
    q, k, val = model.sa_q(v), model.sa_k(v), model.sa_v(v)
    att = softmax(matmul(q, transpose(k)) * (1.0 / np.sqrt(model.hidden)))
    return v + matmul(att, val)


def attend_graph(model: PolicyModel, h_prev: Tensor, v: Tensor | None) -> tuple[Tensor, np.ndarray]:
    """Returns (h_hat, attention weights). ``v=None`` stands for the Baseline's empty graph."""
    if v is None:
        zero = Tensor(np.zeros(model.hidden))
        return tanh(model.w2(concat([zero, h_prev]))), np.zeros(0)
    if v.ndim != 2 or v.shape[0] == 0:
        raise ValueError("attend_graph needs at least one node state")
    logits = matmul(v, model.w1(h_prev))
    w = softmax(logits)
    v_hat = matmul(w, v)
    return tanh(model.w2(concat([v_hat, h_prev]))), w.data


def attention_weights(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


@dataclass
class AgentState:
    h: Tensor
    c: Tensor
    prev_action_feat: np.ndarray
    current_room: int
    visited: list[int] = field(default_factory=list)  # simulator room ids in visit order

    def __post_init__(self):
        if self.current_room not in self.visited:
            self.visited.append(self.current_room)


def step_policy(model: PolicyModel, state: AgentState, u: np.ndarray, obs_probs: np.ndarray,
                node_feats: np.ndarray | None = None, subgoal: np.ndarray | None = None) -> Tensor:
    """Advances the LSTM in ``state`` and returns candidate logits (candidate 0 = stop)."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2 or u.shape[0] < 1:
        raise ValueError("step_policy needs at least the stop candidate")
    v = encode_nodes(model, node_feats) if model.uses_graph and node_feats is not None and len(node_feats) else None
    h_hat, _ = attend_graph(model, state.h, v)
    sg = np.zeros(NUM_CLASSES) if subgoal is None else np.asarray(subgoal, dtype=np.float64)
    z = concat([h_hat, Tensor(np.concatenate([obs_probs, state.prev_action_feat, sg]))])
    state.h, state.c = model.lstm(z, h_hat, state.c)
    gated = mul(reshape(model.w3(state.h), (1, model.hidden)), model.w4(Tensor(u)))
    return reshape(model.w5(gated), (u.shape[0],))


# -- informed mechanisms -------------------------------------------------------

def in_topk(belief, cls: int, k: int) -> bool:
    """cls has positive mass and fewer than k classes are strictly more likely."""
    b = np.asarray(belief)
    return bool(b[cls] > 0 and np.sum(b > b[cls]) < k)


def backtrack_target(neighbors, visited: list[int], current: int) -> int:
    """First hop on the shortest visited-subgraph path to the nearest frontier room.

    ``neighbors(room)`` lists adjacent rooms; ``visited`` is in discovery order.
    Frontier ties and first-hop ties go to the lowest discovery index.
    """
    seen = set(visited)
    if any(nb not in seen for nb in neighbors(current)):
        raise ValueError("current room still has an unvisited neighbor")
    rank = {r: i for i, r in enumerate(visited)}

    def bfs(src):
        dist = {src: 0}
        q = deque([src])
        while q:
            x = q.popleft()
            for y in sorted((n for n in neighbors(x) if n in seen), key=rank.get):
                if y not in dist:
                    dist[y] = dist[x] + 1
                    q.append(y)
        return dist

    dist = bfs(current)
    frontier = [r for r in dist if any(nb not in seen for nb in neighbors(r))]
    if not frontier:
        raise ExplorationExhausted("every reachable room has been visited")
    goal = min(frontier, key=lambda r: (dist[r], rank[r]))
    back = bfs(goal)
    hops = [n for n in neighbors(current) if n in back and back[n] == back[current] - 1]
    return min(hops, key=rank.get)


def informed_filter(dist: np.ndarray, candidates: list[int], visited: set[int], belief: np.ndarray,
                    goal_class: int, cfg: InformedConfig, backtrack_hop=None) -> tuple[np.ndarray, list[str]]:
    """Applies the P and M gates to a candidate distribution (index 0 = stop).

    ``backtrack_hop`` is a zero-argument callable giving the backtracking room;
    it may raise ExplorationExhausted. Returns the renormalized distribution
    (all zeros means the episode cannot continue) and the mask reasons.
    """
    keep = np.ones(len(dist), dtype=bool)
    reasons = []
    stop_ok = not cfg.use_perception_gate or in_topk(belief, goal_class, cfg.topk)
    if not stop_ok:
        keep[0] = False
        reasons.append("P:stop")
    if cfg.use_map:
        unvisited = [i for i in range(1, len(candidates)) if candidates[i] not in visited]
        if unvisited:
            for i in range(1, len(candidates)):
                if candidates[i] in visited:
                    keep[i] = False
            reasons.append("M:visited")
        else:
            keep[1:] = False
            try:
                hop = backtrack_hop()
                keep[candidates.index(hop)] = True
                reasons.append(f"M:backtrack->{hop}")
            except ExplorationExhausted:
                reasons.append("M:exhausted")
    out = np.where(keep, dist, 0.0)
    if out.sum() <= 0 and keep.any():
        out = keep.astype(np.float64)  # underflowed survivors: uniform over them
        reasons.append("fallback")
    total = out.sum()
    return (out / total if total > 0 else out), reasons


# -- episodes ------------------------------------------------------------------

@dataclass
class Agent:
    """Everything an episode needs besides the environment."""

    kind: str                              # "random", "baseline" or "full"
    informed: InformedConfig = field(default_factory=InformedConfig)
    model: PolicyModel | None = None
    observer: Observer = field(default_factory=Observer)
    localizer: object = field(default_factory=OracleLocalizer)
    cggn: object | None = None
    cggn_samples: int = 100
    label: str = ""

    def __post_init__(self):
        if self.kind not in ("random", "baseline", "full"):
            raise ValueError(f"unknown agent kind {self.kind!r}")
        if self.kind != "random" and self.model is None:
            raise ValueError(f"{self.kind} agent needs a policy model")
        if self.informed.use_subgoal and self.cggn is None:
            raise ValueError("subgoal mechanism needs a CGGN model")


def teacher_action(g: RoomGraph, current: int, goal_class: int, candidates: list[int]) -> int:
    """Stop in a goal-class room, else the next hop towards the nearest one (lowest id on ties)."""
    if not g.rooms_of_class(goal_class):
        raise ValueError(f"goal class {goal_class} absent from {g.env_id}")
    if g.cls(current) == goal_class:
        return 0
    dist = g.distances_from(g.rooms_of_class(goal_class))
    best = min(n for n in candidates[1:] if dist[n] == dist[current] - 1)
    return candidates.index(best)


def cggn_observation(sg: SceneGraph, current_node: int, max_obs: int) -> tuple[ObservationGraph, list[int]]:
    """Room graph in discovery order with the current room moved last, cut to the newest ``max_obs`` rooms."""
    order = [r.id for r in sg.rooms if r.id != current_node] + [current_node]
    order = order[-max_obs:]
    pos = {r: i for i, r in enumerate(order)}
    edges = [(pos[a], pos[b]) for a, b in sg.room_edges if a in pos and b in pos]
    x = np.stack([sg.rooms[r].probs for r in order])
    return ObservationGraph(x, lower_triangular(len(order), edges)), order


MAX_GRAPH_NODES = 32


def run_episode(agent: Agent, g: RoomGraph, start: int, goal_class: int, rng,
                mode: str = "greedy", trace: list | None = None):
    """Plays one episode.

    ``mode``: "greedy" (argmax after the informed gates), "sample" (student
    forcing: sample the raw policy, supervise with the teacher) or "teacher"
    (execute the teacher action, supervise with it). Returns the result and
    the list of per-step cross-entropy losses (empty in greedy mode).
    """
    cfg = agent.informed
    ob = agent.observer
    sg = SceneGraph()
    room_node: dict[int, int] = {}
    cur = start
    obs = ob.observe(g, cur, rng)
    cam = sg.insert_camera(obs)
    room_node[cur] = sg.localize_camera(cam, agent.localizer)
    d = np.zeros(NUM_CLASSES)
    d[goal_class] = 1.0
    state = None
    if agent.model is not None:
        h0, c0 = encode_instruction(agent.model, d)
        state = AgentState(h0, c0, np.zeros(NUM_CLASSES), cur)
    visited = [cur]
    trajectory = [cur]
    losses = []
    steps = 0
    stopped = False
    reason = "max_steps"
    while cfg.max_steps is None or steps < cfg.max_steps:
        cands = [cur] + g.neighbors(cur)
        seen = set(visited)
        use_map = agent.kind == "full"
        u = np.zeros((len(cands), NUM_CLASSES))
        u[0] = sg.rooms[room_node[cur]].probs if use_map else obs.class_probs
        for i, nb in enumerate(cands[1:], start=1):
            if use_map and nb in seen:
                u[i] = sg.rooms[room_node[nb]].probs
            else:
                u[i] = ob.glimpse(g, nb, rng)
        belief = sg.rooms[room_node[cur]].probs
        if agent.kind == "random":
            raw = np.full(len(cands), 1.0 / len(cands))
            logits = None
        else:
            node_feats, subgoal = None, None
            if agent.model.uses_graph:
                rows = [np.concatenate([r.probs, [0.0, 1.0]]) for r in sg.rooms]
                if cfg.use_subgoal:
                    og, _ = cggn_observation(sg, room_node[cur], agent.cggn.cfg.max_obs)
                    pred = agent.cggn.generate_trajectory(og, d, rng, agent.cggn_samples)
                    subgoal = pred.subgoal
                    rows += [np.concatenate([pred.node_probs[t], [1.0, 0.0]]) for t in pred.kept_slots()]
                node_feats = np.stack(rows[-MAX_GRAPH_NODES:])
            logits = step_policy(agent.model, state, u, obs.class_probs, node_feats, subgoal)
            raw = softmax(logits).data
        imask, reasons = raw, []
        if mode == "greedy":
            imask, reasons = informed_filter(raw, cands, seen, belief, goal_class, cfg,
                                             lambda: backtrack_target(g.neighbors, visited, cur))
        teacher = None if mode == "greedy" else teacher_action(g, cur, goal_class, cands)
        if mode == "greedy":
            if imask.sum() == 0:
                reason = "exhausted"
                _record(trace, steps, cur, cands, seen, raw, imask, None, reasons, belief, goal_class, cfg, agent)
                break
            if agent.kind == "random":
                ok = np.nonzero(imask > 0)[0]
                choice = int(ok[rng.integers(len(ok))])
            else:
                choice = int(np.argmax(imask))
        elif mode == "sample":
            choice = int(rng.choice(len(cands), p=raw))
        elif mode == "teacher":
            choice = teacher
        else:
            raise ValueError(f"unknown mode {mode!r}")
        if logits is not None and mode != "greedy":
            losses.append(cross_entropy(logits, teacher))
        _record(trace, steps, cur, cands, seen, raw, imask, choice, reasons, belief, goal_class, cfg, agent)
        steps += 1
        if choice == 0:
            stopped = True
            reason = "stop"
            break
        nxt = cands[choice]
        if state is not None:
            state.prev_action_feat = u[choice]
        prev_cam = cam
        cur = nxt
        obs = ob.observe(g, cur, rng)
        cam = sg.insert_camera(obs, prev_cam)
        room_node[cur] = sg.localize_camera(cam, agent.localizer)
        if cur not in seen:
            visited.append(cur)
        trajectory.append(cur)
        if state is not None:
            state.current_room = cur
            state.visited = visited
    result = make_result(g, start, goal_class, trajectory, stopped, steps, reason)
    return result, losses, sg


def _record(trace, step, cur, cands, seen, raw, masked, choice, reasons, belief, goal, cfg, agent):
    if trace is None:
        return
    trace.append({
        "step": step, "current_room": cur, "candidates": cands,
        "visited": [c in seen for c in cands], "dist_pre": raw.tolist(), "dist_post": masked.tolist(),
        "action": choice, "mask_reasons": reasons, "goal_class": goal,
        "goal_in_topk": in_topk(belief, goal, cfg.topk), "perfect": agent.observer.cfg.perfect,
        "use_map": cfg.use_map, "use_perception_gate": cfg.use_perception_gate,
    })


def episode_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return derive_rng(seed, "episode", split, index)


def evaluate_agent(agent: Agent, pairs: list[NavPair], envs: dict[str, RoomGraph], seed: int,
                   split: str = "test_unseen", traces: list | None = None,
                   start_index: int = 0) -> list[EpisodeResult]:
    """Greedy episodes; episode ``i`` draws from ``episode_rng(seed, split, start_index + i)``."""
    results = []
    with no_grad():
        for i, p in enumerate(pairs, start=start_index):
            tr = [] if traces is not None else None
            res, _, _ = run_episode(agent, envs[p.env_id], p.start_room, p.goal_class,
                                    episode_rng(seed, split, i), "greedy", tr)
            results.append(res)
            if traces is not None:
                traces.append({"episode": i, "env_id": p.env_id, "start": p.start_room,
                               "goal_class": p.goal_class, "result": res.to_json(), "steps": tr})
    return results


def random_agent(observer: Observer | None = None, max_steps: int | None = 15) -> Agent:
    return Agent("random", InformedConfig(max_steps=max_steps), observer=observer or Observer(), label="RANDOM")


def random_agent_success_probability(g: RoomGraph, start: int, goal_class: int, max_steps: int) -> float:
    """Exact SR of the uniform walker: Markov chain over rooms, stop with prob 1/(deg+1)."""
    p = np.zeros(g.n)
    p[start] = 1.0
    deg = np.array([len(g.neighbors(r)) for r in range(g.n)], dtype=np.float64)
    hit = np.array([g.cls(r) == goal_class for r in range(g.n)], dtype=np.float64)
    total = 0.0
    for _ in range(max_steps):
        total += float(np.sum(p * hit / (deg + 1)))
        nxt = np.zeros(g.n)
        for r in range(g.n):
            if p[r]:
                for nb in g.neighbors(r):
                    nxt[nb] += p[r] / (deg[r] + 1)
        p = nxt
    return total


# -- training ------------------------------------------------------------------

def train_student_forcing(pairs: list[NavPair], envs: dict[str, RoomGraph], agent: Agent,
                          cfg: AgentConfig, log=None, log_every: int = 50, adam: AdamState | None = None,
                          start_update: int = 0, on_checkpoint=None, checkpoint_every: int = 0) -> list[dict]:
    """Student forcing: execute sampled actions, supervise with the shortest-path teacher.

    Resuming from the model and Adam state saved after ``start_update`` updates
    reproduces the uninterrupted run, since every episode draws its own stream.
    """
    if agent.model is None:
        raise ValueError("nothing to train for a random agent")
    if not pairs:
        raise ValueError("no training pairs")
    model = agent.model
    adam = adam or AdamState(lr=cfg.lr)
    model.params.zero_grad()
    rng = derive_rng(cfg.seed, "agent-train", agent.kind, agent.observer.cfg.perfect)
    order = rng.permutation(len(pairs))
    curve = []
    n_updates = max(1, cfg.episodes // cfg.batch_episodes)
    episode = start_update * cfg.batch_episodes
    for upd in range(start_update, n_updates):
        terms = []
        for _ in range(cfg.batch_episodes):
            p = pairs[order[episode % len(pairs)]]
            _, losses, _ = run_episode(agent, envs[p.env_id], p.start_room, p.goal_class,
                                       derive_rng(cfg.seed, "agent-episode", episode), "sample")
            terms += losses
            episode += 1
        loss = terms[0]
        for t in terms[1:]:
            loss = loss + t
        loss = loss * (1.0 / len(terms))
        if not np.isfinite(loss.data):
            raise NonFiniteError("agent loss diverged")
        backward(loss)
        adam_step(model.params, adam)
        if upd % log_every == 0 or upd == n_updates - 1:
            curve.append({"update": upd, "episodes": episode, "ce": loss.item()})
            if log:
                log(f"agent[{agent.label or agent.kind}] update {upd}: ce {loss.item():.4f}")
        if on_checkpoint and checkpoint_every and (upd + 1) % checkpoint_every == 0:
            on_checkpoint(model, adam, upd + 1)
    return curve


def teacher_rollout_loss(agent: Agent, pairs: list[NavPair], envs: dict[str, RoomGraph], seed: int = 0) -> float:
    """Mean cross-entropy along teacher-executed rollouts."""
    vals = []
    with no_grad():
        for i, p in enumerate(pairs):
            _, losses, _ = run_episode(agent, envs[p.env_id], p.start_room, p.goal_class,
                                       derive_rng(seed, "teacher", i), "teacher")
            vals += [l.item() for l in losses]
    return float(np.mean(vals))


def dump_traces_jsonl(traces: list[dict], path) -> None:
    with open(path, "w") as f:
        for t in traces:
            f.write(json.dumps(t, sort_keys=True) + "\n")


def agent_config_json(cfg: AgentConfig) -> dict:
    return asdict(cfg)


def with_informed(agent: Agent, **flags) -> Agent:
    return replace(agent, informed=replace(agent.informed, **flags))
