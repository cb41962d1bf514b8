"""Navigation, graph-prediction and classifier metrics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .worldgen import CggnSample, RoomGraph, path_rows

SPL_NOTE = "SPL uses max(l_s, l) in the denominator so that SPL <= SR"


@dataclass
class EpisodeResult:
    env_id: str
    start_room: int
    goal_class: int
    trajectory: list[int]       # rooms visited in order, start included
    stopped: bool
    success: bool
    steps: int                  # actions taken, stop included
    l_s: int | None             # shortest distance start -> stop room, successes only
    oracle_hit: bool
    reason: str = ""

    @property
    def path_length(self) -> int:
        """Graph distance travelled: number of moves."""
        return len(self.trajectory) - 1

    def to_json(self) -> dict:
        return asdict(self)


def success(stop_room: int | None, g: RoomGraph, goal_class: int) -> bool:
    return stop_room is not None and g.cls(stop_room) == goal_class


def make_result(g: RoomGraph, start: int, goal_class: int, trajectory: list[int], stopped: bool,
                steps: int, reason: str = "") -> EpisodeResult:
    ok = stopped and success(trajectory[-1], g, goal_class)
    l_s = None
    if ok:
        l_s = int(g.distances_from([start])[trajectory[-1]])
    return EpisodeResult(g.env_id, start, goal_class, list(trajectory), stopped, ok, steps, l_s,
                         any(g.cls(r) == goal_class for r in trajectory), reason)


def success_rate(results: list[EpisodeResult]) -> float:
    if not results:
        raise ValueError("no episodes")
    return float(np.mean([r.success for r in results]))


def spl_terms(results: list[EpisodeResult]) -> list[float]:
    out = []
    for r in results:
        if not r.success:
            out.append(0.0)
            continue
        l = r.path_length
        out.append(1.0 if max(r.l_s, l) == 0 else r.l_s / max(r.l_s, l))
    return out


def spl(results: list[EpisodeResult]) -> float:
    if not results:
        raise ValueError("no episodes")
    return float(np.mean(spl_terms(results)))


def oracle_success_rate(results: list[EpisodeResult]) -> float:
    if not results:
        raise ValueError("no episodes")
    return float(np.mean([r.oracle_hit or r.success for r in results]))


def nav_metrics(results: list[EpisodeResult]) -> dict:
    return {"SR": success_rate(results), "SPL": spl(results), "OSR": oracle_success_rate(results),
            "episodes": len(results)}


def class_rank(scores, labels) -> np.ndarray:
    """0-based rank of each label; ties go to the lower class index (stable sort order)."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    own = scores[np.arange(len(labels)), labels][:, None]
    lower = np.arange(scores.shape[1])[None, :] < labels[:, None]
    return ((scores > own) | ((scores == own) & lower)).sum(axis=1)


def per_class_topk(scores, labels, k: int) -> float:
    """Mean over present classes of the per-class top-k hit rate."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("no samples")
    hit = class_rank(scores, labels) < k
    classes = np.unique(labels)
    return float(np.mean([hit[labels == c].mean() for c in classes]))


# -- graph prediction ---------------------------------------------------------

def ground_truth_trajectories(g: RoomGraph, sample: CggnSample, B: int) -> list[list[int]]:
    """Every simple continuation of the observed prefix with 1..B unobserved rooms ending at the destination class."""
    observed = set(sample.path[:sample.n_obs])
    tail = sample.path[sample.n_obs - 1]
    out = []

    def walk(node, acc):
        for nb in g.neighbors(node):
            if nb in observed or nb in acc:
                continue
            nxt = acc + [nb]
            if g.cls(nb) == sample.dest_class:
                out.append(nxt)
            if len(nxt) < B:
                walk(nb, nxt)

    walk(tail, [])
    return out


@dataclass
class GraphMatch:
    nodes: int
    top1: int
    top5: int
    edge_entries: int
    edge_correct: int
    positives: int
    true_pos: int

    def key(self):
        n = max(self.nodes, 1)
        return (self.top1 / n, self.top5 / n, self.edge_correct / max(self.edge_entries, 1),
                self.true_pos / max(self.positives, 1))


def match_prediction(pred, classes: list[int], n_obs: int) -> GraphMatch:
    """Compare one prediction against one ground-truth trajectory (node classes in order)."""
    n = len(classes)
    top1 = top5 = 0
    if n:
        ranks = class_rank(pred.node_probs[:n], classes)
        top1, top5 = int(np.sum(ranks < 1)), int(np.sum(ranks < 5))
    entries = correct = pos = tp = 0
    for t, row in enumerate(path_rows(n_obs, n)):
        got = pred.sampled_adjacency[t]
        entries += len(row)
        correct += int(np.sum(got == row))
        pos += int(row.sum())
        tp += int(np.sum((got == 1) & (row == 1)))
    return GraphMatch(n, top1, top5, entries, correct, pos, tp)


def best_match(pred, g: RoomGraph, sample: CggnSample, B: int, gts=None) -> GraphMatch:
    if gts is None:
        gts = ground_truth_trajectories(g, sample, B) or [sample.path[sample.n_obs:]]
    matches = [match_prediction(pred, [g.cls(r) for r in gt], sample.n_obs) for gt in gts]
    # ties broken by the full key, then by the match itself, so enumeration order is irrelevant
    return max(matches, key=lambda m: (m.key(), m.nodes, m.top1, m.top5, m.edge_correct, m.true_pos))


def aggregate_matches(matches: list[GraphMatch]) -> dict:
    tot = lambda f: sum(getattr(m, f) for m in matches)
    return {
        "node_top1": tot("top1") / tot("nodes"),
        "node_top5": tot("top5") / tot("nodes"),
        "edge_accuracy": tot("edge_correct") / tot("edge_entries"),
        "edge_recall": tot("true_pos") / max(tot("positives"), 1),
        "samples": len(matches),
    }


def eval_graph_prediction(model, samples: list[CggnSample], envs: dict[str, RoomGraph],
                          seed: int = 0, n_samples: int = 100, best_of: bool = True) -> dict:
    """Node/edge metrics. With ``best_of`` each prediction is scored against its best
    ground truth; otherwise against the sample's own continuation."""
    rng = np.random.default_rng(seed)
    matches = []
    for s in samples:
        pred = model.generate_trajectory(s.observation, s.destination, rng, n_samples)
        if best_of:
            matches.append(best_match(pred, envs[s.env_id], s, model.cfg.B))
        else:
            matches.append(match_prediction(pred, s.target_classes, s.n_obs))
    return aggregate_matches(matches)


# -- reports ------------------------------------------------------------------

@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    manifest_hash: str = ""

    def add_row(self, label: str, flags: dict, split: str, metrics: dict) -> None:
        self.rows.append({"label": label, "split": split, **flags, **metrics})

    def check(self) -> None:
        for r in self.rows:
            if "SR" in r:
                if not (0.0 <= r["SPL"] <= r["SR"] + 1e-12 <= 1.0 + 1e-12):
                    raise AssertionError(f"SPL/SR bound violated in row {r['label']}")
                if r["OSR"] + 1e-12 < r["SR"]:
                    raise AssertionError(f"OSR < SR in row {r['label']}")

    def to_json(self) -> dict:
        return {"note": SPL_NOTE, "manifest": self.manifest_hash, "rows": self.rows, "extra": self.extra}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1)

    def to_csv(self) -> str:
        keys = []
        for r in self.rows:
            keys += [k for k in r if k not in keys]
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow(r)
        return buf.getvalue()
