"""Synthetic buildings: typed room graphs, trajectory enumeration and dataset sampling."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .graphs import ObservationGraph, lower_triangular
from .rng import as_rng

ROOM_CLASSES = (
    "bathroom", "bedroom", "hallway", "kitchen", "living room", "dining room",
    "office", "closet", "stairs", "toilet", "family room", "entryway",
    "laundry room", "garage", "lounge", "utility room", "porch", "balcony",
    "tv room", "library", "meeting room", "game room", "gym", "bar",
    "classroom", "spa", "dining booth", "outdoor", "junk room", "other room",
)
NUM_CLASSES = len(ROOM_CLASSES)
assert NUM_CLASSES == 30


@dataclass(frozen=True)
class RoomClass:
    id: int

    def __post_init__(self):
        if not 0 <= self.id < NUM_CLASSES:
            raise ValueError(f"room class id {self.id} outside [0, {NUM_CLASSES - 1}]")

    @property
    def name(self) -> str:
        return ROOM_CLASSES[self.id]


@dataclass(frozen=True)
class Room:
    id: int
    cls: int
    pos: tuple[float, float, float]


@dataclass
class RoomGraph:
    env_id: str
    rooms: list[Room]
    edges: list[tuple[int, int]]

    def __post_init__(self):
        self.edges = sorted((min(a, b), max(a, b)) for a, b in self.edges)

    @property
    def n(self) -> int:
        return len(self.rooms)

    @cached_property
    def _adjacency(self) -> list[list[int]]:
        nb: list[list[int]] = [[] for _ in self.rooms]
        for a, b in self.edges:
            nb[a].append(b)
            nb[b].append(a)
        return [sorted(x) for x in nb]

    def neighbors(self, room_id: int) -> list[int]:
        return self._adjacency[room_id]

    def cls(self, room_id: int) -> int:
        return self.rooms[room_id].cls

    def rooms_of_class(self, c: int) -> list[int]:
        return [r.id for r in self.rooms if r.cls == c]

    def distances_from(self, sources) -> np.ndarray:
        """BFS hop distances from the nearest of ``sources``; -1 if unreachable."""
        dist = np.full(self.n, -1, dtype=np.int64)
        q = deque()
        for s in sources:
            dist[s] = 0
            q.append(s)
        while q:
            i = q.popleft()
            for j in self._adjacency[i]:
                if dist[j] < 0:
                    dist[j] = dist[i] + 1
                    q.append(j)
        return dist

    def validate(self) -> None:
        if [r.id for r in self.rooms] != list(range(self.n)):
            raise ValueError(f"{self.env_id}: room ids must be dense 0..N-1")
        if len(set(self.edges)) != len(self.edges):
            raise ValueError(f"{self.env_id}: duplicate edges")
        for a, b in self.edges:
            if a == b:
                raise ValueError(f"{self.env_id}: self-loop at {a}")
            if not (0 <= a < self.n and 0 <= b < self.n):
                raise ValueError(f"{self.env_id}: edge ({a}, {b}) out of range")
        for r in self.rooms:
            RoomClass(r.cls)
        if self.n and np.any(self.distances_from([0]) < 0):
            raise ValueError(f"{self.env_id}: graph is not connected")

    # ---- JSON ---------------------------------------------------------------
    def to_json(self) -> dict:
        return {
            "id": self.env_id,
            "rooms": [{"id": r.id, "class": r.cls, "pos": list(r.pos)} for r in self.rooms],
            "edges": [list(e) for e in self.edges],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RoomGraph":
        rooms = [Room(int(r["id"]), int(r["class"]), tuple(float(v) for v in r["pos"]))
                 for r in doc["rooms"]]
        g = cls(str(doc["id"]), rooms, [tuple(int(v) for v in e) for e in doc["edges"]])
        g.validate()
        return g

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1)


def save_environment(g: RoomGraph, path) -> None:
    Path(path).write_text(g.dumps() + "\n", encoding="utf-8")


def load_environment(path) -> RoomGraph:
    return RoomGraph.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


# ---- generation --------------------------------------------------------------

@dataclass
class WorldParams:
    n_rooms_range: tuple[int, int] = (5, 30)
    extra_edge_fraction: float = 0.5
    class_skew: float = 1.2
    # probability that a room's class follows its tree parent's affinity list
    class_affinity: float = 0.6
    room_spacing: float = 5.0
    centroid_jitter: float = 0.5

    def check(self) -> None:
        lo, hi = self.n_rooms_range
        if lo < 2 or hi < lo:
            raise ValueError(f"bad n_rooms_range {self.n_rooms_range}")
        if self.extra_edge_fraction < 0:
            raise ValueError("extra_edge_fraction must be >= 0")
        if self.class_skew < 0 or not 0 <= self.class_affinity <= 1:
            raise ValueError("bad class distribution parameters")
        if self.room_spacing <= 0 or self.centroid_jitter < 0:
            raise ValueError("bad geometry parameters")


def class_marginal(skew: float) -> np.ndarray:
    w = np.arange(1, NUM_CLASSES + 1, dtype=np.float64) ** -skew
    return w / w.sum()


# Fixed "architectural" co-occurrence table: each class lists 3 classes that
# tend to sit next to it. Derived from a constant seed so every world shares it.
def _affinity_table() -> np.ndarray:
    rng = np.random.default_rng(20240601)
    marg = class_marginal(1.2)
    table = np.zeros((NUM_CLASSES, 3), dtype=np.int64)
    for c in range(NUM_CLASSES):
        p = marg.copy()
        p[c] = 0.0
        table[c] = rng.choice(NUM_CLASSES, size=3, replace=False, p=p / p.sum())
    return table


AFFINITY = _affinity_table()

_STEPS = ((1, 0), (-1, 0), (0, 1), (0, -1))


def generate_environment(seed, params: WorldParams | None = None, env_id: str | None = None) -> RoomGraph:
    params = params or WorldParams()
    params.check()
    rng = as_rng(seed)
    lo, hi = params.n_rooms_range
    n = int(rng.integers(lo, hi + 1))

    cells = [(0, 0)]
    where = {(0, 0): 0}
    parent = [-1]
    edges: set[tuple[int, int]] = set()
    while len(cells) < n:
        i = int(rng.integers(len(cells)))
        free = [(cells[i][0] + dx, cells[i][1] + dy) for dx, dy in _STEPS
                if (cells[i][0] + dx, cells[i][1] + dy) not in where]
        if not free:
            continue
        cell = free[int(rng.integers(len(free)))]
        where[cell] = len(cells)
        cells.append(cell)
        parent.append(i)
        edges.add((i, len(cells) - 1))

    n_extra = int(round(params.extra_edge_fraction * n / 2))
    if n_extra:
        cand = []
        for (x, y), i in sorted(where.items()):
            for dx, dy in ((1, 0), (0, 1), (1, 1), (1, -1)):
                j = where.get((x + dx, y + dy))
                if j is not None:
                    e = (min(i, j), max(i, j))
                    if e not in edges:
                        cand.append(e)
        # grid-adjacent first, diagonals only if needed
        axis = [e for e in cand if _manhattan(cells, e) == 1]
        diag = [e for e in cand if _manhattan(cells, e) != 1]
        rng.shuffle(axis)
        rng.shuffle(diag)
        for e in (axis + diag)[:n_extra]:
            edges.add(e)

    marg = class_marginal(params.class_skew)
    classes = [0] * n
    for i in range(n):
        p = parent[i]
        if p >= 0 and rng.random() < params.class_affinity:
            classes[i] = int(AFFINITY[classes[p]][int(rng.integers(3))])
        else:
            classes[i] = int(rng.choice(NUM_CLASSES, p=marg))

    rooms = []
    for i, (cx, cy) in enumerate(cells):
        jx, jy = rng.uniform(-params.centroid_jitter, params.centroid_jitter, size=2)
        z = float(rng.uniform(-0.05, 0.05))
        rooms.append(Room(i, classes[i], (cx * params.room_spacing + float(jx),
                                           cy * params.room_spacing + float(jy), z)))
    g = RoomGraph(env_id or f"env_{int(rng.integers(1 << 30)):09d}", rooms, sorted(edges))
    g.validate()
    return g


def _manhattan(cells, e) -> int:
    (x1, y1), (x2, y2) = cells[e[0]], cells[e[1]]
    return abs(x1 - x2) + abs(y1 - y2)


def generate_environments(count: int, seed: int, params: WorldParams | None = None) -> list[RoomGraph]:
    from .rng import derive_rng
    return [generate_environment(derive_rng(seed, "worldgen", k), params, env_id=f"env_{k:03d}")
            for k in range(count)]


def split_environments(envs: list[RoomGraph], ratios, seed) -> dict[str, list[RoomGraph]]:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    ids = sorted(e.env_id for e in envs)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate env_id")
    by_id = {e.env_id: e for e in envs}
    order = [ids[k] for k in as_rng(seed).permutation(len(ids))]
    n_train = int(round(ratios[0] * len(ids)))
    n_val = int(round(ratios[1] * len(ids)))
    parts = {
        "train": order[:n_train],
        "val": order[n_train:n_train + n_val],
        "test": order[n_train + n_val:],
    }
    for name, members in parts.items():
        if not members:
            raise ValueError(f"split {name!r} is empty")
    return {name: [by_id[i] for i in sorted(members)] for name, members in parts.items()}


# ---- trajectories ------------------------------------------------------------

def enumerate_simple_paths(g: RoomGraph, start: int, end: int, max_len: int = 10) -> list[list[int]]:
    """All loop-free paths start -> end with at most ``max_len`` edges, shortest first then lexicographic."""
    if not (0 <= start < g.n and 0 <= end < g.n):
        raise IndexError("room id out of range")
    if start == end:
        return [[start]]
    out: list[list[int]] = []
    path = [start]
    on_path = {start}

    def dfs(i: int) -> None:
        if len(path) - 1 >= max_len:
            return
        for j in g.neighbors(i):
            if j in on_path:
                continue
            path.append(j)
            if j == end:
                out.append(list(path))
            else:
                on_path.add(j)
                dfs(j)
                on_path.discard(j)
            path.pop()

    dfs(start)
    out.sort(key=lambda p: (len(p), p))
    return out


def is_simple_path(g: RoomGraph, path: list[int]) -> bool:
    if not path or len(set(path)) != len(path):
        return False
    return all(b in g.neighbors(a) for a, b in zip(path, path[1:]))


@dataclass
class CggnSample:
    """Observation prefix of a sampled trajectory plus the suffix to predict."""

    env_id: str
    path: list[int]  # room ids: observation prefix followed by targets
    n_obs: int
    obs_classes: list[int]
    dest_class: int
    target_classes: list[int]
    B: int = 5
    target_rows: list[np.ndarray] = field(default_factory=list)

    @property
    def valid_count(self) -> int:
        return len(self.target_classes)

    @property
    def observation(self) -> ObservationGraph:
        x = np.zeros((self.n_obs, NUM_CLASSES))
        x[np.arange(self.n_obs), self.obs_classes] = 1.0
        adj = lower_triangular(self.n_obs, [(i - 1, i) for i in range(1, self.n_obs)])
        return ObservationGraph(x, adj)

    @property
    def destination(self) -> np.ndarray:
        d = np.zeros(NUM_CLASSES)
        d[self.dest_class] = 1.0
        return d

    def padded_targets(self) -> np.ndarray:
        """Target class per generated slot, -1 for padding."""
        out = np.full(self.B, -1, dtype=np.int64)
        out[:self.valid_count] = self.target_classes
        return out

    def padded_rows(self) -> list[np.ndarray]:
        rows = list(self.target_rows)
        for t in range(self.valid_count, self.B):
            rows.append(np.zeros(self.n_obs + t, dtype=np.int8))
        return rows


def path_rows(n_obs: int, n_targets: int) -> list[np.ndarray]:
    """Edge rows for a trajectory continuing the observation chain."""
    rows = []
    for t in range(n_targets):
        row = np.zeros(n_obs + t, dtype=np.int8)
        row[n_obs + t - 1] = 1
        rows.append(row)
    return rows


def make_cggn_sample(g: RoomGraph, path: list[int], n_obs: int, B: int = 5) -> CggnSample:
    if not 1 <= n_obs < len(path) or len(path) - n_obs > B:
        raise ValueError("observation prefix must leave 1..B target nodes")
    cls = [g.cls(r) for r in path]
    n_t = len(path) - n_obs
    return CggnSample(
        env_id=g.env_id, path=list(path), n_obs=n_obs, obs_classes=cls[:n_obs],
        dest_class=cls[-1], target_classes=cls[n_obs:], B=B, target_rows=path_rows(n_obs, n_t),
    )


def sample_cggn_example(g: RoomGraph, rng, B: int = 5, max_len: int = 10, retries: int = 50) -> CggnSample:
    if g.n < 2:
        raise ValueError("need at least 2 rooms")
    rng = as_rng(rng)
    for _ in range(retries):
        start, end = (int(v) for v in rng.choice(g.n, size=2, replace=False))
        paths = enumerate_simple_paths(g, start, end, max_len)
        if not paths:
            continue
        path = paths[int(rng.integers(len(paths)))]
        n = len(path)
        n_obs = int(rng.integers(max(1, n - B), n))
        return make_cggn_sample(g, path, n_obs, B)
    raise RuntimeError(f"{g.env_id}: no trajectory found after {retries} attempts")


# ---- navigation pairs ----------------------------------------------------------

@dataclass(frozen=True)
class NavPair:
    env_id: str
    start_room: int
    goal_class: int


NAV_SPLITS = ("train", "val_seen", "val_unseen", "test_unseen")


def candidate_pairs(envs: list[RoomGraph]) -> list[NavPair]:
    out = []
    for g in sorted(envs, key=lambda e: e.env_id):
        present = sorted({r.cls for r in g.rooms})
        for r in g.rooms:
            for c in present:
                if c != r.cls:
                    out.append(NavPair(g.env_id, r.id, c))
    return out


def sample_nav_pairs(splits: dict[str, list[RoomGraph]], counts, seed) -> dict[str, list[NavPair]]:
    """Pairs for train/val_seen (train envs), val_unseen (val envs), test_unseen (test envs)."""
    if not isinstance(counts, dict):
        counts = dict(zip(NAV_SPLITS, counts))
    rng = as_rng(seed)
    out: dict[str, list[NavPair]] = {}
    pool = candidate_pairs(splits["train"])
    n_tr, n_vs = counts.get("train", 0), counts.get("val_seen", 0)
    if n_tr + n_vs > len(pool):
        raise ValueError(f"need {n_tr + n_vs} training pairs, only {len(pool)} available")
    pick = rng.permutation(len(pool))
    out["train"] = [pool[k] for k in pick[:n_tr]]
    out["val_seen"] = [pool[k] for k in pick[n_tr:n_tr + n_vs]]
    for name, src in (("val_unseen", "val"), ("test_unseen", "test")):
        pool = candidate_pairs(splits[src])
        n = counts.get(name, 0)
        if n > len(pool):
            raise ValueError(f"need {n} {name} pairs, only {len(pool)} available")
        out[name] = [pool[k] for k in rng.permutation(len(pool))[:n]]
    return out
