"""Simulated room observer and the pairwise same-room localizer."""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate, optimize, stats

from .numerics import (
    AdamState, Linear, MLP, ParamSet, Tensor, adam_step, backward, bce_with_logits,
    cross_entropy, focal_loss, fourier_encode, no_grad, softmax,
)
from .numerics.tensor import NonFiniteError
from .rng import as_rng
from .worldgen import NUM_CLASSES, RoomGraph


@dataclass
class Observation:
    position: np.ndarray
    feature: np.ndarray
    class_probs: np.ndarray
    # ground truth, carried for oracles and evaluation only
    env_id: str = ""
    room_id: int = -1

    def to_json(self) -> dict:
        return {"position": self.position.tolist(), "feature": self.feature.tolist(),
                "class_probs": self.class_probs.tolist(), "env_id": self.env_id,
                "room_id": self.room_id}

    @classmethod
    def from_json(cls, d: dict) -> "Observation":
        return cls(np.asarray(d["position"], float), np.asarray(d["feature"], float),
                   np.asarray(d["class_probs"], float), d.get("env_id", ""), int(d.get("room_id", -1)))


@dataclass
class ObserverConfig:
    feature_dim: int = 64
    sigma_room: float = 0.6
    sigma_view: float = 0.3
    accuracy_knob: float = 0.6
    # accuracy of the preview of an adjacent, not yet visited room
    glimpse_accuracy: float = 0.35
    perfect: bool = False
    camera_radius: float = 1.0
    world_seed: int = 7

    def __post_init__(self):
        if self.sigma_room < 0 or self.sigma_view < 0:
            raise ValueError("sigmas must be >= 0")
        for k in (self.accuracy_knob, self.glimpse_accuracy):
            if not 0 < k <= 1:
                raise ValueError("accuracy knobs must lie in (0, 1]")


@lru_cache(maxsize=256)
def score_margin(accuracy: float, n_classes: int = NUM_CLASSES) -> float:
    """Margin m so that argmax(m * onehot + N(0, I)) hits the true class with prob ``accuracy``."""
    if accuracy >= 1.0:
        return 40.0
    chance = 1.0 / n_classes

    def top1(m):
        f = lambda z: stats.norm.pdf(z) * stats.norm.cdf(z + m) ** (n_classes - 1)
        return integrate.quad(f, -12, 12, limit=200)[0]

    if accuracy <= chance:
        return 0.0
    return float(optimize.brentq(lambda m: top1(m) - accuracy, 0.0, 40.0, xtol=1e-10))


def _key_rng(*parts) -> np.random.Generator:
    key = [zlib.crc32(str(p).encode()) for p in parts]
    return np.random.default_rng(np.random.SeedSequence(key))


class Observer:
    """Emits noisy per-visit percepts of rooms; stands in for the image pipeline."""

    def __init__(self, cfg: ObserverConfig | None = None):
        self.cfg = cfg or ObserverConfig()
        self.class_embeddings = _key_rng("class-embed", self.cfg.world_seed).normal(
            size=(NUM_CLASSES, self.cfg.feature_dim))

    def instance_offset(self, env_id: str, room_id: int) -> np.ndarray:
        return self.cfg.sigma_room * _key_rng("instance", self.cfg.world_seed, env_id, room_id).normal(
            size=self.cfg.feature_dim)

    def class_probs(self, true_cls: int, rng: np.random.Generator, accuracy: float | None = None) -> np.ndarray:
        if self.cfg.perfect:
            p = np.zeros(NUM_CLASSES)
            p[true_cls] = 1.0
            return p
        m = score_margin(self.cfg.accuracy_knob if accuracy is None else accuracy)
        s = rng.normal(size=NUM_CLASSES)
        s[true_cls] += m
        e = np.exp(s - s.max())
        return e / e.sum()

    def observe(self, g: RoomGraph, room_id: int, rng) -> Observation:
        rng = as_rng(rng)
        room = g.rooms[room_id]
        r = self.cfg.camera_radius * np.sqrt(rng.random())
        a = rng.uniform(0, 2 * np.pi)
        pos = np.array(room.pos) + np.array([r * np.cos(a), r * np.sin(a), 0.0])
        feat = (self.class_embeddings[room.cls] + self.instance_offset(g.env_id, room_id)
                + self.cfg.sigma_view * rng.normal(size=self.cfg.feature_dim))
        return Observation(pos, feat, self.class_probs(room.cls, rng), g.env_id, room_id)

    def glimpse(self, g: RoomGraph, room_id: int, rng) -> np.ndarray:
        """Class-probability preview of an adjacent room seen through the doorway."""
        return self.class_probs(g.cls(room_id), as_rng(rng), self.cfg.glimpse_accuracy)


def observe(g: RoomGraph, room_id: int, rng, cfg: ObserverConfig) -> Observation:
    return Observer(cfg).observe(g, room_id, rng)


# ---- pair dataset ------------------------------------------------------------

@dataclass
class PairExample:
    a: Observation
    b: Observation
    label: int


def make_pair_dataset(envs: list[RoomGraph], rng, n_pairs: int = 4000,
                      observer: Observer | None = None) -> list[PairExample]:
    """Balanced same-room / different-room pairs (negatives from the same building)."""
    observer = observer or Observer()
    rng = as_rng(rng)
    usable = [g for g in envs if g.n >= 2]
    if not usable:
        raise ValueError("need at least one environment with 2 rooms")
    n_pos = n_pairs // 2
    out = []
    for k in range(2 * n_pos):
        g = usable[int(rng.integers(len(usable)))]
        if k % 2 == 0:
            r = int(rng.integers(g.n))
            out.append(PairExample(observer.observe(g, r, rng), observer.observe(g, r, rng), 1))
        else:
            r1, r2 = (int(v) for v in rng.choice(g.n, size=2, replace=False))
            out.append(PairExample(observer.observe(g, r1, rng), observer.observe(g, r2, rng), 0))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def save_pairs_jsonl(pairs: list[PairExample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps({"a": p.a.to_json(), "b": p.b.to_json(), "label": p.label},
                                sort_keys=True) + "\n")


def load_pairs_jsonl(path) -> list[PairExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(PairExample(Observation.from_json(d["a"]), Observation.from_json(d["b"]),
                                       int(d["label"])))
    return out


# ---- localizer ---------------------------------------------------------------

@dataclass
class LocalizerConfig:
    # "fourier": encoded pose, "raw": pose as-is, "none": features only
    pose_encoding: str = "fourier"
    fourier_length: int = 5
    pose_scale: float = 10.0
    feature_dim: int = 64
    hidden: tuple[int, ...] = (256, 128, 64)
    lr: float = 1e-4
    batch_size: int = 100
    epochs: int = 11
    holdout_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.pose_encoding not in ("fourier", "raw", "none"):
            raise ValueError(f"unknown pose encoding {self.pose_encoding!r}")
        self.hidden = tuple(self.hidden)

    def pose_dim(self) -> int:
        return {"fourier": 3 * (2 * self.fourier_length + 1), "raw": 3, "none": 0}[self.pose_encoding]


class LocalizerModel:
    """MLP over [pose_a, feat_a, pose_b, feat_b] giving a same-room logit.

    Pairs are put in canonical order (lexicographic on position) before
    scoring, so ``score(a, b) == score(b, a)`` exactly.
    """

    def __init__(self, cfg: LocalizerConfig | None = None, rng=None, zero_init: bool = False):
        self.cfg = cfg or LocalizerConfig()
        self.params = ParamSet()
        per_cam = self.cfg.pose_dim() + self.cfg.feature_dim
        sizes = [2 * per_cam, *self.cfg.hidden, 1]
        init = None if zero_init else as_rng(self.cfg.seed if rng is None else rng)
        self.mlp = MLP(self.params, "localizer.mlp", sizes, init)
        self.heldout_accuracy: float | None = None

    def _cam_features(self, pos: np.ndarray, feat: np.ndarray) -> np.ndarray:
        pos = np.atleast_2d(pos)
        feat = np.atleast_2d(feat)
        if self.cfg.pose_encoding == "none":
            return feat
        p = pos / self.cfg.pose_scale
        enc = fourier_encode(p, self.cfg.fourier_length) if self.cfg.pose_encoding == "fourier" else p
        return np.concatenate([enc, feat], axis=1)

    def pair_inputs(self, pa, fa, pb, fb) -> np.ndarray:
        pa, pb = np.atleast_2d(pa), np.atleast_2d(pb)
        fa, fb = np.atleast_2d(fa), np.atleast_2d(fb)
        swap = _lex_greater(pa, pb)
        p1 = np.where(swap[:, None], pb, pa)
        p2 = np.where(swap[:, None], pa, pb)
        f1 = np.where(swap[:, None], fb, fa)
        f2 = np.where(swap[:, None], fa, fb)
        return np.concatenate([self._cam_features(p1, f1), self._cam_features(p2, f2)], axis=1)

    def logits(self, x: np.ndarray) -> Tensor:
        return self.mlp(Tensor(x))[:, 0]

    def score_many(self, a: Observation, others: list[Observation]) -> np.ndarray:
        if not others:
            return np.zeros(0)
        n = len(others)
        pa = np.repeat(a.position[None, :], n, axis=0)
        fa = np.repeat(a.feature[None, :], n, axis=0)
        pb = np.stack([o.position for o in others])
        fb = np.stack([o.feature for o in others])
        with no_grad():
            z = self.logits(self.pair_inputs(pa, fa, pb, fb)).data
        return _sigmoid(z)

    def score_pair(self, a: Observation, b: Observation) -> float:
        return float(self.score_many(a, [b])[0])


def _lex_greater(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros(a.shape[0], dtype=bool)
    decided = np.zeros(a.shape[0], dtype=bool)
    for k in range(a.shape[1]):
        gt = (a[:, k] > b[:, k]) & ~decided
        lt = (a[:, k] < b[:, k]) & ~decided
        out |= gt
        decided |= gt | lt
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.where(z >= 0, 1 / (1 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1 + np.exp(-np.abs(z))))


def score_pair(m: LocalizerModel, a: Observation, b: Observation) -> float:
    return m.score_pair(a, b)


def _pair_arrays(model: LocalizerModel, pairs: list[PairExample]) -> tuple[np.ndarray, np.ndarray]:
    x = model.pair_inputs(np.stack([p.a.position for p in pairs]), np.stack([p.a.feature for p in pairs]),
                          np.stack([p.b.position for p in pairs]), np.stack([p.b.feature for p in pairs]))
    y = np.array([p.label for p in pairs], dtype=np.float64)
    return x, y


def localizer_accuracy(model: LocalizerModel, pairs: list[PairExample]) -> float:
    x, y = _pair_arrays(model, pairs)
    with no_grad():
        z = model.logits(x).data
    return float(np.mean((z > 0) == (y > 0.5)))


def train_localizer(pairs: list[PairExample], cfg: LocalizerConfig | None = None,
                    log=None) -> LocalizerModel:
    """Adam + binary cross-entropy; sets ``model.heldout_accuracy`` on a held-out slice."""
    cfg = cfg or LocalizerConfig()
    labels = np.array([p.label for p in pairs])
    if len(pairs) < 4 or abs(labels.mean() - 0.5) > 0.05:
        raise ValueError("localizer training expects a balanced pair dataset")
    rng = as_rng(cfg.seed)
    model = LocalizerModel(cfg, rng)
    n_hold = max(1, int(round(cfg.holdout_fraction * len(pairs))))
    train, hold = pairs[n_hold:], pairs[:n_hold]
    x, y = _pair_arrays(model, train)
    state = AdamState(lr=cfg.lr)
    model.params.zero_grad()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        total = 0.0
        for s in range(0, len(train), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss = bce_with_logits(model.logits(x[idx]), y[idx]) * (1.0 / len(idx))
            if not np.isfinite(loss.data):
                raise NonFiniteError("localizer loss diverged")
            backward(loss)
            adam_step(model.params, state)
            total += loss.item() * len(idx)
        if log:
            log(f"localizer epoch {epoch}: bce {total / len(train):.4f}")
    model.heldout_accuracy = localizer_accuracy(model, hold)
    return model


def localizer_config_json(cfg: LocalizerConfig) -> dict:
    d = asdict(cfg)
    d["hidden"] = list(cfg.hidden)
    return d


# ---- room classifier head (focal vs cross-entropy on synthetic features) -------

class RoomClassifier:
    """Linear 30-way head over observation features."""

    def __init__(self, feature_dim: int, rng=None):
        self.params = ParamSet()
        self.head = Linear(self.params, "roomcls", feature_dim, NUM_CLASSES, None if rng is None else as_rng(rng))

    def predict(self, features: np.ndarray) -> np.ndarray:
        with no_grad():
            return softmax(self.head(Tensor(features))).data


def train_room_classifier(features: np.ndarray, labels: np.ndarray, loss: str = "focal",
                          gamma: float = 0.5, epochs: int = 20, lr: float = 1e-2,
                          batch_size: int = 100, seed: int = 0) -> RoomClassifier:
    if loss not in ("focal", "ce"):
        raise ValueError(f"unknown loss {loss!r}")
    rng = as_rng(seed)
    clf = RoomClassifier(features.shape[1], rng)
    state = AdamState(lr=lr)
    clf.params.zero_grad()
    for _ in range(epochs):
        order = rng.permutation(len(labels))
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            logits = clf.head(Tensor(features[idx]))
            total = None
            for r, i in enumerate(idx):
                if loss == "focal":
                    term = focal_loss(softmax(logits[r]), int(labels[i]), gamma)
                else:
                    term = cross_entropy(logits[r], int(labels[i]))
                total = term if total is None else total + term
            backward(total * (1.0 / len(idx)))
            adam_step(clf.params, state)
    return clf
