"""Online three-level scene graph: building root, room nodes, camera nodes."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .graphs import ObservationGraph, lower_triangular
from .perception import Observation


class ContradictoryFusion(ValueError):
    """Element-wise product of two beliefs is all zero."""


def fuse_room_probs(prior, obs) -> np.ndarray:
    """normalize(prior * obs)."""
    prior = np.asarray(prior, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if prior.shape != obs.shape:
        raise ValueError(f"belief shapes differ: {prior.shape} vs {obs.shape}")
    prod = prior * obs
    z = prod.sum()
    if not z > 0:
        raise ContradictoryFusion("fused belief has no mass")
    return prod / z


@dataclass
class CameraNode:
    id: int
    obs: Observation
    room: int = -1  # room node id, -1 until localized


@dataclass
class RoomNode:
    id: int  # equals its discovery index
    probs: np.ndarray
    cameras: list[int] = field(default_factory=list)


class OracleLocalizer:
    """Scores 1 for cameras taken in the same true room, 0 otherwise."""

    def score_many(self, a: Observation, others: list[Observation]) -> np.ndarray:
        return np.array([1.0 if (o.env_id, o.room_id) == (a.env_id, a.room_id) else 0.0 for o in others])


class SceneGraph:
    BUILDING = "building"

    def __init__(self, distance_prefilter: float | None = None):
        self.cameras: list[CameraNode] = []
        self.rooms: list[RoomNode] = []
        self.room_edges: set[tuple[int, int]] = set()
        self.camera_edges: list[tuple[int, int]] = []
        self.distance_prefilter = distance_prefilter

    @property
    def building_root(self) -> str:
        return self.BUILDING

    def insert_camera(self, obs: Observation, came_from: int | None = None) -> int:
        cid = len(self.cameras)
        self.cameras.append(CameraNode(cid, obs))
        if came_from is not None:
            if not 0 <= came_from < cid:
                raise IndexError(f"unknown camera {came_from}")
            self.camera_edges.append((came_from, cid))
        return cid

    def _came_from(self, cid: int) -> int | None:
        for a, b in reversed(self.camera_edges):
            if b == cid:
                return a
        return None

    def localize_camera(self, cid: int, localizer) -> int:
        cam = self.cameras[cid]
        if cam.room >= 0:
            raise ValueError(f"camera {cid} already localized")
        cands = [c for c in self.cameras[:cid] if c.room >= 0]
        if self.distance_prefilter is not None:
            cands = [c for c in cands
                     if np.linalg.norm(c.obs.position - cam.obs.position) <= self.distance_prefilter]
        room = -1
        if cands:
            scores = np.asarray(localizer.score_many(cam.obs, [c.obs for c in cands]))
            best = int(np.argmax(scores))
            if scores[best] > 0.5:
                target = self.rooms[cands[best].room]
                try:
                    target.probs = fuse_room_probs(target.probs, cam.obs.class_probs)
                    room = target.id
                except ContradictoryFusion:
                    room = -1  # certain beliefs disagree: treat as a new room
        if room < 0:
            room = len(self.rooms)
            self.rooms.append(RoomNode(room, np.array(cam.obs.class_probs, dtype=np.float64)))
        cam.room = room
        self.rooms[room].cameras.append(cid)
        prev = self._came_from(cid)
        if prev is not None:
            pr = self.cameras[prev].room
            if pr >= 0 and pr != room:
                self.room_edges.add((min(pr, room), max(pr, room)))
        return room

    def room_of(self, cid: int) -> int:
        return self.cameras[cid].room

    def export_observation_graph(self) -> ObservationGraph:
        if not self.rooms:
            raise ValueError("scene graph has no room nodes")
        x = np.stack([r.probs for r in self.rooms])
        return ObservationGraph(x, lower_triangular(len(self.rooms), self.room_edges))

    def to_json(self) -> dict:
        return {
            "building": self.BUILDING,
            "rooms": [{"id": r.id, "probs": r.probs.tolist(), "cameras": r.cameras} for r in self.rooms],
            "room_edges": [list(e) for e in sorted(self.room_edges)],
            "cameras": [{"id": c.id, "room": c.room, "pos": c.obs.position.tolist(),
                         "class_probs": c.obs.class_probs.tolist(), "true_room": c.obs.room_id}
                        for c in self.cameras],
            "camera_edges": [list(e) for e in self.camera_edges],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def insert_camera(sg: SceneGraph, obs: Observation, came_from: int | None = None) -> int:
    return sg.insert_camera(obs, came_from)


def localize_camera(sg: SceneGraph, camera_id: int, localizer) -> int:
    return sg.localize_camera(camera_id, localizer)


def export_observation_graph(sg: SceneGraph) -> ObservationGraph:
    return sg.export_observation_graph()
