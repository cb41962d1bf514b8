from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ObservationGraph:
    """Room-level graph seen so far.

    ``x`` holds one class distribution per node (discovery order); ``adj`` is
    the strictly lower-triangular 0/1 adjacency, row i having bits for j < i.
    """

    x: np.ndarray
    adj: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.adj = np.asarray(self.adj, dtype=np.int8)
        n = self.x.shape[0]
        if self.adj.shape != (n, n):
            raise ValueError(f"adjacency shape {self.adj.shape} does not match {n} nodes")
        if np.any(np.triu(self.adj) != 0):
            raise ValueError("adjacency must be strictly lower triangular")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def symmetric(self) -> np.ndarray:
        return self.adj + self.adj.T

    def edges(self) -> list[tuple[int, int]]:
        ii, jj = np.nonzero(self.adj)
        return sorted((int(j), int(i)) for i, j in zip(ii, jj))

    def is_connected(self) -> bool:
        if self.n == 0:
            return False
        sym = self.symmetric()
        seen = {0}
        todo = [0]
        while todo:
            i = todo.pop()
            for j in np.nonzero(sym[i])[0]:
                if int(j) not in seen:
                    seen.add(int(j))
                    todo.append(int(j))
        return len(seen) == self.n


def lower_triangular(n: int, edges) -> np.ndarray:
    adj = np.zeros((n, n), dtype=np.int8)
    for a, b in edges:
        if a == b:
            raise ValueError("self-loop")
        i, j = max(a, b), min(a, b)
        adj[i, j] = 1
    return adj
