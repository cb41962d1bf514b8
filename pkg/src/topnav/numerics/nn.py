"""Named parameter collections and the small set of layers the models share."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, concat, matmul, relu, sigmoid, tanh


class ParamSet:
    """Ordered (lexicographic) map from dotted name to trainable Tensor."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value, trainable=True)
        t.trainable = True
        t.requires_grad = True
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return sorted(self._entries)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.zero_grad()

    def num_values(self) -> int:
        return sum(t.data.size for t in self._entries.values())

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._entries) ^ set(state)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for name, arr in state.items():
            t = self._entries[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"load {name}", t.shape, arr.shape)
            t.data = arr.copy()


def glorot(rng: np.random.Generator | None, n_in: int, n_out: int) -> np.ndarray:
    if rng is None:
        return np.zeros((n_in, n_out))
    lim = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-lim, lim, size=(n_in, n_out))


class Linear:
    """y = x W + b, with W of shape (n_in, n_out). ``rng=None`` gives zero init."""

    def __init__(self, params: ParamSet, name: str, n_in: int, n_out: int,
                 rng: np.random.Generator | None, bias: bool = True):
        self.n_in, self.n_out = n_in, n_out
        self.w = params.add(f"{name}.w", glorot(rng, n_in, n_out))
        self.b = params.add(f"{name}.b", np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ShapeError("linear", x.shape, self.w.shape)
        y = matmul(x, self.w)
        return y + self.b if self.b is not None else y


class MLP:
    """Linear layers with ReLU between them and a linear output."""

    def __init__(self, params: ParamSet, name: str, sizes: Sequence[int],
                 rng: np.random.Generator | None):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.sizes = tuple(sizes)
        self.layers = [
            Linear(params, f"{name}.l{i}", sizes[i], sizes[i + 1], rng)
            for i in range(len(sizes) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x


class LSTMCell:
    """Standard LSTM: gates i, f, o and candidate g from [x, h]."""

    def __init__(self, params: ParamSet, name: str, n_in: int, n_hidden: int,
                 rng: np.random.Generator | None):
        self.n_in, self.n_hidden = n_in, n_hidden
        self.wx = params.add(f"{name}.wx", glorot(rng, n_in, 4 * n_hidden))
        self.wh = params.add(f"{name}.wh", glorot(rng, n_hidden, 4 * n_hidden))
        self.b = params.add(f"{name}.b", np.zeros(4 * n_hidden))

    def __call__(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        n = self.n_hidden
        if x.shape[-1] != self.n_in or h.shape[-1] != n or c.shape[-1] != n:
            raise ShapeError("lstm_step", x.shape, h.shape)
        z = matmul(x, self.wx) + matmul(h, self.wh) + self.b
        i = sigmoid(z[..., 0:n])
        f = sigmoid(z[..., n:2 * n])
        o = sigmoid(z[..., 2 * n:3 * n])
        g = tanh(z[..., 3 * n:4 * n])
        c_new = f * c + i * g
        h_new = o * tanh(c_new)
        return h_new, c_new


class GRUCell:
    """GRU with update gate u (u -> 1 keeps the old state) and reset gate r."""

    def __init__(self, params: ParamSet, name: str, n_in: int, n_hidden: int,
                 rng: np.random.Generator | None):
        self.n_in, self.n_hidden = n_in, n_hidden
        self.wx = params.add(f"{name}.wx", glorot(rng, n_in, 3 * n_hidden))
        self.wh = params.add(f"{name}.wh", glorot(rng, n_hidden, 2 * n_hidden))
        self.wn = params.add(f"{name}.wn", glorot(rng, n_hidden, n_hidden))
        self.b = params.add(f"{name}.b", np.zeros(3 * n_hidden))

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        n = self.n_hidden
        if x.shape[-1] != self.n_in or h.shape[-1] != n:
            raise ShapeError("gru_step", x.shape, h.shape)
        zx = matmul(x, self.wx) + self.b
        zh = matmul(h, self.wh)
        u = sigmoid(zx[..., 0:n] + zh[..., 0:n])
        r = sigmoid(zx[..., n:2 * n] + zh[..., n:2 * n])
        cand = tanh(zx[..., 2 * n:3 * n] + matmul(r * h, self.wn))
        return u * h + (1.0 - u) * cand


def lstm_step(cell: LSTMCell, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    return cell(x, h, c)


def gru_step(cell: GRUCell, x: Tensor, h: Tensor) -> Tensor:
    return cell(x, h)


def cat(*parts: Tensor) -> Tensor:
    return concat(parts, axis=-1)
