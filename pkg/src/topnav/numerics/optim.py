from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import ParamSet


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamSet, state: AdamState) -> None:
    """One bias-corrected Adam update; zeroes every gradient afterwards."""
    for name, t in params.items():
        if t.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, t in params.items():
        g = t.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        t.data = t.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        t.grad = np.zeros_like(t.data)


def adam_to_arrays(state: AdamState, prefix: str = "adam") -> dict[str, np.ndarray]:
    """Moments and step counter as named arrays, for storing next to parameters."""
    out = {f"{prefix}.step": np.array(float(state.step))}
    for name in state.m:
        out[f"{prefix}.m.{name}"] = state.m[name]
        out[f"{prefix}.v.{name}"] = state.v[name]
    return out


def adam_from_arrays(arrays: dict[str, np.ndarray], lr: float, prefix: str = "adam") -> AdamState:
    state = AdamState(lr=lr, step=int(arrays[f"{prefix}.step"]))
    for key, arr in arrays.items():
        for kind in ("m", "v"):
            head = f"{prefix}.{kind}."
            if key.startswith(head):
                getattr(state, kind)[key[len(head):]] = np.array(arr, dtype=np.float64)
    return state
