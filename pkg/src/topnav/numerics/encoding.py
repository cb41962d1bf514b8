from __future__ import annotations

import numpy as np


def fourier_encode(x, L: int) -> np.ndarray:
    """Per coordinate: [x, sin(2^0 πx), cos(2^0 πx), ..., sin(2^(L-1) πx), cos(2^(L-1) πx)].

    Works on a vector (one point) or an (n, d) array of points; output has
    ``d * (2L + 1)`` columns.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = x[None, :] if single else x
    freqs = (2.0 ** np.arange(L)) * np.pi
    ang = pts[:, :, None] * freqs  # (n, d, L)
    sc = np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(pts.shape[0], pts.shape[1], 2 * L)
    out = np.concatenate([pts[:, :, None], sc], axis=-1).reshape(pts.shape[0], -1)
    return out[0] if single else out
