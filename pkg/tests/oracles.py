"""Independent reference implementations used by the test-suite."""
from __future__ import annotations

import numpy as np


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d f / d x by central differences, element by element (f returns a float)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b))))


def moving_average_loop(x: np.ndarray, n: int) -> np.ndarray:
    rows, w = x.shape
    out = np.empty((rows, w - n + 1))
    for r in range(rows):
        for j in range(w - n + 1):
            out[r, j] = sum(x[r, j:j + n]) / n
    return out


def eig_pca(m: np.ndarray):
    """Explained-variance ratios and unit eigenvectors from the sample covariance."""
    centred = m - m.mean(axis=0)
    cov = centred.T @ centred / (len(m) - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order], 0.0, None)
    return vals / vals.sum(), vecs[:, order], centred
