"""PCA-enhanced rolling-window samples.

Each 1-D signal becomes a matrix of overlapping windows. Nine temporal views
of that matrix (identity, three moving averages, five phase-shifted
subsamplings) are each reduced by PCA; the leading components are min-max
scaled into the raw sample range and appended to the raw window.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

WINDOW = 300
VARIANCE_TARGET = 0.99
TOP_K = 5
SIGNALS = ("rssi", "sinr")
BUNDLE_VERSION = 1

# (kind, parameter): moving average window, or subsampling (step, start, stop)
# where a negative stop counts back from the window end; the last view stops one
# short of the final column so a 300-step window yields 99 columns
TRANSFORMS = (
    ("identity", None),
    ("moving_average", 2),
    ("moving_average", 3),
    ("moving_average", 5),
    ("subsample", (2, 0, None)),
    ("subsample", (2, 1, None)),
    ("subsample", (3, 0, None)),
    ("subsample", (3, 1, None)),
    ("subsample", (3, 2, -1)),
)


class FeatureError(ValueError):
    pass


def rolling_window(series, window: int = WINDOW) -> np.ndarray:
    """Row ``i`` is ``series[i:i+window]``; shape ``(len - window + 1, window)``."""
    s = np.asarray(series, dtype=np.float64)
    if s.ndim != 1:
        raise FeatureError("rolling_window expects a 1-D series")
    if len(s) < window:
        raise FeatureError(f"series of length {len(s)} is shorter than the window {window}")
    return np.lib.stride_tricks.sliding_window_view(s, window).copy()


def moving_average(x: np.ndarray, n: int) -> np.ndarray:
    """Row-wise trailing mean over ``n`` columns; ``cols - n + 1`` columns out."""
    c = np.cumsum(x, axis=1, dtype=np.float64)
    c = np.concatenate([np.zeros((x.shape[0], 1)), c], axis=1)
    return (c[:, n:] - c[:, :-n]) / n


def transform_widths(window: int = WINDOW) -> list[int]:
    widths = []
    for kind, arg in TRANSFORMS:
        if kind == "identity":
            widths.append(window)
        elif kind == "moving_average":
            widths.append(max(window - arg + 1 - arg, 0))
        else:
            step, start, stop = arg
            widths.append(len(range(window)[start:stop:step]))
    return widths


def apply_transformations(x: np.ndarray, window: int | None = None) -> list[np.ndarray]:
    """The nine views of a window matrix, in fixed order."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise FeatureError("expected a 2-D sample matrix")
    if window is not None and x.shape[1] != window:
        raise FeatureError(f"expected {window} columns, got {x.shape[1]}")
    if x.shape[1] < 11:
        raise FeatureError("sample matrix needs at least 11 columns")
    out = []
    for kind, arg in TRANSFORMS:
        if kind == "identity":
            out.append(x)
        elif kind == "moving_average":
            out.append(moving_average(x, arg)[:, arg:])
        else:
            step, start, stop = arg
            out.append(x[:, start:stop:step])
    return out


@dataclass
class PCAModel:
    mean: np.ndarray
    components: np.ndarray  # (n_retained, n_features), orthonormal rows
    explained_variance_ratio: np.ndarray  # all ratios, descending
    n_retained: int

    @property
    def n_features(self) -> int:
        return len(self.mean)

    def to_dict(self) -> dict:
        return dict(mean=self.mean.tolist(), components=self.components.tolist(),
                    explained_variance_ratio=self.explained_variance_ratio.tolist(),
                    n_retained=self.n_retained)

    @classmethod
    def from_dict(cls, d: dict) -> "PCAModel":
        n = len(d["mean"])
        return cls(mean=np.array(d["mean"], dtype=np.float64),
                   components=np.array(d["components"], dtype=np.float64).reshape(-1, n),
                   explained_variance_ratio=np.array(d["explained_variance_ratio"], dtype=np.float64),
                   n_retained=int(d["n_retained"]))


def pca_fit(m: np.ndarray, variance_target: float = VARIANCE_TARGET) -> PCAModel:
    """Centered PCA via SVD keeping the fewest components reaching ``variance_target``.

    Each component's largest-magnitude entry is made positive. A matrix with
    zero total variance (including a single row) yields a single component
    with ratio 1.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1:
        raise FeatureError("pca_fit needs a non-empty 2-D matrix")
    if np.isnan(m).any():
        raise FeatureError("pca_fit input contains NaN")
    mu = m.mean(axis=0)
    _, s, vt = np.linalg.svd(m - mu, full_matrices=False)
    idx = np.argmax(np.abs(vt), axis=1)
    signs = np.sign(vt[np.arange(len(vt)), idx])
    signs[signs == 0] = 1.0
    vt = vt * signs[:, None]
    var = s * s
    total = var.sum()
    if total <= 0.0:
        ratio = np.zeros(len(s))
        ratio[0] = 1.0
        return PCAModel(mu, vt[:1].copy(), ratio, 1)
    ratio = var / total
    cum = np.cumsum(ratio)
    r = int(np.searchsorted(cum, variance_target - 1e-12)) + 1
    r = min(r, len(ratio))
    return PCAModel(mu, vt[:r].copy(), ratio, r)


def pca_project_top(m: np.ndarray, model: PCAModel, k: int = TOP_K) -> np.ndarray:
    """Scores on the leading ``min(k, n_retained)`` components."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape[1] != model.n_features:
        raise FeatureError(f"PCA fitted on {model.n_features} columns, got {m.shape[1]}")
    k = min(k, model.n_retained)
    return (m - model.mean) @ model.components[:k].T


def scale_to_range(cols: np.ndarray, lo: float, hi: float,
                   col_min: np.ndarray | None = None,
                   col_max: np.ndarray | None = None) -> np.ndarray:
    """Affine per-column map sending column min to ``lo`` and max to ``hi``.

    ``col_min``/``col_max`` default to the columns' own extremes; passing fitted
    values reuses a previous scaler. Output is clipped to ``[lo, hi]`` and
    constant columns map to ``lo``.
    """
    if not hi > lo:
        raise FeatureError(f"scale_to_range needs hi > lo, got [{lo}, {hi}]")
    cols = np.asarray(cols, dtype=np.float64)
    cmin = cols.min(axis=0) if col_min is None else np.asarray(col_min)
    cmax = cols.max(axis=0) if col_max is None else np.asarray(col_max)
    span = cmax - cmin
    safe = np.where(span > 0, span, 1.0)
    out = lo + (cols - cmin) / safe * (hi - lo)
    out = np.where(span > 0, out, lo)
    return np.clip(out, lo, hi)


@dataclass
class SignalFeatures:
    """Fitted PCA models and scaler state for one signal kind."""
    pcas: list[PCAModel]
    col_min: np.ndarray
    col_max: np.ndarray
    min_x: float
    max_x: float
    window: int = WINDOW
    top_k: int = TOP_K

    @property
    def n_pca(self) -> int:
        return sum(min(self.top_k, p.n_retained) for p in self.pcas)

    @property
    def width(self) -> int:
        return self.window + self.n_pca

    def to_dict(self) -> dict:
        return dict(pcas=[p.to_dict() for p in self.pcas], col_min=self.col_min.tolist(),
                    col_max=self.col_max.tolist(), min_x=self.min_x, max_x=self.max_x,
                    window=self.window, top_k=self.top_k)

    @classmethod
    def from_dict(cls, d: dict) -> "SignalFeatures":
        return cls(pcas=[PCAModel.from_dict(p) for p in d["pcas"]],
                   col_min=np.array(d["col_min"], dtype=np.float64),
                   col_max=np.array(d["col_max"], dtype=np.float64),
                   min_x=float(d["min_x"]), max_x=float(d["max_x"]),
                   window=int(d["window"]), top_k=int(d["top_k"]))


@dataclass
class EnhancedSampleMatrix:
    raw: np.ndarray
    pca: np.ndarray
    min_x: float
    max_x: float

    @property
    def matrix(self) -> np.ndarray:
        return np.concatenate([self.raw, self.pca], axis=1)

    @property
    def shape(self) -> tuple:
        return (self.raw.shape[0], self.raw.shape[1] + self.pca.shape[1])


def _pca_block(x: np.ndarray, pcas: Sequence[PCAModel], k: int) -> np.ndarray:
    views = apply_transformations(x)
    return np.concatenate([pca_project_top(v, p, k) for v, p in zip(views, pcas)], axis=1)


def fit_signal_features(samples: np.ndarray | Sequence[np.ndarray], window: int = WINDOW,
                        variance_target: float = VARIANCE_TARGET, top_k: int = TOP_K) -> SignalFeatures:
    """Fit on one window matrix, or on the stacked windows of several series."""
    if isinstance(samples, np.ndarray) and samples.ndim == 2:
        x = samples
    else:
        x = np.concatenate([rolling_window(s, window) for s in samples], axis=0)
    if x.shape[1] != window:
        raise FeatureError(f"expected {window} columns, got {x.shape[1]}")
    pcas = [pca_fit(v, variance_target) for v in apply_transformations(x)]
    block = _pca_block(x, pcas, top_k)
    return SignalFeatures(pcas=pcas, col_min=block.min(axis=0), col_max=block.max(axis=0),
                          min_x=float(x.min()), max_x=float(x.max()), window=window, top_k=top_k)


def enhance(series, fitted: SignalFeatures | None = None, window: int = WINDOW,
            variance_target: float = VARIANCE_TARGET,
            top_k: int = TOP_K) -> tuple[EnhancedSampleMatrix, SignalFeatures]:
    """Windows of ``series`` with scaled PCA columns appended.

    Without ``fitted`` the PCA models and scaler are fitted on this series;
    with it (inference) they are reused unchanged.
    """
    if fitted is not None:
        window = fitted.window
    x = rolling_window(series, window)
    if fitted is None:
        fitted = fit_signal_features(x, window, variance_target, top_k)
    block = _pca_block(x, fitted.pcas, fitted.top_k)
    lo, hi = fitted.min_x, fitted.max_x
    if hi > lo:
        scaled = scale_to_range(block, lo, hi, fitted.col_min, fitted.col_max)
    else:
        scaled = np.full_like(block, lo)
    return EnhancedSampleMatrix(raw=x, pca=scaled, min_x=lo, max_x=hi), fitted


@dataclass
class FeatureBundle:
    """Everything fitted on training data: per-signal PCA state and token bin edges."""
    signals: dict[str, SignalFeatures]
    bins: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def window(self) -> int:
        return self.signals["rssi"].window

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        doc = dict(version=BUNDLE_VERSION,
                   signals={k: v.to_dict() for k, v in self.signals.items()},
                   # +-inf are not valid JSON; they are restored on load
                   bins={k: np.asarray(v)[1:-1].tolist() for k, v in self.bins.items()})
        path.write_text(json.dumps(doc), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "FeatureBundle":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("version") != BUNDLE_VERSION:
            raise FeatureError(f"unsupported bundle version {doc.get('version')}")
        bins = {k: np.concatenate([[-np.inf], np.array(v, dtype=np.float64), [np.inf]])
                for k, v in doc.get("bins", {}).items()}
        return cls(signals={k: SignalFeatures.from_dict(v) for k, v in doc["signals"].items()},
                   bins=bins)
