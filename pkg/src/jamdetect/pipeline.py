"""From simulated records to tokenized train/val/test splits."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import features as F
from . import tokenizer as T
from .synth import ScenarioConfig, SignalRecord, generate


@dataclass
class PipelineConfig:
    window: int = F.WINDOW
    variance_target: float = F.VARIANCE_TARGET
    top_k: int = F.TOP_K
    n_bins: int = T.N_BINS
    # "last": window label is the label of its final step; "majority": >= half attacked
    label_rule: str = "last"
    splits: tuple = (0.7, 0.15, 0.15)
    # drop window-1 rows at split boundaries so no time step is shared across splits
    purge: bool = True

    def __post_init__(self):
        if self.label_rule not in ("last", "majority"):
            raise ValueError("label_rule must be 'last' or 'majority'")
        if abs(sum(self.splits) - 1.0) > 1e-9 or len(self.splits) != 3:
            raise ValueError("splits must be three fractions summing to 1")


def window_labels(label, window: int, rule: str = "last") -> np.ndarray:
    label = np.asarray(label, dtype=bool)
    if rule == "last":
        return label[window - 1:]
    frac = F.moving_average(label[None, :].astype(np.float64), window)[0]
    return frac >= 0.5


def split_rows(n_rows: int, cfg: PipelineConfig) -> dict[str, np.ndarray]:
    """Chronological train/val/test row indices for one record."""
    a = int(round(cfg.splits[0] * n_rows))
    b = int(round((cfg.splits[0] + cfg.splits[1]) * n_rows))
    gap = cfg.window - 1 if cfg.purge else 0
    return {"train": np.arange(0, a),
            "val": np.arange(min(a + gap, b), b),
            "test": np.arange(min(b + gap, n_rows), n_rows)}


def fit_bundle(records: Sequence[SignalRecord], rows: Sequence[np.ndarray] | None,
               cfg: PipelineConfig) -> F.FeatureBundle:
    """Fit PCA/scaler state and token bins on the given rows of each record, pooled."""
    signals, bins = {}, {}
    for kind in F.SIGNALS:
        mats = []
        for i, r in enumerate(records):
            x = F.rolling_window(getattr(r, kind), cfg.window)
            mats.append(x if rows is None else x[rows[i]])
        x = np.concatenate(mats, axis=0)
        signals[kind] = F.fit_signal_features(x, cfg.window, cfg.variance_target, cfg.top_k)
        enhanced = []
        for i, r in enumerate(records):
            em, _ = F.enhance(getattr(r, kind), signals[kind])
            m = em.matrix
            enhanced.append(m if rows is None else m[rows[i]])
        bins[kind] = T.fit_bins(np.concatenate(enhanced, axis=0), cfg.n_bins)
    return F.FeatureBundle(signals=signals, bins=bins)


def block_size_for(bundle: F.FeatureBundle) -> int:
    return 2 + bundle.signals["rssi"].width + bundle.signals["sinr"].width


def record_meta(record: SignalRecord) -> dict:
    c = record.config
    return {"distance_m": float(c.distance_m), "attackers": int(c.attackers)}


def record_sequences(record: SignalRecord, bundle: F.FeatureBundle, cfg: PipelineConfig,
                     rows: np.ndarray | None = None) -> list[T.TokenSequence]:
    """Token sequences for (selected) windows of one record using a fitted bundle."""
    er, _ = F.enhance(record.rssi, bundle.signals["rssi"])
    es, _ = F.enhance(record.sinr, bundle.signals["sinr"])
    labels = window_labels(record.label, bundle.window, cfg.label_rule)
    mr, ms = er.matrix, es.matrix
    if rows is not None:
        mr, ms, labels = mr[rows], ms[rows], labels[rows]
    return T.tokenize_windows(mr, ms, labels, bundle.bins, record.config.condition,
                              block_size_for(bundle), record_meta(record))


@dataclass
class Dataset:
    train: list
    val: list
    test: list
    bundle: F.FeatureBundle
    block_size: int
    records: list = field(default_factory=list)

    def class_balance(self, split: str = "test") -> float:
        seqs = getattr(self, split)
        return float(np.mean([s.true_label == T.ATTACKED for s in seqs]))


def build_dataset(records: Sequence[SignalRecord], cfg: PipelineConfig | None = None) -> Dataset:
    cfg = cfg or PipelineConfig()
    splits = [split_rows(len(r) - cfg.window + 1, cfg) for r in records]
    bundle = fit_bundle(records, [s["train"] for s in splits], cfg)
    out = {"train": [], "val": [], "test": []}
    for r, s in zip(records, splits):
        for name in out:
            if len(s[name]):
                out[name].extend(record_sequences(r, bundle, cfg, s[name]))
    return Dataset(out["train"], out["val"], out["test"], bundle, block_size_for(bundle), list(records))


def scenario_grid(n: int, length: int, seed: int = 0, conditions=("LoS", "NLoS"),
                  attackers=(1, 2, 3, 4), powers=(10.0, 20.0),
                  distances=(100.0, 200.0, 500.0, 1000.0), **overrides) -> list[ScenarioConfig]:
    """``n`` scenarios cycling through the grid, each with its own seed."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        out.append(ScenarioConfig(
            condition=conditions[i % len(conditions)],
            attackers=int(attackers[(i // len(conditions)) % len(attackers)]),
            attacker_power_dbm=float(powers[rng.integers(len(powers))]),
            distance_m=float(distances[(i // 2) % len(distances)]),
            length=length, seed=int(rng.integers(2**31)), **overrides))
    return out


def generate_records(configs: Sequence[ScenarioConfig]) -> list[SignalRecord]:
    return [generate(c) for c in configs]
