"""Percentile tokenization of enhanced signals into a 110-id vocabulary.

Layout: 1 CLS, 4 MASK, 5 NO_ATTACK, 6 ATTACKED, 0/2/3/7/8 reserved,
RSSI bins 9..58, SINR bins 59..108.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CLS = 1
MASK = 4
NO_ATTACK = 5
ATTACKED = 6
RESERVED = (0, 2, 3, 7, 8)
N_BINS = 50
BASE = {"rssi": 9, "sinr": 9 + N_BINS}
VOCAB_SIZE = 110
LABEL_TOKENS = (NO_ATTACK, ATTACKED)

# full-window block sizes: 1 + 345 + 345 + 1 and 1 + 345 + 309 + 1
BLOCK_SIZE = {"LoS": 692, "NLoS": 656}


class TokenizerError(ValueError):
    pass


def fit_bins(values, bins: int = N_BINS) -> np.ndarray:
    """Percentile edges: ``bins + 1`` values with ``-inf``/``+inf`` as the outer edges."""
    v = np.asarray(values, dtype=np.float64).ravel()
    v = v[~np.isnan(v)]
    if len(np.unique(v)) < bins:
        raise TokenizerError(f"need at least {bins} distinct values to fit {bins} bins")
    inner = np.quantile(v, np.arange(1, bins) / bins)
    return np.concatenate([[-np.inf], inner, [np.inf]])


def bin_index(values, edges: np.ndarray) -> np.ndarray:
    """Bin of each value; value ``v`` falls in bin ``i`` when ``edges[i] < v <= edges[i+1]``."""
    v = np.asarray(values, dtype=np.float64)
    if np.isnan(v).any():
        raise TokenizerError("cannot tokenize NaN")
    return np.searchsorted(edges[1:-1], v, side="left")


def encode(row, edges: np.ndarray, kind: str) -> np.ndarray:
    if kind not in BASE:
        raise TokenizerError(f"unknown signal kind {kind!r}")
    return BASE[kind] + bin_index(row, edges)


def token_kind(token: int) -> str | None:
    for kind, base in BASE.items():
        if base <= token < base + N_BINS:
            return kind
    return None


@dataclass
class TokenSequence:
    tokens: np.ndarray
    true_label: int
    condition: str = "LoS"
    mask_positions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    targets: np.ndarray | None = None  # originals at mask_positions
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def label_position(self) -> int:
        return len(self.tokens) - 1


def build_sequence(rssi_tokens, sinr_tokens, label: int, condition: str = "LoS",
                   block_size: int | None = None, meta: dict | None = None) -> TokenSequence:
    """``[CLS] + rssi + sinr + [label]`` with an optional block-size check."""
    rssi_tokens = np.asarray(rssi_tokens, dtype=np.int64)
    sinr_tokens = np.asarray(sinr_tokens, dtype=np.int64)
    if len(rssi_tokens) == 0 or len(sinr_tokens) == 0:
        raise TokenizerError("signal token lists must be non-empty")
    if label not in LABEL_TOKENS:
        raise TokenizerError(f"label must be NO_ATTACK ({NO_ATTACK}) or ATTACKED ({ATTACKED})")
    tokens = np.concatenate([[CLS], rssi_tokens, sinr_tokens, [label]])
    if block_size is not None and len(tokens) != block_size:
        raise TokenizerError(f"sequence length {len(tokens)} != block size {block_size}")
    return TokenSequence(tokens=tokens, true_label=int(label), condition=condition, meta=dict(meta or {}))


def apply_masking(seq: TokenSequence, rand_p: float, target_p: float,
                  rng: np.random.Generator) -> TokenSequence:
    """Replace signal tokens by MASK with ``rand_p`` and the label with ``target_p``.

    CLS is never masked. The original ids at masked positions are kept in
    ``targets`` for supervision.
    """
    if not (0.0 <= rand_p <= 1.0 and 0.0 <= target_p <= 1.0):
        raise TokenizerError("mask probabilities must lie in [0, 1]")
    tokens = seq.tokens.copy()
    n = len(tokens)
    hit = np.zeros(n, dtype=bool)
    hit[1:n - 1] = rng.random(n - 2) < rand_p
    hit[n - 1] = rng.random() < target_p
    pos = np.flatnonzero(hit)
    targets = tokens[pos].copy()
    tokens[pos] = MASK
    return replace(seq, tokens=tokens, mask_positions=pos, targets=targets)


def augment(seq: TokenSequence, noise: float, rng: np.random.Generator) -> TokenSequence:
    """Jitter each signal token by one bin with probability ``noise``.

    Tokens at the edge of their signal's range move inward.
    """
    if not 0.0 <= noise <= 1.0:
        raise TokenizerError("noise must lie in [0, 1]")
    tokens = seq.tokens.copy()
    n = len(tokens)
    body = tokens[1:n - 1]
    signal = body >= BASE["rssi"]
    hit = (rng.random(len(body)) < noise) & signal
    step = np.where(rng.random(len(body)) < 0.5, -1, 1)
    offset = (body - BASE["rssi"]) % N_BINS
    step = np.where(offset == 0, 1, np.where(offset == N_BINS - 1, -1, step))
    body = np.where(hit, body + step, body)
    tokens[1:n - 1] = body
    return replace(seq, tokens=tokens)


def prediction_view(seq: TokenSequence) -> TokenSequence:
    """Prediction-time masking: only the label position, always."""
    return apply_masking(seq, 0.0, 1.0, np.random.default_rng(0))


def tokenize_windows(rssi_enhanced: np.ndarray, sinr_enhanced: np.ndarray, labels,
                     bins: dict, condition: str = "LoS", block_size: int | None = None,
                     meta: dict | None = None) -> list[TokenSequence]:
    """One sequence per row of the paired enhanced matrices."""
    if len(rssi_enhanced) != len(sinr_enhanced) or len(labels) != len(rssi_enhanced):
        raise TokenizerError("rssi, sinr and labels must have the same number of rows")
    rt = encode(rssi_enhanced, bins["rssi"], "rssi")
    st = encode(sinr_enhanced, bins["sinr"], "sinr")
    return [build_sequence(r, s, ATTACKED if lab else NO_ATTACK, condition, block_size, meta)
            for r, s, lab in zip(rt, st, labels)]


META_FIELDS = ("condition", "distance_m", "attackers")


def save_sequences(seqs: Iterable[TokenSequence], path: str | Path) -> Path:
    """Integer CSV rows: scenario metadata columns, then the token ids."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(META_FIELDS) + ["tokens"])
        for s in seqs:
            w.writerow([s.condition, s.meta.get("distance_m", ""), s.meta.get("attackers", "")]
                       + s.tokens.tolist())
    return path


def load_sequences(path: str | Path) -> list[TokenSequence]:
    out = []
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != list(META_FIELDS):
            raise TokenizerError(f"{path}: unexpected header")
        for lineno, row in enumerate(reader, start=2):
            try:
                tokens = np.array([int(t) for t in row[3:]], dtype=np.int64)
                meta = {}
                if row[1]:
                    meta["distance_m"] = float(row[1])
                if row[2]:
                    meta["attackers"] = int(row[2])
            except ValueError as exc:
                raise TokenizerError(f"{path}: line {lineno}: {exc}") from None
            if len(tokens) < 4 or tokens[0] != CLS or tokens[-1] not in LABEL_TOKENS:
                raise TokenizerError(f"{path}: line {lineno}: malformed token row")
            if tokens.min() < 0 or tokens.max() >= VOCAB_SIZE:
                raise TokenizerError(f"{path}: line {lineno}: token id outside vocabulary")
            out.append(TokenSequence(tokens=tokens, true_label=int(tokens[-1]),
                                     condition=row[0], meta=meta))
    return out


def stack_tokens(seqs: Sequence[TokenSequence]) -> np.ndarray:
    lengths = {len(s) for s in seqs}
    if len(lengths) != 1:
        raise TokenizerError(f"sequences in a batch must share a length, got {sorted(lengths)}")
    return np.stack([s.tokens for s in seqs])
