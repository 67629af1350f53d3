"""Tiny learnable token sequences for trainer tests."""
import numpy as np

from jamdetect.model import ModelConfig, build
from jamdetect.tokenizer import ATTACKED, NO_ATTACK, build_sequence

LENGTH = 12  # 1 + 5 + 5 + 1


def sequences(n: int, seed: int = 0):
    """Label is ATTACKED when the last SINR token sits in the low half of its range."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        r = rng.integers(9, 59, 5)
        s = rng.integers(59, 109, 5)
        out.append(build_sequence(r, s, ATTACKED if s[-1] < 84 else NO_ATTACK,
                                  meta={"distance_m": 100.0, "attackers": 1}))
    return out


def model(seed: int = 0, dropout: float = 0.0):
    cfg = ModelConfig(block_size=LENGTH, encoder_dims=(16, 8, 8), decoder_dims=(8, 8, 16),
                      n_heads=4, dropout=dropout)
    return build(cfg, seed)
