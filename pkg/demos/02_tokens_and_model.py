"""From enhanced windows to token sequences, then one forward pass.

Run:  python demos/02_tokens_and_model.py
"""
import numpy as np

from jamdetect import pipeline as P
from jamdetect import tokenizer as T
from jamdetect.model import ModelConfig, build, predict

recs = P.generate_records(P.scenario_grid(2, 2600, seed=5))
# full 300-step windows; splits are separated by window-1 purged rows
ds = P.build_dataset(recs)
print("train/val/test sequences:", len(ds.train), len(ds.val), len(ds.test))
print("block size:", ds.block_size)

seq = ds.train[0]
print("first tokens:", seq.tokens[:8], "... label token:", seq.tokens[-1])
print("kinds:", T.token_kind(seq.tokens[1]), T.token_kind(seq.tokens[-2]))

# Training views hide a quarter of the signal tokens and, most of the time,
# the label; the model must fill the blanks.
rng = np.random.default_rng(0)
masked = T.apply_masking(seq, 0.25, 0.85, rng)
print("masked positions:", len(masked.mask_positions), "of", len(seq))

# The reference configuration, sized to this block.
model = build(ModelConfig(block_size=ds.block_size), seed=0)
print("model parameters: %d" % model.num_parameters())

# A small slice keeps this quick. Untrained attention is close to uniform over
# 692 positions, so the answers differ only in the later decimals.
view = T.stack_tokens([T.prediction_view(s) for s in ds.test[:4]])
labels, p_attacked = predict(model, view)
print("P(attacked):", np.round(p_attacked, 6))
