"""Train the toy U-shaped transformer on a synthetic grid and score it.

This is the desk-scale run from the acceptance suite: eight scenarios of
600 steps, 32-step windows, three epochs. Expect a few minutes per run.

Run:  python demos/03_desk_training.py [lambda]
"""
import logging
import sys
import time

import numpy as np

from jamdetect import evaluation as EV
from jamdetect import pipeline as P
from jamdetect import trainer as TR
from jamdetect.model import ModelConfig, build

logging.basicConfig(level=logging.INFO, format="%(message)s")
lam = float(sys.argv[1]) if len(sys.argv) > 1 else 0.4

recs = P.generate_records(P.scenario_grid(8, 600, seed=3, episode_mean_steps=100.0))
ds = P.build_dataset(recs, P.PipelineConfig(window=32))
print(f"{len(ds.train)} train / {len(ds.val)} val / {len(ds.test)} test, "
      f"block {ds.block_size}, attacked share (test) {ds.class_balance():.2f}")

cfg = ModelConfig(block_size=ds.block_size, encoder_dims=(64, 32, 16), decoder_dims=(16, 32, 64),
                  n_heads=4, dropout=0.0, period_hints=(ds.bundle.signals["rssi"].width, 32))
train_cfg = TR.TrainConfig(n_chunks=1, base_batch=32, lr_peak=2e-3, lr_min=1e-4, warmup_epochs=1,
                           epochs=3, val_stride=2, rand_mask_p=0.0, precision="reduced",
                           lambda_entropy=lam)
trainer = TR.Trainer(build(cfg, seed=0), train_cfg)

t0 = time.perf_counter()
history = trainer.fit(ds.train, ds.val)
print(f"trained in {time.perf_counter() - t0:.0f}s")

rep = EV.evaluate(trainer.model, ds.test)
m = rep.metrics
print(f"accuracy {m['accuracy']:.3f} (majority {m['majority_rate']:.3f}), "
      f"f1 {m['f1']:.3f}, mean entropy {m['mean_entropy']:.3f}")
print("per distance:")
for row in rep.by_distance:
    print(f"  {row['distance_m']:>6g} m  n={row['count']:<4d} acc={row['accuracy']:.3f}")

# Rerun with lambda=0 to see the entropy term at work: the regularised model
# keeps its probabilities further from 0 and 1.
print("val entropy by epoch:", np.round([h.val_entropy for h in history], 3))
