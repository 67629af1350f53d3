"""Training loop: strided chunk selection, accumulation-based batch scheduling,
warmup/cosine learning rate, EMA with checkpoint restoration, gradient
clipping, reduced-precision compute with loss scaling, and the
entropy-regularised loss ``(CE - lambda * H) / N_accum``.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import Model, ModelConfig, decide, label_probabilities
from .tokenizer import (ATTACKED, NO_ATTACK, TokenSequence, apply_masking, augment,
                        prediction_view, stack_tokens)

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "val_acc", "lr", "n_accum", "skips", "restores")
STATE_VERSION = 1


class NonFiniteLoss(ArithmeticError):
    """The loss was NaN or infinite; the batch should be skipped."""


@dataclass
class TrainConfig:
    n_chunks: int = 10
    base_batch: int = 64
    lr_peak: float = 1e-4
    lr_min: float = 1e-5
    warmup_epochs: int = 8
    lambda_entropy: float = 0.4
    clip_norm: float = 1.0
    ema_alpha: float = 0.001
    restore_alpha: float = 0.005
    restore_patience: int = 2
    scheduler_patience: int = 2
    accum_cap: int = 8
    epochs: int = 30
    seed: int = 0
    precision: str = "full"
    rand_mask_p: float = 0.25
    target_mask_p: float = 0.85
    noise: float = 0.03
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # "literal": W_new = a*W_prev + (1-a)*W_cur; "conventional" swaps the weights
    ema_convention: str = "literal"
    val_stride: int = 1

    def __post_init__(self):
        if self.lambda_entropy < 0:
            raise ValueError("lambda_entropy must be non-negative")
        for name in ("ema_alpha", "restore_alpha"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.n_chunks < 1 or self.base_batch < 1 or self.accum_cap < 1:
            raise ValueError("n_chunks, base_batch and accum_cap must be positive")
        if self.precision not in ("full", "reduced"):
            raise ValueError("precision must be 'full' or 'reduced'")
        if self.ema_convention not in ("literal", "conventional"):
            raise ValueError("ema_convention must be 'literal' or 'conventional'")

    @property
    def dtype(self):
        return np.float64 if self.precision == "full" else np.float32

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    epoch: int = 0
    perm: np.ndarray | None = None
    n_accum: int = 1
    lr: float = 0.0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    # EMA / restoration
    ema: dict | None = None
    best_state: dict | None = None
    best_epoch: int | None = None
    best_loss: float = math.inf
    best_acc: float = -math.inf
    restore_counter: int = 0
    restores: int = 0
    last_restore_epoch: int | None = None
    # batch-size scheduler
    sched_best_loss: float = math.inf
    sched_best_acc: float = -math.inf
    plateau: int = 0
    scheduler_active: bool = False
    # bookkeeping
    skips: int = 0
    updates: int = 0
    loss_scale: float = 1.0
    good_steps: int = 0


def is_improvement(val_loss: float, val_acc: float, best_loss: float, best_acc: float) -> bool:
    """Strictly lower loss or strictly higher accuracy than the best so far."""
    return val_loss < best_loss or val_acc > best_acc


# -- chunking ---------------------------------------------------------------

def new_permutation(n: int, rng: np.random.Generator) -> np.ndarray:
    """Random order of chunk offsets for one cycle of ``n`` epochs.

    The first epoch of a cycle always uses offset 0, so ``P[0]`` is pinned to 0
    and the cycle's offsets cover every residue exactly once.
    """
    return np.concatenate([[0], 1 + rng.permutation(n - 1)]).astype(np.int64)


def select_chunk(epoch: int, n: int, size: int, state: TrainState) -> np.ndarray:
    """Indices ``offset, offset + n, ...`` of the training set for this epoch."""
    if size <= 0:
        raise ValueError("cannot select a chunk from an empty dataset")
    if n < 1:
        raise ValueError("n must be >= 1")
    s = epoch % n
    if s == 0 or state.perm is None or len(state.perm) != n:
        state.perm = new_permutation(n, state.rng)
    offset = 0 if s == 0 else int(state.perm[s])
    return np.arange(offset, size, n)


def steps_per_epoch(subset_size: int, batch: int) -> int:
    return math.ceil(subset_size / batch)


# -- schedules --------------------------------------------------------------

def schedule_lr(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_peak`` then cosine decay to ``lr_min`` at the last epoch."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    w = cfg.warmup_epochs
    if epoch < w:
        return cfg.lr_peak * (epoch + 1) / w
    last = cfg.epochs - 1
    if last <= w:
        return cfg.lr_peak
    frac = min(1.0, (epoch - w) / (last - w))
    return cfg.lr_min + (cfg.lr_peak - cfg.lr_min) * 0.5 * (1.0 + math.cos(math.pi * frac))


def schedule_batch(state: TrainState, val_loss: float, val_acc: float, cfg: TrainConfig) -> TrainState:
    """Double the accumulation steps after ``scheduler_patience`` flat epochs (capped)."""
    if is_improvement(val_loss, val_acc, state.sched_best_loss, state.sched_best_acc):
        state.sched_best_loss = min(state.sched_best_loss, val_loss)
        state.sched_best_acc = max(state.sched_best_acc, val_acc)
        state.plateau = 0
        return state
    state.plateau += 1
    if state.plateau >= cfg.scheduler_patience:
        state.scheduler_active = True
        state.n_accum = min(2 * state.n_accum, cfg.accum_cap)
        state.plateau = 0
    return state


# -- loss -------------------------------------------------------------------

def regularized_loss(base, entropy, lam: float, n_accum: int):
    if n_accum < 1:
        raise ValueError("n_accum must be >= 1")
    return (base - lam * entropy) * (1.0 / n_accum)


def label_entropy(logits: Tensor) -> Tensor:
    """Mean Shannon entropy (nats) of the {NO_ATTACK, ATTACKED} distribution at the last position."""
    pair = logits[:, -1, np.array([NO_ATTACK, ATTACKED])]
    logp = ad.log_softmax(pair, axis=-1)
    return -(ad.exp(logp) * logp).sum(axis=-1).mean()


def masked_cross_entropy(logits: Tensor, batch: Sequence[TokenSequence]) -> Tensor:
    """Cross-entropy over every masked position of every sequence in the batch."""
    bsz, length, vocab = logits.shape
    flat_idx, targets = [], []
    for i, s in enumerate(batch):
        if s.targets is None:
            continue
        flat_idx.append(i * length + np.asarray(s.mask_positions))
        targets.append(np.asarray(s.targets))
    if not flat_idx or sum(len(f) for f in flat_idx) == 0:
        return Tensor(np.zeros((), dtype=logits.dtype))
    rows = ad.reshape(logits, (bsz * length, vocab))[np.concatenate(flat_idx)]
    return ad.softmax_cross_entropy(rows, np.concatenate(targets))


def compute_loss(logits: Tensor, batch: Sequence[TokenSequence], lam: float, n_accum: int) -> Tensor:
    """``(L_base - lam * H) / n_accum``; raises NonFiniteLoss on NaN/inf."""
    base = masked_cross_entropy(logits, batch)
    loss = regularized_loss(base, label_entropy(logits) if lam else 0.0, lam, n_accum)
    if not np.isfinite(loss.data).all():
        raise NonFiniteLoss(float(loss.data))
    return loss


# -- EMA and restoration ----------------------------------------------------

def ema_update(prev: dict, current: dict, alpha: float, convention: str = "literal") -> dict:
    """``alpha * prev + (1 - alpha) * current`` (literal) or the swapped weighting."""
    a = alpha if convention == "literal" else 1.0 - alpha
    return {k: a * prev[k] + (1.0 - a) * current[k] for k in current}


def maybe_restore(state: TrainState, model: Model, val_loss: float, val_acc: float,
                  cfg: TrainConfig, epoch: int | None = None) -> bool:
    """Advance the checkpoint/EMA state machine after a validation pass.

    Returns True when the live weights were restored this call.
    """
    epoch = state.epoch if epoch is None else epoch
    if state.ema is None:
        state.ema = model.state_dict()
    if is_improvement(val_loss, val_acc, state.best_loss, state.best_acc):
        state.best_loss = min(state.best_loss, val_loss)
        state.best_acc = max(state.best_acc, val_acc)
        state.best_state = model.state_dict()
        state.best_epoch = epoch
        state.ema = ema_update(state.ema, state.best_state, cfg.ema_alpha, cfg.ema_convention)
        state.restore_counter = 0
        return False
    state.restore_counter += 1
    if state.restore_counter < cfg.restore_patience:
        return False
    state.restore_counter = 0
    if state.best_state is None:
        warnings.warn("restoration requested before any checkpoint exists; ignored", RuntimeWarning)
        return False
    mixed = ema_update(state.ema, state.best_state, cfg.restore_alpha, cfg.ema_convention)
    model.load_state_dict(mixed)
    state.ema = {k: v.copy() for k, v in mixed.items()}
    state.restores += 1
    state.last_restore_epoch = state.best_epoch
    log.info("epoch %s: restored checkpoint from epoch %s", epoch, state.best_epoch)
    return True


# -- optimiser --------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay applied to matrices only."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            if p.data.ndim >= 2 and c.weight_decay:
                p.data *= 1.0 - lr * c.weight_decay
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)


def clip_gradients(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = ad.parameters_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# -- trainer ----------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    lr: float
    n_accum: int
    skips: int
    restores: int
    val_entropy: float = float("nan")
    updates: int = 0
    micro_batches: int = 0
    seconds: float = 0.0

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


class Trainer:
    def __init__(self, model: Model, cfg: TrainConfig, state: TrainState | None = None):
        self.model = model
        self.cfg = cfg
        self.state = state or TrainState(rng=np.random.default_rng(cfg.seed))
        if self.state.ema is None:
            self.state.ema = model.state_dict()
        if cfg.precision == "reduced" and self.state.loss_scale == 1.0 and self.state.updates == 0:
            self.state.loss_scale = 2.0 ** 8
        self.opt = AdamW(model.params, cfg)
        self._accumulated = 0
        self._grads: dict[str, np.ndarray] = {}

    # accumulation buffer lives outside the parameters so a skipped micro-batch
    # cannot leave partial gradients behind
    def _harvest(self, scale: float) -> bool:
        new = {}
        for k, p in self.model.params.items():
            if p.grad is not None:
                g = p.grad / scale if scale != 1.0 else p.grad
                if not np.isfinite(g).all():
                    self.model.zero_grad()
                    return False
                new[k] = g
        self.model.zero_grad()
        for k, g in new.items():
            self._grads[k] = self._grads[k] + g if k in self._grads else g.astype(np.float64)
        return True

    def micro_step(self, batch: Sequence[TokenSequence], rng: np.random.Generator | None = None) -> float | None:
        """Forward/backward one prepared (masked) micro-batch; applies an update every N_accum.

        Returns the unscaled loss, or None when the micro-batch was skipped.
        """
        st, cfg = self.state, self.cfg
        tokens = stack_tokens(batch)
        self.model.zero_grad()
        logits = self.model.forward(tokens, train=True, rng=rng or st.rng, dtype=cfg.dtype)
        try:
            loss = compute_loss(logits, batch, cfg.lambda_entropy, st.n_accum)
        except NonFiniteLoss:
            st.skips += 1
            return None
        scale = st.loss_scale if cfg.precision == "reduced" else 1.0
        (loss * scale if scale != 1.0 else loss).backward()
        if not self._harvest(scale):
            st.skips += 1
            st.loss_scale = max(st.loss_scale / 2.0, 1.0)
            st.good_steps = 0
            return None
        self._accumulated += 1
        if self._accumulated >= st.n_accum:
            self.apply_update()
        return float(loss.data) * st.n_accum

    def apply_update(self) -> None:
        if not self._grads:
            self._accumulated = 0
            return
        st = self.state
        for k, p in self.model.params.items():
            p.grad = self._grads.get(k)
        clip_gradients(self.model.parameters(), self.cfg.clip_norm)
        self.opt.step(st.lr)
        self.model.zero_grad()
        self._grads = {}
        self._accumulated = 0
        st.updates += 1
        if self.cfg.precision == "reduced":
            st.good_steps += 1
            if st.good_steps % 200 == 0:
                st.loss_scale *= 2.0

    def prepare(self, seq: TokenSequence) -> TokenSequence:
        rng = self.state.rng
        if self.cfg.noise > 0:
            seq = augment(seq, self.cfg.noise, rng)
        return apply_masking(seq, self.cfg.rand_mask_p, self.cfg.target_mask_p, rng)

    def validate(self, data: Sequence[TokenSequence], batch_size: int | None = None) -> dict:
        """Label-only masking; returns loss, accuracy and mean label entropy."""
        batch_size = batch_size or max(self.cfg.base_batch, 32)
        data = list(data)[::max(1, self.cfg.val_stride)]
        if not data:
            raise ValueError("empty validation set")
        loss_sum = ent_sum = 0.0
        correct = 0
        with ad.no_grad():
            for i in range(0, len(data), batch_size):
                chunk = [prediction_view(s) for s in data[i:i + batch_size]]
                logits = self.model.forward(stack_tokens(chunk), dtype=self.cfg.dtype)
                loss_sum += float(masked_cross_entropy(logits, chunk).data) * len(chunk)
                ent_sum += float(label_entropy(logits).data) * len(chunk)
                pred = decide(label_probabilities(logits.data[:, -1, :]))
                correct += int(sum(p == s.true_label for p, s in zip(pred, chunk)))
        n = len(data)
        return dict(val_loss=loss_sum / n, val_acc=correct / n, val_entropy=ent_sum / n)

    def run_epoch(self, train: Sequence[TokenSequence], val: Sequence[TokenSequence]) -> EpochRecord:
        st, cfg = self.state, self.cfg
        t0 = time.perf_counter()
        e = st.epoch
        st.lr = schedule_lr(e, cfg)
        idx = select_chunk(e, cfg.n_chunks, len(train), st)
        order = st.rng.permutation(idx)
        losses = []
        skips0, updates0 = st.skips, st.updates
        n_micro = 0
        for b in range(0, len(order), cfg.base_batch):
            batch = [self.prepare(train[i]) for i in order[b:b + cfg.base_batch]]
            loss = self.micro_step(batch)
            n_micro += 1
            if loss is not None:
                losses.append(loss)
        self.apply_update()
        metrics = self.validate(val)
        maybe_restore(st, self.model, metrics["val_loss"], metrics["val_acc"], cfg, epoch=e)
        schedule_batch(st, metrics["val_loss"], metrics["val_acc"], cfg)
        rec = EpochRecord(epoch=e, train_loss=float(np.mean(losses)) if losses else float("nan"),
                          val_loss=metrics["val_loss"], val_acc=metrics["val_acc"], lr=st.lr,
                          n_accum=st.n_accum, skips=st.skips - skips0, restores=st.restores,
                          val_entropy=metrics["val_entropy"], updates=st.updates - updates0,
                          micro_batches=n_micro, seconds=time.perf_counter() - t0)
        st.epoch += 1
        log.info("epoch %d loss %.4f val_loss %.4f val_acc %.4f lr %.2e n_accum %d",
                 rec.epoch, rec.train_loss, rec.val_loss, rec.val_acc, rec.lr, rec.n_accum)
        return rec

    def fit(self, train: Sequence[TokenSequence], val: Sequence[TokenSequence],
            callback: Callable[[EpochRecord], None] | None = None) -> list[EpochRecord]:
        history = []
        while self.state.epoch < self.cfg.epochs:
            rec = self.run_epoch(train, val)
            history.append(rec)
            if callback is not None:
                callback(rec)
        return history

    def ema_model(self) -> Model:
        m = Model(self.model.config, {k: Tensor(v.copy(), requires_grad=True)
                                      for k, v in self.state.ema.items()})
        return m

    # -- resumable state ----------------------------------------------------
    def save(self, path: str | Path) -> Path:
        """Model weights, optimiser moments, EMA/best weights and scalar state in one .npz."""
        st = self.state
        arrays = {}
        for k, p in self.model.params.items():
            arrays[f"param/{k}"] = p.data
            arrays[f"adam_m/{k}"] = self.opt.m[k]
            arrays[f"adam_v/{k}"] = self.opt.v[k]
            arrays[f"ema/{k}"] = st.ema[k]
            if st.best_state is not None:
                arrays[f"best/{k}"] = st.best_state[k]
        if st.perm is not None:
            arrays["perm"] = st.perm
        scalars = {f.name: getattr(st, f.name) for f in dataclasses.fields(st)
                   if f.name not in ("perm", "rng", "ema", "best_state")}
        scalars = {k: (None if isinstance(v, float) and math.isinf(v) else v) for k, v in scalars.items()}
        meta = dict(version=STATE_VERSION, state=scalars, rng=st.rng.bit_generator.state,
                    adam_t=self.opt.t, model_config=self.model.config.to_dict(),
                    train_config=dataclasses.asdict(self.cfg),
                    inf_fields=[k for k in scalars if scalars[k] is None])
        path = Path(path)
        with path.open("wb") as fh:
            np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)
        return path

    @classmethod
    def load(cls, path: str | Path, cfg: TrainConfig | None = None) -> "Trainer":
        with np.load(Path(path), allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta.get("version") != STATE_VERSION:
                raise ValueError("unsupported training state version")
            files = {k: z[k] for k in z.files if k != "meta"}
        mcfg = ModelConfig.from_dict(meta["model_config"])
        names = [k.split("/", 1)[1] for k in files if k.startswith("param/")]
        model = Model(mcfg, {n: Tensor(files[f"param/{n}"].copy(), requires_grad=True) for n in names})
        cfg = cfg or TrainConfig.from_dict(meta["train_config"])
        scal = dict(meta["state"])
        defaults = {"best_loss": math.inf, "sched_best_loss": math.inf,
                    "best_acc": -math.inf, "sched_best_acc": -math.inf}
        for k in meta["inf_fields"]:
            scal[k] = defaults.get(k)
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
        state = TrainState(**scal, rng=rng, perm=files.get("perm"),
                           ema={n: files[f"ema/{n}"].copy() for n in names},
                           best_state=({n: files[f"best/{n}"].copy() for n in names}
                                       if f"best/{names[0]}" in files else None))
        tr = cls(model, cfg, state)
        tr.opt.m = {n: files[f"adam_m/{n}"].copy() for n in names}
        tr.opt.v = {n: files[f"adam_v/{n}"].copy() for n in names}
        tr.opt.t = int(meta["adam_t"])
        return tr


def fit(model: Model, train: Sequence[TokenSequence], val: Sequence[TokenSequence],
        cfg: TrainConfig, state: TrainState | None = None) -> tuple[Model, list[EpochRecord]]:
    trainer = Trainer(model, cfg, state)
    return trainer.model, trainer.fit(train, val)


def history_to_csv(history: Sequence[EpochRecord], path: str | Path) -> Path:
    import csv
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(HISTORY_FIELDS) + ["val_entropy"])
        for r in history:
            d = r.as_dict()
            w.writerow([repr(d[k]) if isinstance(d[k], float) else d[k]
                        for k in list(HISTORY_FIELDS) + ["val_entropy"]])
    return path


def history_to_json(history: Sequence[EpochRecord], path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps([r.as_dict() for r in history], indent=2), encoding="utf-8")
    return path
