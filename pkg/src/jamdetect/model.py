"""U-shaped transformer over token sequences.

Three encoder stages shrink the embedding width, three decoder stages grow it
back, and each decoder stage output is summed with the encoder output of the
same width. Inside a block the attention heads are split into four equal
groups reading different views of the normalised input ``n``:

    group 0: n            group 1: MLP(conv(n))
    group 2: conv(n)      group 3: n - conv(n), differential attention

With 8 heads these are heads (0,1), (2,3), (4,5) and (6,7).
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .tokenizer import LABEL_TOKENS, MASK, NO_ATTACK, ATTACKED, VOCAB_SIZE

CHECKPOINT_VERSION = 1
N_GROUPS = 4


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    block_size: int = 692
    vocab_size: int = VOCAB_SIZE
    encoder_dims: tuple = (256, 128, 64)
    decoder_dims: tuple = (64, 128, 256)
    n_heads: int = 8
    dropout: float = 0.4
    period_hints: tuple = (345.0, 300.0)
    ffn_mult: float = 1.0
    conv_kernel: int = 3
    lambda_init: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "encoder_dims", tuple(int(d) for d in self.encoder_dims))
        object.__setattr__(self, "decoder_dims", tuple(int(d) for d in self.decoder_dims))
        object.__setattr__(self, "period_hints", tuple(float(p) for p in self.period_hints))
        if self.decoder_dims != tuple(reversed(self.encoder_dims)):
            raise ModelConfigError("decoder_dims must mirror encoder_dims")
        if self.n_heads % N_GROUPS:
            raise ModelConfigError(f"n_heads must be a multiple of {N_GROUPS}")
        for d in self.encoder_dims:
            if d % self.n_heads:
                raise ModelConfigError(f"n_heads={self.n_heads} does not divide stage dim {d}")
            if (d // self.n_heads) % 2:
                raise ModelConfigError(f"head dim of stage {d} must be even for differential heads")
            if d % 2:
                raise ModelConfigError("stage dims must be even")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelConfigError("dropout must lie in [0, 1)")
        if self.block_size < 3:
            raise ModelConfigError("block_size too small")

    @property
    def n_layers(self) -> int:
        return len(self.encoder_dims) + len(self.decoder_dims)

    def ffn_hidden(self, d: int) -> int:
        return int(round(self.ffn_mult * d))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ModelConfigError(f"unknown model fields: {sorted(unknown)}")
        return cls(**d)


def positional_encode(block_size: int, dim: int, period_hints=()) -> np.ndarray:
    """Interleaved sin/cos table; the first frequency pairs follow ``period_hints``.

    Pair ``i`` uses angular frequency ``2*pi/p_i`` for hinted periods and the
    usual geometric ladder ``10000**(-2i/dim)`` otherwise, so the row norm is
    always ``sqrt(dim/2)``.
    """
    if dim % 2:
        raise ModelConfigError("positional encoding needs an even dimension")
    half = dim // 2
    freqs = 1.0 / 10000.0 ** (2.0 * np.arange(half) / dim)
    for i, p in enumerate(list(period_hints)[:half]):
        if p <= 0:
            raise ModelConfigError("period hints must be positive")
        freqs[i] = 2.0 * math.pi / p
    pos = np.arange(block_size, dtype=np.float64)[:, None]
    table = np.empty((block_size, dim))
    table[:, 0::2] = np.sin(pos * freqs)
    table[:, 1::2] = np.cos(pos * freqs)
    return table


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _block_param_shapes(d: int, cfg: ModelConfig) -> list[tuple[str, tuple, int | None]]:
    """(name, shape, fan_in) for one block; fan_in None means ones/constant init."""
    k = cfg.conv_kernel
    h = cfg.ffn_hidden(d)
    g = d // N_GROUPS
    return [
        ("norm1", (d,), None),
        ("conv_w", (d, d, k), d * k),
        ("conv_b", (d,), d * k),
        ("mlp_w1", (d, d), d),
        ("mlp_b1", (d,), d),
        ("mlp_w2", (d, d), d),
        ("mlp_b2", (d,), d),
        ("wq", (N_GROUPS, d, g), d),
        ("wk", (N_GROUPS, d, g), d),
        ("wv", (N_GROUPS, d, g), d),
        ("lambda_diff", (1,), None),
        ("wo", (d, d), d),
        ("bo", (d,), d),
        ("norm2", (d,), None),
        ("ffn_gate", (d, h), d),
        ("ffn_up", (d, h), d),
        ("ffn_down", (h, d), h),
    ]


class Model:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self._pos = {}

    # -- construction -----------------------------------------------------
    @classmethod
    def build(cls, config: ModelConfig, seed: int = 0) -> "Model":
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        d0 = config.encoder_dims[0]
        params["tok_emb"] = rng.normal(0.0, 0.02, size=(config.vocab_size, d0))
        dims = list(config.encoder_dims) + list(config.decoder_dims)
        for i, d in enumerate(dims):
            stage = f"enc{i}" if i < len(config.encoder_dims) else f"dec{i - len(config.encoder_dims)}"
            for name, shape, fan in _block_param_shapes(d, config):
                if fan is None:
                    val = np.full(shape, config.lambda_init) if name == "lambda_diff" else np.ones(shape)
                else:
                    val = _uniform(rng, shape, fan)
                params[f"{stage}.{name}"] = val
            if i + 1 < len(dims) and dims[i + 1] != d:
                nxt = dims[i + 1]
                params[f"{stage}.proj_w"] = _uniform(rng, (d, nxt), d)
                params[f"{stage}.proj_b"] = _uniform(rng, (nxt,), d)
        dl = dims[-1]
        params["final_norm"] = np.ones(dl)
        params["head_w"] = _uniform(rng, (dl, config.vocab_size), dl)
        params["head_b"] = _uniform(rng, (config.vocab_size,), dl)
        return cls(config, {k: Tensor(v, requires_grad=True) for k, v in params.items()})

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ValueError("state dict keys do not match the model")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def positional_table(self, dim: int) -> np.ndarray:
        if dim not in self._pos:
            self._pos[dim] = positional_encode(self.config.block_size, dim, self.config.period_hints)
        return self._pos[dim]

    # -- forward ----------------------------------------------------------
    def _p(self, name: str, dtype) -> Tensor:
        return ad.cast(self.params[name], dtype)

    def block_forward(self, stage: str, x: Tensor, train: bool = False,
                      rng: np.random.Generator | None = None, dtype=np.float64) -> Tensor:
        p = lambda n: self._p(f"{stage}.{n}", dtype)  # noqa: E731
        batch, length, d = x.shape
        if p("norm1").shape != (d,):
            raise ad.ShapeError(f"block {stage} expects dim {p('norm1').shape[0]}, got {d}")
        heads = self.config.n_heads
        per_group = heads // N_GROUPS
        hd = d // heads
        drop = self.config.dropout

        n = ad.rmsnorm(x, p("norm1"))
        c = ad.transpose(ad.conv1d(ad.transpose(n, (0, 2, 1)), p("conv_w"), p("conv_b")), (0, 2, 1))
        m = ad.linear(ad.silu(ad.linear(c, p("mlp_w1"), p("mlp_b1"))), p("mlp_w2"), p("mlp_b2"))
        sources = ad.stack([n, m, c, n - c], axis=0)  # (4, B, L, d)

        def heads_of(w):
            t = ad.matmul(sources, ad.reshape(w, (N_GROUPS, 1, d, d // N_GROUPS)))
            t = ad.reshape(t, (N_GROUPS, batch, length, per_group, hd))
            return ad.transpose(t, (0, 1, 3, 2, 4))  # (4, B, G, L, hd)

        q, k, v = heads_of(p("wq")), heads_of(p("wk")), heads_of(p("wv"))

        qs, ks, vs = q[:N_GROUPS - 1], k[:N_GROUPS - 1], v[:N_GROUPS - 1]
        att = ad.softmax(ad.matmul(qs, ad.swapaxes(ks, -1, -2)) * (1.0 / math.sqrt(hd)))
        std_out = ad.matmul(att, vs)

        qd, kd, vd = q[N_GROUPS - 1], k[N_GROUPS - 1], v[N_GROUPS - 1]
        half = hd // 2
        scale = 1.0 / math.sqrt(half)
        a1 = ad.softmax(ad.matmul(qd[..., :half], ad.swapaxes(kd[..., :half], -1, -2)) * scale)
        a2 = ad.softmax(ad.matmul(qd[..., half:], ad.swapaxes(kd[..., half:], -1, -2)) * scale)
        diff_out = ad.matmul(a1 - a2 * p("lambda_diff"), vd)

        out = ad.concat([std_out, ad.reshape(diff_out, (1,) + diff_out.shape)], axis=0)
        out = ad.reshape(ad.transpose(out, (1, 3, 0, 2, 4)), (batch, length, d))
        out = ad.linear(out, p("wo"), p("bo"))
        x = x + ad.dropout(out, drop, rng, train)

        h = ad.rmsnorm(x, p("norm2"))
        f = ad.linear(ad.swiglu(h, p("ffn_gate"), p("ffn_up")), p("ffn_down"))
        return x + ad.dropout(f, drop, rng, train)

    def forward(self, tokens, train: bool = False, rng: np.random.Generator | None = None,
                dtype=np.float64, skip_scale: float = 1.0) -> Tensor:
        """Vocabulary logits of shape (batch, block_size, vocab)."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        cfg = self.config
        if tokens.shape[1] != cfg.block_size:
            raise ad.ShapeError(f"sequence length {tokens.shape[1]} != block size {cfg.block_size}")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ad.ShapeError("token id outside vocabulary")
        if train and cfg.dropout > 0 and rng is None:
            raise ValueError("training forward needs an rng for dropout")
        d0 = cfg.encoder_dims[0]
        x = ad.embedding(self._p("tok_emb", dtype), tokens)
        x = x + Tensor(self.positional_table(d0), dtype=dtype)
        x = ad.dropout(x, cfg.dropout, rng, train)

        n_enc = len(cfg.encoder_dims)
        skips = []
        for i in range(n_enc):
            x = self.block_forward(f"enc{i}", x, train, rng, dtype)
            skips.append(x)
            if f"enc{i}.proj_w" in self.params:
                x = ad.linear(x, self._p(f"enc{i}.proj_w", dtype), self._p(f"enc{i}.proj_b", dtype))
        for j in range(len(cfg.decoder_dims)):
            x = self.block_forward(f"dec{j}", x, train, rng, dtype)
            skip = skips[n_enc - 1 - j]
            x = x + (skip if skip_scale == 1.0 else skip * skip_scale)
            if f"dec{j}.proj_w" in self.params:
                x = ad.linear(x, self._p(f"dec{j}.proj_w", dtype), self._p(f"dec{j}.proj_b", dtype))
        x = ad.rmsnorm(x, self._p("final_norm", dtype))
        return ad.linear(x, self._p("head_w", dtype), self._p("head_b", dtype))

    __call__ = forward

    # -- persistence ------------------------------------------------------
    def save(self, path: str | Path) -> Path:
        path = Path(path)
        names = list(self.params)
        manifest = [dict(name=k, shape=list(self.params[k].shape)) for k in names]
        flat = np.concatenate([self.params[k].data.ravel() for k in names])
        with path.open("wb") as fh:
            np.savez(fh, version=np.array(CHECKPOINT_VERSION),
                     config=np.array(json.dumps(self.config.to_dict())),
                     manifest=np.array(json.dumps(manifest)), params=flat)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Model":
        with np.load(Path(path), allow_pickle=False) as z:
            if int(z["version"]) != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {int(z['version'])}")
            config = ModelConfig.from_dict(json.loads(str(z["config"])))
            manifest = json.loads(str(z["manifest"]))
            flat = z["params"]
        params, offset = {}, 0
        for entry in manifest:
            size = int(np.prod(entry["shape"]))
            params[entry["name"]] = Tensor(flat[offset:offset + size].reshape(entry["shape"]).copy(),
                                           requires_grad=True)
            offset += size
        if offset != len(flat):
            raise ValueError("checkpoint manifest does not cover the parameter array")
        return cls(config, params)


def build(config: ModelConfig, seed: int = 0) -> Model:
    return Model.build(config, seed)


def label_probabilities(logits: np.ndarray) -> np.ndarray:
    """P(ATTACKED) from label-position logits restricted to {NO_ATTACK, ATTACKED}."""
    z = np.asarray(logits, dtype=np.float64)
    diff = z[..., ATTACKED] - z[..., NO_ATTACK]
    return 1.0 / (1.0 + np.exp(-diff))


def decide(p_attacked: np.ndarray) -> np.ndarray:
    """Class token per probability; exact ties go to NO_ATTACK."""
    return np.where(np.asarray(p_attacked) > 0.5, ATTACKED, NO_ATTACK)


def predict(model: Model, tokens, batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """(class token, P(ATTACKED)) per sequence; the label position must hold MASK."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if (tokens[:, -1] != MASK).any():
        raise ValueError("predict needs the label position masked")
    probs = []
    with ad.no_grad():
        for i in range(0, len(tokens), batch_size):
            logits = model.forward(tokens[i:i + batch_size]).data
            probs.append(label_probabilities(logits[:, -1, :]))
    p = np.concatenate(probs) if probs else np.zeros(0)
    return decide(p), p


__all__ = ["ModelConfig", "Model", "build", "positional_encode", "predict", "label_probabilities",
           "decide", "LABEL_TOKENS"]
