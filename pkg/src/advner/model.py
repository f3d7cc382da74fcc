"""Feature extractor, NER head and domain discriminator.

Parameters are split into three disjoint groups:

* ``theta_f``: token embeddings and all encoder blocks (the feature extractor)
* ``theta_n``: the per-token NER projection
* ``theta_d``: the sequence-level domain classifier

The domain head sees the pooled features only through a gradient reversal
node, so one backward pass on the combined loss trains the discriminator
to separate domains while pushing the extractor the opposite way.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError

GROUPS = ("theta_f", "theta_n", "theta_d")


@dataclass
class ModelConfig:
    vocab_size: int
    n_tags: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    max_len: int = 128
    dropout: float = 0.1
    grl_lambda: float = 1.0

    def __post_init__(self):
        for name in ("vocab_size", "n_tags", "d_model", "n_heads", "n_layers", "d_ff", "max_len"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"model.{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"model.n_heads={self.n_heads} does not divide d_model={self.d_model}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"model.dropout must be in [0, 1), got {self.dropout}")
        if self.grl_lambda < 0:
            raise ConfigError(f"model.grl_lambda must be >= 0, got {self.grl_lambda}")

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, d_model, 2) / d_model))
    table = np.zeros((max_len, d_model))
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates[: d_model // 2])
    return table


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor]
    groups: dict[str, list[str]]
    positions: np.ndarray = field(repr=False)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return [n for g in GROUPS for n in self.groups[g]]

    def group(self, name: str) -> list[Tensor]:
        return [self.tensors[n] for n in self.groups[name]]

    def all(self) -> list[Tensor]:
        return [self.tensors[n] for n in self.names()]

    def state(self) -> dict[str, np.ndarray]:
        return {n: self.tensors[n].data.copy() for n in self.names()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n in self.names():
            t = self.tensors[n]
            value = np.asarray(state[n], dtype=t.data.dtype)
            if value.shape != t.shape:
                raise ConfigError(f"shape mismatch for {n}: {value.shape} vs {t.shape}")
            t.data = value.copy()


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Deterministic initialisation: scaled-uniform weights, zero biases, N(0, 0.02) embeddings."""
    rng = np.random.default_rng(seed)
    d, ff = config.d_model, config.d_ff
    dtype = ad.default_dtype()
    tensors: dict[str, Tensor] = {}
    groups: dict[str, list[str]] = {g: [] for g in GROUPS}

    def put(group, name, value):
        tensors[name] = ad.parameter(np.asarray(value, dtype=dtype), name=name)
        groups[group].append(name)

    def linear(group, prefix, fan_in, fan_out, suffix=""):
        bound = 1.0 / math.sqrt(fan_in)
        put(group, f"{prefix}.w{suffix}", rng.uniform(-bound, bound, (fan_in, fan_out)))
        put(group, f"{prefix}.b{suffix}", np.zeros(fan_out))

    put("theta_f", "embed.tokens", rng.normal(0.0, 0.02, (config.vocab_size, d)))
    for i in range(config.n_layers):
        p = f"enc.{i}"
        for proj in ("q", "k", "v", "o"):
            linear("theta_f", f"{p}.attn", d, d, suffix=proj)
        put("theta_f", f"{p}.ln1.gamma", np.ones(d))
        put("theta_f", f"{p}.ln1.beta", np.zeros(d))
        linear("theta_f", f"{p}.ffn", d, ff, suffix="1")
        linear("theta_f", f"{p}.ffn", ff, d, suffix="2")
        put("theta_f", f"{p}.ln2.gamma", np.ones(d))
        put("theta_f", f"{p}.ln2.beta", np.zeros(d))
    linear("theta_n", "ner", d, config.n_tags)
    linear("theta_d", "dom", d, d, suffix="1")
    linear("theta_d", "dom", d, 2, suffix="2")
    return ModelParams(config, tensors, groups, sinusoidal_positions(config.max_len, d))


def _self_attention(params: ModelParams, prefix: str, x: Tensor, key_pad: np.ndarray, rng) -> Tensor:
    cfg = params.config
    h = cfg.n_heads
    dh = cfg.d_model // h

    def proj(name):
        return ad.split_heads(ad.add(ad.matmul(x, params[f"{prefix}.w{name}"]), params[f"{prefix}.b{name}"]), h)

    q, k, v = proj("q"), proj("k"), proj("v")
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(dh))
    scores = ad.masked_fill(scores, np.broadcast_to(key_pad, scores.shape))
    attn = ad.dropout(ad.softmax(scores, axis=-1), cfg.dropout, rng)
    out = ad.merge_heads(ad.matmul(attn, v), h)
    return ad.add(ad.matmul(out, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])


def encode(params: ModelParams, tokens: np.ndarray, mask: np.ndarray, rng: np.random.Generator | None = None) -> Tensor:
    """Contextual features ``[batch, len, d_model]`` for a padded token matrix.

    Padded keys are excluded from attention. ``rng`` drives dropout; pass
    ``None`` for a deterministic, dropout-free forward pass.
    """
    cfg = params.config
    tokens = np.asarray(tokens, dtype=np.int64)
    mask = np.asarray(mask)
    b, length = tokens.shape
    if mask.shape != tokens.shape:
        raise DataError(f"mask shape {mask.shape} does not match tokens {tokens.shape}")
    if length > cfg.max_len:
        raise DataError(f"sequence length {length} exceeds max_len {cfg.max_len}")
    bad = np.argwhere((tokens < 0) | (tokens >= cfg.vocab_size))
    if len(bad):
        row, col = bad[0]
        raise DataError(f"token id {tokens[row, col]} out of range in sequence {row} (vocab_size={cfg.vocab_size})")

    x = ad.scale(ad.embedding(params["embed.tokens"], tokens), math.sqrt(cfg.d_model))
    pos = np.broadcast_to(params.positions[:length], (b, length, cfg.d_model)).astype(x.data.dtype)
    x = ad.dropout(ad.add(x, Tensor(pos)), cfg.dropout, rng)

    key_pad = (mask == 0)[:, None, :]
    key_pad = np.repeat(key_pad, cfg.n_heads, axis=0)
    for i in range(cfg.n_layers):
        p = f"enc.{i}"
        a = ad.dropout(_self_attention(params, f"{p}.attn", x, key_pad, rng), cfg.dropout, rng)
        x = ad.layer_norm(ad.add(x, a), params[f"{p}.ln1.gamma"], params[f"{p}.ln1.beta"])
        f = ad.gelu(ad.add(ad.matmul(x, params[f"{p}.ffn.w1"]), params[f"{p}.ffn.b1"]))
        f = ad.dropout(ad.add(ad.matmul(f, params[f"{p}.ffn.w2"]), params[f"{p}.ffn.b2"]), cfg.dropout, rng)
        x = ad.layer_norm(ad.add(x, f), params[f"{p}.ln2.gamma"], params[f"{p}.ln2.beta"])
    return x


def ner_logits(params: ModelParams, features: Tensor) -> Tensor:
    return ad.add(ad.matmul(features, params["ner.w"]), params["ner.b"])


def domain_logits(
    params: ModelParams,
    features: Tensor,
    mask: np.ndarray,
    grl_lambda: float | None = None,
    reverse: bool = True,
) -> Tensor:
    """``[batch, 2]`` domain logits; class 0 is source, class 1 is target.

    ``reverse=False`` drops the reversal node, which is only useful for
    checking the reversal itself.
    """
    lam = params.config.grl_lambda if grl_lambda is None else grl_lambda
    pooled = ad.masked_mean(features, mask)
    if reverse:
        pooled = ad.gradient_reversal(pooled, lam)
    hidden = ad.relu(ad.add(ad.matmul(pooled, params["dom.w1"]), params["dom.b1"]))
    return ad.add(ad.matmul(hidden, params["dom.w2"]), params["dom.b2"])
