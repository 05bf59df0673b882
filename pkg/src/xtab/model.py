"""Data-specific featurizers and the shared transformer backbones."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .tensor import (
    ParamSet,
    Tensor,
    concat,
    dropout,
    embedding,
    kaiming_init,
    layer_norm,
    linear,
    numeric_tokens,
    reglu,
    softmax,
    zeros_init,
)

VARIANTS = ("ftt", "fastformer", "saintv")


@dataclass(frozen=True)
class BackboneConfig:
    variant: str = "ftt"
    n_blocks: int = 3
    d: int = 192
    n_heads: int = 8
    attn_dropout: float = 0.2
    ff_dropout: float = 0.1
    ff_hidden: int | None = None  # defaults to d

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown backbone variant {self.variant!r}; choose from {VARIANTS}")
        if self.d <= 0 or self.n_heads <= 0 or self.n_blocks < 0:
            raise ValueError("d and n_heads must be positive, n_blocks non-negative")
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        for p in (self.attn_dropout, self.ff_dropout):
            if not 0.0 <= p < 1.0:
                raise ValueError(f"dropout must be in [0, 1), got {p}")

    @property
    def hidden(self) -> int:
        return self.ff_hidden or self.d

    def to_dict(self) -> dict:
        return asdict(self)


def _add_linear(params: ParamSet, name: str, fan_in: int, fan_out: int, rng: np.random.Generator, shared: bool) -> None:
    params.add(f"{name}.weight", kaiming_init((fan_in, fan_out), fan_in, rng), shared=shared, decay=True)
    params.add(f"{name}.bias", zeros_init((fan_out,)), shared=shared)


def _add_norm(params: ParamSet, name: str, d: int, shared: bool) -> None:
    params.add(f"{name}.gain", Tensor(np.ones(d)), shared=shared)
    params.add(f"{name}.bias", zeros_init((d,)), shared=shared)


# ---------------------------------------------------------------------------
# featurizer


class Featurizer:
    """Per-table tokenizer: one token per column plus a trailing CLS token.

    Numerical column ``k`` becomes ``x_k * W_k + b_k``; categorical columns share
    one embedding matrix, each column owning a contiguous block of rows.
    """

    def __init__(
        self,
        n_num: int,
        cat_cardinalities: Sequence[int],
        d: int,
        rng: np.random.Generator,
        prefix: str = "featurizer",
    ) -> None:
        self.n_num = n_num
        self.cat_cardinalities = tuple(int(k) for k in cat_cardinalities)
        self.d = d
        self.prefix = prefix
        self.cat_offsets = np.concatenate([[0], np.cumsum(self.cat_cardinalities)[:-1]]).astype(np.int64)
        self.params = ParamSet()
        if n_num:
            self.params.add(f"{prefix}.num.weight", kaiming_init((n_num, d), d, rng))
            self.params.add(f"{prefix}.num.bias", zeros_init((n_num, d)))
        if self.cat_cardinalities:
            total = int(sum(self.cat_cardinalities))
            self.params.add(f"{prefix}.cat.embedding", kaiming_init((total, d), d, rng))
        self.params.add(f"{prefix}.cls", kaiming_init((d,), d, rng))

    @property
    def n_columns(self) -> int:
        return self.n_num + len(self.cat_cardinalities)

    @property
    def cls_name(self) -> str:
        return f"{self.prefix}.cls"

    def __call__(self, x_num: np.ndarray, x_cat: np.ndarray) -> Tensor:
        return featurize(x_num, x_cat, self)


def featurize(x_num: np.ndarray, x_cat: np.ndarray, featurizer: Featurizer) -> Tensor:
    """Rows -> tokens of shape (B, c + 1, d) with the CLS token last."""
    p, prefix = featurizer.params, featurizer.prefix
    batch = x_num.shape[0] if featurizer.n_num else x_cat.shape[0]
    if x_num.shape[1] != featurizer.n_num or x_cat.shape[1] != len(featurizer.cat_cardinalities):
        raise ValueError(
            f"rows have {x_num.shape[1]} numerical / {x_cat.shape[1]} categorical columns, "
            f"featurizer expects {featurizer.n_num} / {len(featurizer.cat_cardinalities)}"
        )
    parts = []
    if featurizer.n_num:
        parts.append(numeric_tokens(x_num, p[f"{prefix}.num.weight"], p[f"{prefix}.num.bias"]))
    if featurizer.cat_cardinalities:
        x_cat = np.asarray(x_cat, dtype=np.int64)
        cards = np.asarray(featurizer.cat_cardinalities)
        if (x_cat < 0).any() or (x_cat >= cards).any():
            raise IndexError("category index out of range for its column")
        parts.append(embedding(p[f"{prefix}.cat.embedding"], x_cat + featurizer.cat_offsets))
    d = featurizer.d
    parts.append(p[f"{prefix}.cls"].reshape(1, 1, d).broadcast_to((batch, 1, d)))
    return concat(parts, axis=1)


def cls_output(tokens: Tensor) -> Tensor:
    return tokens[:, -1, :]


def column_outputs(tokens: Tensor) -> Tensor:
    return tokens[:, :-1, :]


# ---------------------------------------------------------------------------
# blocks


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    batch, n, d = x.shape
    return x.reshape(batch, n, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    batch, heads, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(batch, n, heads * dh)


def multihead_attention(x: Tensor, p: ParamSet, prefix: str, n_heads: int) -> Tensor:
    """Scaled dot-product self-attention over axis 1 of (B, n, d)."""
    dh = x.shape[-1] // n_heads
    q = _split_heads(linear(x, p[f"{prefix}q.weight"], p[f"{prefix}q.bias"]), n_heads)
    k = _split_heads(linear(x, p[f"{prefix}k.weight"], p[f"{prefix}k.bias"]), n_heads)
    v = _split_heads(linear(x, p[f"{prefix}v.weight"], p[f"{prefix}v.bias"]), n_heads)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    out = _merge_heads(softmax(scores, axis=-1) @ v)
    return linear(out, p[f"{prefix}out.weight"], p[f"{prefix}out.bias"])


def additive_attention(x: Tensor, p: ParamSet, prefix: str, n_heads: int) -> Tensor:
    """Fastformer attention: tokens interact only through pooled global vectors."""
    batch, n, d = x.shape
    dh = d // n_heads
    scale = 1.0 / math.sqrt(dh)
    q = linear(x, p[f"{prefix}q.weight"], p[f"{prefix}q.bias"])
    k = linear(x, p[f"{prefix}k.weight"], p[f"{prefix}k.bias"]).reshape(batch, n, n_heads, dh)
    v = linear(x, p[f"{prefix}v.weight"], p[f"{prefix}v.bias"]).reshape(batch, n, n_heads, dh)
    qh = q.reshape(batch, n, n_heads, dh)
    # (B, n, h): one pooling weight per token and head
    alpha = softmax((qh * p[f"{prefix}query_score"]).sum(axis=-1) * scale, axis=1)
    global_q = (qh * alpha.reshape(batch, n, n_heads, 1)).sum(axis=1, keepdims=True)
    mixed = global_q * k
    beta = softmax((mixed * p[f"{prefix}key_score"]).sum(axis=-1) * scale, axis=1)
    global_k = (mixed * beta.reshape(batch, n, n_heads, 1)).sum(axis=1, keepdims=True)
    u = (global_k * v).reshape(batch, n, d)
    return linear(u, p[f"{prefix}out.weight"], p[f"{prefix}out.bias"]) + q


def _feed_forward(x: Tensor, p: ParamSet, prefix: str) -> Tensor:
    h = reglu(linear(x, p[f"{prefix}ff1.weight"], p[f"{prefix}ff1.bias"]))
    return linear(h, p[f"{prefix}ff2.weight"], p[f"{prefix}ff2.bias"])


def _residual_block(x, p, prefix, config, training, rng, attention) -> Tensor:
    h = layer_norm(x, p[f"{prefix}norm1.gain"], p[f"{prefix}norm1.bias"])
    h = attention(h, p, f"{prefix}attn.", config.n_heads)
    x = x + dropout(h, config.attn_dropout, training, rng)
    h = layer_norm(x, p[f"{prefix}norm2.gain"], p[f"{prefix}norm2.bias"])
    h = _feed_forward(h, p, f"{prefix}ff.")
    return x + dropout(h, config.ff_dropout, training, rng)


def mhsa_block(tokens: Tensor, params: ParamSet, prefix: str, config: BackboneConfig, training: bool = False, rng=None) -> Tensor:
    """Pre-norm transformer block: attention then ReGLU feed-forward, each residual."""
    return _residual_block(tokens, params, prefix, config, training, rng, multihead_attention)


def fastformer_block(tokens: Tensor, params: ParamSet, prefix: str, config: BackboneConfig, training: bool = False, rng=None) -> Tensor:
    return _residual_block(tokens, params, prefix, config, training, rng, additive_attention)


def saintv_block(tokens: Tensor, params: ParamSet, prefix: str, config: BackboneConfig, training: bool = False, rng=None) -> Tensor:
    """Column attention over tokens, then row attention across the batch.

    Row attention swaps the batch and token axes so the block's parameters do
    not depend on the number of columns.
    """
    x = mhsa_block(tokens, params, f"{prefix}col.", config, training, rng)
    x = x.transpose(1, 0, 2)
    x = mhsa_block(x, params, f"{prefix}row.", config, training, rng)
    return x.transpose(1, 0, 2)


_BLOCKS = {"ftt": mhsa_block, "fastformer": fastformer_block, "saintv": saintv_block}


def _add_block_params(params: ParamSet, prefix: str, config: BackboneConfig, rng: np.random.Generator, fastformer: bool) -> None:
    d, hidden = config.d, config.hidden
    _add_norm(params, f"{prefix}norm1", d, True)
    for proj in ("q", "k", "v", "out"):
        _add_linear(params, f"{prefix}attn.{proj}", d, d, rng, True)
    if fastformer:
        dh = d // config.n_heads
        for score in ("query_score", "key_score"):
            params.add(f"{prefix}attn.{score}", kaiming_init((config.n_heads, dh), dh, rng), shared=True, decay=True)
    _add_norm(params, f"{prefix}norm2", d, True)
    _add_linear(params, f"{prefix}ff.ff1", d, 2 * hidden, rng, True)
    _add_linear(params, f"{prefix}ff.ff2", hidden, d, rng, True)


class Backbone:
    """Stack of ``n_blocks`` blocks of one variant; every parameter is shareable."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator, prefix: str = "backbone") -> None:
        self.config = config
        self.prefix = prefix
        self.params = ParamSet()
        for i in range(config.n_blocks):
            block = f"{prefix}.block{i}."
            if config.variant == "saintv":
                _add_block_params(self.params, f"{block}col.", config, rng, False)
                _add_block_params(self.params, f"{block}row.", config, rng, False)
            else:
                _add_block_params(self.params, block, config, rng, config.variant == "fastformer")

    def block_prefix(self, i: int) -> str:
        return f"{self.prefix}.block{i}."

    def __call__(self, tokens: Tensor, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        return backbone_forward(tokens, self, training, rng)


def backbone_forward(tokens: Tensor, backbone: Backbone, training: bool = False, rng=None) -> Tensor:
    if tokens.ndim != 3 or tokens.shape[-1] != backbone.config.d:
        raise ValueError(f"expected tokens (B, n, {backbone.config.d}), got {tokens.shape}")
    block = _BLOCKS[backbone.config.variant]
    x = tokens
    for i in range(backbone.config.n_blocks):
        x = block(x, backbone.params, backbone.block_prefix(i), backbone.config, training, rng)
    return x
