"""Contextual encoder, language-universal feature encoder and the fused encoder.

The fused encoder concatenates both representations, projects them back to
``d_model`` and runs transformer layers whose self-attention weights are
reweighted by the span frequency matrix::

    A    = softmax(Q K^T / sqrt(d_k))      (masked keys excluded)
    G_ij = F_ij A_ij / sum_j F_ij A_ij
    out  = G V

With ``F`` all ones, ``G == A`` and the layer is an ordinary transformer layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .corpus import Sentence, bio_tags
from .errors import ConfigError, NumericError, SchemaError, ShapeError
from .syntax import build_frequency_matrix, build_span_counts


@dataclass
class EncoderConfig:
    d_model: int = 64
    context_layers: int = 2
    feature_layers: int = 2
    fusion_layers: int = 1
    heads: int = 8
    ff_dim: Optional[int] = None
    dropout: float = 0.1
    max_len: int = 256

    def __post_init__(self):
        for name in ("d_model", "context_layers", "feature_layers", "fusion_layers", "heads", "ff_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"encoder {name} must be >= 1")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def ff_size(self) -> int:
        """Feed-forward width; ``4 * d_model`` unless ``ff_dim`` is set."""
        return 4 * self.d_model if self.ff_dim is None else self.ff_dim


# -- language-universal features ------------------------------------------------

@dataclass
class FeatureBundle:
    x_p: np.ndarray
    x_d: np.ndarray
    x_c: Optional[np.ndarray]
    x_e: Optional[np.ndarray] = None
    names: list[str] = field(default_factory=list)

    @property
    def x_l(self) -> np.ndarray:
        parts = [self.x_p, self.x_d]
        if self.x_e is not None:
            parts.append(self.x_e)
        if self.x_c is not None:
            parts.append(self.x_c)
        return np.concatenate(parts, axis=1)

    def __len__(self):
        return self.x_p.shape[0]


def one_hot(tags: Sequence[str], labels: Sequence[str], what: str) -> np.ndarray:
    index = {t: i for i, t in enumerate(labels)}
    out = np.zeros((len(tags), len(labels)), dtype=np.float64)
    for i, tag in enumerate(tags):
        if tag not in index:
            raise SchemaError(f"{what} tag {tag!r} not in schema")
        out[i, index[tag]] = 1.0
    return out


def feature_width(schemas: dict, use_entity: bool, use_constituency: bool) -> int:
    width = len(schemas["pos"]) + len(schemas["deprel"])
    if use_entity:
        width += len(bio_tags(schemas["entity"]))
    if use_constituency:
        width += 2 * len(schemas["phrase"])
    return width


def featurize(sentence: Sentence, schemas: dict, use_entity: bool = True,
              use_constituency: bool = True) -> FeatureBundle:
    """Concatenated one-hot POS / deprel / entity features plus BIO span counts.

    NER drops the entity feature (``use_entity=False``); the no-constituency
    ablation drops the span counts.
    """
    x_p = one_hot(sentence.pos, schemas["pos"], "pos")
    x_d = one_hot(sentence.deprel, schemas["deprel"], "deprel")
    x_e = one_hot(sentence.entity_tags, bio_tags(schemas["entity"]), "entity") if use_entity else None
    x_c = None
    if use_constituency:
        x_c = build_span_counts(sentence.spans, len(sentence), schemas["phrase"]).counts.astype(np.float64)
    return FeatureBundle(x_p, x_d, x_c, x_e)


def frequency_matrix(sentence: Sentence) -> np.ndarray:
    return build_frequency_matrix(sentence.spans, len(sentence)).astype(np.float64)


# -- attention ------------------------------------------------------------------

def attention_weights(q: torch.Tensor, k: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Scaled dot-product weights ``softmax(QK^T / sqrt(d_k))`` over unmasked keys.

    ``mask`` is boolean with True on real tokens and broadcasts against the key axis.
    """
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if mask is not None:
        if not bool(mask.any(-1).all()):
            raise NumericError("attention over a fully masked sequence")
        scores = scores.masked_fill(~mask.unsqueeze(-2), float("-inf"))
    return torch.softmax(scores, dim=-1)


def modulate(weights: torch.Tensor, freq: torch.Tensor) -> torch.Tensor:
    """Reweight attention rows by the frequency matrix and renormalize."""
    scaled = freq * weights
    denom = scaled.sum(-1, keepdim=True)
    if bool((denom <= 0).any()):
        raise NumericError("frequency-modulated attention row sums to zero")
    return scaled / denom


def frequency_attention(q, k, v, freq, mask=None, return_weights=False):
    """Attention with weights modulated by ``freq``.

    ``q, k, v`` are ``(..., L, d_head)``; ``freq`` broadcasts against the
    ``(..., L, L)`` weights, so one matrix modulates every head.
    """
    if q.shape[-2] != freq.shape[-1] or freq.shape[-1] != freq.shape[-2]:
        raise ShapeError(f"frequency matrix {tuple(freq.shape)} does not match length {q.shape[-2]}")
    weights = modulate(attention_weights(q, k, mask), freq)
    out = weights @ v
    return (out, weights) if return_weights else out


def sinusoidal_positions(length: int, d_model: int, dtype=torch.float64) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float64) * (-math.log(10000.0) / d_model))
    table = torch.zeros(length, d_model, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div)[:, : d_model // 2]
    return table.to(dtype)


class SeededDropout(nn.Module):
    """Inverted dropout drawing its masks from an explicitly assigned generator."""

    def __init__(self, p: float):
        super().__init__()
        self.p = p
        self.generator: Optional[torch.Generator] = None

    def forward(self, x):
        if not self.training or self.p == 0:
            return x
        keep = torch.rand(x.shape, generator=self.generator, dtype=x.dtype) >= self.p
        return x * keep / (1 - self.p)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.heads = heads
        self.d_head = d_model // heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)
        self.dropout = SeededDropout(dropout)

    def _split(self, x):
        *lead, length, _ = x.shape
        return x.reshape(*lead, length, self.heads, self.d_head).transpose(-3, -2)

    def forward(self, x, mask=None, freq=None):
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        head_mask = None if mask is None else mask.unsqueeze(-2)
        weights = attention_weights(q, k, head_mask)
        if freq is not None:
            weights = modulate(weights, freq.unsqueeze(-3))
        ctx = self.dropout(weights) @ v
        ctx = ctx.transpose(-3, -2).reshape(x.shape)
        return self.out(ctx)


class TransformerLayer(nn.Module):
    """Post-norm transformer layer; passing ``freq`` turns its attention frequency-modulated."""

    def __init__(self, d_model: int, heads: int, ff_dim: int, dropout: float = 0.0):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, heads, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, ff_dim), nn.ReLU(), nn.Linear(ff_dim, d_model))
        self.norm2 = nn.LayerNorm(d_model)
        self.drop1 = SeededDropout(dropout)
        self.drop2 = SeededDropout(dropout)

    def forward(self, x, mask=None, freq=None):
        x = self.norm1(x + self.drop1(self.attn(x, mask, freq)))
        return self.norm2(x + self.drop2(self.ff(x)))


def _zero_masked(h, mask):
    return h if mask is None else h * mask.unsqueeze(-1).to(h.dtype)


class ContextualEncoder(nn.Module):
    """Token embeddings + sinusoidal positions + transformer layers."""

    def __init__(self, vocab_size: int, config: EncoderConfig):
        super().__init__()
        self.vocab_size = vocab_size
        self.embed = nn.Embedding(vocab_size, config.d_model)
        self.register_buffer("positions", sinusoidal_positions(config.max_len, config.d_model), persistent=False)
        self.dropout = SeededDropout(config.dropout)
        self.layers = nn.ModuleList(
            TransformerLayer(config.d_model, config.heads, config.ff_size, config.dropout)
            for _ in range(config.context_layers))

    def forward(self, ids: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        if bool((ids < 0).any()) or bool((ids >= self.vocab_size).any()):
            raise IndexError(f"token id outside vocabulary of size {self.vocab_size}")
        length = ids.shape[-1]
        if length > self.positions.shape[0]:
            raise ShapeError(f"sequence length {length} exceeds max_len {self.positions.shape[0]}")
        h = self.dropout(self.embed(ids) + self.positions[:length].to(self.embed.weight.dtype))
        for layer in self.layers:
            h = layer(h, mask)
        return _zero_masked(h, mask)


class FeatureEncoder(nn.Module):
    """Linear projection of the universal feature matrix followed by transformer layers (no positions)."""

    def __init__(self, width: int, config: EncoderConfig):
        super().__init__()
        self.width = width
        self.proj = nn.Linear(width, config.d_model)
        self.layers = nn.ModuleList(
            TransformerLayer(config.d_model, config.heads, config.ff_size, config.dropout)
            for _ in range(config.feature_layers))

    def forward(self, x_l: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        if x_l.shape[-1] != self.width:
            raise ShapeError(f"feature width {x_l.shape[-1]} does not match declared width {self.width}")
        h = self.proj(x_l)
        for layer in self.layers:
            h = layer(h, mask)
        return _zero_masked(h, mask)


class FusionEncoder(nn.Module):
    """``h_w = Linear([h_c; h_l])`` then frequency-modulated transformer layers."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.combine = nn.Linear(2 * config.d_model, config.d_model)
        self.layers = nn.ModuleList(
            TransformerLayer(config.d_model, config.heads, config.ff_size, config.dropout)
            for _ in range(config.fusion_layers))

    def forward(self, h_c, h_l, freq, mask=None):
        if h_c.shape != h_l.shape:
            raise ShapeError(f"fuse expects equal shapes, got {tuple(h_c.shape)} and {tuple(h_l.shape)}")
        h = self.combine(torch.cat([h_c, h_l], dim=-1))
        for layer in self.layers:
            h = layer(h, mask, freq)
        return _zero_masked(h, mask)
