"""Symmetric-KL alignment between contextual and feature representations.

Each level pools blocks of token rows and compares the two encoders on them:

* global: the whole sentence (one block);
* local: sliding windows of ``span_length`` tokens with stride 1;
* task: gold task mentions (entity spans, relation arguments, triggers and
  arguments).

A block becomes a distribution by mean-pooling its rows and taking a softmax
over the hidden axis (``pooling="block"``). ``pooling="token"`` instead
compares per-token softmax distributions and averages the divergences.

All functions take either one sentence (``L x d``) or a padded batch
(``B x L x d`` with a ``B x L`` boolean mask); batch values are averaged over
sentences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

from .errors import ConfigError, DataError, ShapeError

EPS = 1e-8
LEVELS = ("global", "local", "task")


@dataclass
class InteractionConfig:
    span_length: int = 4
    alpha: float = 10.0
    levels: tuple[str, ...] = LEVELS
    pooling: str = "block"

    def __post_init__(self):
        self.levels = tuple(self.levels)
        if self.span_length < 1:
            raise ConfigError("span_length must be >= 1")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if set(self.levels) - set(LEVELS):
            raise ConfigError(f"unknown interaction levels {sorted(set(self.levels) - set(LEVELS))}")
        if self.pooling not in ("block", "token"):
            raise ConfigError(f"pooling must be 'block' or 'token', got {self.pooling!r}")


def rep_to_distribution(rows: torch.Tensor) -> torch.Tensor:
    if rows.shape[0] == 0:
        raise DataError("cannot pool an empty block")
    return torch.softmax(rows.mean(0), dim=-1)


def sym_kl(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """``KL(p||q) + KL(q||p)`` over the last axis, logs clamped at 1e-8."""
    if p.shape != q.shape:
        raise ShapeError(f"sym_kl expects equal shapes, got {tuple(p.shape)} and {tuple(q.shape)}")
    log_p = torch.log(p.clamp_min(EPS))
    log_q = torch.log(q.clamp_min(EPS))
    return ((p - q) * (log_p - log_q)).sum(-1)


def _batched(h_c, h_l, mask):
    if h_c.shape != h_l.shape:
        raise ShapeError(f"interaction expects equal shapes, got {tuple(h_c.shape)} and {tuple(h_l.shape)}")
    single = h_c.dim() == 2
    if single:
        h_c, h_l = h_c.unsqueeze(0), h_l.unsqueeze(0)
        mask = None if mask is None else mask.unsqueeze(0)
    if mask is None:
        mask = torch.ones(h_c.shape[:2], dtype=torch.bool)
    return h_c, h_l, mask.bool()


def _block_divergence(h_c, h_l, weights, valid, pooling):
    """Mean over valid blocks of the per-block divergence, then mean over sentences.

    ``weights`` is ``B x K x L`` with each valid row averaging one block; rows
    with ``valid`` False are ignored. Sentences with no valid block contribute 0.
    """
    if pooling == "block":
        p = torch.softmax(weights @ h_c, dim=-1)
        q = torch.softmax(weights @ h_l, dim=-1)
        div = sym_kl(p, q)
    else:
        per_token = sym_kl(torch.softmax(h_c, -1), torch.softmax(h_l, -1))
        div = (weights @ per_token.unsqueeze(-1)).squeeze(-1)
    valid = valid.to(div.dtype)
    counts = valid.sum(-1)
    per_sentence = (div * valid).sum(-1) / counts.clamp_min(1)
    return per_sentence.mean()


def _lengths(mask):
    lengths = mask.sum(-1)
    if bool((lengths == 0).any()):
        raise DataError("interaction loss over an all-masked sentence")
    return lengths


def global_weights(mask):
    lengths = _lengths(mask)
    w = mask.to(torch.float64) / lengths.unsqueeze(-1)
    return w.unsqueeze(1), torch.ones(mask.shape[0], 1, dtype=torch.bool)


def window_weights(mask, span_length):
    """Sliding windows ``[i, i + P - 1]`` for ``i = 0 .. L - P``; one whole-sentence window if ``L < P``."""
    lengths = _lengths(mask)
    batch, max_len = mask.shape
    n_windows = max(max_len - span_length + 1, 1)
    w = torch.zeros(batch, n_windows, max_len, dtype=torch.float64)
    valid = torch.zeros(batch, n_windows, dtype=torch.bool)
    for b in range(batch):
        n = int(lengths[b])
        if n < span_length:
            w[b, 0, :n] = 1.0 / n
            valid[b, 0] = True
            continue
        for i in range(n - span_length + 1):
            w[b, i, i:i + span_length] = 1.0 / span_length
            valid[b, i] = True
    return w, valid


def mention_weights(mentions: Sequence[Sequence[tuple[int, int]]], max_len: int):
    """Pooling rows for per-sentence mention lists (inclusive ``(start, end)`` offsets)."""
    batch = len(mentions)
    k = max([len(m) for m in mentions] + [1])
    w = torch.zeros(batch, k, max_len, dtype=torch.float64)
    valid = torch.zeros(batch, k, dtype=torch.bool)
    for b, spans in enumerate(mentions):
        for j, (s, e) in enumerate(spans):
            if not 0 <= s <= e < max_len:
                raise DataError(f"mention ({s}, {e}) outside sentence of length {max_len}")
            w[b, j, s:e + 1] = 1.0 / (e - s + 1)
            valid[b, j] = True
    return w, valid


def global_loss(h_c, h_l, mask=None, pooling="block"):
    h_c, h_l, mask = _batched(h_c, h_l, mask)
    w, valid = global_weights(mask)
    return _block_divergence(h_c, h_l, w.to(h_c.dtype), valid, pooling)


def local_loss(h_c, h_l, span_length=4, mask=None, pooling="block", weights=None):
    h_c, h_l, mask = _batched(h_c, h_l, mask)
    w, valid = weights if weights is not None else window_weights(mask, span_length)
    return _block_divergence(h_c, h_l, w.to(h_c.dtype), valid, pooling)


def task_loss(h_c, h_l, mentions, mask=None, pooling="block", weights=None):
    """``mentions``: list of spans for one sentence, or a list of such lists for a batch."""
    single = h_c.dim() == 2
    h_c, h_l, mask = _batched(h_c, h_l, mask)
    if weights is None:
        if single:
            mentions = [mentions]
        weights = mention_weights(mentions, h_c.shape[1])
    w, valid = weights
    return _block_divergence(h_c, h_l, w.to(h_c.dtype), valid, pooling)


def interaction_terms(h_c, h_l, mentions, config: InteractionConfig, mask=None,
                      window=None, mention_pool=None) -> dict[str, torch.Tensor]:
    """Each enabled level's loss by name; disabled levels are absent."""
    terms = {}
    if "global" in config.levels:
        terms["global"] = global_loss(h_c, h_l, mask, config.pooling)
    if "local" in config.levels:
        terms["local"] = local_loss(h_c, h_l, config.span_length, mask, config.pooling, window)
    if "task" in config.levels:
        terms["task"] = task_loss(h_c, h_l, mentions, mask, config.pooling, mention_pool)
    return terms


def interaction_loss(h_c, h_l, mentions, config: InteractionConfig, mask=None, **pools) -> torch.Tensor:
    """Unweighted sum of the enabled levels; the alpha weight is applied by the caller."""
    terms = interaction_terms(h_c, h_l, mentions, config, mask, **pools)
    if not terms:
        return torch.zeros((), dtype=h_c.dtype)
    return sum(terms.values())
