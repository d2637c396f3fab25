"""Task heads and losses: token tagging (NER), pair classification (relations,
event-argument roles), distillation and the combined objective."""

from __future__ import annotations

from typing import Optional

import torch
from torch import nn

from .errors import DataError, ShapeError

EPS = 1e-8
NONE_LABEL = "None"


class NerHead(nn.Module):
    def __init__(self, d_model: int, labels):
        super().__init__()
        self.labels = list(labels)
        self.proj = nn.Linear(d_model, len(self.labels))

    def forward(self, h_f: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.proj(h_f), dim=-1)


class PairHead(nn.Module):
    """Softmax classifier over ``[max(h_m); max(h_n); max(h_sentence)]``; label 0 is ``None``."""

    def __init__(self, d_model: int, labels):
        super().__init__()
        self.labels = [NONE_LABEL] + [l for l in labels if l != NONE_LABEL]
        if len(self.labels) < 2:
            raise DataError("pair head needs at least one label besides None")
        self.proj = nn.Linear(3 * d_model, len(self.labels))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.proj(features), dim=-1)


def ner_forward(h_f, head: NerHead):
    return head(h_f)


def ner_loss(probs: torch.Tensor, gold: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean token cross-entropy per sentence, averaged over the batch.

    ``probs`` is ``L x K`` or ``B x L x K``; ``gold`` holds label indices.
    """
    if probs.dim() == 2:
        probs, gold = probs.unsqueeze(0), gold.unsqueeze(0)
        mask = None if mask is None else mask.unsqueeze(0)
    if gold.shape != probs.shape[:2]:
        raise ShapeError(f"gold shape {tuple(gold.shape)} does not match probabilities {tuple(probs.shape)}")
    if mask is None:
        mask = torch.ones(gold.shape, dtype=torch.bool)
    n_labels = probs.shape[-1]
    if bool(((gold < 0) | (gold >= n_labels))[mask].any()):
        raise DataError(f"gold label outside the {n_labels}-label schema")
    safe = gold.clamp(0, n_labels - 1)
    picked = probs.gather(-1, safe.unsqueeze(-1)).squeeze(-1)
    ce = -torch.log(picked.clamp_min(EPS))
    m = mask.to(probs.dtype)
    return ((ce * m).sum(-1) / m.sum(-1)).mean()


def distill_loss(teacher: torch.Tensor, student: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Squared error averaged over labels and real tokens."""
    if teacher.shape != student.shape:
        raise ShapeError(f"distill expects equal shapes, got {tuple(teacher.shape)} and {tuple(student.shape)}")
    per_token = ((teacher - student) ** 2).mean(-1)
    if mask is None:
        return per_token.mean()
    m = mask.to(per_token.dtype)
    return (per_token * m).sum() / m.sum()


def span_max(h: torch.Tensor, span_mask: torch.Tensor) -> torch.Tensor:
    """Max-pool rows of ``h`` (``... x L x d``) where ``span_mask`` (``... x L``) is True."""
    if not bool(span_mask.any(-1).all()):
        raise DataError("max-pooling over an empty span")
    return h.masked_fill(~span_mask.unsqueeze(-1), float("-inf")).max(dim=-2).values


def pair_features(h_f, m_mask, n_mask, sent_mask):
    return torch.cat([span_max(h_f, m_mask), span_max(h_f, n_mask), span_max(h_f, sent_mask)], dim=-1)


def _span_mask(span, length):
    s, e = span
    if not 0 <= s <= e < length:
        raise DataError(f"span {span} is empty or outside a sentence of length {length}")
    m = torch.zeros(length, dtype=torch.bool)
    m[s:e + 1] = True
    return m


def pair_forward(h_f: torch.Tensor, span_m, span_n, head: PairHead, mask: Optional[torch.Tensor] = None):
    """Class probabilities for one (m, n) pair in one sentence ``h_f`` (``L x d``)."""
    length = h_f.shape[0]
    sent_mask = torch.ones(length, dtype=torch.bool) if mask is None else mask.bool()
    return head(pair_features(h_f, _span_mask(span_m, length), _span_mask(span_n, length), sent_mask))


def pair_loss(probs: torch.Tensor, gold: torch.Tensor) -> torch.Tensor:
    """Summed cross-entropy over all candidate pairs (``None`` is an ordinary class)."""
    if probs.shape[0] == 0:
        raise DataError("pair loss over an empty batch")
    picked = probs.gather(-1, gold.unsqueeze(-1)).squeeze(-1)
    return -torch.log(picked.clamp_min(EPS)).sum()


def total_loss(task_value, interaction_value, alpha: float = 10.0):
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    return task_value + alpha * interaction_value


def decode_argmax(probs: torch.Tensor) -> torch.Tensor:
    """Argmax over the label axis; ties resolve to the lowest index."""
    return torch.argmax(probs, dim=-1)
