"""Exact-match precision / recall / F1 at entity, relation and argument level."""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass
from typing import Hashable, Iterable, Sequence

from .errors import DataError


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float
    predicted: int
    correct: int
    gold: int

    def as_dict(self):
        return asdict(self)


def decode_bio(tags: Sequence[str]) -> set[tuple[int, int, str]]:
    """Segments ``(start, end, type)`` from a BIO sequence.

    An ``I-X`` that does not continue an open ``X`` segment starts a new one.
    """
    segments = set()
    start, kind = None, None
    for i, tag in enumerate(list(tags) + ["O"]):
        if tag == "O":
            prefix, label = "O", None
        elif len(tag) > 2 and tag[1] == "-" and tag[0] in "BI":
            prefix, label = tag[0], tag[2:]
        else:
            raise DataError(f"unknown BIO tag {tag!r}")
        if prefix == "I" and kind == label:
            continue
        if kind is not None:
            segments.add((start, i - 1, kind))
            start, kind = None, None
        if prefix in "BI":
            start, kind = i, label
    return segments


def prf(gold: Iterable[Hashable], pred: Iterable[Hashable]) -> PRF:
    """Counts follow multiset semantics so duplicate predictions are not double-credited."""
    g, p = Counter(gold), Counter(pred)
    correct = sum((g & p).values())
    n_pred, n_gold = sum(p.values()), sum(g.values())
    precision = correct / n_pred if n_pred else 0.0
    recall = correct / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return PRF(precision, recall, f1, n_pred, correct, n_gold)


# Items are full identity tuples: entity (sentence, start, end, type); relation
# (sentence, type, subject span, object span); argument (sentence, event type,
# argument span, role). All three score identically.
entity_f1 = prf
relation_f1 = prf
argument_f1 = prf
