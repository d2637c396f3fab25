"""Constituency trees and the two span-derived syntax features.

Trees are read from bracketed S-expressions such as::

    (S (NP they) (VP have (VP received (NP deployment orders))))

Every labelled node yields a constituent span ``(start, end, label)`` with
inclusive, 0-based token offsets. From a list of spans we build

* a per-token BIO count matrix (one ``B-X``/``I-X`` column pair per phrase
  label), counting how often each token opens or continues a span of type X;
* an ``L x L`` frequency matrix whose ``(i, j)`` entry counts the spans that
  contain the token interval between ``i`` and ``j``, floored at 1 and with a
  unit diagonal.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterator, Sequence, Union

import numpy as np

from .errors import SchemaError, SpanRangeError, TreeParseError


@dataclass
class Node:
    label: str
    children: list[Union["Node", int]] = field(default_factory=list)

    def leaves(self) -> Iterator[int]:
        for child in self.children:
            if isinstance(child, Node):
                yield from child.leaves()
            else:
                yield child

    def nodes(self) -> Iterator["Node"]:
        """Pre-order traversal over labelled nodes."""
        yield self
        for child in self.children:
            if isinstance(child, Node):
                yield from child.nodes()


@dataclass
class ConstituencyTree:
    root: Node
    tokens: list[str]

    def __len__(self):
        return len(self.tokens)

    def __str__(self):
        return serialize_tree(self)


@dataclass(frozen=True, order=True)
class ConstituentSpan:
    start: int
    end: int
    label: str

    def __iter__(self):
        return iter((self.start, self.end, self.label))

    def to_csv(self) -> str:
        return f"{self.start},{self.end},{self.label}"


@dataclass
class SpanFeatureMatrix:
    counts: np.ndarray
    label_index: dict[str, int]

    @property
    def columns(self) -> list[str]:
        return sorted(self.label_index, key=self.label_index.get)


_TOKEN_RE = re.compile(r"\(|\)|[^\s()]+")


def _byte_offset(text: str, char_pos: int) -> int:
    return len(text[:char_pos].encode("utf-8"))


def parse_bracketed_tree(text: str) -> ConstituencyTree:
    """Parse a single bracketed tree.

    Raises TreeParseError (with the byte offset of the problem) on unbalanced
    brackets, unlabeled or empty nodes, trailing input, or a tree without
    tokens.
    """
    lexemes = [(m.group(), m.start()) for m in _TOKEN_RE.finditer(text)]
    if not lexemes:
        raise TreeParseError("empty input", 0)
    tokens: list[str] = []
    stack: list[Node] = []
    root = None
    pos = 0
    while pos < len(lexemes):
        lex, start = lexemes[pos]
        if root is not None:
            raise TreeParseError("trailing input after tree", _byte_offset(text, start))
        if lex == "(":
            if pos + 1 >= len(lexemes):
                raise TreeParseError("unbalanced '('", _byte_offset(text, start))
            label, label_start = lexemes[pos + 1]
            if label == ")":
                raise TreeParseError("empty node '()'", _byte_offset(text, start))
            if label == "(":
                raise TreeParseError("node without label", _byte_offset(text, label_start))
            node = Node(label)
            if stack:
                stack[-1].children.append(node)
            stack.append(node)
            pos += 2
            continue
        if lex == ")":
            if not stack:
                raise TreeParseError("unbalanced ')'", _byte_offset(text, start))
            node = stack.pop()
            if not node.children:
                raise TreeParseError(f"node '{node.label}' has no children", _byte_offset(text, start))
            if not stack:
                root = node
            pos += 1
            continue
        if not stack:
            raise TreeParseError("token outside of any node", _byte_offset(text, start))
        stack[-1].children.append(len(tokens))
        tokens.append(lex)
        pos += 1
    if stack:
        raise TreeParseError("unbalanced '(': missing ')'", len(text.encode("utf-8")))
    if not tokens:
        raise TreeParseError("tree has no tokens", 0)
    return ConstituencyTree(root, tokens)


def serialize_tree(tree: ConstituencyTree) -> str:
    def render(node: Node) -> str:
        parts = [node.label]
        for child in node.children:
            parts.append(render(child) if isinstance(child, Node) else tree.tokens[child])
        return "(" + " ".join(parts) + ")"

    return render(tree.root)


def extract_spans(tree: ConstituencyTree) -> list[ConstituentSpan]:
    """One span per labelled node, in pre-order. Duplicates are kept."""
    spans = []

    def visit(node: Node) -> tuple[int, int]:
        # pre-order: reserve this node's slot before visiting children
        slot = len(spans)
        spans.append(None)
        lo, hi = None, None
        for child in node.children:
            if isinstance(child, Node):
                a, b = visit(child)
            else:
                a = b = child
            lo = a if lo is None else min(lo, a)
            hi = b if hi is None else max(hi, b)
        spans[slot] = ConstituentSpan(lo, hi, node.label)
        return lo, hi

    visit(tree.root)
    return spans


def filter_spans(spans: Sequence[ConstituentSpan], phrase_labels: Sequence[str]) -> list[ConstituentSpan]:
    """Keep only spans whose label is a declared phrase label (drops POS pre-terminals)."""
    keep = set(phrase_labels)
    return [s for s in spans if s.label in keep]


def bio_columns(phrase_labels: Sequence[str]) -> dict[str, int]:
    index = {}
    for label in phrase_labels:
        index[f"B-{label}"] = len(index)
        index[f"I-{label}"] = len(index)
    return index


def _check_spans(spans: Sequence[ConstituentSpan], length: int):
    for span in spans:
        if not (0 <= span.start <= span.end < length):
            raise SpanRangeError(f"span {span.to_csv()} outside sentence of length {length}")


def build_span_counts(spans: Sequence[ConstituentSpan], length: int, schema: Sequence[str]) -> SpanFeatureMatrix:
    label_index = bio_columns(schema)
    counts = np.zeros((length, len(label_index)), dtype=np.int64)
    _check_spans(spans, length)
    for start, end, label in spans:
        if f"B-{label}" not in label_index:
            raise SchemaError(f"phrase label {label!r} not in schema {list(schema)}")
        counts[start, label_index[f"B-{label}"]] += 1
        counts[start + 1:end + 1, label_index[f"I-{label}"]] += 1
    return SpanFeatureMatrix(counts, label_index)


def build_frequency_matrix(spans: Sequence[ConstituentSpan], length: int) -> np.ndarray:
    if length <= 0:
        raise SpanRangeError("frequency matrix needs at least one token")
    _check_spans(spans, length)
    freq = np.zeros((length, length), dtype=np.int64)
    # every pair (i, j) with both ends inside a span is contained by it
    for start, end, _ in spans:
        freq[start:end + 1, start:end + 1] += 1
    np.maximum(freq, 1, out=freq)
    np.fill_diagonal(freq, 1)
    return freq


def spans_to_csv(spans: Sequence[ConstituentSpan]) -> str:
    return "\n".join(s.to_csv() for s in spans)
