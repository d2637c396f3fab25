"""Annotated corpora: reading, writing, validation, vocabularies and splits.

File format (UTF-8)::

    #lang en
    #schema pos DET NOUN PROPN VERB
    #schema deprel det nsubj obj root
    #schema entity PER LOC
    #schema phrase S NP VP

    #id s1
    #tree (S (NP they) (VP sleep))
    #mentions {"kind": "entity", "spans": [[0, 0]], "type": "PER"}
    0	they	PRON	nsubj	B-PER
    1	sleep	VERB	root	O

Header lines come first, then one block per sentence separated by blank
lines. Mention records are JSON objects with ``kind`` in ``entity``,
``relation`` or ``event_arg``; ``spans`` lists ``[start, end]`` pairs
(one for entities, subject/object for relations, trigger/argument for
event arguments); ``type`` is the entity type, relation type or role.
Event arguments also carry ``event_type``.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import CorpusFormatError, DataError, SchemaError
from .syntax import (ConstituencyTree, ConstituentSpan, extract_spans, filter_spans,
                     parse_bracketed_tree, serialize_tree)

SCHEMA_KINDS = ("pos", "deprel", "entity", "relation", "role", "event", "phrase")
MENTION_KINDS = ("entity", "relation", "event_arg")


@dataclass(frozen=True)
class Mention:
    kind: str
    spans: tuple[tuple[int, int], ...]
    type: str
    event_type: Optional[str] = None

    def to_record(self) -> dict:
        record = {"kind": self.kind, "spans": [list(s) for s in self.spans], "type": self.type}
        if self.event_type is not None:
            record["event_type"] = self.event_type
        return record

    @classmethod
    def from_record(cls, record: dict) -> "Mention":
        try:
            spans = tuple((int(s), int(e)) for s, e in record["spans"])
            return cls(record["kind"], spans, record["type"], record.get("event_type"))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed mention record {record!r}: {exc}") from None


@dataclass
class Sentence:
    id: str
    tokens: list[str]
    pos: list[str]
    deprel: list[str]
    entity_tags: list[str]
    tree: ConstituencyTree
    spans: list[ConstituentSpan] = field(default_factory=list)
    mentions: list[Mention] = field(default_factory=list)

    def __len__(self):
        return len(self.tokens)

    def mentions_of(self, kind: str) -> list[Mention]:
        return [m for m in self.mentions if m.kind == kind]

    def __eq__(self, other):
        if not isinstance(other, Sentence):
            return NotImplemented
        return (self.id, self.tokens, self.pos, self.deprel, self.entity_tags, str(self.tree),
                self.spans, self.mentions) == (other.id, other.tokens, other.pos, other.deprel,
                                               other.entity_tags, str(other.tree), other.spans,
                                               other.mentions)


@dataclass
class Corpus:
    sentences: list[Sentence]
    language: str
    schemas: dict[str, list[str]]

    def __len__(self):
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)

    def __getitem__(self, index):
        return self.sentences[index]

    @property
    def entity_tags(self) -> list[str]:
        return bio_tags(self.schemas["entity"])

    def subset(self, indices: Sequence[int]) -> "Corpus":
        return Corpus([self.sentences[i] for i in indices], self.language, dict(self.schemas))

    def validate(self):
        seen = set()
        for sent in self.sentences:
            if sent.id in seen:
                raise DataError(f"duplicate sentence id {sent.id!r}")
            seen.add(sent.id)
            validate_sentence(sent, self.schemas)


def bio_tags(entity_types: Sequence[str]) -> list[str]:
    tags = ["O"]
    for t in entity_types:
        tags += [f"B-{t}", f"I-{t}"]
    return tags


def validate_sentence(sent: Sentence, schemas: dict[str, list[str]]):
    n = len(sent.tokens)
    if n == 0:
        raise DataError(f"sentence {sent.id!r} has no tokens")
    for name in ("pos", "deprel", "entity_tags"):
        column = getattr(sent, name)
        if len(column) != n:
            raise DataError(f"sentence {sent.id!r}: {name} has {len(column)} entries, expected {n}")
    if list(sent.tree.tokens) != list(sent.tokens):
        raise DataError(f"sentence {sent.id!r}: tree leaves do not match token forms")
    allowed = {
        "pos": set(schemas["pos"]),
        "deprel": set(schemas["deprel"]),
        "entity_tags": set(bio_tags(schemas["entity"])),
    }
    for name, labels in allowed.items():
        for i, tag in enumerate(getattr(sent, name)):
            if tag not in labels:
                raise SchemaError(f"sentence {sent.id!r} token {i}: {name} {tag!r} not in schema")
    phrases = set(schemas["phrase"])
    for span in sent.spans:
        if span.label not in phrases:
            raise SchemaError(f"sentence {sent.id!r}: phrase label {span.label!r} not in schema")
        if not 0 <= span.start <= span.end < n:
            raise DataError(f"sentence {sent.id!r}: span {span.to_csv()} out of range")
    type_schema = {"entity": schemas["entity"], "relation": schemas["relation"],
                   "event_arg": schemas["role"]}
    arity = {"entity": 1, "relation": 2, "event_arg": 2}
    for m in sent.mentions:
        if m.kind not in MENTION_KINDS:
            raise DataError(f"sentence {sent.id!r}: unknown mention kind {m.kind!r}")
        if len(m.spans) != arity[m.kind]:
            raise DataError(f"sentence {sent.id!r}: {m.kind} mention needs {arity[m.kind]} spans")
        for s, e in m.spans:
            if not 0 <= s <= e < n:
                raise DataError(f"sentence {sent.id!r}: mention span [{s}, {e}] out of range")
        if m.type not in type_schema[m.kind]:
            raise SchemaError(f"sentence {sent.id!r}: {m.kind} type {m.type!r} not in schema")
        if m.kind == "event_arg" and m.event_type not in schemas["event"]:
            raise SchemaError(f"sentence {sent.id!r}: event type {m.event_type!r} not in schema")


def make_sentence(sid, tokens, pos, deprel, entity_tags, tree, mentions=(), phrase_labels=None):
    if isinstance(tree, str):
        tree = parse_bracketed_tree(tree)
    spans = extract_spans(tree)
    if phrase_labels is not None:
        spans = filter_spans(spans, phrase_labels)
    return Sentence(sid, list(tokens), list(pos), list(deprel), list(entity_tags), tree, spans,
                    list(mentions))


def parse_corpus(text: str, name: str = "<string>") -> Corpus:
    language = ""
    schemas: dict[str, list[str]] = {k: [] for k in SCHEMA_KINDS}
    sentences: list[Sentence] = []
    seen_ids: set[str] = set()
    block: list[tuple[int, str]] = []
    in_header = True

    def flush():
        if block:
            sent = _parse_block(block, schemas)
            if sent.id in seen_ids:
                raise CorpusFormatError(f"{name}: duplicate sentence id {sent.id!r}", block[0][0])
            seen_ids.add(sent.id)
            sentences.append(sent)
            block.clear()

    for lineno, line in enumerate(text.split("\n"), start=1):
        line = line.rstrip("\r")
        if in_header:
            if line.startswith("#lang"):
                language = line[len("#lang"):].strip()
                continue
            if line.startswith("#schema"):
                parts = line.split()
                if len(parts) < 2 or parts[1] not in SCHEMA_KINDS:
                    raise CorpusFormatError(f"{name}: bad schema line", lineno, 1)
                schemas[parts[1]] = parts[2:]
                continue
            if not line.strip():
                continue
            in_header = False
        if not line.strip():
            flush()
        else:
            block.append((lineno, line))
    flush()
    return Corpus(sentences, language, schemas)


def _parse_block(block: list[tuple[int, str]], schemas) -> Sentence:
    sid = None
    tree = None
    mentions: list[Mention] = []
    rows: list[tuple[int, list[str]]] = []
    for lineno, line in block:
        if line.startswith("#id"):
            sid = line[len("#id"):].strip()
        elif line.startswith("#tree"):
            try:
                tree = parse_bracketed_tree(line[len("#tree"):].strip())
            except DataError as exc:
                raise CorpusFormatError(f"malformed tree: {exc}", lineno) from None
        elif line.startswith("#mentions"):
            try:
                record = json.loads(line[len("#mentions"):])
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"malformed mention JSON: {exc.msg}", lineno, exc.colno) from None
            try:
                mentions.append(Mention.from_record(record))
            except DataError as exc:
                raise CorpusFormatError(str(exc), lineno) from None
        elif line.startswith("#"):
            raise CorpusFormatError(f"unknown directive {line.split()[0]!r}", lineno, 1)
        else:
            rows.append((lineno, line.split("\t")))
    first = block[0][0]
    if sid is None:
        raise CorpusFormatError("sentence block without #id", first)
    if tree is None:
        raise CorpusFormatError(f"sentence {sid!r} has no #tree", first)
    if not rows:
        raise CorpusFormatError(f"sentence {sid!r} has no token rows", first)
    tokens, pos, deprel, ents = [], [], [], []
    for k, (lineno, cols) in enumerate(rows):
        if cols[0] != str(k):
            raise CorpusFormatError(f"sentence {sid!r}: expected token index {k}", lineno, 1)
        if len(cols) != 5:
            raise CorpusFormatError(
                f"sentence {sid!r}: token row has {len(cols)} columns, expected 5", lineno,
                min(len(cols), 5) + 1)
        tokens.append(cols[1])
        pos.append(cols[2])
        deprel.append(cols[3])
        ents.append(cols[4])
    sent = Sentence(sid, tokens, pos, deprel, ents, tree,
                    filter_spans(extract_spans(tree), schemas["phrase"]), mentions)
    # nodes outside the phrase schema must be POS pre-terminals: one token, labelled with its tag
    for node in tree.root.nodes():
        if node.label in schemas["phrase"]:
            continue
        leaf = node.children[0] if len(node.children) == 1 else None
        if not isinstance(leaf, int) or leaf >= len(pos) or pos[leaf] != node.label:
            raise CorpusFormatError(f"sentence {sid!r}: phrase label {node.label!r} not in schema", first)
    try:
        validate_sentence(sent, schemas)
    except DataError as exc:
        raise CorpusFormatError(str(exc), first) from None
    return sent


def load_corpus(path) -> Corpus:
    path = Path(path)
    return parse_corpus(path.read_text(encoding="utf-8"), name=str(path))


def dumps_corpus(corpus: Corpus) -> str:
    lines = [f"#lang {corpus.language}"]
    for kind in SCHEMA_KINDS:
        labels = corpus.schemas.get(kind, [])
        if labels:
            lines.append(" ".join(["#schema", kind, *labels]))
    lines.append("")
    for sent in corpus.sentences:
        lines.append(f"#id {sent.id}")
        lines.append(f"#tree {serialize_tree(sent.tree)}")
        for m in sent.mentions:
            lines.append("#mentions " + json.dumps(m.to_record()))
        for i, row in enumerate(zip(sent.tokens, sent.pos, sent.deprel, sent.entity_tags)):
            lines.append("\t".join([str(i), *row]))
        lines.append("")
    return "\n".join(lines) + "\n"


def save_corpus(corpus: Corpus, path):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dumps_corpus(corpus), encoding="utf-8")
    tmp.replace(path)


class Vocabulary:
    PAD = "<pad>"
    UNK = "<unk>"

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos = [self.PAD, self.UNK]
        for tok in tokens:
            if tok not in (self.PAD, self.UNK):
                self.itos.append(tok)
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}

    pad_index = 0
    unk_index = 1

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __getitem__(self, token) -> int:
        return self.stoi.get(token, self.unk_index)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self[t] for t in tokens]

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos


def build_vocab(corpus: Corpus, min_count: int = 1) -> Vocabulary:
    if not len(corpus):
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts = Counter(tok for sent in corpus for tok in sent.tokens)
    kept = [tok for tok, c in counts.items() if c >= min_count]
    kept.sort(key=lambda tok: (-counts[tok], tok))
    return Vocabulary(kept)


def split(corpus: Corpus, ratios: Sequence[float], seed: int) -> tuple[Corpus, ...]:
    ratios = [float(r) for r in ratios]
    if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must be positive and sum to 1, got {ratios}")
    n = len(corpus)
    if n < len(ratios):
        raise DataError(f"cannot split {n} sentences into {len(ratios)} parts")
    exact = [r * n for r in ratios]
    sizes = [int(np.floor(x)) for x in exact]
    # largest remainder; ties go to the earlier part
    order = sorted(range(len(ratios)), key=lambda k: (-(exact[k] - sizes[k]), k))
    for k in order[: n - sum(sizes)]:
        sizes[k] += 1
    perm = np.random.default_rng(seed).permutation(n)
    parts, offset = [], 0
    for size in sizes:
        parts.append(corpus.subset(sorted(perm[offset:offset + size].tolist())))
        offset += size
    return tuple(parts)
