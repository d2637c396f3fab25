"""The full extraction model: encoders, fusion, a task head, and padded batches."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .corpus import Sentence, Vocabulary, bio_tags
from .encoder import (ContextualEncoder, EncoderConfig, FeatureEncoder, FusionEncoder, SeededDropout,
                      feature_width, featurize, frequency_matrix)
from .errors import ConfigError
from .interaction import mention_weights, window_weights
from .numerics import init_parameters
from .tasks import NONE_LABEL, NerHead, PairHead, pair_features

TASKS = ("ner", "relation", "earl")


@dataclass
class PairCandidate:
    sentence: int
    span_m: tuple[int, int]
    span_n: tuple[int, int]
    label: str
    event_type: Optional[str] = None


@dataclass
class Batch:
    sentences: list[Sentence]
    ids: torch.Tensor
    mask: torch.Tensor
    x_l: torch.Tensor
    freq: torch.Tensor
    tags: torch.Tensor
    mentions: list[list[tuple[int, int]]]
    pairs: list[PairCandidate]
    pair_index: torch.Tensor
    m_mask: torch.Tensor
    n_mask: torch.Tensor
    pair_labels: torch.Tensor
    windows: tuple = ()
    mention_pool: tuple = ()

    def __len__(self):
        return len(self.sentences)


def task_mentions(sentence: Sentence, task: str) -> list[tuple[int, int]]:
    """Gold spans fed to the task-level interaction loss, deduplicated in order of appearance."""
    spans: list[tuple[int, int]] = []
    if task == "ner":
        spans = [m.spans[0] for m in sentence.mentions_of("entity")]
    elif task == "relation":
        spans = [s for m in sentence.mentions_of("relation") for s in m.spans]
    else:
        spans = [s for m in sentence.mentions_of("event_arg") for s in m.spans]
    return list(dict.fromkeys(spans))


def pair_candidates(sentence: Sentence, task: str, index: int = 0) -> list[PairCandidate]:
    """Every ordered (mention, candidate) pair; unannotated pairs are labelled ``None``."""
    entities = [m.spans[0] for m in sentence.mentions_of("entity")]
    out = []
    if task == "relation":
        gold = {m.spans: m.type for m in sentence.mentions_of("relation")}
        cands = list(dict.fromkeys(entities + [s for pair in gold for s in pair]))
        for a in cands:
            for b in cands:
                if a != b:
                    out.append(PairCandidate(index, a, b, gold.get((a, b), NONE_LABEL)))
    elif task == "earl":
        args = sentence.mentions_of("event_arg")
        gold = {m.spans: m.type for m in args}
        triggers = list(dict.fromkeys((m.spans[0], m.event_type) for m in args))
        cands = list(dict.fromkeys(entities + [m.spans[1] for m in args]))
        for trig, event in triggers:
            for a in cands:
                if a != trig:
                    out.append(PairCandidate(index, trig, a, gold.get((trig, a), NONE_LABEL), event))
    return out


class ShineModel(nn.Module):
    """Contextual + feature encoders, frequency-modulated fusion, and one task head.

    ``use_constituency`` toggles the span-count feature columns and
    ``use_frequency`` the frequency matrix (all ones when off).
    """

    def __init__(self, task: str, vocab: Vocabulary, schemas: dict, config: EncoderConfig,
                 use_constituency: bool = True, use_frequency: bool = True, seed: int = 0,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        if task not in TASKS:
            raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
        self.task = task
        self.vocab = vocab
        self.schemas = {k: list(v) for k, v in schemas.items()}
        self.config = config
        self.use_constituency = use_constituency
        self.use_frequency = use_frequency
        self.use_entity = task != "ner"
        width = feature_width(self.schemas, self.use_entity, use_constituency)
        self.context = ContextualEncoder(len(vocab), config)
        self.features = FeatureEncoder(width, config)
        self.fusion = FusionEncoder(config)
        if task == "ner":
            self.labels = bio_tags(self.schemas["entity"])
            self.head = NerHead(config.d_model, self.labels)
        else:
            types = self.schemas["relation"] if task == "relation" else self.schemas["role"]
            self.head = PairHead(config.d_model, types)
            self.labels = self.head.labels
        self.label_index = {l: i for i, l in enumerate(self.labels)}
        self.to(dtype)
        init_parameters(self, torch.Generator().manual_seed(seed))
        self.reseed_dropout(seed + 1)
        self.word_dropout = 0.0
        self._cache: dict[int, dict] = {}

    @property
    def dtype(self):
        return self.head.proj.weight.dtype

    def reseed_dropout(self, seed: int):
        self.dropout_generator = torch.Generator().manual_seed(seed)
        for module in self.modules():
            if isinstance(module, SeededDropout):
                module.generator = self.dropout_generator

    def architecture(self) -> dict:
        return {
            "task": self.task,
            "vocab": list(self.vocab.itos),
            "schemas": self.schemas,
            "encoder": dict(vars(self.config)),
            "use_constituency": self.use_constituency,
            "use_frequency": self.use_frequency,
        }

    # -- batching ------------------------------------------------------------------

    def _prepare(self, sentence: Sentence) -> dict:
        key = id(sentence)
        cached = self._cache.get(key)
        if cached is not None and cached["sentence"] is sentence:
            return cached
        bundle = featurize(sentence, self.schemas, self.use_entity, self.use_constituency)
        freq = frequency_matrix(sentence) if self.use_frequency else np.ones((len(sentence),) * 2)
        tags = [self.label_index.get(t, 0) for t in sentence.entity_tags] if self.task == "ner" else []
        item = {
            "sentence": sentence,
            "ids": self.vocab.encode(sentence.tokens),
            "x_l": bundle.x_l,
            "freq": freq,
            "tags": tags,
            "mentions": task_mentions(sentence, self.task),
        }
        self._cache[key] = item
        return item

    def make_batch(self, sentences: Sequence[Sentence]) -> Batch:
        items = [self._prepare(s) for s in sentences]
        batch, max_len = len(items), max(len(it["ids"]) for it in items)
        width = items[0]["x_l"].shape[1]
        ids = torch.full((batch, max_len), self.vocab.pad_index, dtype=torch.long)
        mask = torch.zeros(batch, max_len, dtype=torch.bool)
        x_l = torch.zeros(batch, max_len, width, dtype=torch.float64)
        freq = torch.ones(batch, max_len, max_len, dtype=torch.float64)
        tags = torch.zeros(batch, max_len, dtype=torch.long)
        for b, it in enumerate(items):
            n = len(it["ids"])
            ids[b, :n] = torch.tensor(it["ids"])
            mask[b, :n] = True
            x_l[b, :n] = torch.from_numpy(it["x_l"])
            freq[b, :n, :n] = torch.from_numpy(it["freq"])
            if it["tags"]:
                tags[b, :n] = torch.tensor(it["tags"])
        pairs = []
        if self.task != "ner":
            for b, s in enumerate(sentences):
                pairs += pair_candidates(s, self.task, b)
        n_pairs = len(pairs)
        pair_index = torch.tensor([p.sentence for p in pairs], dtype=torch.long)
        m_mask = torch.zeros(n_pairs, max_len, dtype=torch.bool)
        n_mask = torch.zeros(n_pairs, max_len, dtype=torch.bool)
        for k, p in enumerate(pairs):
            m_mask[k, p.span_m[0]:p.span_m[1] + 1] = True
            n_mask[k, p.span_n[0]:p.span_n[1] + 1] = True
        labels = torch.tensor([self.label_index.get(p.label, 0) for p in pairs], dtype=torch.long)
        mentions = [it["mentions"] for it in items]
        dtype = self.dtype
        return Batch(list(sentences), ids, mask, x_l.to(dtype), freq.to(dtype), tags, mentions, pairs,
                     pair_index, m_mask, n_mask, labels)

    # -- forward -------------------------------------------------------------------

    def encode(self, batch: Batch):
        ids = batch.ids
        if self.training and self.word_dropout > 0:
            # fixed draw dtype so the mask does not depend on torch's global default dtype
            drop = torch.rand(ids.shape, generator=self.dropout_generator, dtype=torch.float32) < self.word_dropout
            ids = ids.masked_fill(drop & batch.mask, self.vocab.unk_index)
        h_c = self.context(ids, batch.mask)
        h_l = self.features(batch.x_l, batch.mask)
        h_f = self.fusion(h_c, h_l, batch.freq, batch.mask)
        return h_c, h_l, h_f

    def predict_proba(self, batch: Batch, h_f: torch.Tensor) -> torch.Tensor:
        if self.task == "ner":
            return self.head(h_f)
        if not batch.pairs:
            return torch.zeros(0, len(self.labels), dtype=h_f.dtype)
        rows = h_f[batch.pair_index]
        sent_mask = batch.mask[batch.pair_index]
        return self.head(pair_features(rows, batch.m_mask, batch.n_mask, sent_mask))

    def forward(self, batch: Batch):
        h_c, h_l, h_f = self.encode(batch)
        return {"h_c": h_c, "h_l": h_l, "h_f": h_f, "probs": self.predict_proba(batch, h_f)}


def attach_pools(batch: Batch, span_length: int) -> Batch:
    """Precompute interaction pooling matrices for a batch."""
    batch.windows = window_weights(batch.mask, span_length)
    batch.mention_pool = mention_weights(batch.mentions, batch.mask.shape[1])
    return batch
