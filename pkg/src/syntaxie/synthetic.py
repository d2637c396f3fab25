"""Synthetic source/target "language" pairs drawn from a small probabilistic grammar.

Both languages share one derivation per sentence. The target side reorders
the children of each rule according to ``target_order`` and replaces every
surface word through a bijection onto a disjoint vocabulary, so POS tags,
dependency relations and constituents carry over while word identities do
not.

Grammar layout (plain dicts, JSON friendly)::

    {
      "start": "S",
      "nonterminals": {
        "S": {"label": "S", "rules": [
            {"rhs": ["NP_SUBJ", "VP"], "rels": ["nsubj", "^"], "weight": 1}]},
        "NP_SUBJ": {"label": "NP", "entity": "PER", "role": "Agent", "rules": [...]},
        ...
      },
      "preterminals": {"PROPN": {"pos": "PROPN", "vocab": 50}, ...},
      "relations": [{"from": "NP_SUBJ", "to": "NP_OBJ", "type": "meets"}]
    }

A ``rels`` entry of ``"^"`` inherits the relation of the parent edge (the
sentence root edge is ``root``). A rule may carry ``"event": <type>`` and
``"trigger": <child index>``; the trigger child must be a preterminal and
every entity nonterminal with a ``role`` in the sentence becomes one of its
arguments.
"""

from __future__ import annotations

import copy
import random
from dataclasses import dataclass, field
from typing import Optional

from .corpus import Corpus, Mention, Sentence
from .errors import ConfigError
from .syntax import ConstituencyTree, Node, extract_spans, filter_spans

_SOURCE_CONSONANTS = "bdgklmnst"
_TARGET_CONSONANTS = "fhjprvwxz"
_VOWELS = "aeiou"
_MAX_DEPTH = 40


def _np_rules(pos, lengths):
    return [{"rhs": [pos] * k, "rels": ["^"] * k, "weight": w} for k, w in lengths]


DEFAULT_GRAMMAR = {
    "start": "S",
    "nonterminals": {
        "S": {"label": "S", "rules": [
            {"rhs": ["NP_SUBJ", "VP"], "rels": ["nsubj", "^"], "weight": 0.8, "target_order": [0, 1]},
            {"rhs": ["NP_SUBJ", "VP", "ADV"], "rels": ["nsubj", "^", "advmod"], "weight": 0.2,
             "target_order": [2, 0, 1]},
        ]},
        "VP": {"label": "VP", "rules": [
            {"rhs": ["VERB", "NP_OBJ"], "rels": ["^", "obj"], "weight": 0.2,
             "target_order": [1, 0], "event": "Meet", "trigger": 0},
            {"rhs": ["VERB", "NP_OBJ", "NP_RECIP"], "rels": ["^", "obj", "obj"], "weight": 0.25,
             "target_order": [1, 2, 0], "event": "Transfer", "trigger": 0},
            {"rhs": ["VERB", "NP_RECIP", "NP_OBJ"], "rels": ["^", "obj", "obj"], "weight": 0.25,
             "target_order": [1, 2, 0], "event": "Transfer", "trigger": 0},
            {"rhs": ["VERB", "NP_THING", "PP"], "rels": ["^", "obj", "obl"], "weight": 0.3,
             "target_order": [2, 1, 0], "event": "Move", "trigger": 0},
        ]},
        "PP": {"label": "PP", "rules": [
            {"rhs": ["ADP", "NP_LOC"], "rels": ["case", "^"], "weight": 1.0, "target_order": [1, 0]},
        ]},
        "NP_SUBJ": {"label": "NP", "entity": "PER", "role": "Agent",
                    "rules": _np_rules("PROPN", [(1, 0.3), (2, 0.4), (3, 0.3)])},
        "NP_OBJ": {"label": "NP", "entity": "PER", "role": "Patient",
                   "rules": _np_rules("PROPN", [(1, 0.3), (2, 0.4), (3, 0.3)])},
        "NP_RECIP": {"label": "NP", "entity": "ORG", "role": "Recipient", "rules": [
            {"rhs": ["PROPN"] * k + ["ORGN"], "rels": ["^"] * (k + 1), "weight": w,
             "target_order": list(range(k, -1, -1))} for k, w in [(1, 0.5), (2, 0.5)]]},
        "NP_LOC": {"label": "NP", "entity": "LOC", "role": "Place",
                   "rules": _np_rules("PROPN", [(1, 0.4), (2, 0.4), (3, 0.2)])},
        "NP_THING": {"label": "NP", "rules": [
            {"rhs": ["DET", "NOUN"], "rels": ["det", "^"], "weight": 0.6, "target_order": [1, 0]},
            {"rhs": ["DET", "ADJ", "NOUN"], "rels": ["det", "amod", "^"], "weight": 0.4,
             "target_order": [2, 1, 0]},
        ]},
    },
    "preterminals": {
        "PROPN": {"pos": "PROPN", "vocab": 120},
        "VERB": {"pos": "VERB", "vocab": 30},
        "NOUN": {"pos": "NOUN", "vocab": 40},
        "ORGN": {"pos": "NOUN", "vocab": 8},
        "DET": {"pos": "DET", "vocab": 4},
        "ADJ": {"pos": "ADJ", "vocab": 20},
        "ADP": {"pos": "ADP", "vocab": 6},
        "ADV": {"pos": "ADV", "vocab": 10},
    },
    "relations": [
        {"from": "NP_SUBJ", "to": "NP_OBJ", "type": "meets"},
        {"from": "NP_SUBJ", "to": "NP_RECIP", "type": "supplies"},
        {"from": "NP_SUBJ", "to": "NP_LOC", "type": "located_in"},
    ],
}


@dataclass
class GenConfig:
    n: int = 100
    grammar: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_GRAMMAR))
    source_language: str = "src"
    target_language: str = "tgt"

    @classmethod
    def from_dict(cls, data: dict) -> "GenConfig":
        unknown = set(data) - {"n", "grammar", "source_language", "target_language"}
        if unknown:
            raise ConfigError(f"unknown generator config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class _Derived:
    """One node of a derivation: nonterminal expansion or preterminal word slot."""
    symbol: str
    rule: Optional[dict] = None
    children: list["_Derived"] = field(default_factory=list)
    word_index: int = -1
    rel: str = ""


def check_grammar(grammar: dict):
    nts = grammar.get("nonterminals", {})
    pts = grammar.get("preterminals", {})
    start = grammar.get("start")
    if start not in nts:
        raise ConfigError(f"start symbol {start!r} is not a nonterminal")
    if set(nts) & set(pts):
        raise ConfigError(f"symbols declared as both nonterminal and preterminal: {sorted(set(nts) & set(pts))}")
    for name, spec in pts.items():
        if int(spec.get("vocab", 0)) < 1 or "pos" not in spec:
            raise ConfigError(f"preterminal {name!r} needs a pos tag and vocab >= 1")
    for name, spec in nts.items():
        if "label" not in spec or not spec.get("rules"):
            raise ConfigError(f"nonterminal {name!r} needs a label and at least one rule")
        for rule in spec["rules"]:
            rhs = rule.get("rhs") or []
            if not rhs:
                raise ConfigError(f"empty right-hand side in rule for {name!r}")
            for sym in rhs:
                if sym not in nts and sym not in pts:
                    raise ConfigError(f"rule for {name!r} uses undefined symbol {sym!r}")
            if len(rule.get("rels", [])) != len(rhs):
                raise ConfigError(f"rule {name} -> {rhs} needs one rel per child")
            order = rule.get("target_order", list(range(len(rhs))))
            if sorted(order) != list(range(len(rhs))):
                raise ConfigError(f"target_order {order} is not a permutation for {name} -> {rhs}")
            if float(rule.get("weight", 1.0)) <= 0:
                raise ConfigError(f"rule weights must be positive ({name} -> {rhs})")
            if "event" in rule:
                t = rule.get("trigger")
                if not isinstance(t, int) or not 0 <= t < len(rhs) or rhs[t] not in pts:
                    raise ConfigError(f"event rule {name} -> {rhs} needs a preterminal trigger index")
    reachable = {start}
    frontier = [start]
    while frontier:
        sym = frontier.pop()
        for rule in nts[sym]["rules"]:
            for child in rule["rhs"]:
                if child in nts and child not in reachable:
                    reachable.add(child)
                    frontier.append(child)
    unreachable = sorted(set(nts) - reachable)
    if unreachable:
        raise ConfigError(f"unreachable nonterminals: {unreachable}")
    for rel in grammar.get("relations", []):
        for key in ("from", "to"):
            if rel.get(key) not in nts or "entity" not in nts[rel[key]]:
                raise ConfigError(f"relation endpoint {rel.get(key)!r} is not an entity nonterminal")


def _pseudo_words(count: int, consonants: str, rng: random.Random, taken: set) -> list[str]:
    words = []
    while len(words) < count:
        n_syl = rng.choice((2, 2, 3))
        word = "".join(rng.choice(consonants) + rng.choice(_VOWELS) for _ in range(n_syl))
        if word not in taken:
            taken.add(word)
            words.append(word)
    return words


def _schemas(grammar: dict) -> dict[str, list[str]]:
    def uniq(items):
        return list(dict.fromkeys(items))

    nts = grammar["nonterminals"]
    pts = grammar["preterminals"]
    rels = ["root"]
    for spec in nts.values():
        for rule in spec["rules"]:
            rels += [r for r in rule["rels"] if r != "^"]
    return {
        "pos": uniq(spec["pos"] for spec in pts.values()),
        "deprel": uniq(rels),
        "entity": uniq(spec["entity"] for spec in nts.values() if "entity" in spec),
        "relation": uniq(r["type"] for r in grammar.get("relations", [])),
        "role": uniq(spec["role"] for spec in nts.values() if "role" in spec),
        "event": uniq(rule["event"] for spec in nts.values() for rule in spec["rules"] if "event" in rule),
        "phrase": uniq(spec["label"] for spec in nts.values()),
    }


def _derive(grammar: dict, rng: random.Random) -> _Derived:
    nts = grammar["nonterminals"]
    pts = grammar["preterminals"]

    def expand(symbol, rel, depth):
        if depth > _MAX_DEPTH:
            raise ConfigError(f"derivation exceeded depth {_MAX_DEPTH}; grammar does not terminate")
        if symbol in pts:
            return _Derived(symbol, word_index=rng.randrange(int(pts[symbol]["vocab"])), rel=rel)
        rules = nts[symbol]["rules"]
        rule = rng.choices(rules, weights=[float(r.get("weight", 1.0)) for r in rules])[0]
        node = _Derived(symbol, rule=rule, rel=rel)
        for child, child_rel in zip(rule["rhs"], rule["rels"]):
            node.children.append(expand(child, rel if child_rel == "^" else child_rel, depth + 1))
        return node

    return expand(grammar["start"], "root", 0)


def _realize(derivation: _Derived, grammar: dict, words: dict[str, list[str]], sid: str,
             reorder: bool, schemas: dict) -> Sentence:
    nts = grammar["nonterminals"]
    pts = grammar["preterminals"]
    tokens, pos, deprel = [], [], []
    entities = []   # (symbol, start, end)
    triggers = []   # (event type, start, end)

    def walk(d: _Derived) -> tuple[Node, int, int]:
        if d.rule is None:
            idx = len(tokens)
            tokens.append(words[d.symbol][d.word_index])
            pos.append(pts[d.symbol]["pos"])
            deprel.append(d.rel)
            return Node(pts[d.symbol]["pos"], [idx]), idx, idx
        order = d.rule.get("target_order", range(len(d.children))) if reorder else range(len(d.children))
        node = Node(nts[d.symbol]["label"])
        start, end = None, None
        spans_by_child = {}
        for k in order:
            child, a, b = walk(d.children[k])
            node.children.append(child)
            spans_by_child[k] = (a, b)
            start = a if start is None else start
            end = b
        if "entity" in nts[d.symbol]:
            entities.append((d.symbol, start, end))
        if "event" in d.rule:
            a, b = spans_by_child[d.rule["trigger"]]
            triggers.append((d.rule["event"], a, b))
        return node, start, end

    root, _, _ = walk(derivation)
    tree = ConstituencyTree(root, list(tokens))
    tags = ["O"] * len(tokens)
    mentions = []
    for symbol, s, e in entities:
        etype = nts[symbol]["entity"]
        tags[s] = f"B-{etype}"
        for k in range(s + 1, e + 1):
            tags[k] = f"I-{etype}"
        mentions.append(Mention("entity", ((s, e),), etype))
    for rel in grammar.get("relations", []):
        for sym_a, sa, ea in entities:
            for sym_b, sb, eb in entities:
                if sym_a == rel["from"] and sym_b == rel["to"]:
                    mentions.append(Mention("relation", ((sa, ea), (sb, eb)), rel["type"]))
    for event, ts, te in triggers:
        for symbol, s, e in entities:
            role = nts[symbol].get("role")
            if role is not None:
                mentions.append(Mention("event_arg", ((ts, te), (s, e)), role, event))
    spans = filter_spans(extract_spans(tree), schemas["phrase"])
    return Sentence(sid, tokens, pos, deprel, tags, tree, spans, mentions)


def generate_synthetic_pair(config: GenConfig, seed: int) -> tuple[Corpus, Corpus]:
    grammar = config.grammar
    check_grammar(grammar)
    if config.n < 1:
        raise ConfigError("sentence count n must be >= 1")
    rng = random.Random(seed)
    taken_src: set = set()
    taken_tgt: set = set()
    src_words, tgt_words = {}, {}
    for name, spec in grammar["preterminals"].items():
        src_words[name] = _pseudo_words(int(spec["vocab"]), _SOURCE_CONSONANTS, rng, taken_src)
        tgt_words[name] = _pseudo_words(int(spec["vocab"]), _TARGET_CONSONANTS, rng, taken_tgt)
    schemas = _schemas(grammar)
    src, tgt = [], []
    for k in range(config.n):
        derivation = _derive(grammar, rng)
        src.append(_realize(derivation, grammar, src_words, f"{config.source_language}-{k:05d}", False, schemas))
        tgt.append(_realize(derivation, grammar, tgt_words, f"{config.target_language}-{k:05d}", True, schemas))
    return (Corpus(src, config.source_language, {k: list(v) for k, v in schemas.items()}),
            Corpus(tgt, config.target_language, {k: list(v) for k, v in schemas.items()}))
