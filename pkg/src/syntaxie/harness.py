"""Training, evaluation, distillation and ablation runs.

Config files are plain ``key = value`` lines; values are JSON literals
(bare words are read as strings) and nested fields use dotted keys::

    task = "ner"
    epochs = 40
    encoder.d_model = 64
    interaction.alpha = 10
    ablation = "no_frequency"
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .corpus import Corpus, Mention, Sentence, Vocabulary, build_vocab
from .encoder import EncoderConfig
from .errors import ConfigError, NumericError, SchemaError
from .interaction import InteractionConfig, interaction_terms
from .metrics import PRF, argument_f1, decode_bio, entity_f1, relation_f1
from .model import Batch, ShineModel, attach_pools
from .numerics import Adam, check_finite, forward_backward, load_checkpoint, save_checkpoint, to_dtype
from .tasks import NONE_LABEL, decode_argmax, distill_loss, ner_loss, pair_loss, total_loss

VARIANTS = ("full", "no_interaction", "no_frequency", "no_constituency", "no_all")
VARIANT_TITLES = {
    "full": "full",
    "no_interaction": "w/o interaction",
    "no_frequency": "w/o frequency",
    "no_constituency": "w/o constituency",
    "no_all": "w/o all",
}
_FLAGS = ("no_interaction", "no_frequency", "no_constituency")


@dataclass
class TrainConfig:
    task: str = "ner"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    interaction: InteractionConfig = field(default_factory=InteractionConfig)
    no_interaction: bool = False
    no_frequency: bool = False
    no_constituency: bool = False
    no_all: bool = False
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_steps: int = 0
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    patience: Optional[int] = None
    select_on: str = "source_dev"
    min_count: int = 1
    word_dropout: float = 0.0
    precision: str = "float64"
    distill_init: str = "random"
    checkpoint: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.interaction, dict):
            self.interaction = InteractionConfig(**self.interaction)
        self.validate()

    def validate(self):
        if self.task not in ("ner", "relation", "earl"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.no_all and not all(getattr(self, f) for f in _FLAGS):
            raise ConfigError("no_all requires no_interaction, no_frequency and no_constituency")
        if self.no_constituency and not self.no_frequency:
            raise ConfigError("no_constituency removes the frequency matrix too; set no_frequency")
        if self.select_on not in ("source_dev", "target_dev"):
            raise ConfigError(f"select_on must be source_dev or target_dev, got {self.select_on!r}")
        if self.distill_init not in ("random", "teacher"):
            raise ConfigError(f"distill_init must be random or teacher, got {self.distill_init!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0 <= self.word_dropout < 1:
            raise ConfigError("word_dropout must be in [0, 1)")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def variant(self) -> str:
        if self.no_all:
            return "no_all"
        if self.no_constituency:
            return "no_constituency"
        if self.no_frequency:
            return "no_frequency"
        if self.no_interaction:
            return "no_interaction"
        return "full"

    def with_variant(self, variant: str) -> "TrainConfig":
        if variant not in VARIANTS:
            raise ConfigError(f"unknown ablation variant {variant!r}; expected one of {VARIANTS}")
        flags = {
            "full": (),
            "no_interaction": ("no_interaction",),
            "no_frequency": ("no_frequency",),
            "no_constituency": ("no_constituency", "no_frequency"),
            "no_all": ("no_all",) + _FLAGS,
        }[variant]
        cfg = copy.deepcopy(self)
        for name in ("no_all",) + _FLAGS:
            setattr(cfg, name, name in flags)
        cfg.validate()
        return cfg

    def replace(self, **changes) -> "TrainConfig":
        cfg = copy.deepcopy(self)
        for key, value in changes.items():
            set_config_value(cfg, key, value)
        cfg.validate()
        return cfg

    def to_flat(self) -> dict:
        flat = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for sub in dataclasses.fields(value):
                    v = getattr(value, sub.name)
                    flat[f"{f.name}.{sub.name}"] = list(v) if isinstance(v, tuple) else v
            else:
                flat[f.name] = value
        return flat

    def dumps(self) -> str:
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in self.to_flat().items())

    def hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]


def _parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_config_value(cfg: TrainConfig, key: str, value):
    if key == "ablation":
        fresh = cfg.with_variant(value)
        for name in ("no_all",) + _FLAGS:
            setattr(cfg, name, getattr(fresh, name))
        return
    target, name = cfg, key
    if "." in key:
        section, name = key.split(".", 1)
        if section not in ("encoder", "interaction"):
            raise ConfigError(f"unknown config section {section!r}")
        target = getattr(cfg, section)
    if not any(f.name == name for f in dataclasses.fields(target)):
        raise ConfigError(f"unknown config key {key!r}")
    if name == "levels":
        value = tuple(value)
    setattr(target, name, value)
    if target is not cfg:
        target.__post_init__()


def parse_config(text: str, base: Optional[TrainConfig] = None) -> TrainConfig:
    cfg = copy.deepcopy(base) if base is not None else TrainConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        set_config_value(cfg, key.strip(), _parse_value(value))
    cfg.validate()
    return cfg


def load_config(path, overrides: Optional[dict] = None) -> TrainConfig:
    cfg = parse_config(Path(path).read_text(encoding="utf-8"))
    for key, value in (overrides or {}).items():
        set_config_value(cfg, key, value)
    cfg.validate()
    return cfg


# -- reports ----------------------------------------------------------------------

@dataclass
class RunReport:
    seed: int
    config_hash: str
    variant: str
    losses: dict[str, list[float]] = field(default_factory=lambda: {
        "task": [], "global": [], "local": [], "task_level": [], "total": []})
    dev_f1: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_dev_f1: float = 0.0
    metrics: dict[str, dict] = field(default_factory=dict)
    wall_clock: float = 0.0

    @property
    def epochs_run(self) -> int:
        return len(self.losses["task"])

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class EvalResult:
    prf: PRF
    gold: list[tuple]
    pred: list[tuple]
    predictions: Corpus

    def report(self) -> dict:
        return self.prf.as_dict()


# -- helpers ----------------------------------------------------------------------

def check_schemas(reference: dict, corpus: Corpus, what: str = "corpus"):
    for kind, labels in reference.items():
        if list(corpus.schemas.get(kind, [])) != list(labels):
            raise SchemaError(f"{what} schema {kind!r} {corpus.schemas.get(kind)} does not match {labels}")


def length_batches(sentences: Sequence[Sentence], batch_size: int, rng: Optional[np.random.Generator] = None):
    """Group sentences of similar length; with ``rng``, ties and batch order are shuffled."""
    keys = rng.random(len(sentences)) if rng is not None else np.zeros(len(sentences))
    order = sorted(range(len(sentences)), key=lambda i: (len(sentences[i]), keys[i], i))
    groups = [order[k:k + batch_size] for k in range(0, len(order), batch_size)]
    if rng is not None:
        groups = [groups[i] for i in rng.permutation(len(groups))]
    return [[sentences[i] for i in g] for g in groups]


def build_model(config: TrainConfig, vocab: Vocabulary, schemas: dict, seed: Optional[int] = None) -> ShineModel:
    model = ShineModel(config.task, vocab, schemas, config.encoder,
                       use_constituency=not config.no_constituency,
                       use_frequency=not config.no_frequency,
                       seed=config.seed if seed is None else seed,
                       dtype=to_dtype(config.precision))
    model.word_dropout = config.word_dropout
    return model


def _task_loss(model: ShineModel, batch: Batch, out: dict) -> torch.Tensor:
    if model.task == "ner":
        return ner_loss(out["probs"], batch.tags, batch.mask)
    if not batch.pairs:
        return torch.zeros((), dtype=model.dtype)
    return pair_loss(out["probs"], batch.pair_labels) / len(batch)


def batch_losses(model: ShineModel, batch: Batch, config: TrainConfig) -> dict[str, torch.Tensor]:
    out = model(batch)
    losses = {"task": _task_loss(model, batch, out)}
    zero = torch.zeros((), dtype=model.dtype)
    if config.no_interaction:
        terms = {}
    else:
        terms = interaction_terms(out["h_c"], out["h_l"], batch.mentions, config.interaction, batch.mask,
                                  window=batch.windows, mention_pool=batch.mention_pool)
    losses["global"] = terms.get("global", zero)
    losses["local"] = terms.get("local", zero)
    losses["task_level"] = terms.get("task", zero)
    alpha = 0.0 if config.no_interaction else config.interaction.alpha
    inter = losses["global"] + losses["local"] + losses["task_level"]
    losses["total"] = total_loss(losses["task"], inter, alpha)
    return losses


def model_checkpoint(model: ShineModel, path, extra: Optional[dict] = None):
    meta = {"architecture": model.architecture(), **(extra or {})}
    save_checkpoint(path, dict(model.state_dict()), meta)


def load_model(path) -> tuple[ShineModel, dict]:
    tensors, meta = load_checkpoint(path)
    arch = meta["architecture"]
    dtype = to_dtype(meta.get("precision", "float64"))
    model = ShineModel(arch["task"], Vocabulary(arch["vocab"][2:]), arch["schemas"],
                       EncoderConfig(**arch["encoder"]), arch["use_constituency"], arch["use_frequency"],
                       dtype=dtype)
    state = {k: v.to(dtype) for k, v in tensors.items()}
    model.load_state_dict(state)
    return model, meta


def _snapshot(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


# -- evaluation -------------------------------------------------------------------

@torch.no_grad()
def predict(model: ShineModel, corpus: Corpus, batch_size: int = 64) -> tuple[list[tuple], list[tuple], Corpus]:
    """Gold and predicted identity tuples plus a corpus carrying the predicted mentions."""
    was_training = model.training
    model.eval()
    gold, pred = [], []
    predicted_sentences = {}
    try:
        for group in length_batches(corpus.sentences, batch_size):
            batch = model.make_batch(group)
            out = model(batch)
            labels = decode_argmax(out["probs"]).tolist()
            if model.task == "ner":
                for b, sent in enumerate(group):
                    tags = [model.labels[k] for k in labels[b][:len(sent)]]
                    gold += [(sent.id, s, e, t) for s, e, t in sorted(decode_bio(sent.entity_tags))]
                    segs = sorted(decode_bio(tags))
                    pred += [(sent.id, s, e, t) for s, e, t in segs]
                    mentions = [Mention("entity", ((s, e),), t) for s, e, t in segs]
                    predicted_sentences[sent.id] = _with_predictions(sent, mentions, tags)
                continue
            per_sentence: dict[int, list[Mention]] = {b: [] for b in range(len(group))}
            for cand, k in zip(batch.pairs, labels):
                label = model.labels[k]
                if label == NONE_LABEL:
                    continue
                sid = group[cand.sentence].id
                if model.task == "relation":
                    pred.append((sid, label, cand.span_m, cand.span_n))
                    per_sentence[cand.sentence].append(Mention("relation", (cand.span_m, cand.span_n), label))
                else:
                    pred.append((sid, cand.event_type, cand.span_n, label))
                    per_sentence[cand.sentence].append(
                        Mention("event_arg", (cand.span_m, cand.span_n), label, cand.event_type))
            for b, sent in enumerate(group):
                if model.task == "relation":
                    gold += [(sent.id, m.type, m.spans[0], m.spans[1]) for m in sent.mentions_of("relation")]
                else:
                    gold += [(sent.id, m.event_type, m.spans[1], m.type) for m in sent.mentions_of("event_arg")]
                kept = [m for m in sent.mentions if m.kind == "entity"]
                predicted_sentences[sent.id] = _with_predictions(sent, kept + per_sentence[b], sent.entity_tags)
    finally:
        model.train(was_training)
    ordered = [predicted_sentences[s.id] for s in corpus.sentences]
    return gold, pred, Corpus(ordered, corpus.language, dict(corpus.schemas))


def _with_predictions(sent: Sentence, mentions, tags) -> Sentence:
    return Sentence(sent.id, list(sent.tokens), list(sent.pos), list(sent.deprel), list(tags), sent.tree,
                    list(sent.spans), list(mentions))


def score(task: str, gold, pred) -> PRF:
    return {"ner": entity_f1, "relation": relation_f1, "earl": argument_f1}[task](gold, pred)


def evaluate(model, corpus: Corpus) -> EvalResult:
    """Score a model (or a checkpoint path) on a labelled corpus without touching its parameters."""
    if not isinstance(model, ShineModel):
        model, _ = load_model(model)
    check_schemas(model.schemas, corpus)
    gold, pred, predictions = predict(model, corpus)
    return EvalResult(score(model.task, gold, pred), gold, pred, predictions)


def metrics_text(metrics: dict) -> str:
    """Flat ``key = value`` dump of a metrics record."""
    lines = []
    for name, record in sorted(metrics.items()):
        for key, value in sorted(record.items()):
            lines.append(f"{name}.{key} = {value}")
    return "\n".join(lines) + "\n"


# -- training ---------------------------------------------------------------------

def train(config: TrainConfig, train_corpus: Corpus, dev_corpus: Optional[Corpus] = None,
          target_dev: Optional[Corpus] = None, eval_corpora: Optional[dict[str, Corpus]] = None,
          log=None) -> tuple[ShineModel, RunReport]:
    """Train one model; the best-dev parameters are restored (and checkpointed) at the end.

    ``select_on="target_dev"`` selects on ``target_dev`` instead of ``dev_corpus``.
    """
    config.validate()
    schemas = {k: list(v) for k, v in train_corpus.schemas.items()}
    for name, corpus in [("dev", dev_corpus), ("target dev", target_dev)] + list((eval_corpora or {}).items()):
        if corpus is not None:
            check_schemas(schemas, corpus, name)
    select = target_dev if config.select_on == "target_dev" else dev_corpus
    if config.select_on == "target_dev" and target_dev is None:
        raise ConfigError("select_on=target_dev needs a target dev corpus")
    vocab = build_vocab(train_corpus, config.min_count)
    model = build_model(config, vocab, schemas)
    optimizer = Adam(model, lr=config.lr, betas=(config.beta1, config.beta2), eps=config.adam_eps)
    rng = np.random.default_rng(config.seed)
    report = RunReport(config.seed, config.hash(), config.variant)
    start = time.perf_counter()
    best_state, best_f1, stale = None, -1.0, 0
    step = 0
    for epoch in range(config.epochs):
        model.train()
        sums = {k: 0.0 for k in report.losses}
        batches = length_batches(train_corpus.sentences, config.batch_size, rng)
        for group in batches:
            batch = attach_pools(model.make_batch(group), config.interaction.span_length)
            holder = {}

            def objective():
                holder.update(batch_losses(model, batch, config))
                return holder["total"]

            try:
                _, grads = forward_backward(objective, model)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch + 1}, step {step + 1}: {exc}") from None
            step += 1
            if config.warmup_steps:
                optimizer.state.lr = config.lr * min(1.0, step / config.warmup_steps)
            optimizer.step(grads)
            for k in sums:
                sums[k] += holder[k].item()
        for k in sums:
            report.losses[k].append(sums[k] / len(batches))
        if select is not None:
            f1 = evaluate(model, select).prf.f1
            report.dev_f1.append(f1)
            if f1 > best_f1:
                best_f1, best_state, stale = f1, _snapshot(model), 0
                report.best_epoch, report.best_dev_f1 = epoch + 1, f1
            else:
                stale += 1
        if log is not None:
            log(f"epoch {epoch + 1}: " + " ".join(f"{k}={sums[k] / len(batches):.4f}" for k in sums)
                + (f" dev_f1={report.dev_f1[-1]:.4f}" if report.dev_f1 else ""))
        if config.patience is not None and stale > config.patience:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        report.best_epoch = report.epochs_run
    for name, corpus in (eval_corpora or {}).items():
        report.metrics[name] = evaluate(model, corpus).report()
    report.wall_clock = time.perf_counter() - start
    if config.checkpoint:
        model_checkpoint(model, config.checkpoint, {"precision": config.precision, "config": config.to_flat()})
    return model, report


def distill(teacher, unlabeled: Corpus, config: TrainConfig, dev_corpus: Optional[Corpus] = None,
            eval_corpora: Optional[dict[str, Corpus]] = None, log=None) -> tuple[ShineModel, RunReport]:
    """Train a student with the teacher's architecture on the teacher's soft labels (MSE).

    Only token sequences and universal features of ``unlabeled`` are used.
    """
    if not isinstance(teacher, ShineModel):
        teacher, _ = load_model(teacher)
    if teacher.task != "ner":
        raise ConfigError("distillation is defined for the NER task")
    check_schemas(teacher.schemas, unlabeled, "unlabeled")
    student = ShineModel(teacher.task, teacher.vocab, teacher.schemas, teacher.config,
                         teacher.use_constituency, teacher.use_frequency, seed=config.seed,
                         dtype=teacher.dtype)
    if student.architecture() != teacher.architecture():
        raise ConfigError("student architecture differs from the teacher")
    if config.distill_init == "teacher":
        student.load_state_dict(teacher.state_dict())
    teacher.eval()
    soft = {}
    with torch.no_grad():
        for group in length_batches(unlabeled.sentences, 64):
            batch = teacher.make_batch(group)
            probs = teacher(batch)["probs"]
            for b, sent in enumerate(group):
                soft[sent.id] = probs[b, :len(sent)].clone()
    optimizer = Adam(student, lr=config.lr, betas=(config.beta1, config.beta2), eps=config.adam_eps)
    rng = np.random.default_rng(config.seed)
    report = RunReport(config.seed, config.hash(), "distill")
    report.losses = {"distill": []}
    start = time.perf_counter()
    best_state, best_f1 = None, -1.0
    for epoch in range(config.epochs):
        student.train()
        total, batches = 0.0, length_batches(unlabeled.sentences, config.batch_size, rng)
        for group in batches:
            batch = student.make_batch(group)
            target = torch.zeros(len(group), batch.mask.shape[1], len(student.labels), dtype=student.dtype)
            for b, sent in enumerate(group):
                target[b, :len(sent)] = soft[sent.id]

            def objective():
                return distill_loss(target, student(batch)["probs"], batch.mask)

            value, grads = forward_backward(objective, student)
            optimizer.step(grads)
            total += value
        report.losses["distill"].append(total / len(batches))
        if dev_corpus is not None:
            f1 = evaluate(student, dev_corpus).prf.f1
            report.dev_f1.append(f1)
            if f1 > best_f1:
                best_f1, best_state = f1, _snapshot(student)
                report.best_epoch, report.best_dev_f1 = epoch + 1, f1
        if log is not None:
            log(f"distill epoch {epoch + 1}: mse={report.losses['distill'][-1]:.6f}")
    if best_state is not None:
        student.load_state_dict(best_state)
    else:
        report.best_epoch = len(report.losses["distill"])
    for name, corpus in (eval_corpora or {}).items():
        report.metrics[name] = evaluate(student, corpus).report()
    report.wall_clock = time.perf_counter() - start
    if config.checkpoint:
        model_checkpoint(student, config.checkpoint, {"precision": config.precision})
    return student, report


def initial_distill_loss(teacher: ShineModel, student: ShineModel, corpus: Corpus) -> float:
    teacher.eval()
    student.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for group in length_batches(corpus.sentences, 64):
            batch = teacher.make_batch(group)
            value = distill_loss(teacher(batch)["probs"], student(student.make_batch(group))["probs"], batch.mask)
            check_finite(value)
            total += float(value) * len(group)
            count += len(group)
    return total / count


# -- ablations --------------------------------------------------------------------

@dataclass
class AblationTable:
    runs: list[dict]

    def cell(self, variant: str, split: str) -> tuple[float, float]:
        values = [r[split] for r in self.runs if r["variant"] == variant]
        mean = statistics.fmean(values)
        std = statistics.stdev(values) if len(values) > 1 else 0.0
        return mean, std

    @property
    def variants(self) -> list[str]:
        return list(dict.fromkeys(r["variant"] for r in self.runs))

    def summary(self) -> list[dict]:
        rows = []
        for v in self.variants:
            row = {"variant": v, "seeds": sum(r["variant"] == v for r in self.runs)}
            for split in ("source_f1", "target_f1"):
                row[f"{split}_mean"], row[f"{split}_std"] = self.cell(v, split)
            rows.append(row)
        return rows

    def to_json(self) -> str:
        return json.dumps({"runs": self.runs, "summary": self.summary()}, indent=2, sort_keys=True)

    def to_text(self) -> str:
        header = f"{'variant':<18} {'seeds':>5} {'source F1':>16} {'target F1':>16}"
        lines = [header, "-" * len(header)]
        for row in self.summary():
            src = f"{100 * row['source_f1_mean']:6.2f} ± {100 * row['source_f1_std']:5.2f}"
            tgt = f"{100 * row['target_f1_mean']:6.2f} ± {100 * row['target_f1_std']:5.2f}"
            lines.append(f"{VARIANT_TITLES[row['variant']]:<18} {row['seeds']:>5} {src:>16} {tgt:>16}")
        return "\n".join(lines) + "\n"


def run_ablation(base: TrainConfig, train_corpus: Corpus, dev_corpus: Corpus, source_test: Corpus,
                 target_test: Corpus, seeds: Sequence[int], variants: Sequence[str] = VARIANTS,
                 log=None) -> AblationTable:
    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    runs = []
    for variant in variants:
        for seed in seeds:
            cfg = base.with_variant(variant).replace(seed=seed, checkpoint=None)
            _, report = train(cfg, train_corpus, dev_corpus,
                              eval_corpora={"source": source_test, "target": target_test})
            runs.append({"variant": variant, "seed": seed,
                         "source_f1": report.metrics["source"]["f1"],
                         "target_f1": report.metrics["target"]["f1"],
                         "report": report.to_dict()})
            if log is not None:
                log(f"{variant} seed={seed} source_f1={runs[-1]['source_f1']:.4f} "
                    f"target_f1={runs[-1]['target_f1']:.4f}")
    return AblationTable(runs)
