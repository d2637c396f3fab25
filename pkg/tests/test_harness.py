import statistics

import numpy as np
import pytest
import torch

from syntaxie import harness
from syntaxie.corpus import load_corpus, save_corpus
from syntaxie.errors import ConfigError, NumericError, SchemaError
from syntaxie.harness import (AblationTable, TrainConfig, distill, evaluate, initial_distill_loss, load_model,
                              parse_config, run_ablation, train)
from syntaxie.metrics import decode_bio, prf
from syntaxie.model import ShineModel, pair_candidates
from syntaxie.synthetic import GenConfig, generate_synthetic_pair

TINY = ("encoder.d_model = 16\nencoder.heads = 2\nencoder.context_layers = 1\nencoder.feature_layers = 1\n"
        "batch_size = 8\n")


def tiny(**changes):
    return parse_config(TINY).replace(**changes)


@pytest.fixture(scope="module")
def pair():
    return generate_synthetic_pair(GenConfig(n=24), seed=11)


# -- config --------------------------------------------------------------------------

def test_config_round_trip():
    cfg = tiny(epochs=3, seed=4, **{"interaction.alpha": 2.5, "ablation": "no_frequency"})
    again = parse_config(cfg.dumps())
    assert again == cfg and again.hash() == cfg.hash()
    assert again.variant == "no_frequency" and again.interaction.alpha == 2.5


def test_config_comments_and_strings():
    cfg = parse_config("# run\ntask = relation\n\nencoder.d_model = 32\nencoder.heads = 4\n")
    assert cfg.task == "relation" and cfg.encoder.ff_size == 128


@pytest.mark.parametrize("text", [
    "epoch = 3", "task = dance", "no_all = true", "no_constituency = true", "select_on = target",
    "precision = half", "lr = 0", "encoder.heads = 5", "optimizer.lr = 1", "just words",
    "interaction.levels = [\"sentence\"]", "word_dropout = 1.0",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_variants_are_consistent():
    cfg = TrainConfig()
    for v in harness.VARIANTS:
        assert cfg.with_variant(v).variant == v
    flags = cfg.with_variant("no_all")
    assert flags.no_interaction and flags.no_frequency and flags.no_constituency


# -- train / evaluate ---------------------------------------------------------------

def test_training_is_deterministic(pair):
    src, _ = pair
    cfg = tiny(epochs=3, seed=2)
    _, a = train(cfg, src, src)
    _, b = train(cfg, src, src)
    assert a.losses == b.losses and a.dev_f1 == b.dev_f1
    assert all(len(series) == 3 for series in a.losses.values())
    _, c = train(cfg.replace(seed=3), src, src)
    assert c.losses != a.losses


def test_training_ignores_global_default_dtype(pair):
    cfg = tiny(epochs=2, seed=1, precision="float32", word_dropout=0.5)
    _, first = train(cfg, pair[0])
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        _, second = train(cfg, pair[0])
    finally:
        torch.set_default_dtype(previous)
    assert first.losses == second.losses


def test_no_all_has_zero_interaction_losses(pair):
    src, _ = pair
    _, report = train(tiny(epochs=2).with_variant("no_all"), src)
    for key in ("global", "local", "task_level"):
        assert report.losses[key] == [0.0, 0.0]
    assert report.losses["total"] == report.losses["task"]


def test_evaluate_reproduces_training_metrics(pair, tmp_path):
    src, tgt = pair
    cfg = tiny(epochs=3, checkpoint=str(tmp_path / "m.npz"))
    model, report = train(cfg, src, src, eval_corpora={"train": src, "target": tgt})
    before = {k: v.clone() for k, v in model.state_dict().items()}
    result = evaluate(model, src)
    assert abs(result.prf.f1 - report.metrics["train"]["f1"]) < 1e-6
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k])
    from_disk = evaluate(str(tmp_path / "m.npz"), tgt)
    assert from_disk.prf == evaluate(model, tgt).prf
    assert abs(from_disk.prf.f1 - report.metrics["target"]["f1"]) < 1e-6


def test_checkpoint_round_trip_bit_exact(pair, tmp_path):
    src, _ = pair
    model, _ = train(tiny(epochs=1, checkpoint=str(tmp_path / "m.npz")), src)
    loaded, meta = load_model(tmp_path / "m.npz")
    assert meta["precision"] == "float64"
    for (k, a), (k2, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert k == k2 and torch.equal(a, b)
    assert loaded.architecture() == model.architecture()


def test_empty_predictions_score_zero(pair):
    src, _ = pair
    model, _ = train(tiny(epochs=1), src)
    with torch.no_grad():
        model.head.proj.bias[0] = 1e4
    result = evaluate(model, src)
    assert result.pred == [] and result.gold
    assert (result.prf.precision, result.prf.recall, result.prf.f1) == (0.0, 0.0, 0.0)


def test_metrics_match_dumped_predictions(pair, tmp_path):
    src, tgt = pair
    model, _ = train(tiny(epochs=4), src)
    result = evaluate(model, tgt)
    save_corpus(result.predictions, tmp_path / "pred.txt")
    dumped = load_corpus(tmp_path / "pred.txt")
    gold, pred = [], []
    for g, p in zip(tgt, dumped):
        assert g.id == p.id
        gold += [(g.id, *seg) for seg in decode_bio(g.entity_tags)]
        pred += [(p.id, *seg) for seg in decode_bio(p.entity_tags)]
    correct = sum(1 for x in pred if x in gold)
    precision = correct / len(pred) if pred else 0.0
    recall = correct / len(gold)
    f1 = 2 * precision * recall / (precision + recall) if correct else 0.0
    assert (result.prf.precision, result.prf.recall) == (precision, recall)
    assert result.prf.f1 == pytest.approx(f1, abs=1e-15)


def test_schema_mismatch(pair):
    src, tgt = pair
    other = load_corpus(__import__("pathlib").Path(__file__).parent.parent / "data" / "table1.txt")
    with pytest.raises(SchemaError):
        train(tiny(epochs=1), src, other)
    model, _ = train(tiny(epochs=1), src)
    with pytest.raises(SchemaError):
        evaluate(model, other)


def test_non_finite_loss_aborts(pair, monkeypatch):
    src, _ = pair
    real = harness.batch_losses

    def poisoned(model, batch, config):
        losses = real(model, batch, config)
        losses["total"] = losses["total"] * float("nan")
        return losses

    monkeypatch.setattr(harness, "batch_losses", poisoned)
    with pytest.raises(NumericError, match="epoch 1, step 1"):
        train(tiny(epochs=1), src)


def test_no_frequency_matches_full_with_unit_matrix(pair):
    src, _ = pair
    cfg = tiny()
    vocab = harness.build_vocab(src)
    full = harness.build_model(cfg, vocab, src.schemas)
    plain = harness.build_model(cfg.with_variant("no_frequency"), vocab, src.schemas)
    plain.load_state_dict(full.state_dict())
    full.eval(), plain.eval()
    sents = src.sentences[:8]
    batch = full.make_batch(sents)
    assert not torch.all(batch.freq == 1)
    batch.freq = torch.ones_like(batch.freq)
    a = full(batch)["probs"]
    b = plain(plain.make_batch(sents))["probs"]
    assert torch.equal(a, b)


@pytest.mark.parametrize("task", ["relation", "earl"])
def test_pair_tasks_train(pair, task):
    src, tgt = pair
    cfg = tiny(task=task, epochs=2)
    model, report = train(cfg, src, src, eval_corpora={"target": tgt})
    assert len(report.losses["task"]) == 2 and report.losses["task"][1] < report.losses["task"][0]
    assert 0.0 <= report.metrics["target"]["f1"] <= 1.0
    result = evaluate(model, tgt)
    n_gold = sum(len(s.mentions_of("relation" if task == "relation" else "event_arg")) for s in tgt)
    assert result.prf.gold == n_gold


def test_pair_candidates_cover_gold(pair):
    src, _ = pair
    for sent in src:
        cands = pair_candidates(sent, "relation")
        labelled = {(c.span_m, c.span_n, c.label) for c in cands if c.label != "None"}
        assert labelled == {(m.spans[0], m.spans[1], m.type) for m in sent.mentions_of("relation")}


# -- distillation ------------------------------------------------------------------

def test_distill_from_teacher_init_starts_at_zero(pair):
    src, tgt = pair
    teacher, _ = train(tiny(epochs=2), src)
    student = ShineModel(teacher.task, teacher.vocab, teacher.schemas, teacher.config,
                         dtype=teacher.dtype)
    student.load_state_dict(teacher.state_dict())
    assert initial_distill_loss(teacher, student, tgt) == 0.0
    cfg = tiny(epochs=2, distill_init="teacher")
    _, report = distill(teacher, tgt, cfg)
    assert len(report.losses["distill"]) == 2


def test_distill_deterministic_and_frozen_teacher(pair):
    src, tgt = pair
    teacher, _ = train(tiny(epochs=2), src)
    before = {k: v.clone() for k, v in teacher.state_dict().items()}
    cfg = tiny(epochs=2, seed=5)
    _, a = distill(teacher, tgt, cfg, eval_corpora={"target": tgt})
    _, b = distill(teacher, tgt, cfg, eval_corpora={"target": tgt})
    assert a.losses == b.losses and a.metrics == b.metrics
    assert a.losses["distill"][-1] < a.losses["distill"][0]
    for k, v in teacher.state_dict().items():
        assert torch.equal(v, before[k])


def test_distill_requires_ner_teacher(pair):
    src, tgt = pair
    teacher, _ = train(tiny(task="relation", epochs=1), src)
    with pytest.raises(ConfigError):
        distill(teacher, tgt, tiny(epochs=1))


# -- ablation ----------------------------------------------------------------------

def test_ablation_aggregation(pair):
    src, tgt = pair
    base = tiny(epochs=2)
    table = run_ablation(base, src, src, src, tgt, seeds=[0, 1], variants=["full", "no_all"])
    assert len(table.runs) == 4
    for row in table.summary():
        runs = [r for r in table.runs if r["variant"] == row["variant"]]
        assert row["seeds"] == 2
        values = [r["report"]["metrics"]["target"]["f1"] for r in runs]
        assert row["target_f1_mean"] == pytest.approx(float(np.mean(values)), abs=1e-15)
        assert row["target_f1_std"] == pytest.approx(statistics.stdev(values), abs=1e-15)
    _, manual = train(base.replace(seed=1, no_all=True, no_interaction=True, no_frequency=True,
                                   no_constituency=True), src, src, eval_corpora={"source": src, "target": tgt})
    cell = [r for r in table.runs if r["variant"] == "no_all" and r["seed"] == 1][0]
    assert cell["target_f1"] == manual.metrics["target"]["f1"]
    assert cell["report"]["losses"] == manual.losses
    text = table.to_text()
    assert "w/o all" in text and "full" in text


def test_ablation_needs_seeds(pair):
    src, tgt = pair
    with pytest.raises(ConfigError):
        run_ablation(tiny(), src, src, src, tgt, seeds=[])


def test_single_seed_std_is_zero():
    table = AblationTable([{"variant": "full", "seed": 0, "source_f1": 0.5, "target_f1": 0.25}])
    assert table.cell("full", "target_f1") == (0.25, 0.0)
