"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s`` or as a script.
The transfer and distillation criteria train real models and take several
minutes on one CPU core.
"""

import math
import random
import statistics
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from syntaxie.corpus import split
from syntaxie.encoder import (EncoderConfig, FusionEncoder, MultiHeadAttention, attention_weights,
                              frequency_attention, modulate)
from syntaxie.harness import (TrainConfig, distill, evaluate, load_config, load_model, model_checkpoint,
                              run_ablation, train)
from syntaxie.interaction import global_loss, local_loss, sym_kl, task_loss
from syntaxie.metrics import argument_f1, entity_f1, relation_f1
from syntaxie.numerics import gradient_check, init_parameters
from syntaxie.synthetic import GenConfig, generate_synthetic_pair
from syntaxie.syntax import (ConstituentSpan, build_frequency_matrix, build_span_counts, extract_spans,
                             parse_bracketed_tree)
from syntaxie.tasks import PairHead, distill_loss, ner_loss, pair_forward, pair_loss

DATA = Path(__file__).resolve().parent.parent / "data"
RESULTS: dict[int, bool] = {}


def report(request, number: int, title: str, ok: bool, detail: str = ""):
    RESULTS[number] = ok
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
    capman = request.config.pluginmanager.getplugin("capturemanager") if request is not None else None
    if capman is not None:
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
    else:
        print(line, flush=True)
    assert ok, line


def spans(triples):
    return [ConstituentSpan(*t) for t in triples]


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


# -- 1, 2: worked tables ------------------------------------------------------------

def test_criterion_01_span_count_table(request):
    start = time.perf_counter()
    tree = parse_bracketed_tree("(S (NP they) (VP have (VP received (NP deployment orders))))")
    found = sorted(tuple(s) for s in extract_spans(tree))
    expected = sorted([(0, 0, "NP"), (1, 4, "VP"), (2, 4, "VP"), (3, 4, "NP"), (0, 4, "S")])
    m = build_span_counts(extract_spans(tree), len(tree), ["NP", "VP", "S"])
    table = [[1, 0, 0, 0, 1, 0], [0, 0, 1, 0, 0, 1], [0, 0, 1, 1, 0, 1], [1, 0, 0, 2, 0, 1], [0, 1, 0, 2, 0, 1]]
    elapsed = time.perf_counter() - start
    ok = found == expected and m.columns == ["B-NP", "I-NP", "B-VP", "I-VP", "B-S", "I-S"] \
        and m.counts.tolist() == table and elapsed < 1.0
    report(request, 1, "span-count matrix equals the worked 5x6 table", ok, f"{elapsed * 1000:.1f} ms")


def test_criterion_02_frequency_table(request):
    start = time.perf_counter()
    f = build_frequency_matrix(spans([(0, 0, "NP"), (1, 3, "VP"), (2, 3, "NP"), (0, 4, "S")]), 5)
    table = [[1, 1, 1, 1, 1], [1, 1, 2, 2, 1], [1, 2, 1, 3, 1], [1, 2, 3, 1, 1], [1, 1, 1, 1, 1]]
    elapsed = time.perf_counter() - start
    ok = f.tolist() == table and (np.diag(f) == 1).all() and elapsed < 1.0
    report(request, 2, "frequency matrix equals the worked 5x5 table", ok, f"{elapsed * 1000:.1f} ms")


# -- 3: oracle equivalence ----------------------------------------------------------

def _oracle_counts(triples, length, labels):
    m = np.zeros((length, 2 * len(labels)), dtype=int)
    for s, e, label in triples:
        k = labels.index(label)
        for w in range(length):
            if w == s:
                m[w, 2 * k] += 1
            elif s < w <= e:
                m[w, 2 * k + 1] += 1
    return m


def _oracle_freq(triples, length):
    f = np.ones((length, length), dtype=int)
    for i in range(length):
        for j in range(length):
            if i != j:
                lo, hi = min(i, j), max(i, j)
                f[i, j] = max(1, sum(s <= lo and hi <= e for s, e, _ in triples))
    return f


def test_criterion_03_oracle_equivalence(request):
    rng = random.Random(2024)
    labels = ["NP", "VP", "PP", "S"]
    mismatches = 0
    trials = 600
    for _ in range(trials):
        length = rng.randint(1, 20)
        triples = []
        for _ in range(rng.randint(0, 12)):
            s = rng.randrange(length)
            triples.append((s, rng.randrange(s, length), rng.choice(labels)))
        counts = build_span_counts(spans(triples), length, labels).counts
        freq = build_frequency_matrix(spans(triples), length)
        mismatches += not np.array_equal(counts, _oracle_counts(triples, length, labels))
        mismatches += not np.array_equal(freq, _oracle_freq(triples, length))
    report(request, 3, "span counts and frequency matrix match brute-force oracles", mismatches == 0,
           f"{trials} random sentences, {mismatches} mismatches")


# -- 4: attention reduction ---------------------------------------------------------

def test_criterion_04_attention_reduction(request):
    torch.manual_seed(0)
    mha = MultiHeadAttention(16, 4).double()
    init_parameters(mha, torch.Generator().manual_seed(1))
    x = rand(3, 8, 16, seed=2)
    mask = torch.ones(3, 8, dtype=torch.bool)
    mask[2, 6:] = False
    with torch.no_grad():
        modulated = mha(x, mask, torch.ones(3, 8, 8))
        standard = mha(x, mask)
    reduction = (modulated - standard).abs()[mask].max().item()

    row_err, scale_err = 0.0, 0.0
    for seed in range(50):
        length = 1 + seed % 8
        a = attention_weights(rand(length, 4, seed=seed), rand(length, 4, seed=seed + 100))
        f = torch.randint(1, 6, (length, length), generator=torch.Generator().manual_seed(seed)).double()
        f = torch.maximum(f, f.T)
        f.fill_diagonal_(1.0)
        g = modulate(a, f)
        row_err = max(row_err, float((g.sum(-1) - 1).abs().max()))
        for c in (0.1, 3.0, 250.0):
            scale_err = max(scale_err, float((modulate(a, c * f) - g).abs().max()))
    ok = reduction < 1e-6 and row_err < 1e-9 and scale_err < 1e-9
    report(request, 4, "unit frequency reduces to standard attention; rows sum to 1; scale invariant", ok,
           f"reduction {reduction:.1e}, row sums {row_err:.1e}, scaling {scale_err:.1e}")


# -- 5: gradient suite --------------------------------------------------------------

def test_criterion_05_gradient_suite(request):
    start = time.perf_counter()
    rng = random.Random(5)
    worst = 0.0
    checks = 0
    for trial in range(3):
        length, d = rng.randint(2, 8), rng.choice([4, 8, 16])
        seed = 10 * trial
        q, k, v = rand(length, d, seed=seed), rand(length, d, seed=seed + 1), rand(length, d, seed=seed + 2)
        w = rand(length, d, seed=seed + 3)
        f = torch.randint(1, 5, (length, length), generator=torch.Generator().manual_seed(seed)).double()
        f = torch.maximum(f, f.T)
        f.fill_diagonal_(1.0)
        cases = [(lambda q, k, v, f: (frequency_attention(q, k, v, f) * w).sum(), [q, k, v, f])]

        enc = FusionEncoder(EncoderConfig(d_model=d, heads=2, dropout=0.0, fusion_layers=1)).double()
        init_parameters(enc, torch.Generator().manual_seed(seed))
        cases.append((lambda a, b: (enc(a, b, f) * w).sum(), [q, k]))

        s = rng.randint(0, length - 1)
        mentions = [(0, 0), (s, length - 1)]
        cases.append((lambda a, b: global_loss(a, b), [q, k]))
        cases.append((lambda a, b: local_loss(a, b, span_length=min(4, length)), [q, k]))
        cases.append((lambda a, b: task_loss(a, b, mentions), [q, k]))

        n_labels = 5
        gold = torch.randint(0, n_labels, (length,), generator=torch.Generator().manual_seed(seed))
        logits = rand(length, n_labels, seed=seed + 4)
        teacher = torch.softmax(rand(length, n_labels, seed=seed + 5), -1)
        cases.append((lambda z: ner_loss(torch.softmax(z, -1), gold), [logits]))
        cases.append((lambda z: pair_loss(torch.softmax(z, -1), gold), [logits]))
        cases.append((lambda z: distill_loss(teacher, torch.softmax(z, -1)), [logits]))

        head = PairHead(d, ["A", "B", "C"]).double()
        init_parameters(head, torch.Generator().manual_seed(seed + 6))
        label = torch.tensor([trial % 4])
        cases.append((lambda h: pair_loss(pair_forward(h, (0, 0), (s, length - 1), head).unsqueeze(0), label),
                      [q]))
        for fn, inputs in cases:
            result = gradient_check(fn, inputs)
            worst = max([worst] + result.max_rel_errors)
            checks += 1
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 120
    report(request, 5, "finite-difference gradient checks", ok,
           f"{checks} checks, worst relative error {worst:.1e}, {elapsed:.1f} s")


# -- 6: KL properties ---------------------------------------------------------------

def test_criterion_06_kl_properties(request):
    worked = sym_kl(torch.tensor([0.5, 0.5], dtype=torch.float64), torch.tensor([0.9, 0.1], dtype=torch.float64))
    oracle = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1) + 0.9 * math.log(0.9 / 0.5) + 0.1 * math.log(0.1 / 0.5)
    ok = abs(worked.item() - 0.8789) < 1e-3 and abs(worked.item() - oracle) < 1e-12
    for seed in range(200):
        n = 2 + seed % 7
        p = torch.softmax(rand(n, seed=seed) * 3, 0)
        q = torch.softmax(rand(n, seed=seed + 1000) * 3, 0)
        ok &= sym_kl(p, q).item() >= 0
        ok &= abs(sym_kl(p, p).item()) < 1e-9
        ok &= abs(sym_kl(p, q).item() - sym_kl(q, p).item()) < 1e-12
    report(request, 6, "symmetric KL non-negative, zero at equality, symmetric, worked value", bool(ok),
           f"worked case {worked.item():.4f} nats")


# -- 7: overfit capacity ------------------------------------------------------------

def test_criterion_07_overfit(request):
    source, _ = generate_synthetic_pair(GenConfig(n=64), seed=0)
    cfg = TrainConfig(epochs=300, seed=0, precision="float64")
    start = time.perf_counter()
    model, rep = train(cfg, source)
    f1 = evaluate(model, source).prf.f1
    elapsed = time.perf_counter() - start
    inter = {k: (rep.losses[k][0], rep.losses[k][-1]) for k in ("global", "local", "task_level")}
    ok = f1 >= 0.99 and elapsed < 300 and all(last < first for first, last in inter.values()) \
        and rep.losses["task"][-1] < rep.losses["task"][0]
    detail = f"train F1 {f1:.4f}, {elapsed:.0f} s, " + ", ".join(
        f"{k} {a:.3f}->{b:.4f}" for k, (a, b) in inter.items())
    report(request, 7, "full model overfits 64 synthetic sentences", ok, detail)


# -- 8: desk-scale transfer ---------------------------------------------------------

def transfer_data():
    source, target = generate_synthetic_pair(GenConfig(n=560), seed=0)
    src_train, src_dev, src_test = split(source, (0.5, 0.1, 0.4), seed=0)
    tgt_train, _, tgt_test = split(target, (0.5, 0.1, 0.4), seed=0)
    return src_train, src_dev, src_test, tgt_train, tgt_test


def test_criterion_08_transfer_ablation(request):
    src_train, src_dev, src_test, _, tgt_test = transfer_data()
    base = load_config(DATA / "transfer.cfg")
    start = time.perf_counter()
    table = run_ablation(base, src_train, src_dev, src_test, tgt_test, seeds=[0, 1, 2, 3, 4])
    elapsed = time.perf_counter() - start
    mean = {row["variant"]: row["target_f1_mean"] for row in table.summary()}
    gap = mean["full"] - mean["no_all"]
    ordered = mean["full"] >= mean["no_frequency"] >= mean["no_all"]
    capman = request.config.pluginmanager.getplugin("capturemanager")
    with capman.global_and_fixture_disabled():
        print("\n" + table.to_text(), end="")
    ok = gap >= 0.05 and ordered and elapsed < 1800
    report(request, 8, "zero-shot target F1: full beats w/o all by >= 5 points, ordering holds", ok,
           f"full {100 * mean['full']:.2f}, w/o frequency {100 * mean['no_frequency']:.2f}, "
           f"w/o all {100 * mean['no_all']:.2f}, gap {100 * gap:.2f}, {elapsed / 60:.1f} min")


# -- 9: metric oracle ---------------------------------------------------------------

def _brute(gold, pred):
    pool = list(gold)
    correct = 0
    for item in pred:
        if item in pool:
            pool.remove(item)
            correct += 1
    p = correct / len(pred) if pred else 0.0
    r = correct / len(gold) if gold else 0.0
    return p, r, (2 * p * r / (p + r) if p + r else 0.0)


def test_criterion_09_metric_oracle(request):
    rng = random.Random(9)
    bad = 0
    for fn, make in [
        (entity_f1, lambda: ("s" + str(rng.randint(0, 2)), rng.randint(0, 5), rng.randint(5, 7),
                             rng.choice("ABC"))),
        (relation_f1, lambda: ("s", rng.choice("rq"), (rng.randint(0, 3), 4), (5, rng.randint(5, 7)))),
        (argument_f1, lambda: ("s", rng.choice(["Meet", "Move"]), (rng.randint(0, 4), 5), rng.choice("xy"))),
    ]:
        for _ in range(200):
            gold = [make() for _ in range(rng.randint(0, 10))]
            pred = [make() for _ in range(rng.randint(0, 10))]
            r = fn(gold, pred)
            bad += (r.precision, r.recall, r.f1) != _brute(gold, pred)
    worked = entity_f1([("s", 0, 0, "X"), ("s", 1, 2, "Y")], [("s", 0, 0, "X"), ("s", 1, 1, "Y")])
    ok = bad == 0 and (worked.precision, worked.recall, worked.f1) == (0.5, 0.5, 0.5)
    report(request, 9, "E/R/A-F1 match brute-force intersection; worked case 0.5/0.5/0.5", ok,
           f"600 random cases, {bad} mismatches")


# -- 10: distillation ---------------------------------------------------------------

def test_criterion_10_distillation(request):
    src_train, src_dev, _, tgt_train, tgt_test = transfer_data()
    base = load_config(DATA / "transfer.cfg")
    teacher, _ = train(base, src_train, src_dev)
    teacher_f1 = evaluate(teacher, tgt_test).prf.f1
    students = []
    for seed in (0, 1, 2):
        cfg = base.replace(seed=seed)
        student, _ = distill(teacher, tgt_train, cfg)
        students.append(evaluate(student, tgt_test).prf.f1)
    mean = statistics.fmean(students)
    ok = mean >= teacher_f1 - 0.02
    report(request, 10, "distilled student within 2 F1 of the teacher on target text", ok,
           f"teacher {100 * teacher_f1:.2f}, students " + ", ".join(f"{100 * s:.2f}" for s in students)
           + f", mean {100 * mean:.2f}")


# -- 11: determinism ----------------------------------------------------------------

def test_criterion_11_determinism(request, tmp_path):
    source, _ = generate_synthetic_pair(GenConfig(n=48), seed=3)
    train_part, dev_part = split(source, (0.75, 0.25), seed=0)
    cfg = TrainConfig(epochs=4, seed=7, precision="float64", word_dropout=0.2, checkpoint=str(tmp_path / "m.npz"))
    model, first = train(cfg, train_part, dev_part)
    _, second = train(cfg.replace(checkpoint=None), train_part, dev_part)
    same_losses = first.losses == second.losses and first.dev_f1 == second.dev_f1
    loaded, _ = load_model(tmp_path / "m.npz")
    exact = all(torch.equal(a, b) for a, b in zip(model.state_dict().values(), loaded.state_dict().values()))
    model_checkpoint(loaded, tmp_path / "again.npz", {"precision": "float64"})
    reloaded, _ = load_model(tmp_path / "again.npz")
    exact &= all(torch.equal(a, b) for a, b in zip(model.state_dict().values(), reloaded.state_dict().values()))
    exact &= evaluate(loaded, dev_part).pred == evaluate(model, dev_part).pred
    report(request, 11, "repeated runs are bit-identical; checkpoint round-trip is exact", same_losses and exact,
           f"{len(first.losses['task'])} epochs compared")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
