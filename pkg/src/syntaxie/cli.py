"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .corpus import load_corpus, save_corpus
from .errors import ConfigError, DataError, NumericError
from .harness import (VARIANTS, TrainConfig, distill, evaluate, load_config, metrics_text, run_ablation, train)
from .synthetic import GenConfig, generate_synthetic_pair
from .syntax import bio_columns, build_frequency_matrix, build_span_counts


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def write_atomic(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def matrix_block(sid: str, matrix) -> str:
    rows = [" ".join(str(int(v)) for v in row) for row in matrix]
    return "\n".join([f"#id {sid}", *rows]) + "\n"


def _resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "alpha", None) is not None:
        overrides["interaction.alpha"] = args.alpha
    if getattr(args, "span_length", None) is not None:
        overrides["interaction.span_length"] = args.span_length
    if getattr(args, "ablate", None) is not None:
        overrides["ablation"] = args.ablate
    return cfg.replace(**overrides) if overrides else cfg


def _eval_corpora(pairs: Sequence[str]) -> dict:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(f"--eval expects name=path, got {item!r}")
        name, path = item.split("=", 1)
        out[name] = load_corpus(path)
    return out


# -- subcommands --------------------------------------------------------------------

def cmd_featurize(args) -> int:
    corpus = load_corpus(args.corpus)
    labels = corpus.schemas["phrase"]
    out = Path(args.out)
    counts = ["#columns " + " ".join(bio_columns(labels)) + "\n"]
    freqs = []
    for sent in corpus.sentences:
        counts.append(matrix_block(sent.id, build_span_counts(sent.spans, len(sent), labels).counts))
        freqs.append(matrix_block(sent.id, build_frequency_matrix(sent.spans, len(sent))))
    write_atomic(out / "span_counts.txt", "".join(counts))
    write_atomic(out / "frequency.txt", "".join(freqs))
    return 0


def cmd_gen(args) -> int:
    data = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    if args.n is not None:
        data["n"] = args.n
    config = GenConfig.from_dict(data)
    seed = 0 if args.seed is None else args.seed
    source, target = generate_synthetic_pair(config, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_corpus(source, out / "source.txt")
    save_corpus(target, out / "target.txt")
    resolved = {"seed": seed, "n": config.n, "source_language": config.source_language,
                "target_language": config.target_language, "grammar": config.grammar}
    write_atomic(out / "gen_config.json", json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = cfg.replace(checkpoint=str(out / "model.npz"))
    write_atomic(out / "config.txt", cfg.dumps())
    train_corpus = load_corpus(args.train)
    dev = load_corpus(args.dev) if args.dev else None
    target_dev = load_corpus(args.target_dev) if args.target_dev else None
    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    _, report = train(cfg, train_corpus, dev, target_dev, _eval_corpora(args.eval), log=log)
    write_atomic(out / "report.json", report.to_json() + "\n")
    write_atomic(out / "metrics.txt", metrics_text(report.metrics))
    return 0


def cmd_evaluate(args) -> int:
    corpus = load_corpus(args.corpus)
    result = evaluate(args.model, corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_corpus(result.predictions, out / "predictions.txt")
    write_atomic(out / "metrics.json", json.dumps(result.report(), indent=2, sort_keys=True) + "\n")
    write_atomic(out / "metrics.txt", metrics_text({"eval": result.report()}))
    print(f"precision={result.prf.precision:.4f} recall={result.prf.recall:.4f} f1={result.prf.f1:.4f}")
    return 0


def cmd_distill(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = cfg.replace(checkpoint=str(out / "student.npz"))
    write_atomic(out / "config.txt", cfg.dumps())
    unlabeled = load_corpus(args.unlabeled)
    dev = load_corpus(args.dev) if args.dev else None
    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    _, report = distill(args.teacher, unlabeled, cfg, dev, _eval_corpora(args.eval), log=log)
    write_atomic(out / "report.json", report.to_json() + "\n")
    write_atomic(out / "metrics.txt", metrics_text(report.metrics))
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown ablation variant {v!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_atomic(out / "config.txt", cfg.dumps())
    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    table = run_ablation(cfg, load_corpus(args.train), load_corpus(args.dev), load_corpus(args.source_test),
                         load_corpus(args.target_test), seeds, variants, log=log)
    write_atomic(out / "ablation.json", table.to_json() + "\n")
    write_atomic(out / "ablation.txt", table.to_text())
    print(table.to_text(), end="")
    return 0


# -- parser ---------------------------------------------------------------------------

def _run_flags(p: argparse.ArgumentParser, ablate: bool = True):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float, help="interaction loss weight")
    p.add_argument("--span-length", type=int, help="local interaction window size")
    if ablate:
        p.add_argument("--ablate", choices=VARIANTS, help="ablation variant")
    p.add_argument("--verbose", action="store_true", help="log per-epoch losses to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="syntaxie", description="Syntax-augmented cross-lingual information extraction.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("featurize", help="dump span-count and frequency matrices")
    p.add_argument("corpus")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("gen", help="write a synthetic source/target corpus pair")
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int, help="sentences per corpus")
    p.add_argument("--config", help="JSON generator config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--train", required=True)
    p.add_argument("--dev")
    p.add_argument("--target-dev")
    p.add_argument("--eval", action="append", metavar="NAME=PATH")
    p.add_argument("--out", required=True)
    _run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("distill", help="distill a teacher into a student on unlabeled text")
    p.add_argument("--teacher", required=True)
    p.add_argument("--unlabeled", required=True)
    p.add_argument("--dev")
    p.add_argument("--eval", action="append", metavar="NAME=PATH")
    p.add_argument("--out", required=True)
    _run_flags(p, ablate=False)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("ablate", help="run the ablation sweep")
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--source-test", required=True)
    p.add_argument("--target-test", required=True)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--variants", help="comma-separated subset of " + ",".join(VARIANTS))
    p.add_argument("--out", required=True)
    _run_flags(p, ablate=False)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    try:
        return args.func(args)
    except (DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
