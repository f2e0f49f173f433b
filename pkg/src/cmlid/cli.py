"""Command-line entry point: ``cmlid <subcommand> [options]``.

Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import pipeline
from .corpus import (
    CorpusError,
    GeneratorConfig,
    generate_synthetic_corpus,
    label_distribution,
    normalize_corpus,
    read_labeled_corpus,
    read_raw_corpus,
    render_label_table,
    split_corpus,
    write_labeled_corpus,
    write_raw_corpus,
)
from .evaluation import STYLES, compare_runs, parse_json_report, render_report
from .kvconfig import ConfigError, read_kv_config
from .model import CheckpointError, load_checkpoint
from .subword import Scheme, VocabError, load_vocab, serialize_vocab, train_vocab, vocab_hash
from .training import TrainingError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
VALIDATION_ERRORS = (ConfigError, CorpusError, VocabError, CheckpointError, TrainingError, FileNotFoundError)

log = logging.getLogger("cmlid")


class Degenerate(Exception):
    """Evaluation succeeded but some label has zero support."""


def _need(args, attr: str, flag: str):
    value = getattr(args, attr)
    if value is None:
        raise ConfigError(f"{args.command} requires {flag}")
    return value


def _experiment(args) -> pipeline.ExperimentConfig:
    cfg = pipeline.load_experiment(_need(args, "config", "--config"))
    cfg.validate()
    return cfg


def _seeds(args, cfg: pipeline.ExperimentConfig) -> tuple[int, ...]:
    return (args.seed,) if args.seed is not None else cfg.seeds


# ------------------------------------------------------------------ commands


def cmd_normalize(args) -> None:
    if args.raw:
        c = normalize_corpus(read_raw_corpus(args.input))
        if args.casing:
            c = pipeline.apply_casing(c, args.casing)
        write_raw_corpus(c, args.output)
    else:
        c = normalize_corpus(read_labeled_corpus(args.input))
        if args.casing:
            c = pipeline.apply_casing(c, args.casing)
        write_labeled_corpus(c, args.output)
    print(f"wrote {len(c)} sentences to {args.output}")


def cmd_gen_corpus(args) -> None:
    kv = read_kv_config(args.config) if args.config else {}
    gen = GeneratorConfig.from_kv(kv) if kv else GeneratorConfig.default()
    seed = args.seed if args.seed is not None else int(kv.get("seed", 0))
    test_fraction = float(kv.get("test_fraction", 0.2))
    out = Path(_need(args, "out", "--out"))
    out.mkdir(parents=True, exist_ok=True)
    pre, labeled = generate_synthetic_corpus(gen, seed)
    train, test = split_corpus(labeled, test_fraction, seed)
    write_raw_corpus(pre, out / "pretrain.txt")
    write_labeled_corpus(train, out / "train.tsv")
    write_labeled_corpus(test, out / "test.tsv")
    (out / "distribution.md").write_text(
        render_label_table(label_distribution(train), label_distribution(test)), encoding="utf-8")
    print(f"wrote {len(pre)} pretraining, {len(train)} train and {len(test)} test sentences to {out}")


def cmd_train_vocab(args) -> None:
    words = []
    for path in args.corpus:
        p = Path(path)
        c = read_labeled_corpus(p) if p.suffix == ".tsv" else read_raw_corpus(p)
        c = pipeline.apply_casing(normalize_corpus(c), args.casing)
        words.extend(c.word_lists())
    vocab = train_vocab(Scheme(args.scheme), words, args.size)
    serialize_vocab(vocab, _need(args, "out", "--out"))
    print(f"{args.scheme} vocabulary: {len(vocab)} units, {len(vocab.merges)} merges -> {args.out}")


def cmd_pretrain(args) -> None:
    cfg = _experiment(args)
    if cfg.pretrain_source is None:
        raise ConfigError(f"{cfg.name}: pretrain_source is none; nothing to pretrain")
    for seed in _seeds(args, cfg):
        d = pipeline.run_dir(args.out, cfg, seed)
        d.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(limits=1):
            inputs = pipeline._stage("normalize", pipeline.load_inputs, cfg)
            vocab = pipeline.stage_vocab(cfg, inputs, d)
            mc = pipeline.model_config(cfg, vocab, args.preset)
            res = pipeline.stage_pretrain(cfg, inputs, vocab, mc, seed, d)
        print(f"{cfg.name} seed {seed}: final pretraining loss {res.losses[-1]:.4f} -> {d}")


def cmd_finetune(args) -> None:
    cfg = _experiment(args)
    for seed in _seeds(args, cfg):
        d = pipeline.run_dir(args.out, cfg, seed)
        d.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(limits=1):
            inputs = pipeline._stage("normalize", pipeline.load_inputs, cfg)
            init = None
            if cfg.pretrain_source is not None:
                vocab = load_vocab(d / "vocab.txt", cfg.vocab_scheme)
                init, mc, _ = load_checkpoint(d / "pretrain.bin", vocab_hash(vocab))
            else:
                vocab = pipeline.stage_vocab(cfg, inputs, d)
                mc = pipeline.model_config(cfg, vocab, args.preset)
            clf = pipeline.stage_finetune(cfg, inputs, vocab, mc, seed, d, init)
        print(f"{cfg.name} seed {seed}: train word accuracy {clf.train_accuracy:.4f} -> {d}")


def cmd_evaluate(args) -> None:
    cfg = _experiment(args)
    degenerate = []
    for seed in _seeds(args, cfg):
        d = pipeline.run_dir(args.out, cfg, seed)
        vocab = load_vocab(d / "vocab.txt", cfg.vocab_scheme)
        clf = pipeline.load_classifier(d, vocab)
        inputs = pipeline.load_inputs(cfg)
        with threadpool_limits(limits=1):
            report = pipeline.stage_evaluate(cfg, inputs, clf, d)
        print(render_report(report, args.style, cfg.name), end="")
        if report.degenerate:
            degenerate.append(seed)
    if degenerate:
        raise Degenerate(f"zero-support labels in the test split (seeds {degenerate})")


def cmd_run(args) -> None:
    cfg = _experiment(args)
    for seed in _seeds(args, cfg):
        res = pipeline.run_experiment(cfg, seed, args.out, args.preset)
        print(f"{cfg.name} seed {seed}: weighted F1 {res.report.weighted.f1:.4f} "
              f"accuracy {res.report.accuracy:.4f} -> {res.out_dir}")


def _report_name(path: Path) -> str:
    # <out>/<name>/<seed>/report.json
    if path.name == "report.json" and path.parent.parent.name:
        return f"{path.parent.parent.name}/{path.parent.name}"
    return path.stem


def cmd_compare(args) -> None:
    named = []
    for item in args.reports:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = _report_name(Path(item)), item
        named.append((name, parse_json_report(Path(path).read_text(encoding="utf-8"))))
    if len(named) < 2:
        raise ConfigError("compare needs at least two reports")
    text = compare_runs(named)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment or generator config file")
    common.add_argument("--seed", type=int, help="override the config's seed list with one seed")
    common.add_argument("--out", help="output directory (or file, for train-vocab and compare)")
    common.add_argument("--preset", choices=("tiny", "paper"), help="model size preset")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cmlid", description="Word-level language identification for code-mixed text.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("normalize", parents=[common], help="apply placeholder normalization to a corpus")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--raw", action="store_true", help="input is one sentence per line, not TSV")
    s.add_argument("--casing", choices=pipeline.CASINGS)
    s.set_defaults(fn=cmd_normalize)

    s = sub.add_parser("gen-corpus", parents=[common], help="write a synthetic pretraining/train/test fixture")
    s.set_defaults(fn=cmd_gen_corpus)

    s = sub.add_parser("train-vocab", parents=[common], help="train a subword vocabulary")
    s.add_argument("corpus", nargs="+", help=".tsv files are read as labeled, anything else as raw text")
    s.add_argument("--scheme", required=True, choices=[m.value for m in Scheme])
    s.add_argument("--size", required=True, type=int)
    s.add_argument("--casing", choices=pipeline.CASINGS, default="cased")
    s.set_defaults(fn=cmd_train_vocab)

    for name, fn, text in (("pretrain", cmd_pretrain, "masked-LM pretraining stage"),
                           ("finetune", cmd_finetune, "token-classification fine-tuning stage"),
                           ("run", cmd_run, "full experiment")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.set_defaults(fn=fn)

    s = sub.add_parser("evaluate", parents=[common], help="score a fine-tuned checkpoint on the test split")
    s.add_argument("--style", choices=STYLES, default="table4")
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("compare", parents=[common], help="rank several report.json files")
    s.add_argument("reports", nargs="+", help="report.json paths, optionally as NAME=PATH")
    s.set_defaults(fn=cmd_compare)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command in {"pretrain", "finetune", "evaluate", "run"} and args.out is None:
        args.out = "runs"
    try:
        args.fn(args)
    except Degenerate as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except pipeline.StageError as e:
        print(f"error: {e}", file=sys.stderr)
        # bad inputs surfacing mid-run (corpus, vocab budget) are still validation errors
        return EXIT_INVALID if isinstance(e.cause, VALIDATION_ERRORS) else EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
