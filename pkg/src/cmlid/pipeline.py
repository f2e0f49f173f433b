"""Experiment configs and the normalize -> vocab -> pretrain -> finetune -> evaluate run."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from threadpoolctl import threadpool_limits

from .corpus import (
    Corpus,
    Label,
    LabeledSentence,
    label_distribution,
    normalize_corpus,
    read_labeled_corpus,
    read_raw_corpus,
    render_label_table,
)
from .evaluation import (
    MetricsReport,
    evaluate_predictions,
    render_report,
    render_table3,
    render_table4,
    render_table5,
)
from .kvconfig import ConfigError, parse_bool, read_kv_config, resolve_path
from .model import ModelConfig, load_checkpoint, preset
from .subword import Scheme, SubwordVocabulary, serialize_vocab, train_vocab, vocab_hash
from .training import Classifier, MaskingPolicy, PretrainObjective, TrainHyper, finetune, predict, pretrain

log = logging.getLogger(__name__)

CASINGS = ("cased", "uncased")
NO_PRETRAIN = "none"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")


def casing_transform(text: str, mode: str) -> str:
    if mode == "cased":
        return text
    if mode == "uncased":
        return text.lower()
    raise ConfigError(f"casing must be one of {CASINGS}, got {mode!r}")


def apply_casing(c: Corpus, mode: str) -> Corpus:
    if mode == "cased":
        return c
    if c.labeled:
        sents = tuple(LabeledSentence([casing_transform(w, mode) for w in s.words], s.labels)
                      for s in c.sentences)
    else:
        sents = tuple(casing_transform(s, mode) for s in c.sentences)
    return Corpus(sents, c.provenance, c.labeled)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    casing: str
    vocab_scheme: Scheme
    vocab_size: int
    objective: PretrainObjective
    train_corpus: Path
    test_corpus: Path
    # None means no code-mixed pretraining: the encoder starts from random init
    pretrain_source: Path | None = None
    val_corpus: Path | None = None
    # raw/TSV corpora the vocabulary is trained on; defaults to pretrain + train
    vocab_corpora: tuple[Path, ...] = ()
    preset: str = "tiny"
    model_overrides: dict = field(default_factory=dict)
    seeds: tuple[int, ...] = (0,)
    pretrain_hyper: TrainHyper = field(default_factory=TrainHyper)
    finetune_hyper: TrainHyper = field(default_factory=TrainHyper)

    def validate(self) -> None:
        if self.casing not in CASINGS:
            raise ConfigError(f"{self.name}: casing must be one of {CASINGS}")
        paths = [self.train_corpus, self.test_corpus, *self.vocab_corpora]
        if self.pretrain_source is not None:
            paths.append(self.pretrain_source)
        if self.val_corpus is not None:
            paths.append(self.val_corpus)
        for p in paths:
            if not Path(p).is_file():
                raise ConfigError(f"{self.name}: referenced file does not exist: {p}")

    def describe(self) -> dict:
        return {
            "name": self.name,
            "casing": self.casing,
            "pretrain_source": str(self.pretrain_source) if self.pretrain_source else NO_PRETRAIN,
            "vocab_scheme": self.vocab_scheme.value,
            "objective": self.objective.value,
        }


_HYPER_KEYS = {
    "lr": float, "batch_size": int, "epochs": int, "max_steps": int, "warmup_frac": float,
    "weight_decay": float, "clip_norm": float,
}
_MODEL_KEYS = {
    "n_layers": int, "n_heads": int, "d_model": int, "d_ff": int, "T": int,
    "dropout_rate": float, "init_std": float, "layernorm_epsilon": float,
}


def _hyper(kv: dict[str, str], prefix: str) -> TrainHyper:
    args = {}
    for key, conv in _HYPER_KEYS.items():
        if prefix + key in kv:
            args[key] = conv(kv[prefix + key])
    mp = {}
    for key in ("select_prob", "mask_frac", "random_frac", "keep_frac"):
        if "mask_" + key in kv:
            mp[key] = float(kv["mask_" + key])
    if mp:
        args["masking"] = MaskingPolicy(**mp)
    return TrainHyper(**args)


def experiment_from_kv(kv: dict[str, str]) -> ExperimentConfig:
    try:
        name = kv["name"]
        pre = kv.get("pretrain_source", NO_PRETRAIN)
        vocab_corpora = tuple(resolve_path(kv, p.strip()) for p in kv.get("vocab_corpora", "").split(",") if p.strip())
        overrides = {m: conv(kv["model_" + m]) for m, conv in _MODEL_KEYS.items() if "model_" + m in kv}
        if "tie_mlm" in kv:
            overrides["tie_mlm"] = parse_bool(kv["tie_mlm"])
        return ExperimentConfig(
            name=name,
            casing=kv.get("casing", "cased"),
            vocab_scheme=Scheme(kv["vocab_scheme"]),
            vocab_size=int(kv["vocab_size"]),
            objective=PretrainObjective(kv.get("objective", "MLM_only")),
            train_corpus=resolve_path(kv, kv["train_corpus"]),
            test_corpus=resolve_path(kv, kv["test_corpus"]),
            pretrain_source=None if pre == NO_PRETRAIN else resolve_path(kv, pre),
            val_corpus=resolve_path(kv, kv["val_corpus"]) if "val_corpus" in kv else None,
            vocab_corpora=vocab_corpora,
            preset=kv.get("preset", "tiny"),
            model_overrides=overrides,
            seeds=tuple(int(s) for s in kv.get("seeds", "0").split(",")),
            pretrain_hyper=_hyper(kv, "pretrain_"),
            finetune_hyper=_hyper(kv, "finetune_"),
        )
    except KeyError as e:
        raise ConfigError(f"missing config key {e.args[0]!r}") from None
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from None


def load_experiment(path: str | Path) -> ExperimentConfig:
    return experiment_from_kv(read_kv_config(path))


# ------------------------------------------------------------------- stages


def _read_any(path: Path) -> Corpus:
    return read_labeled_corpus(path) if path.suffix == ".tsv" else read_raw_corpus(path)


def load_inputs(cfg: ExperimentConfig) -> dict[str, Corpus]:
    """Read and normalize every corpus the run touches, with casing applied."""
    prep = lambda c: apply_casing(normalize_corpus(c), cfg.casing)
    out = {
        "train": prep(read_labeled_corpus(cfg.train_corpus)),
        "test": prep(read_labeled_corpus(cfg.test_corpus)),
    }
    if cfg.val_corpus is not None:
        out["val"] = prep(read_labeled_corpus(cfg.val_corpus))
    if cfg.pretrain_source is not None:
        out["pretrain"] = prep(read_raw_corpus(cfg.pretrain_source))
    if cfg.vocab_corpora:
        out["vocab"] = [prep(_read_any(Path(p))) for p in cfg.vocab_corpora]
    return out


def build_vocab(cfg: ExperimentConfig, inputs: dict) -> SubwordVocabulary:
    if "vocab" in inputs:
        sources = inputs["vocab"]
    else:
        sources = [inputs[k] for k in ("pretrain", "train") if k in inputs]
    words = [w for c in sources for w in c.word_lists()]
    return train_vocab(cfg.vocab_scheme, words, cfg.vocab_size)


def model_config(cfg: ExperimentConfig, vocab: SubwordVocabulary, preset_name: str | None = None) -> ModelConfig:
    return preset(preset_name or cfg.preset, vocab_size=len(vocab), **cfg.model_overrides)


@dataclass
class RunResult:
    report: MetricsReport
    out_dir: Path
    classifier: Classifier
    pretrain_losses: list[float] = field(default_factory=list)


def run_dir(out: str | Path, cfg: ExperimentConfig, seed: int) -> Path:
    return Path(out) / cfg.name / str(seed)


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ConfigError:
        raise
    except Exception as e:  # noqa: BLE001 - re-raised with the stage attached
        raise StageError(name, e) from e


def stage_vocab(cfg: ExperimentConfig, inputs: dict, d: Path) -> SubwordVocabulary:
    vocab = _stage("train-vocab", build_vocab, cfg, inputs)
    serialize_vocab(vocab, d / "vocab.txt")
    return vocab


def stage_pretrain(cfg: ExperimentConfig, inputs: dict, vocab: SubwordVocabulary, mc: ModelConfig,
                   seed: int, d: Path):
    result = _stage("pretrain", pretrain, inputs["pretrain"], vocab, mc, cfg.objective,
                    cfg.pretrain_hyper, seed)
    result.save(d / "pretrain.bin", meta={"experiment": cfg.name, "seed": seed, "stage": "pretrain"})
    result.write_log(d / "pretrain.log")
    return result


def stage_finetune(cfg: ExperimentConfig, inputs: dict, vocab: SubwordVocabulary, mc: ModelConfig,
                   seed: int, d: Path, init=None) -> Classifier:
    clf = _stage("finetune", finetune, init, inputs["train"], vocab, mc, cfg.finetune_hyper, seed,
                 inputs.get("val"))
    clf.save(d / "checkpoint.bin", meta={"experiment": cfg.name, "seed": seed, "stage": "finetune"})
    with open(d / "train.log", "w", encoding="utf-8") as fh:
        for step, value, lr in clf.history:
            fh.write(f"{step}\t{value!r}\t{lr!r}\n")
    return clf


def stage_evaluate(cfg: ExperimentConfig, inputs: dict, clf: Classifier, d: Path) -> MetricsReport:
    test = inputs["test"]
    preds = _stage("evaluate", predict, clf, [s.words for s in test.sentences])
    report = evaluate_predictions([s.labels for s in test.sentences], preds)
    (d / "report.json").write_text(render_report(report, "json"), encoding="utf-8")
    (d / "report.md").write_text(render_markdown(cfg.name, report, inputs), encoding="utf-8")
    return report


def render_markdown(name: str, report: MetricsReport, inputs: dict) -> str:
    parts = [
        f"# {name}\n",
        "## Label distribution\n",
        render_label_table(label_distribution(inputs["train"]), label_distribution(inputs["test"])),
        "## Language labels\n",
        render_table3([(name, report)]),
        "## Per-class scores\n",
        render_table4(report),
        "## Named entities\n",
        render_table5([(name, report)]),
    ]
    return "\n".join(parts)


def load_classifier(d: Path, vocab: SubwordVocabulary) -> Classifier:
    params, mc, header = load_checkpoint(d / "checkpoint.bin", vocab_hash(vocab))
    return Classifier(params, mc, vocab, Label(header["meta"].get("fallback_label", "En")))


def run_experiment(cfg: ExperimentConfig, seed: int, out: str | Path, preset_name: str | None = None) -> RunResult:
    """Full run for one seed; artifacts land in ``<out>/<name>/<seed>/``."""
    cfg.validate()
    d = run_dir(out, cfg, seed)
    d.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(limits=1):
        inputs = _stage("normalize", load_inputs, cfg)
        vocab = stage_vocab(cfg, inputs, d)
        mc = _stage("model-config", model_config, cfg, vocab, preset_name)
        init = None
        losses: list[float] = []
        if cfg.pretrain_source is not None:
            pre = stage_pretrain(cfg, inputs, vocab, mc, seed, d)
            init, losses = pre.params, pre.losses
        clf = stage_finetune(cfg, inputs, vocab, mc, seed, d, init)
        report = stage_evaluate(cfg, inputs, clf, d)
    (d / "config.json").write_text(json.dumps({**cfg.describe(), "seed": seed}, indent=2, sort_keys=True) + "\n",
                                   encoding="utf-8")
    log.info("%s seed %d: weighted F1 %.4f accuracy %.4f", cfg.name, seed, report.weighted.f1, report.accuracy)
    return RunResult(report, d, clf, losses)
