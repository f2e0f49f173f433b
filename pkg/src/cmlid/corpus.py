"""Code-mixed corpora: label schema, normalization, TSV I/O and a synthetic generator."""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class Label(str, enum.Enum):
    EN = "En"
    HI = "Hi"
    UNIV = "Univ"
    USER = "User"
    HASH = "Hash"
    URL = "U"
    NE = "NE"

    def __str__(self) -> str:
        return self.value

    @classmethod
    def parse(cls, text: str) -> "Label":
        try:
            return cls(text)
        except ValueError:
            raise UnknownLabel(f"unknown label {text!r}") from None


LABELS: tuple[Label, ...] = tuple(Label)
LABEL_INDEX = {lab: i for i, lab in enumerate(LABELS)}

# row order and display names used in the label-distribution table
TABLE1_ROWS: tuple[tuple[Label, str], ...] = (
    (Label.EN, "English"),
    (Label.HI, "Hindi"),
    (Label.UNIV, "Universal"),
    (Label.HASH, "Hashtags"),
    (Label.URL, "URLs"),
    (Label.USER, "Usernames"),
    (Label.NE, "Named Entities"),
)

PLACEHOLDERS = {Label.USER: "<user>", Label.HASH: "<hash>", Label.URL: "<url>"}


class CorpusError(ValueError):
    """Base class for corpus problems; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class UnknownLabel(CorpusError):
    pass


class MalformedLine(CorpusError):
    pass


class EmptySentence(CorpusError):
    pass


class LexiconOverlap(CorpusError):
    pass


class InvalidRatio(CorpusError):
    pass


_WS = re.compile(r"\s")


@dataclass(frozen=True)
class LabeledSentence:
    words: tuple[str, ...]
    labels: tuple[Label, ...]

    def __post_init__(self):
        words = tuple(self.words)
        labels = tuple(Label(lab) if not isinstance(lab, Label) else lab for lab in self.labels)
        object.__setattr__(self, "words", words)
        object.__setattr__(self, "labels", labels)
        if not words:
            raise EmptySentence("sentence has no words")
        if len(words) != len(labels):
            raise CorpusError(f"{len(words)} words but {len(labels)} labels")
        for w in words:
            if not w or _WS.search(w):
                raise CorpusError(f"invalid word {w!r}")

    def __len__(self) -> int:
        return len(self.words)


@dataclass(frozen=True)
class Corpus:
    """Either a labeled corpus (``LabeledSentence`` items) or a raw one (``str`` items)."""

    sentences: tuple = ()
    provenance: str = field(default="", compare=False)
    labeled: bool = True

    def __post_init__(self):
        sents = tuple(self.sentences)
        object.__setattr__(self, "sentences", sents)
        want = LabeledSentence if self.labeled else str
        for s in sents:
            if not isinstance(s, want):
                raise CorpusError(
                    f"{'labeled' if self.labeled else 'raw'} corpus cannot hold {type(s).__name__}"
                )

    def __len__(self) -> int:
        return len(self.sentences)

    def word_lists(self) -> list[list[str]]:
        if self.labeled:
            return [list(s.words) for s in self.sentences]
        return [tokenize_tweet(s) for s in self.sentences]


def tokenize_tweet(raw_text: str) -> list[str]:
    return raw_text.split()


def meta_label(word: str) -> Label | None:
    """Guess User/Hash/U from Twitter surface conventions; None for anything else."""
    if word in PLACEHOLDERS.values():
        return next(lab for lab, ph in PLACEHOLDERS.items() if ph == word)
    if word.startswith(("http://", "https://")):
        return Label.URL
    if len(word) > 1 and word[0] == "@":
        return Label.USER
    if len(word) > 1 and word[0] == "#":
        return Label.HASH
    return None


def normalize_sentence(s: LabeledSentence) -> LabeledSentence:
    words = tuple(PLACEHOLDERS.get(lab, w) for w, lab in zip(s.words, s.labels))
    return LabeledSentence(words, s.labels)


def normalize_raw(text: str) -> str:
    """Placeholder substitution for unlabeled text, driven by :func:`meta_label`."""
    out = []
    for w in tokenize_tweet(text):
        lab = meta_label(w)
        out.append(PLACEHOLDERS[lab] if lab is not None else w)
    return " ".join(out)


def normalize_corpus(c: Corpus) -> Corpus:
    if c.labeled:
        sents = tuple(normalize_sentence(s) for s in c.sentences)
    else:
        sents = tuple(normalize_raw(s) for s in c.sentences)
    return Corpus(sents, c.provenance, c.labeled)


# --------------------------------------------------------------------------- I/O


def read_labeled_corpus(path: str | Path, provenance: str | None = None) -> Corpus:
    text = Path(path).read_text(encoding="utf-8")
    return parse_labeled_corpus(text, provenance if provenance is not None else str(path))


def parse_labeled_corpus(text: str, provenance: str = "") -> Corpus:
    sentences: list[LabeledSentence] = []
    words: list[str] = []
    labels: list[Label] = []
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    for lineno, line in enumerate(lines, 1):
        if line == "":
            if not words:
                raise EmptySentence("empty sentence block", line=lineno)
            sentences.append(LabeledSentence(words, labels))
            words, labels = [], []
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise MalformedLine(f"expected 'word<TAB>label', got {len(parts)} field(s)", line=lineno)
        word, lab = parts
        if not word or _WS.search(word):
            raise MalformedLine(f"invalid word {word!r}", line=lineno)
        try:
            labels.append(Label.parse(lab))
        except UnknownLabel as e:
            raise UnknownLabel(str(e), line=lineno) from None
        words.append(word)
    if words:
        sentences.append(LabeledSentence(words, labels))
    return Corpus(tuple(sentences), provenance, labeled=True)


def format_labeled_corpus(c: Corpus) -> str:
    if not c.labeled:
        raise CorpusError("cannot write a raw corpus as labeled TSV")
    chunks = []
    for s in c.sentences:
        chunks.append("".join(f"{w}\t{lab.value}\n" for w, lab in zip(s.words, s.labels)) + "\n")
    return "".join(chunks)


def write_labeled_corpus(c: Corpus, path: str | Path) -> None:
    Path(path).write_text(format_labeled_corpus(c), encoding="utf-8")


def read_raw_corpus(path: str | Path, provenance: str | None = None) -> Corpus:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    sents = tuple(ln.strip() for ln in lines if ln.strip())
    return Corpus(sents, provenance if provenance is not None else str(path), labeled=False)


def write_raw_corpus(c: Corpus, path: str | Path) -> None:
    sents = c.sentences if not c.labeled else [" ".join(s.words) for s in c.sentences]
    Path(path).write_text("".join(s + "\n" for s in sents), encoding="utf-8")


# ------------------------------------------------------------------ statistics


@dataclass(frozen=True)
class LabelDistribution:
    counts: dict[Label, int]

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def __getitem__(self, lab: Label | str) -> int:
        return self.counts[Label(lab)]


def label_distribution(c: Corpus) -> LabelDistribution:
    if not c.labeled:
        raise CorpusError("label distribution needs a labeled corpus")
    counts = {lab: 0 for lab in LABELS}
    for s in c.sentences:
        for lab in s.labels:
            counts[lab] += 1
    return LabelDistribution(counts)


def render_label_table(train: LabelDistribution, test: LabelDistribution) -> str:
    lines = ["| Label | # Train words | # Test words |", "|---|---:|---:|"]
    for lab, name in TABLE1_ROWS:
        lines.append(f"| {name} | {train[lab]} | {test[lab]} |")
    return "\n".join(lines) + "\n"


def split_corpus(c: Corpus, test_fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    """Shuffled train/test split; deterministic per seed."""
    order = np.random.default_rng(seed).permutation(len(c))
    n_test = int(round(test_fraction * len(c)))
    test_idx = sorted(order[:n_test])
    train_idx = sorted(order[n_test:])
    pick = lambda idx, tag: Corpus(tuple(c.sentences[i] for i in idx), f"{c.provenance}:{tag}", c.labeled)
    return pick(train_idx, "train"), pick(test_idx, "test")


# ------------------------------------------------------------------- generator


def read_lexicon(path: str | Path) -> tuple[str, ...]:
    words = []
    for ln in Path(path).read_text(encoding="utf-8").splitlines():
        ln = ln.strip()
        if ln and not ln.startswith("#"):
            words.append(ln)
    return tuple(words)


DATA_DIR = Path(__file__).parent / "data"


@dataclass(frozen=True)
class GeneratorConfig:
    en_lexicon: tuple[str, ...]
    hi_lexicon: tuple[str, ...]
    ne_lexicon: tuple[str, ...]
    univ_lexicon: tuple[str, ...] = ("!", "?", ".", ",", ":)", ":(", "...", "😂", "🙏", "❤️")
    en_ratio: float = 0.7
    min_len: int = 4
    max_len: int = 14
    n_pretrain: int = 1000
    n_labeled: int = 300
    user_rate: float = 0.02
    hash_rate: float = 0.03
    url_rate: float = 0.01
    ne_rate: float = 0.04
    univ_rate: float = 0.05
    # between consecutive language words; 1.0 gives independent draws
    switch_rate: float = 0.5
    capitalize_rate: float = 0.2
    zipf_exponent: float = 1.0
    # emit "@handle" / "#tag" / "https://..." surfaces instead of placeholders
    raw_meta: bool = False

    @classmethod
    def default(cls, **overrides) -> "GeneratorConfig":
        base = dict(
            en_lexicon=read_lexicon(DATA_DIR / "en.txt"),
            hi_lexicon=read_lexicon(DATA_DIR / "hi.txt"),
            ne_lexicon=read_lexicon(DATA_DIR / "ne.txt"),
            univ_lexicon=read_lexicon(DATA_DIR / "univ.txt"),
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "GeneratorConfig":
        from .kvconfig import parse_bool, resolve_path

        args: dict = {}
        for key in ("en_lexicon", "hi_lexicon", "ne_lexicon", "univ_lexicon"):
            if key in kv:
                args[key] = read_lexicon(resolve_path(kv, kv[key]))
        for key in ("min_len", "max_len", "n_pretrain", "n_labeled"):
            if key in kv:
                args[key] = int(kv[key])
        for key in ("en_ratio", "user_rate", "hash_rate", "url_rate", "ne_rate", "univ_rate",
                    "switch_rate", "capitalize_rate", "zipf_exponent"):
            if key in kv:
                args[key] = float(kv[key])
        if "raw_meta" in kv:
            args["raw_meta"] = parse_bool(kv["raw_meta"])
        return cls.default(**args)


def _validate_generator(cfg: GeneratorConfig) -> None:
    if not 0.0 < cfg.en_ratio < 1.0:
        raise InvalidRatio(f"en_ratio must lie in (0, 1), got {cfg.en_ratio}")
    if not 0.0 < cfg.switch_rate <= 1.0:
        raise InvalidRatio(f"switch_rate must lie in (0, 1], got {cfg.switch_rate}")
    rates = (cfg.user_rate, cfg.hash_rate, cfg.url_rate, cfg.ne_rate, cfg.univ_rate)
    if any(r < 0 for r in rates) or sum(rates) >= 1.0:
        raise InvalidRatio("special-token rates must be non-negative and sum below 1")
    if not 1 <= cfg.min_len <= cfg.max_len:
        raise CorpusError(f"bad sentence length range [{cfg.min_len}, {cfg.max_len}]")
    lexicons = {
        "en": cfg.en_lexicon, "hi": cfg.hi_lexicon, "ne": cfg.ne_lexicon, "univ": cfg.univ_lexicon,
    }
    owner: dict[str, str] = {}
    for name, lex in lexicons.items():
        if not lex:
            raise CorpusError(f"{name} lexicon is empty")
        for w in lex:
            if _WS.search(w) or meta_label(w) is not None:
                raise CorpusError(f"{name} lexicon entry {w!r} is not a plain word")
            key = w.casefold()
            if key in owner and owner[key] != name:
                raise LexiconOverlap(f"{w!r} appears in both {owner[key]} and {name} lexicons")
            owner[key] = name


def _zipf_weights(n: int, s: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


class _Sampler:
    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.lex = {
            Label.EN: cfg.en_lexicon, Label.HI: cfg.hi_lexicon,
            Label.NE: cfg.ne_lexicon, Label.UNIV: cfg.univ_lexicon,
        }
        self.weights = {lab: _zipf_weights(len(lex), cfg.zipf_exponent) for lab, lex in self.lex.items()}
        r, s = cfg.en_ratio, cfg.switch_rate
        # two-state chain whose stationary En share is exactly en_ratio
        self.p_leave = {Label.EN: s * (1.0 - r), Label.HI: s * r}
        self.special_p = np.array([cfg.user_rate, cfg.hash_rate, cfg.url_rate, cfg.ne_rate, cfg.univ_rate])
        self.special_labels = (Label.USER, Label.HASH, Label.URL, Label.NE, Label.UNIV)

    def draw(self, lab: Label) -> str:
        lex = self.lex[lab]
        return lex[self.rng.choice(len(lex), p=self.weights[lab])]

    def meta_surface(self, lab: Label) -> str:
        if not self.cfg.raw_meta:
            return PLACEHOLDERS[lab]
        tag = "".join(self.rng.choice(list("abcdefghijklmnopqrstuvwxyz0123456789"), size=6))
        if lab is Label.USER:
            return "@" + tag
        if lab is Label.HASH:
            return "#" + self.draw(Label.EN if self.rng.random() < 0.5 else Label.HI) + tag[:2]
        return "https://t.co/" + tag

    def sentence(self) -> LabeledSentence:
        cfg, rng = self.cfg, self.rng
        n = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        lang = Label.EN if rng.random() < cfg.en_ratio else Label.HI
        started = False
        words, labels = [], []
        cum = np.cumsum(self.special_p)
        for i in range(n):
            u = rng.random()
            k = int(np.searchsorted(cum, u, side="right"))
            if k < len(self.special_labels):
                lab = self.special_labels[k]
                word = self.meta_surface(lab) if lab in PLACEHOLDERS else self.draw(lab)
            else:
                if started and rng.random() < self.p_leave[lang]:
                    lang = Label.HI if lang is Label.EN else Label.EN
                started = True
                lab = lang
                word = self.draw(lab)
                if i == 0 and rng.random() < cfg.capitalize_rate:
                    word = word[:1].upper() + word[1:]
            words.append(word)
            labels.append(lab)
        return LabeledSentence(words, labels)


def generate_synthetic_corpus(cfg: GeneratorConfig, seed: int) -> tuple[Corpus, Corpus]:
    """Return ``(pretrain, labeled)`` corpora drawn from the configured lexicons.

    Language words follow a two-state switching chain started from its stationary
    distribution, so the expected En share of language words equals ``en_ratio``.
    The pretraining side is emitted as raw text with placeholders already applied.
    """
    _validate_generator(cfg)
    rng = np.random.default_rng(seed)
    sampler = _Sampler(cfg, rng)
    labeled = tuple(sampler.sentence() for _ in range(cfg.n_labeled))
    pre = tuple(" ".join(normalize_sentence(sampler.sentence()).words) for _ in range(cfg.n_pretrain))
    return (
        Corpus(pre, f"synthetic-pretrain(seed={seed})", labeled=False),
        Corpus(labeled, f"synthetic-labeled(seed={seed})", labeled=True),
    )


def lexicon_label(cfg: GeneratorConfig, word: str) -> Label | None:
    """Recover a generated word's gold label by lexicon lookup."""
    meta = meta_label(word)
    if meta is not None:
        return meta
    key = word.casefold()
    for lab, lex in ((Label.EN, cfg.en_lexicon), (Label.HI, cfg.hi_lexicon),
                     (Label.NE, cfg.ne_lexicon), (Label.UNIV, cfg.univ_lexicon)):
        if any(key == w.casefold() for w in lex):
            return lab
    return None


def language_ratio(c: Corpus) -> float:
    """En share among En+Hi words."""
    d = label_distribution(c)
    denom = d[Label.EN] + d[Label.HI]
    return d[Label.EN] / denom if denom else math.nan
