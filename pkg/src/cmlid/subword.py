"""Subword vocabularies: BPE, byte-level BPE (BLBPE) and WordPiece.

All three trainers share one greedy merge loop. Pair counts are maintained
incrementally; the selected pair at every step is the same one a from-scratch
recount would pick, with ties broken on the ``(left, right)`` strings.

Unit conventions:

* BPE: characters, with ``</w>`` glued onto each word's final character.
* BLBPE: the 256 byte values rendered through a fixed printable map; every
  word is encoded with a leading space byte, so ``Ġ`` marks word starts.
* WordPiece: characters, with ``##`` on every non-initial unit.
"""

from __future__ import annotations

import enum
import hashlib
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .corpus import Corpus, tokenize_tweet

SPECIALS: tuple[str, ...] = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
N_SPECIALS = len(SPECIALS)
UNK_TEXT = "<unk>"
EOW = "</w>"
CONT = "##"
MIN_PAIR_COUNT = 2
FORMAT_VERSION = 1


class Scheme(str, enum.Enum):
    BPE = "BPE"
    BLBPE = "BLBPE"
    WORDPIECE = "WordPiece"

    def __str__(self) -> str:
        return self.value


class VocabError(ValueError):
    pass


class VocabBudgetTooSmall(VocabError):
    pass


class EmptyCorpus(VocabError):
    pass


class MalformedVocab(VocabError):
    pass


class SchemeMismatch(VocabError):
    pass


class DuplicateUnit(VocabError):
    pass


class DanglingMerge(VocabError):
    pass


# ----------------------------------------------------------------- byte map


def _byte_to_char() -> tuple[str, ...]:
    # printable bytes map to themselves; the rest are shifted past U+00FF
    keep = list(range(ord("!"), ord("~") + 1)) + list(range(0xA1, 0xAC + 1)) + list(range(0xAE, 0xFF + 1))
    table = {}
    extra = 0
    for b in range(256):
        if b in keep:
            table[b] = chr(b)
        else:
            table[b] = chr(256 + extra)
            extra += 1
    return tuple(table[b] for b in range(256))


BYTE_TO_CHAR: tuple[str, ...] = _byte_to_char()
CHAR_TO_BYTE: dict[str, int] = {c: b for b, c in enumerate(BYTE_TO_CHAR)}
BYTEMAP_HEADER = "".join(BYTE_TO_CHAR)

# pre-tokens for raw byte strings: optional single space + non-space run, or whitespace
_BYTE_PRETOKEN = re.compile(rb" ?[^\s]+|\s+(?!\S)|\s+")


def bytes_to_symbols(data: bytes) -> list[str]:
    return [BYTE_TO_CHAR[b] for b in data]


def symbols_to_bytes(symbols: Iterable[str]) -> bytes:
    return bytes(CHAR_TO_BYTE[ch] for s in symbols for ch in s)


# ------------------------------------------------------------ base splitting


def base_symbols(scheme: Scheme, word: str) -> list[str]:
    """Split one word into the scheme's base units, before any merge."""
    if scheme is Scheme.BPE:
        chars = list(word)
        chars[-1] = chars[-1] + EOW
        return chars
    if scheme is Scheme.BLBPE:
        return bytes_to_symbols((" " + word).encode("utf-8"))
    if scheme is Scheme.WORDPIECE:
        return [word[0]] + [CONT + c for c in word[1:]]
    raise ValueError(scheme)


def join_units(scheme: Scheme, left: str, right: str) -> str:
    if scheme is Scheme.WORDPIECE:
        return left + right[len(CONT):]
    return left + right


def apply_merge(symbols: list[str], pair: tuple[str, str], merged: str) -> list[str]:
    """Merge every non-overlapping occurrence of ``pair``, scanning left to right."""
    a, b = pair
    out: list[str] = []
    i = 0
    n = len(symbols)
    while i < n:
        if i + 1 < n and symbols[i] == a and symbols[i + 1] == b:
            out.append(merged)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


# ---------------------------------------------------------------- vocabulary


@dataclass(frozen=True)
class SubwordVocabulary:
    scheme: Scheme
    units: tuple[str, ...]
    merges: tuple[tuple[str, str], ...] = ()
    _index: dict = field(default=None, compare=False, repr=False)
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        object.__setattr__(self, "units", tuple(self.units))
        object.__setattr__(self, "merges", tuple(tuple(m) for m in self.merges))
        if self.units[:N_SPECIALS] != SPECIALS:
            raise MalformedVocab("specials must occupy the first five ids")
        index: dict[str, int] = {}
        for i, u in enumerate(self.units):
            if u in index:
                raise DuplicateUnit(f"unit {u!r} appears twice (ids {index[u]} and {i})")
            index[u] = i
        object.__setattr__(self, "_index", index)
        for a, b in self.merges:
            if a not in index or b not in index:
                raise DanglingMerge(f"merge ({a!r}, {b!r}) references an unknown unit")
            if join_units(self.scheme, a, b) not in index:
                raise DanglingMerge(f"merge ({a!r}, {b!r}) produces a unit missing from the table")
        if self.scheme is Scheme.BLBPE:
            missing = [c for c in BYTE_TO_CHAR if c not in index]
            if missing:
                raise MalformedVocab(f"BLBPE vocabulary lacks {len(missing)} byte units")

    def __len__(self) -> int:
        return len(self.units)

    def id_of(self, unit: str) -> int:
        return self._index.get(unit, UNK_ID)

    def __contains__(self, unit: str) -> bool:
        return unit in self._index

    @property
    def specials(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(SPECIALS)}


@dataclass
class Encoding:
    """Packed model input; ``M``/``N`` count content units of the two segments."""

    ids: list[int]
    word_index: list[int]
    segment_ids: list[int]
    attention_mask: list[int]
    M: int
    N: int
    T: int

    NO_WORD = -1


# ------------------------------------------------------------------ training


def _word_counts(corpus: Corpus | Iterable[Sequence[str]]) -> Counter:
    if isinstance(corpus, Corpus):
        lists = corpus.word_lists()
    else:
        lists = [tokenize_tweet(s) if isinstance(s, str) else s for s in corpus]
    counts: Counter = Counter()
    for words in lists:
        counts.update(w for w in words if w)
    return counts


def _learn_merges(
    scheme: Scheme,
    word_freqs: list[tuple[list[str], int]],
    units: list[str],
    target_size: int,
) -> list[tuple[str, str]]:
    """Greedy merge loop with incremental pair bookkeeping; extends ``units`` in place."""
    seqs = [list(s) for s, _ in word_freqs]
    freqs = [f for _, f in word_freqs]
    pair_count: Counter = Counter()
    pair_words: dict[tuple[str, str], set[int]] = defaultdict(set)
    unit_count: Counter = Counter()

    def account(i: int, sign: int) -> None:
        s, f = seqs[i], freqs[i]
        for u in s:
            unit_count[u] += sign * f
        for p in zip(s, s[1:]):
            pair_count[p] += sign * f
            if sign > 0:
                pair_words[p].add(i)

    for i in range(len(seqs)):
        account(i, +1)

    known = set(units)
    merges: list[tuple[str, str]] = []
    wordpiece = scheme is Scheme.WORDPIECE
    while len(units) < target_size:
        live = [(p, c) for p, c in pair_count.items() if c >= MIN_PAIR_COUNT]
        if not live:
            break
        if wordpiece:
            best = min(live, key=lambda pc: (-Fraction(pc[1], unit_count[pc[0][0]] * unit_count[pc[0][1]]), pc[0]))[0]
        else:
            best = min(live, key=lambda pc: (-pc[1], pc[0]))[0]
        merged = join_units(scheme, *best)
        for i in sorted(pair_words.pop(best, ())):
            if len(seqs[i]) < 2:
                continue
            account(i, -1)
            seqs[i] = apply_merge(seqs[i], best, merged)
            account(i, +1)
        for p in [p for p, c in pair_count.items() if c == 0]:
            del pair_count[p]
            pair_words.pop(p, None)
        merges.append(best)
        if merged not in known:
            known.add(merged)
            units.append(merged)
    return merges


def _train(scheme: Scheme, corpus, target_size: int) -> SubwordVocabulary:
    counts = _word_counts(corpus)
    if not counts:
        raise EmptyCorpus("cannot train a vocabulary on an empty corpus")
    # sorted so the word order (and hence everything downstream) is canonical
    word_freqs = [(base_symbols(scheme, w), f) for w, f in sorted(counts.items())]
    if scheme is Scheme.BLBPE:
        base = list(BYTE_TO_CHAR)
    else:
        base = sorted({u for s, _ in word_freqs for u in s})
    if target_size < N_SPECIALS + len(base):
        raise VocabBudgetTooSmall(
            f"target_size {target_size} cannot hold {N_SPECIALS} specials and {len(base)} base units"
        )
    units = list(SPECIALS) + base
    merges = _learn_merges(scheme, word_freqs, units, target_size)
    return SubwordVocabulary(scheme, tuple(units), tuple(merges))


def train_bpe(corpus, target_size: int) -> SubwordVocabulary:
    return _train(Scheme.BPE, corpus, target_size)


def train_blbpe(corpus, target_size: int) -> SubwordVocabulary:
    return _train(Scheme.BLBPE, corpus, target_size)


def train_wordpiece(corpus, target_size: int) -> SubwordVocabulary:
    return _train(Scheme.WORDPIECE, corpus, target_size)


TRAINERS: dict[Scheme, Callable[..., SubwordVocabulary]] = {
    Scheme.BPE: train_bpe,
    Scheme.BLBPE: train_blbpe,
    Scheme.WORDPIECE: train_wordpiece,
}


def train_vocab(scheme: Scheme | str, corpus, target_size: int) -> SubwordVocabulary:
    return TRAINERS[Scheme(scheme)](corpus, target_size)


# ---------------------------------------------------------- encode / decode


def _merge_symbols(vocab: SubwordVocabulary, symbols: list[str]) -> list[str]:
    for pair in vocab.merges:
        if len(symbols) < 2:
            break
        if pair[0] in symbols:
            symbols = apply_merge(symbols, pair, join_units(vocab.scheme, *pair))
    return symbols


def _wordpiece_units(vocab: SubwordVocabulary, word: str, max_chars: int = 100) -> list[str]:
    if len(word) > max_chars:
        return [SPECIALS[UNK_ID]]
    out: list[str] = []
    start = 0
    while start < len(word):
        end = len(word)
        piece = None
        while end > start:
            cand = word[start:end] if start == 0 else CONT + word[start:end]
            if cand in vocab:
                piece = cand
                break
            end -= 1
        if piece is None:
            return [SPECIALS[UNK_ID]]
        out.append(piece)
        start = end
    return out


def encode_word(vocab: SubwordVocabulary, word: str) -> list[int]:
    cached = vocab._cache.get(word)
    if cached is not None:
        return cached
    if vocab.scheme is Scheme.WORDPIECE:
        ids = [vocab.id_of(u) for u in _wordpiece_units(vocab, word)]
    else:
        ids = [vocab.id_of(u) for u in _merge_symbols(vocab, base_symbols(vocab.scheme, word))]
    vocab._cache[word] = ids
    return ids


def encode(vocab: SubwordVocabulary, words: Sequence[str] | str) -> tuple[list[int], list[int]]:
    """Encode a word sequence; returns ``(unit ids, source-word index per unit)``."""
    if isinstance(words, str):
        words = tokenize_tweet(words)
    ids: list[int] = []
    word_index: list[int] = []
    for i, w in enumerate(words):
        piece = encode_word(vocab, w)
        ids.extend(piece)
        word_index.extend([i] * len(piece))
    return ids, word_index


def _check_ids(vocab: SubwordVocabulary, ids: Sequence[int]) -> None:
    for i in ids:
        if not 0 <= i < len(vocab.units):
            raise VocabError(f"id {i} out of range for vocabulary of size {len(vocab.units)}")


def decode(vocab: SubwordVocabulary, ids: Sequence[int]) -> str:
    _check_ids(vocab, ids)
    if vocab.scheme is Scheme.BLBPE:
        data = decode_bytes(vocab, ids)
        if data.startswith(b" "):
            data = data[1:]
        return data.decode("utf-8", errors="replace")
    pieces: list[str] = []
    for i in ids:
        if i == UNK_ID:
            unit = UNK_TEXT
        elif i < N_SPECIALS:
            continue
        else:
            unit = vocab.units[i]
        if vocab.scheme is Scheme.WORDPIECE:
            if unit.startswith(CONT) and pieces:
                pieces.append(unit[len(CONT):])
            else:
                pieces.append((" " if pieces else "") + unit)
        else:
            pieces.append(unit)
    text = "".join(pieces)
    if vocab.scheme is Scheme.BPE:
        text = text.replace(EOW, " ").rstrip(" ")
    return text


def encode_bytes(vocab: SubwordVocabulary, data: bytes) -> list[int]:
    """Byte-level encoding of an arbitrary byte string (BLBPE only)."""
    if vocab.scheme is not Scheme.BLBPE:
        raise SchemeMismatch("byte encoding needs a BLBPE vocabulary")
    ids: list[int] = []
    for chunk in _BYTE_PRETOKEN.findall(data):
        key = ("bytes", chunk)
        piece = vocab._cache.get(key)
        if piece is None:
            piece = [vocab._index[u] for u in _merge_symbols(vocab, bytes_to_symbols(chunk))]
            vocab._cache[key] = piece
        ids.extend(piece)
    return ids


def decode_bytes(vocab: SubwordVocabulary, ids: Sequence[int]) -> bytes:
    if vocab.scheme is not Scheme.BLBPE:
        raise SchemeMismatch("byte decoding needs a BLBPE vocabulary")
    _check_ids(vocab, ids)
    out = bytearray()
    for i in ids:
        if i == UNK_ID:
            out += UNK_TEXT.encode()
        elif i >= N_SPECIALS:
            out += symbols_to_bytes(vocab.units[i])
    return bytes(out)


# ------------------------------------------------------------ serialization


def format_vocab(v: SubwordVocabulary) -> str:
    lines = [f"scheme={v.scheme.value} version={FORMAT_VERSION}"]
    if v.scheme is Scheme.BLBPE:
        lines.append("#bytemap\t" + BYTEMAP_HEADER)
    lines.extend(f"{u}\t{i}" for i, u in enumerate(v.units))
    lines.append("#merges")
    lines.extend(f"{a} {b}" for a, b in v.merges)
    return "\n".join(lines) + "\n"


def parse_vocab(text: str, expected_scheme: Scheme | str | None = None) -> SubwordVocabulary:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise MalformedVocab("empty vocabulary file")
    m = re.fullmatch(r"scheme=(\S+) version=(\d+)", lines[0])
    if not m:
        raise MalformedVocab(f"line 1: bad header {lines[0]!r}")
    try:
        scheme = Scheme(m.group(1))
    except ValueError:
        raise MalformedVocab(f"line 1: unknown scheme {m.group(1)!r}") from None
    if int(m.group(2)) != FORMAT_VERSION:
        raise MalformedVocab(f"line 1: unsupported version {m.group(2)}")
    if expected_scheme is not None and Scheme(expected_scheme) is not scheme:
        raise SchemeMismatch(f"expected a {Scheme(expected_scheme).value} vocabulary, file holds {scheme.value}")
    pos = 1
    if scheme is Scheme.BLBPE:
        if pos >= len(lines) or lines[pos] != "#bytemap\t" + BYTEMAP_HEADER:
            raise SchemeMismatch("line 2: BLBPE byte map missing or different from this build's map")
        pos += 1
    units: list[str] = []
    while pos < len(lines) and lines[pos] != "#merges":
        parts = lines[pos].split("\t")
        if len(parts) != 2 or not parts[1].isdigit():
            raise MalformedVocab(f"line {pos + 1}: expected 'token<TAB>id'")
        if int(parts[1]) != len(units):
            raise MalformedVocab(f"line {pos + 1}: ids must be contiguous from 0")
        if parts[0] in units:
            raise DuplicateUnit(f"line {pos + 1}: duplicate unit {parts[0]!r}")
        units.append(parts[0])
        pos += 1
    if pos >= len(lines):
        raise MalformedVocab("missing '#merges' section")
    merges = []
    for k in range(pos + 1, len(lines)):
        parts = lines[k].split(" ")
        if len(parts) != 2 or not all(parts):
            raise MalformedVocab(f"line {k + 1}: expected 'left right'")
        merges.append((parts[0], parts[1]))
    return SubwordVocabulary(scheme, tuple(units), tuple(merges))


def serialize_vocab(v: SubwordVocabulary, path: str | Path) -> None:
    Path(path).write_text(format_vocab(v), encoding="utf-8")


def load_vocab(path: str | Path, expected_scheme: Scheme | str | None = None) -> SubwordVocabulary:
    return parse_vocab(Path(path).read_text(encoding="utf-8"), expected_scheme)


def vocab_hash(v: SubwordVocabulary) -> str:
    return hashlib.sha256(format_vocab(v).encode("utf-8")).hexdigest()
