"""Sequence packing, MLM masking, NSP pairs, AdamW and the two training loops."""

from __future__ import annotations

import enum
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corpus import LABEL_INDEX, LABELS, Corpus, Label
from .model import (
    IGNORE,
    Batch,
    ModelConfig,
    ModelError,
    Params,
    init_params,
    loss_and_grads,
    predict_labels,
    save_checkpoint,
)
from .subword import (
    CLS_ID,
    MASK_ID,
    N_SPECIALS,
    PAD_ID,
    SEP_ID,
    Encoding,
    SubwordVocabulary,
    encode,
    vocab_hash,
)

log = logging.getLogger(__name__)


class TrainingError(ValueError):
    pass


class NonFiniteGradient(TrainingError):
    pass


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# ------------------------------------------------------------------ packing


def pack_sequence(vocab: SubwordVocabulary, seg1_words: Sequence[str], seg2_words: Sequence[str] | None,
                  T: int) -> Encoding:
    """Lay out ``[CLS] seg1 [SEP] (seg2 [SEP])`` padded to ``T``.

    Units are dropped from the end of the longer segment (the second one on
    ties) until the specials fit, which also guarantees ``M + N < T``.
    """
    if T < 8:
        raise TrainingError(f"T must be at least 8, got {T}")
    ids1, wi1 = encode(vocab, list(seg1_words))
    ids2, wi2 = encode(vocab, list(seg2_words)) if seg2_words else ([], [])
    if not ids1 or (seg2_words is not None and len(seg2_words) and not ids2):
        raise TrainingError("a segment encodes to zero units")
    two = bool(seg2_words)
    budget = T - (3 if two else 2)
    M, N = len(ids1), len(ids2)
    while M + N > budget:
        if M > N:
            M -= 1
        else:
            N -= 1
    ids = [CLS_ID] + ids1[:M] + [SEP_ID]
    word_index = [Encoding.NO_WORD] + wi1[:M] + [Encoding.NO_WORD]
    segment_ids = [0] * len(ids)
    if two:
        ids += ids2[:N] + [SEP_ID]
        word_index += wi2[:N] + [Encoding.NO_WORD]
        segment_ids += [1] * (N + 1)
    n_real = len(ids)
    pad = T - n_real
    return Encoding(
        ids=ids + [PAD_ID] * pad,
        word_index=word_index + [Encoding.NO_WORD] * pad,
        segment_ids=segment_ids + [0] * pad,
        attention_mask=[1] * n_real + [0] * pad,
        M=M,
        N=N,
        T=T,
    )


# ------------------------------------------------------------------ masking


@dataclass(frozen=True)
class MaskingPolicy:
    select_prob: float = 0.15
    mask_frac: float = 0.8
    random_frac: float = 0.1
    keep_frac: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.select_prob < 1.0:
            raise TrainingError(f"select_prob must lie in [0, 1), got {self.select_prob}")
        fr = (self.mask_frac, self.random_frac, self.keep_frac)
        if min(fr) < 0 or not math.isclose(sum(fr), 1.0, abs_tol=1e-12):
            raise TrainingError("mask/random/keep fractions must be non-negative and sum to 1")


def mask_array(ids: np.ndarray, selectable: np.ndarray, policy: MaskingPolicy, vocab_size: int,
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    ids = np.asarray(ids)
    selected = selectable & (rng.random(ids.shape) < policy.select_prob)
    action = rng.random(ids.shape)
    replace_mask = selected & (action < policy.mask_frac)
    replace_rand = selected & (action >= policy.mask_frac) & (action < policy.mask_frac + policy.random_frac)
    random_ids = rng.integers(N_SPECIALS, vocab_size, size=ids.shape) if vocab_size > N_SPECIALS else ids
    out = np.where(replace_mask, MASK_ID, np.where(replace_rand, random_ids, ids))
    targets = np.where(selected, ids, IGNORE)
    return out, targets


def mask_tokens(enc: Encoding, policy: MaskingPolicy, vocab: SubwordVocabulary, rng_seed) -> tuple[list[int], list[int]]:
    """Return ``(masked ids, mlm targets)``; specials and padding are never selected."""
    ids = np.asarray(enc.ids)
    selectable = np.asarray(enc.word_index) != Encoding.NO_WORD
    out, targets = mask_array(ids, selectable, policy, len(vocab), _rng(rng_seed))
    return out.tolist(), targets.tolist()


def make_nsp_pairs(sentences: Sequence, rng_seed, next_prob: float = 0.5) -> list[tuple[object, object, int]]:
    if len(sentences) < 2:
        raise TrainingError("next-sentence pairs need at least 2 sentences")
    rng = _rng(rng_seed)
    n = len(sentences)
    pairs = []
    for i in range(n - 1):
        if rng.random() < next_prob:
            pairs.append((sentences[i], sentences[i + 1], 1))
        else:
            j = int(rng.integers(n))
            while j == i + 1:
                j = int(rng.integers(n))
            pairs.append((sentences[i], sentences[j], 0))
    return pairs


# ------------------------------------------------------------------- AdamW


@dataclass
class OptimizerState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


def init_optimizer(params: Params, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8, weight_decay: float = 0.01) -> OptimizerState:
    return OptimizerState(
        step=0,
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
        lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay,
    )


def adamw_step(params: Params, grads: dict[str, np.ndarray], state: OptimizerState, lr: float | None = None,
               decay: Callable[[str], bool] | None = None) -> tuple[Params, OptimizerState]:
    """One AdamW update with decoupled weight decay; inputs are left untouched.

    ``decay(name)`` selects which tensors are decayed (all of them by default).
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in {name!r}; step rejected")
    lr = state.lr if lr is None else lr
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if decay is None or decay(name):
            update = update + state.weight_decay * p
        new_params[name] = p - lr * update
        new_m[name], new_v[name] = m, v
    return new_params, OptimizerState(t, new_m, new_v, state.lr, b1, b2, state.eps, state.weight_decay)


def default_decay(name: str) -> bool:
    """Biases and layernorm gains/shifts are not decayed."""
    return not name.endswith((".b", ".g"))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


def warmup_lr(step: int, total: int, base_lr: float, warmup_frac: float) -> float:
    """Linear warmup over the first ``warmup_frac`` of steps, then constant."""
    warm = int(math.ceil(warmup_frac * total))
    if warm <= 0 or step >= warm:
        return base_lr
    return base_lr * (step + 1) / warm


# ------------------------------------------------------------ shared loop bits


class PretrainObjective(str, enum.Enum):
    MLM_PLUS_NSP = "MLM_plus_NSP"
    MLM_ONLY = "MLM_only"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 3e-4
    batch_size: int = 16
    epochs: int = 1
    # when set, the data is cycled epoch after epoch until this many steps ran
    max_steps: int | None = None
    warmup_frac: float = 0.1
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    masking: MaskingPolicy = field(default_factory=MaskingPolicy)


@dataclass
class TrainResult:
    params: Params
    config: ModelConfig
    vocab_sha256: str
    history: list[tuple[int, float, float]] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def losses(self) -> list[float]:
        return [h[1] for h in self.history]

    def save(self, path, meta: dict | None = None) -> None:
        save_checkpoint(path, self.params, self.config, self.vocab_sha256, meta)

    def write_log(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for step, value, lr in self.history:
                fh.write(f"{step}\t{value!r}\t{lr!r}\n")


def _length_grouped_batches(lengths: Sequence[int], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Batches of similar length, in a seeded random order."""
    jitter = rng.permutation(len(lengths))
    order = sorted(range(len(lengths)), key=lambda i: (lengths[i], jitter[i]))
    batches = [order[k:k + batch_size] for k in range(0, len(order), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def _stack(encs: Sequence[Encoding]):
    width = max(sum(e.attention_mask) for e in encs)
    ids = np.array([e.ids[:width] for e in encs])
    seg = np.array([e.segment_ids[:width] for e in encs])
    mask = np.array([e.attention_mask[:width] for e in encs])
    return ids, seg, mask, width


def _check_vocab(vocab: SubwordVocabulary, cfg: ModelConfig) -> None:
    if len(vocab) != cfg.vocab_size:
        raise TrainingError(f"vocabulary has {len(vocab)} units but the model expects {cfg.vocab_size}")


def _optimize(params, cfg, hyper, batches_for_epoch, kinds, seed, total_steps, hook=None):
    """Run ``total_steps`` AdamW steps, cycling epochs; ``hook(step, loss, lr, grads, params)``."""
    state = init_optimizer(params, hyper.lr, hyper.beta1, hyper.beta2, hyper.eps, hyper.weight_decay)
    drop_rng = np.random.default_rng((seed, 7))
    history: list[tuple[int, float, float]] = []
    step = 0
    epoch = 0
    while step < total_steps:
        for batch in batches_for_epoch(epoch):
            if step >= total_steps:
                break
            lr = warmup_lr(step, total_steps, hyper.lr, hyper.warmup_frac)
            value, _, grads = loss_and_grads(params, cfg, batch, kinds, train=True, rng=drop_rng)
            clip_global_norm(grads, hyper.clip_norm)
            params, state = adamw_step(params, grads, state, lr=lr, decay=default_decay)
            history.append((step, value, lr))
            if hook is not None:
                hook(step, value, lr, grads, params)
            step += 1
        epoch += 1
    return params, history


def _total_steps(hyper: TrainHyper, n_batches: int) -> int:
    return hyper.max_steps if hyper.max_steps is not None else hyper.epochs * n_batches


# ------------------------------------------------------------------ pretrain


def pretrain(corpus: Corpus | Sequence[Sequence[str]], vocab: SubwordVocabulary, config: ModelConfig,
             objective: PretrainObjective | str, hyper: TrainHyper, seed: int,
             on_step: Callable | None = None, init: Params | None = None) -> TrainResult:
    """Masked-LM pretraining, optionally joined by next-sentence prediction.

    Masks (and NSP pairings) are redrawn every epoch from ``(seed, epoch)``.
    """
    objective = PretrainObjective(objective)
    _check_vocab(vocab, config)
    sentences = corpus.word_lists() if isinstance(corpus, Corpus) else [list(s) for s in corpus]
    sentences = [s for s in sentences if s]
    if not sentences:
        raise TrainingError("pretraining corpus is empty")
    if objective is PretrainObjective.MLM_PLUS_NSP and len(sentences) < 2:
        raise TrainingError("MLM_plus_NSP needs at least 2 sentences")
    kinds = ("mlm", "nsp") if objective is PretrainObjective.MLM_PLUS_NSP else ("mlm",)
    params = init if init is not None else init_params(config, seed)
    single = [pack_sequence(vocab, s, None, config.T) for s in sentences]
    n_examples = len(sentences) - 1 if objective is PretrainObjective.MLM_PLUS_NSP else len(sentences)
    n_batches = math.ceil(n_examples / hyper.batch_size)

    def batches_for_epoch(epoch: int):
        rng = np.random.default_rng((seed, epoch))
        if objective is PretrainObjective.MLM_PLUS_NSP:
            pairs = make_nsp_pairs(list(range(len(sentences))), rng)
            encs = [pack_sequence(vocab, sentences[a], sentences[b], config.T) for a, b, _ in pairs]
            nsp = [lab for _, _, lab in pairs]
        else:
            encs = single
            nsp = None
        order = _length_grouped_batches([sum(e.attention_mask) for e in encs], hyper.batch_size, rng)
        for idx in order:
            chunk = [encs[i] for i in idx]
            ids, seg, mask, width = _stack(chunk)
            selectable = np.array([e.word_index[:width] for e in chunk]) != Encoding.NO_WORD
            masked, targets = mask_array(ids, selectable, hyper.masking, len(vocab), rng)
            yield Batch(masked, seg, mask, mlm_targets=targets,
                        nsp_targets=np.array([nsp[i] for i in idx]) if nsp is not None else None)

    total = _total_steps(hyper, n_batches)
    hook = None if on_step is None else (lambda st, v, lr, g, p: on_step(st, v, lr, g))
    params, history = _optimize(params, config, hyper, batches_for_epoch, kinds, seed, total, hook)
    log.info("pretrain %s: %d steps, loss %.4f -> %.4f", objective.value, len(history),
             history[0][1] if history else float("nan"), history[-1][1] if history else float("nan"))
    return TrainResult(params, config, vocab_hash(vocab), history, {"objective": objective.value})


# ------------------------------------------------------------------ finetune


def label_targets(enc: Encoding, labels: Sequence[Label]) -> list[int]:
    """Each word's label sits on its first unit; continuations, specials and pads are ignored."""
    out = [IGNORE] * len(enc.ids)
    seen = set()
    for pos, wi in enumerate(enc.word_index):
        if wi == Encoding.NO_WORD or enc.segment_ids[pos] != 0 or wi in seen:
            continue
        seen.add(wi)
        out[pos] = LABEL_INDEX[Label(labels[wi])]
    return out


@dataclass
class Classifier:
    params: Params
    config: ModelConfig
    vocab: SubwordVocabulary
    fallback: Label = Label.EN
    history: list[tuple[int, float, float]] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    train_accuracy: float = float("nan")

    def predict(self, sentences: Sequence[Sequence[str]], batch_size: int = 64) -> list[list[Label]]:
        return predict(self, sentences, batch_size)

    def save(self, path, meta: dict | None = None) -> None:
        meta = dict(meta or {})
        meta["fallback_label"] = self.fallback.value
        save_checkpoint(path, self.params, self.config, vocab_hash(self.vocab), meta)


def predict(clf: Classifier, sentences: Sequence[Sequence[str]], batch_size: int = 64,
            T: int | None = None) -> list[list[Label]]:
    """Label every word by the argmax over its first unit's logits.

    Words whose units were truncated away get ``clf.fallback``.
    """
    T = T or clf.config.T
    encs = [pack_sequence(clf.vocab, s, None, T) for s in sentences]
    out: list[list[Label]] = [[clf.fallback] * len(s) for s in sentences]
    for start in range(0, len(encs), batch_size):
        chunk = encs[start:start + batch_size]
        ids = np.array([e.ids for e in chunk])
        seg = np.array([e.segment_ids for e in chunk])
        mask = np.array([e.attention_mask for e in chunk])
        pred = predict_labels(clf.params, clf.config, Batch(ids, seg, mask))
        for r, e in enumerate(chunk):
            row = out[start + r]
            seen = set()
            for pos, wi in enumerate(e.word_index):
                if wi == Encoding.NO_WORD or wi in seen:
                    continue
                seen.add(wi)
                row[wi] = LABELS[int(pred[r, pos])]
    return out


def word_accuracy(clf: Classifier, corpus: Corpus) -> float:
    preds = predict(clf, [s.words for s in corpus.sentences])
    total = sum(len(s) for s in corpus.sentences)
    hits = sum(p == g for s, ps in zip(corpus.sentences, preds) for p, g in zip(ps, s.labels))
    return hits / total if total else float("nan")


def finetune(init: Params | None, labeled: Corpus, vocab: SubwordVocabulary, config: ModelConfig,
             hyper: TrainHyper, seed: int, val: Corpus | None = None,
             on_step: Callable | None = None) -> Classifier:
    """Token-classification fine-tuning from a pretrained encoder or from scratch.

    The label head is always freshly initialised.
    """
    _check_vocab(vocab, config)
    if not labeled.labeled or len(labeled) == 0:
        raise TrainingError("fine-tuning needs a non-empty labeled corpus")
    if config.n_labels != len(LABELS):
        raise ModelError(f"classifier needs n_labels={len(LABELS)}")
    fresh = init_params(config, seed)
    if init is None:
        params = fresh
    else:
        params = {k: v.copy() for k, v in init.items()}
        params["cls.w"], params["cls.b"] = fresh["cls.w"], fresh["cls.b"]
    sents = labeled.sentences
    encs = [pack_sequence(vocab, s.words, None, config.T) for s in sents]
    targets = [label_targets(e, s.labels) for e, s in zip(encs, sents)]
    counts = Counter(lab for s in sents for lab in s.labels)
    fallback = min(counts, key=lambda lab: (-counts[lab], LABEL_INDEX[lab]))
    n_batches = math.ceil(len(encs) / hyper.batch_size)
    clf = Classifier(params, config, vocab, fallback)

    def batches_for_epoch(epoch: int):
        rng = np.random.default_rng((seed, epoch))
        order = _length_grouped_batches([sum(e.attention_mask) for e in encs], hyper.batch_size, rng)
        for idx in order:
            chunk = [encs[i] for i in idx]
            ids, seg, mask, width = _stack(chunk)
            lt = np.array([targets[i][:width] for i in idx])
            yield Batch(ids, seg, mask, label_targets=lt)

    total = _total_steps(hyper, n_batches)

    def hook(step, value, lr, grads, params):
        if on_step is not None:
            on_step(step, value, lr, grads)
        if val is not None and (step + 1) % n_batches == 0:
            clf.params = params
            clf.val_accuracy.append(word_accuracy(clf, val))

    clf.params, clf.history = _optimize(params, config, hyper, batches_for_epoch, ("token_cls",), seed, total, hook)
    clf.train_accuracy = word_accuracy(clf, labeled)
    log.info("finetune: %d steps, train word accuracy %.4f", len(clf.history), clf.train_accuracy)
    return clf
