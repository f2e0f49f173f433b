"""Acceptance checks, one test per criterion (criterion 7 has one case per table row).

Each result is also listed under "acceptance criteria" in the pytest terminal summary.
"""

import random
import time
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np
import pytest

from cmlid import cli
from cmlid.corpus import GeneratorConfig, generate_synthetic_corpus
from cmlid.evaluation import ConfusionMatrix, micro_scores, parse_json_report, per_label_metrics
from cmlid.model import IGNORE, Batch, init_params, loss_and_grads, preset
from cmlid.pipeline import load_experiment, run_experiment
from cmlid.subword import N_SPECIALS, Encoding, Scheme, decode_bytes, encode_bytes, train_vocab
from cmlid.training import (
    MaskingPolicy,
    PretrainObjective,
    TrainHyper,
    finetune,
    mask_array,
    pack_sequence,
    pretrain,
)

from .oracles import brute_force_merges, brute_force_metrics, gradient_check

ROOT = Path(__file__).resolve().parent.parent
MATRIX = ["baseline1-tiny", "baseline2-tiny", "model3-tiny", "model4-tiny"]


def criterion(n):
    return pytest.mark.criterion(n)


def _base_size(scheme: str, corpus) -> int:
    words = {w for s in corpus for w in s}
    if scheme == "BLBPE":
        return 5 + 256
    if scheme == "WordPiece":
        units = {u for w in words for u in [w[0]] + ["##" + c for c in w[1:]]}
    else:
        units = {u for w in words for u in list(w[:-1]) + [w[-1] + "</w>"]}
    return 5 + len(units)


@criterion(1)
def test_c01_trainers_match_brute_force_oracle():
    rng = random.Random(1)
    t0 = time.perf_counter()
    for _ in range(100):
        alphabet = rng.sample("abcdefghijklmnopqrstuvwxyz", rng.randint(2, 12))
        vocab_words = list({"".join(rng.choices(alphabet, k=rng.randint(1, 7))) for _ in range(rng.randint(1, 50))})
        corpus = [rng.choices(vocab_words, k=rng.randint(1, 12)) for _ in range(rng.randint(1, 10))]
        for scheme in ("BPE", "BLBPE", "WordPiece"):
            size = _base_size(scheme, corpus) + rng.randint(0, 60)
            got = list(train_vocab(scheme, corpus, size).merges)
            assert got == brute_force_merges(scheme, corpus, size), (scheme, corpus, size)
    assert time.perf_counter() - t0 < 60


@criterion(2)
def test_c02_byte_level_round_trip():
    cfg = GeneratorConfig.default(n_pretrain=200, n_labeled=1)
    pre, _ = generate_synthetic_corpus(cfg, 0)
    vocab = train_vocab(Scheme.BLBPE, pre.word_lists(), 600)
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    for i in range(10_000):
        n = int(rng.integers(0, 257))
        if i % 3 == 0:
            # bias some strings towards ASCII text so learned merges actually fire
            data = bytes(rng.choice(list(b"abcdehiklmnorstuy  "), n).tolist())
        else:
            data = rng.integers(0, 256, n, dtype=np.uint8).tobytes()
        assert decode_bytes(vocab, encode_bytes(vocab, data)) == data
    assert time.perf_counter() - t0 < 30


@criterion(3)
def test_c03_masking_statistics():
    cfg = GeneratorConfig.default(n_pretrain=20_000, n_labeled=1)
    pre, _ = generate_synthetic_corpus(cfg, 3)
    vocab = train_vocab(Scheme.BLBPE, pre.word_lists()[:2000], 500)
    encs = []
    content = 0
    for words in pre.word_lists():
        e = pack_sequence(vocab, words, None, 64)
        encs.append(e)
        content += e.M
        if content >= 100_000:
            break
    ids = np.array([e.ids for e in encs])
    selectable = np.array([e.word_index for e in encs]) != Encoding.NO_WORD
    assert selectable.sum() >= 100_000
    out, targets = mask_array(ids, selectable, MaskingPolicy(), len(vocab), np.random.default_rng(3))
    sel = targets != IGNORE
    frac = sel.sum() / selectable.sum()
    masked = (out[sel] == 4).mean()
    kept = (out[sel] == ids[sel]).mean()
    randomised = 1.0 - masked - kept
    print(f"selected {frac:.4f} mask {masked:.4f} random {randomised:.4f} keep {kept:.4f}")
    assert 0.146 <= frac <= 0.154
    assert abs(masked - 0.8) <= 0.01 and abs(randomised - 0.1) <= 0.01 and abs(kept - 0.1) <= 0.01
    special_ids = [0, 2, 3]
    assert int(np.isin(ids[sel], special_ids).sum()) == 0
    replaced = sel & (out != ids) & (out != 4)
    assert out[replaced].min() >= N_SPECIALS


@criterion(4)
@pytest.mark.parametrize("kind", ["mlm", "nsp", "token_cls"])
def test_c04_gradient_check(kind):
    cfg = preset("tiny", vocab_size=60, dropout_rate=0.0)
    rng = np.random.default_rng(4)
    params = {k: v + rng.normal(0, 0.3, v.shape) for k, v in init_params(cfg, 4).items()}
    B, T = 3, 12
    ids = rng.integers(5, 60, (B, T))
    mask = np.ones((B, T), dtype=int)
    mask[0, -3:] = 0
    ids[mask == 0] = 0
    seg = np.zeros((B, T), dtype=int)
    seg[:, 6:] = 1
    seg[mask == 0] = 0
    mlm = np.where((rng.random((B, T)) < 0.5) & (mask == 1), rng.integers(5, 60, (B, T)), IGNORE)
    mlm[1, 2] = 9
    lab = np.where(mask == 1, rng.integers(0, 7, (B, T)), IGNORE)
    batch = Batch(ids, seg, mask, mlm, np.array([0, 1, 1]), lab)
    _, _, grads = loss_and_grads(params, cfg, batch, (kind,))
    f = lambda p: loss_and_grads(p, cfg, batch, (kind,))[0]
    t0 = time.perf_counter()
    # 2 entries in each of the ~37 tensors: well over 50 parameters per loss
    worst = gradient_check(params, grads, f, 2, rng, h=1e-4)
    print(f"{kind}: worst relative error {worst:.2e} over {2 * len(params)} parameters")
    assert 2 * len(params) >= 50
    assert worst <= 1e-4
    assert time.perf_counter() - t0 < 120


@pytest.fixture(scope="module")
def smoke_data():
    cfg = GeneratorConfig.default(n_pretrain=8, n_labeled=20, min_len=4, max_len=10)
    pre, labeled = generate_synthetic_corpus(cfg, 5)
    vocab = train_vocab(Scheme.BLBPE, [w for c in (pre, labeled) for w in c.word_lists()], 400)
    return pre, labeled, vocab


@criterion(5)
def test_c05_overfit_finetune(smoke_data):
    _, labeled, vocab = smoke_data
    cfg = preset("tiny", vocab_size=len(vocab))
    t0 = time.perf_counter()
    clf = finetune(None, labeled, vocab, cfg, TrainHyper(lr=1e-3, batch_size=8, max_steps=300), 0)
    print(f"train word accuracy {clf.train_accuracy:.4f}")
    assert clf.train_accuracy >= 0.99
    assert time.perf_counter() - t0 < 180


@criterion(5)
def test_c05_overfit_pretrain(smoke_data):
    pre, _, vocab = smoke_data
    cfg = preset("tiny", vocab_size=len(vocab))
    t0 = time.perf_counter()
    res = pretrain(pre, vocab, cfg, PretrainObjective.MLM_ONLY, TrainHyper(lr=1e-3, batch_size=8, max_steps=300), 0)
    first, last = np.mean(res.losses[:10]), np.mean(res.losses[-10:])
    print(f"MLM loss {first:.3f} -> {last:.3f}")
    assert last <= 0.5 * first
    assert time.perf_counter() - t0 < 180


@criterion(6)
def test_c06_metrics_match_recount():
    rng = np.random.default_rng(6)
    for _ in range(1000):
        counts = rng.integers(0, 9, size=(7, 7)) * (rng.random((7, 7)) < 0.7)
        cm = ConfusionMatrix(counts)
        got = per_label_metrics(cm)
        want = brute_force_metrics(counts)
        assert got.per_label == want["per_label"]
        assert got.weighted == want["weighted"]
        assert got.accuracy == want["accuracy"]
        assert micro_scores(cm).recall == got.accuracy


# published precision, recall and F-score per class, and the overall row
TABLE4_ROWS = {
    "English": (0.97, 0.82, "0.89"),
    "Hindi": (0.37, 0.89, "0.52"),
    "Universal": (0.56, 0.82, "0.66"),
    "Named Entities": (0.81, 0.14, "0.24"),
    "Overall": (0.90, 0.82, "0.84"),
}


@criterion(7)
@pytest.mark.parametrize("row", list(TABLE4_ROWS))
def test_c07_reported_f1_consistency(row):
    p, r, reported = TABLE4_ROWS[row]
    f1 = 2 * p * r / (p + r)
    rounded = str(Decimal(repr(f1)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))
    print(f"{row}: 2PR/(P+R) = {f1:.4f} -> {rounded}, reported {reported}")
    assert rounded == reported


@criterion(8)
def test_c08_pack_budget_exhaustive():
    vocab = train_vocab(Scheme.BPE, [["x"]], 7)
    for T in (8, 16, 32):
        for m in range(1, 33):
            for n in range(0, 33):
                enc = pack_sequence(vocab, ["x"] * m, ["x"] * n if n else None, T)
                assert enc.M + enc.N < T
                assert enc.ids[0] == 2 and enc.ids[enc.M + 1] == 3
                if n:
                    assert enc.ids[enc.M + enc.N + 2] == 3
                    assert set(enc.segment_ids[enc.M + 2:enc.M + enc.N + 3]) == {1}
                assert len(enc.ids) == T


def _run_matrix(out: Path, seed: int = 0) -> float:
    t0 = time.perf_counter()
    for name in MATRIX:
        code = cli.main(["run", "--config", str(ROOT / "configs" / f"{name}.cfg"), "--out", str(out),
                         "--seed", str(seed)])
        assert code == 0, name
    return time.perf_counter() - t0


@pytest.fixture(scope="module")
def matrix_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("matrix")
    return out, _run_matrix(out)


def _names():
    return [load_experiment(ROOT / "configs" / f"{n}.cfg").name for n in MATRIX]


@criterion(9)
def test_c09_end_to_end_matrix(matrix_run, capsys):
    out, elapsed = matrix_run
    reports = []
    for name in _names():
        d = out / name / "0"
        md = (d / "report.md").read_text(encoding="utf-8")
        assert "| Model | P En | P Hi | P Avr |" in md
        assert "| Overall |" in md and "| Named Entities |" in md
        assert "| Model | Precision | Recall | F-score |" in md
        reports.append(str(d / "report.json"))
    assert cli.main(["compare", *reports, "--out", str(out / "compare.md")]) == 0
    text = (out / "compare.md").read_text(encoding="utf-8")
    assert all(f"{i}. " in text for i in range(1, 5))
    with capsys.disabled():
        print(f"\nmatrix finished in {elapsed:.1f}s\n{text}")
    assert elapsed < 600


@criterion(10)
def test_c10_pretraining_helps_trend(matrix_run):
    out, _ = matrix_run
    configs = {n: load_experiment(ROOT / "configs" / f"{n}.cfg") for n in ("baseline1-tiny", "baseline2-tiny", "model4-tiny")}
    f1 = {n: {} for n in configs}
    for seed in range(5):
        for n, cfg in configs.items():
            path = out / cfg.name / str(seed) / "report.json"
            if seed == 0 and path.exists():
                f1[n][seed] = parse_json_report(path.read_text(encoding="utf-8")).weighted.f1
            else:
                f1[n][seed] = run_experiment(cfg, seed, out).report.weighted.f1
    wins = {}
    for base in ("baseline1-tiny", "baseline2-tiny"):
        wins[base] = sum(f1["model4-tiny"][s] >= f1[base][s] for s in range(5))
    for s in range(5):
        print(f"seed {s}: " + "  ".join(f"{n} {f1[n][s]:.4f}" for n in configs))
    print(f"Model4 >= baseline in {wins} of 5 seeds")
    assert all(w >= 4 for w in wins.values())


@criterion(11)
def test_c11_matrix_is_byte_reproducible(matrix_run, tmp_path):
    out, _ = matrix_run
    _run_matrix(tmp_path)
    for name in _names():
        for f in ("report.json", "report.md", "vocab.txt", "checkpoint.bin", "train.log"):
            a = (out / name / "0" / f).read_bytes()
            b = (tmp_path / name / "0" / f).read_bytes()
            assert a == b, f"{name}/{f}"
