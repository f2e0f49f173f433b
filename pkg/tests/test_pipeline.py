import json
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from cmlid import cli
from cmlid.corpus import GeneratorConfig, generate_synthetic_corpus, split_corpus, write_labeled_corpus, write_raw_corpus
from cmlid.kvconfig import ConfigError, read_kv_config
from cmlid.pipeline import casing_transform, load_experiment, run_experiment
from cmlid.subword import Scheme

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"


def test_casing_examples():
    assert casing_transform("Modi JI", "uncased") == "modi ji"
    assert casing_transform("Modi JI", "cased") == "Modi JI"
    assert casing_transform("<user>", "uncased") == "<user>"
    with pytest.raises(ConfigError):
        casing_transform("x", "title")


@given(st.text())
def test_uncased_is_idempotent(s):
    once = casing_transform(s, "uncased")
    assert casing_transform(once, "uncased") == once
    assert casing_transform(s, "cased") == s


def test_shipped_configs_mirror_the_matrix():
    want = {
        "baseline1-tiny": ("uncased", None, Scheme.WORDPIECE),
        "baseline2-tiny": ("cased", None, Scheme.WORDPIECE),
        "model3-tiny": ("cased", "pretrain_hi_en_ur.txt", Scheme.WORDPIECE),
        "model4-tiny": ("cased", "pretrain_hi_en_ur.txt", Scheme.BLBPE),
    }
    names = set()
    for stem, (casing, pre, scheme) in want.items():
        cfg = load_experiment(CONFIGS / f"{stem}.cfg")
        cfg.validate()
        assert cfg.casing == casing and cfg.vocab_scheme is scheme
        assert (cfg.pretrain_source.name if cfg.pretrain_source else None) == pre
        names.add(cfg.name)
    assert len(names) == 4
    assert load_experiment(CONFIGS / "model4-tiny.cfg").objective.value == "MLM_only"


def test_english_pretrained_baseline_variant():
    cfg = load_experiment(CONFIGS / "baseline1-en-tiny.cfg")
    assert cfg.casing == "uncased" and cfg.pretrain_source.name == "pretrain_en.txt"


def test_include_and_cycle(tmp_path):
    (tmp_path / "a.cfg").write_text("x = 1\ny = 2\n")
    (tmp_path / "b.cfg").write_text("include = a.cfg\ny = 3\n")
    kv = read_kv_config(tmp_path / "b.cfg")
    assert kv["x"] == "1" and kv["y"] == "3"
    (tmp_path / "c.cfg").write_text("include = d.cfg\n")
    (tmp_path / "d.cfg").write_text("include = c.cfg\n")
    with pytest.raises(ConfigError):
        read_kv_config(tmp_path / "c.cfg")


@pytest.fixture(scope="module")
def mini(tmp_path_factory):
    d = tmp_path_factory.mktemp("mini")
    gen = GeneratorConfig.default(n_pretrain=40, n_labeled=60, ne_rate=0.1, user_rate=0.08,
                                  hash_rate=0.08, url_rate=0.08, univ_rate=0.1)
    pre, labeled = generate_synthetic_corpus(gen, 3)
    train, test = split_corpus(labeled, 0.5, 3)
    write_raw_corpus(pre, d / "pre.txt")
    write_labeled_corpus(train, d / "train.tsv")
    write_labeled_corpus(test, d / "test.tsv")
    common = ("model_T = 24\nvocab_size = 300\ntrain_corpus = train.tsv\ntest_corpus = test.tsv\n"
              "pretrain_max_steps = 4\nfinetune_max_steps = 6\npretrain_batch_size = 8\nfinetune_batch_size = 8\n")
    (d / "common.cfg").write_text(common)
    (d / "m4.cfg").write_text("include = common.cfg\nname = M4\ncasing = cased\npretrain_source = pre.txt\n"
                              "vocab_scheme = BLBPE\nobjective = MLM_only\n")
    (d / "b1.cfg").write_text("include = common.cfg\nname = B1\ncasing = uncased\npretrain_source = none\n"
                              "vocab_scheme = WordPiece\n")
    (d / "bad.cfg").write_text("include = common.cfg\nname = Bad\npretrain_source = missing.txt\n"
                               "vocab_scheme = BPE\n")
    return d


def test_run_writes_artifacts(mini, tmp_path):
    res = run_experiment(load_experiment(mini / "m4.cfg"), 0, tmp_path)
    d = tmp_path / "M4" / "0"
    for f in ("vocab.txt", "checkpoint.bin", "train.log", "report.json", "report.md", "pretrain.bin"):
        assert (d / f).is_file(), f
    md = (d / "report.md").read_text(encoding="utf-8")
    assert "| Overall |" in md and "| Model | Precision | Recall | F-score |" in md and "P Avr" in md
    assert json.loads((d / "report.json").read_text())["accuracy"] == res.report.accuracy


def test_baseline_has_no_pretrain_stage(mini, tmp_path):
    run_experiment(load_experiment(mini / "b1.cfg"), 0, tmp_path)
    d = tmp_path / "B1" / "0"
    assert (d / "checkpoint.bin").is_file() and not (d / "pretrain.bin").exists()


def test_rerun_is_byte_identical(mini, tmp_path):
    cfg = load_experiment(mini / "m4.cfg")
    run_experiment(cfg, 1, tmp_path / "a")
    run_experiment(cfg, 1, tmp_path / "b")
    for f in ("report.json", "report.md", "checkpoint.bin", "vocab.txt", "train.log"):
        assert (tmp_path / "a/M4/1" / f).read_bytes() == (tmp_path / "b/M4/1" / f).read_bytes()


def test_missing_corpus_fails_before_compute(mini, tmp_path):
    cfg = load_experiment(mini / "bad.cfg")
    with pytest.raises(ConfigError):
        run_experiment(cfg, 0, tmp_path)
    assert not (tmp_path / "Bad").exists()


def test_cli_exit_codes(mini, tmp_path, capsys):
    assert cli.main(["run", "--config", str(mini / "bad.cfg"), "--out", str(tmp_path)]) == 1
    assert cli.main(["run", "--config", str(mini / "nope.cfg"), "--out", str(tmp_path)]) == 1
    assert cli.main(["run", "--config", str(mini / "b1.cfg"), "--out", str(tmp_path), "--seed", "2"]) == 0
    # the mini test split has every label, so evaluation is not degenerate
    assert cli.main(["evaluate", "--config", str(mini / "b1.cfg"), "--out", str(tmp_path), "--seed", "2"]) == 0
    assert "| Overall |" in capsys.readouterr().out


def test_cli_stage_by_stage(mini, tmp_path):
    args = ["--config", str(mini / "m4.cfg"), "--out", str(tmp_path), "--seed", "0"]
    assert cli.main(["pretrain", *args]) == 0
    assert cli.main(["finetune", *args]) == 0
    assert cli.main(["evaluate", *args, "--style", "json"]) == 0
    staged = (tmp_path / "M4/0/report.json").read_bytes()
    run_experiment(load_experiment(mini / "m4.cfg"), 0, tmp_path / "full")
    assert (tmp_path / "full/M4/0/report.json").read_bytes() == staged


def test_cli_evaluate_flags_degenerate_split(mini, tmp_path):
    (tmp_path / "test.tsv").write_text("hello\tEn\nyaar\tHi\n", encoding="utf-8")
    (tmp_path / "deg.cfg").write_text(
        f"include = {mini / 'b1.cfg'}\nname = Deg\ntest_corpus = {tmp_path / 'test.tsv'}\n"
        f"train_corpus = {mini / 'train.tsv'}\n")
    assert cli.main(["run", "--config", str(tmp_path / "deg.cfg"), "--out", str(tmp_path)]) == 0
    assert cli.main(["evaluate", "--config", str(tmp_path / "deg.cfg"), "--out", str(tmp_path)]) == 1


def test_cli_compare(mini, tmp_path, capsys):
    for name in ("b1", "m4"):
        run_experiment(load_experiment(mini / f"{name}.cfg"), 0, tmp_path)
    reports = [str(tmp_path / "B1/0/report.json"), str(tmp_path / "M4/0/report.json")]
    assert cli.main(["compare", *reports, "--out", str(tmp_path / "cmp.md")]) == 0
    text = (tmp_path / "cmp.md").read_text()
    assert "1. " in text and "B1/0" in text and "M4/0" in text
    assert cli.main(["compare", reports[0]]) == 1


def test_cli_gen_corpus_and_train_vocab(tmp_path):
    (tmp_path / "g.cfg").write_text("n_pretrain = 20\nn_labeled = 30\nseed = 4\n")
    assert cli.main(["gen-corpus", "--config", str(tmp_path / "g.cfg"), "--out", str(tmp_path / "fx")]) == 0
    for f in ("pretrain.txt", "train.tsv", "test.tsv", "distribution.md"):
        assert (tmp_path / "fx" / f).is_file()
    out = tmp_path / "v.txt"
    assert cli.main(["train-vocab", str(tmp_path / "fx/train.tsv"), str(tmp_path / "fx/pretrain.txt"),
                     "--scheme", "BPE", "--size", "120", "--out", str(out)]) == 0
    assert out.read_text(encoding="utf-8").startswith("scheme=BPE")
    assert cli.main(["train-vocab", str(tmp_path / "fx/train.tsv"), "--scheme", "BPE", "--size", "3",
                     "--out", str(out)]) == 1


def test_cli_normalize(tmp_path):
    src = tmp_path / "in.tsv"
    src.write_text("@ram\tUser\nKya\tHi\n#fun\tHash\n", encoding="utf-8")
    assert cli.main(["normalize", str(src), str(tmp_path / "out.tsv"), "--casing", "uncased"]) == 0
    assert (tmp_path / "out.tsv").read_text(encoding="utf-8") == "<user>\tUser\nkya\tHi\n<hash>\tHash\n\n"
    (tmp_path / "raw.txt").write_text("hi @ram see https://x.y\n", encoding="utf-8")
    assert cli.main(["normalize", "--raw", str(tmp_path / "raw.txt"), str(tmp_path / "raw.out")]) == 0
    assert (tmp_path / "raw.out").read_text(encoding="utf-8") == "hi <user> see <url>\n"
    bad = tmp_path / "bad.tsv"
    bad.write_text("word\tXX\n", encoding="utf-8")
    assert cli.main(["normalize", str(bad), str(tmp_path / "o.tsv")]) == 1
