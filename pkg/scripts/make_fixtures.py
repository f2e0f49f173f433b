"""Regenerate the synthetic fixtures under fixtures/ from configs/gen-*.cfg.

Writes pretrain_hi_en_ur.txt, train.tsv, test.tsv and an English-only
pretraining text (pretrain_en.txt) used by the English-pretrained baselines.
"""

import argparse
from pathlib import Path

from cmlid.corpus import (
    Corpus,
    GeneratorConfig,
    Label,
    generate_synthetic_corpus,
    label_distribution,
    normalize_sentence,
    render_label_table,
    split_corpus,
    write_labeled_corpus,
    write_raw_corpus,
)
from cmlid.kvconfig import read_kv_config

ROOT = Path(__file__).resolve().parent.parent


def english_only(labeled: Corpus) -> Corpus:
    lines = []
    for s in labeled.sentences:
        words = [w for w, lab in zip(normalize_sentence(s).words, s.labels) if lab is not Label.HI]
        if words:
            lines.append(" ".join(words))
    return Corpus(tuple(lines), "synthetic-english-only", labeled=False)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=ROOT / "configs" / "gen-hi-en-ur.cfg")
    ap.add_argument("--out", default=ROOT / "fixtures")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    kv = read_kv_config(args.config)
    gen = GeneratorConfig.from_kv(kv)
    seed = int(kv.get("seed", 0))
    pre, labeled = generate_synthetic_corpus(gen, seed)
    train, test = split_corpus(labeled, float(kv.get("test_fraction", 0.2)), seed)
    write_raw_corpus(pre, out / "pretrain_hi_en_ur.txt")
    write_labeled_corpus(train, out / "train.tsv")
    write_labeled_corpus(test, out / "test.tsv")

    # same lexicons, different seed, Hindi words removed
    _, en_source = generate_synthetic_corpus(
        GeneratorConfig.from_kv({**kv, "n_pretrain": "0", "n_labeled": str(gen.n_pretrain)}), seed + 1)
    write_raw_corpus(english_only(en_source), out / "pretrain_en.txt")

    (out / "distribution.md").write_text(
        render_label_table(label_distribution(train), label_distribution(test)), encoding="utf-8")
    print(f"fixtures written to {out}")


if __name__ == "__main__":
    main()
