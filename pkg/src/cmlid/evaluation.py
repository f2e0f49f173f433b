"""Confusion matrices, per-label precision/recall/F1 and the markdown report tables."""

from __future__ import annotations

import json
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Sequence

import numpy as np

from .corpus import LABEL_INDEX, LABELS, TABLE1_ROWS, Label

DISPLAY = dict(TABLE1_ROWS)
STYLES = ("table3", "table4", "table5", "json")


@dataclass(frozen=True)
class ConfusionMatrix:
    """Gold labels index the rows, predictions the columns."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.shape != (len(LABELS), len(LABELS)) or (c < 0).any():
            raise ValueError("confusion matrix must be a non-negative 7x7 integer matrix")
        object.__setattr__(self, "counts", c)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def get(self, gold: Label, pred: Label) -> int:
        return int(self.counts[LABEL_INDEX[gold], LABEL_INDEX[pred]])


def confusion(golds: Sequence[Label | str], preds: Sequence[Label | str]) -> ConfusionMatrix:
    if len(golds) != len(preds):
        raise ValueError(f"{len(golds)} gold labels but {len(preds)} predictions")
    counts = np.zeros((len(LABELS), len(LABELS)), dtype=np.int64)
    for g, p in zip(golds, preds):
        counts[LABEL_INDEX[Label(g)], LABEL_INDEX[Label(p)]] += 1
    return ConfusionMatrix(counts)


def f1_score(precision: float, recall: float) -> float:
    s = precision + recall
    return 2.0 * precision * recall / s if s > 0 else 0.0


@dataclass(frozen=True)
class LabelScores:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class MetricsReport:
    per_label: dict
    weighted: LabelScores
    accuracy: float
    zero_division: int = 0

    def __getitem__(self, lab: Label | str) -> LabelScores:
        return self.per_label[Label(lab)]

    @property
    def total(self) -> int:
        return self.weighted.support

    @property
    def degenerate(self) -> bool:
        """True when some label has no gold words in the evaluated split."""
        return any(s.support == 0 for s in self.per_label.values())

    def to_dict(self) -> dict:
        return {
            "per_label": {
                lab.value: {"precision": s.precision, "recall": s.recall, "f1": s.f1, "support": s.support}
                for lab, s in self.per_label.items()
            },
            "weighted": {"precision": self.weighted.precision, "recall": self.weighted.recall,
                         "f1": self.weighted.f1, "support": self.weighted.support},
            "accuracy": self.accuracy,
            "zero_division": self.zero_division,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        per = {Label(k): LabelScores(**v) for k, v in d["per_label"].items()}
        return cls(per, LabelScores(**d["weighted"]), d["accuracy"], d.get("zero_division", 0))


def per_label_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Per-label P/R/F1 with zero for undefined ratios, support-weighted averages and accuracy."""
    c = cm.counts
    tp = np.diag(c)
    predicted = c.sum(0)
    support = c.sum(1)
    per = {}
    zero_div = 0
    for i, lab in enumerate(LABELS):
        if predicted[i]:
            p = tp[i] / predicted[i]
        else:
            p = 0.0
            zero_div += 1
        if support[i]:
            r = tp[i] / support[i]
        else:
            r = 0.0
            zero_div += 1
        per[lab] = LabelScores(float(p), float(r), f1_score(float(p), float(r)), int(support[i]))
    total = int(support.sum())
    if total:
        w = lambda attr: sum(getattr(per[lab], attr) * per[lab].support for lab in LABELS) / total
        weighted = LabelScores(w("precision"), w("recall"), w("f1"), total)
        accuracy = int(tp.sum()) / total
    else:
        weighted = LabelScores(0.0, 0.0, 0.0, 0)
        accuracy = 0.0
    return MetricsReport(per, weighted, accuracy, zero_div)


def micro_scores(cm: ConfusionMatrix) -> LabelScores:
    """Micro-averaged P/R/F1; with one label per word all three equal accuracy."""
    tp = int(np.trace(cm.counts))
    total = cm.total
    p = tp / int(cm.counts.sum(0).sum()) if total else 0.0
    r = tp / int(cm.counts.sum(1).sum()) if total else 0.0
    return LabelScores(p, r, f1_score(p, r), total)


def evaluate_predictions(golds: Sequence[Sequence[Label]], preds: Sequence[Sequence[Label]]) -> MetricsReport:
    """Sentence-nested convenience wrapper around :func:`confusion`."""
    flat_g = [g for sent in golds for g in sent]
    flat_p = [p for sent in preds for p in sent]
    return per_label_metrics(confusion(flat_g, flat_p))


# ---------------------------------------------------------------- rendering


def round2(x: float) -> str:
    """Half-up rounding to two decimals, applied to the shortest decimal repr."""
    return str(Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def percent(x: float) -> str:
    return str((Decimal(repr(float(x))) * 100).quantize(Decimal("1"), rounding=ROUND_HALF_UP))


def _md(rows: list[list[str]], align: str) -> str:
    head, *body = rows
    lines = ["| " + " | ".join(head) + " |", "|" + "|".join(align) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in body]
    return "\n".join(lines) + "\n"


def _bold_max(rows: list[list[str]], values: list[list[float]], bold: bool) -> list[list[str]]:
    if not bold or len(rows) < 2:
        return rows
    out = [list(r) for r in rows]
    for col in range(len(values[0])):
        # compare what is printed so equal-looking cells are bolded alike
        shown = [Decimal(round2(v[col])) for v in values]
        best = max(shown)
        for r, v in enumerate(shown):
            if v == best:
                out[r][col + 1] = f"**{out[r][col + 1]}**"
    return out


def render_table3(named: Sequence[tuple[str, MetricsReport]], bold: bool = True) -> str:
    head = ["Model", "P En", "P Hi", "P Avr", "R En", "R Hi", "R Avr", "F En", "F Hi", "F Avr"]
    values = []
    for _, rep in named:
        en, hi, w = rep[Label.EN], rep[Label.HI], rep.weighted
        values.append([en.precision, hi.precision, w.precision, en.recall, hi.recall, w.recall,
                       en.f1, hi.f1, w.f1])
    rows = [[name] + [round2(v) for v in vals] for (name, _), vals in zip(named, values)]
    return _md([head] + _bold_max(rows, values, bold), ["---"] + ["---:"] * 9)


def render_table4(rep: MetricsReport) -> str:
    head = ["Label", "Precision", "Recall", "F-score", "Accuracy"]
    rows = [[DISPLAY[lab], round2(rep[lab].precision), round2(rep[lab].recall), round2(rep[lab].f1), "-"]
            for lab, _ in TABLE1_ROWS]
    w = rep.weighted
    rows.append(["Overall", round2(w.precision), round2(w.recall), round2(w.f1), percent(rep.accuracy)])
    return _md([head] + rows, ["---"] + ["---:"] * 4)


def render_table5(named: Sequence[tuple[str, MetricsReport]], bold: bool = True) -> str:
    head = ["Model", "Precision", "Recall", "F-score"]
    values = [[rep[Label.NE].precision, rep[Label.NE].recall, rep[Label.NE].f1] for _, rep in named]
    rows = [[name] + [round2(v) for v in vals] for (name, _), vals in zip(named, values)]
    return _md([head] + _bold_max(rows, values, bold), ["---"] + ["---:"] * 3)


def render_report(report: MetricsReport, style: str, name: str = "model") -> str:
    if style == "table3":
        return render_table3([(name, report)])
    if style == "table4":
        return render_table4(report)
    if style == "table5":
        return render_table5([(name, report)])
    if style == "json":
        return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    raise ValueError(f"unknown style {style!r}; choose from {STYLES}")


def parse_json_report(text: str) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(text))


def rank_runs(named: Sequence[tuple[str, MetricsReport]]) -> list[tuple[str, MetricsReport]]:
    """Weighted F1 descending, then accuracy descending, then name."""
    return sorted(named, key=lambda nr: (-nr[1].weighted.f1, -nr[1].accuracy, nr[0]))


def compare_runs(named: Sequence[tuple[str, MetricsReport]]) -> str:
    if len(named) < 2:
        raise ValueError("comparison needs at least two reports")
    ranked = rank_runs(named)
    lines = ["Ranking by weighted F1 (ties: accuracy, then name):", ""]
    for pos, (name, rep) in enumerate(ranked, 1):
        lines.append(f"{pos}. {name}  F1={round2(rep.weighted.f1)}  accuracy={percent(rep.accuracy)}%")
    lines.append("")
    lines.append("Language labels (En / Hi / support-weighted average):")
    lines.append("")
    body = "\n".join(lines) + "\n" + render_table3(list(named))
    return body + "\nNamed entities:\n\n" + render_table5(list(named))
