from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

from .engine import VeracityLabel

CLASSES = (VeracityLabel.SUPPORTED, VeracityLabel.REFUTED)


@dataclass(frozen=True)
class ClassScore:
    label: VeracityLabel
    precision: float
    recall: float
    f1: float
    support: int
    absent: bool  # class missing from both predictions and golds


@dataclass(frozen=True)
class F1Report:
    macro_f1: float
    per_class: tuple[ClassScore, ...]
    n: int

    @property
    def flags(self) -> list[str]:
        return [f"class {c.label.value} absent from predictions and golds" for c in self.per_class if c.absent]

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "macro_f1": self.macro_f1,
            "per_class": {
                c.label.value: {
                    "precision": c.precision, "recall": c.recall, "f1": c.f1, "support": c.support,
                }
                for c in self.per_class
            },
            "flags": self.flags,
        }


def f1_report(preds: Sequence[VeracityLabel], golds: Sequence[VeracityLabel]) -> F1Report:
    if len(preds) != len(golds):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(golds)} golds")
    if not preds:
        raise ValueError("need at least one prediction")
    scores = []
    for label in CLASSES:
        tp = fp = fn = 0
        for p, g in zip(preds, golds):
            if p == label and g == label:
                tp += 1
            elif p == label:
                fp += 1
            elif g == label:
                fn += 1
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
        absent = tp + fp + fn == 0
        scores.append(ClassScore(label, precision, recall, f1, tp + fn, absent))
    macro = sum(s.f1 for s in scores) / len(scores)
    return F1Report(macro, tuple(scores), len(preds))


def macro_f1(preds: Sequence[VeracityLabel], golds: Sequence[VeracityLabel]) -> float:
    """Unweighted mean of per-class F1 over Supported/Refuted (absent class scores 0)."""
    return f1_report(preds, golds).macro_f1
