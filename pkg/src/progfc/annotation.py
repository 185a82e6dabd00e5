"""Error taxonomy for wrongly predicted claims, with a per-hop percentage table.

Syntax and semantic categories are read off stored parse diagnostics when
every program of a claim failed to parse. ``incorrect_execution`` (program
fine, answer wrong) only comes from a human annotation file: JSONL rows of
``{claim_id, category, note}``. Human rows override automatic tags.
"""

from __future__ import annotations

import os
from collections import Counter, defaultdict
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field

from .datasets import read_jsonl

CATEGORIES = (
    "syntax",
    "semantic_token",
    "semantic_structure",
    "semantic_subtask",
    "incorrect_execution",
)


@dataclass(frozen=True)
class ErrorAnnotation:
    claim_id: str
    category: str
    note: str = ""

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown error category {self.category!r}; expected one of {CATEGORIES}")

    def to_dict(self) -> dict:
        return {"claim_id": self.claim_id, "category": self.category, "note": self.note}


def load_annotations(path: str | os.PathLike) -> list[ErrorAnnotation]:
    out = []
    for lineno, row in read_jsonl(path):
        try:
            out.append(ErrorAnnotation(str(row["claim_id"]), row["category"], row.get("note", "")))
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out


def auto_category(trace_rows: Iterable[Mapping]) -> str | None:
    """Category implied by diagnostics, or None if any program parsed.

    Each failed program votes with its first diagnostic; ties go to the
    earlier taxonomy entry.
    """
    votes: Counter = Counter()
    seen = False
    for row in trace_rows:
        seen = True
        diags = row.get("diagnostics") or []
        if not diags:
            return None
        first = diags[0]
        votes["syntax" if first["severity"] == "syntax_error" else f"semantic_{first['sub_kind']}"] += 1
    if not seen:
        return None
    return min(votes, key=lambda c: (-votes[c], CATEGORIES.index(c)))


@dataclass
class ErrorSummary:
    counts: dict[str, Counter]  # hop key -> category -> count
    unannotated: Counter  # hop key -> wrong claims without a category
    tags: dict[str, ErrorAnnotation] = field(default_factory=dict)

    def percentages(self) -> dict[str, dict[str, float]]:
        table = {}
        for hop, counter in self.counts.items():
            total = sum(counter.values())
            table[hop] = {c: (100.0 * counter[c] / total if total else 0.0) for c in CATEGORIES}
        return table

    def to_dict(self) -> dict:
        return {
            "percent": self.percentages(),
            "counts": {h: {c: self.counts[h][c] for c in CATEGORIES} for h in self.counts},
            "unannotated": dict(self.unannotated),
        }

    def format_table(self) -> str:
        hops = list(self.counts)
        pct = self.percentages()
        width = max(len(c) for c in CATEGORIES)
        lines = [" " * width + "".join(f"{h:>10}" for h in hops)]
        for c in CATEGORIES:
            lines.append(f"{c:<{width}}" + "".join(f"{pct[h][c]:>9.1f}%" for h in hops))
        lines.append(f"{'unannotated':<{width}}" + "".join(f"{self.unannotated[h]:>10d}" for h in hops))
        return "\n".join(lines)


def _hop_key(hops) -> str:
    return "all" if hops is None else f"{hops}-hop"


def classify_errors(
    traces: Iterable[Mapping],
    predictions: Iterable[Mapping],
    annotations: Iterable[ErrorAnnotation] = (),
) -> ErrorSummary:
    """Tag every wrong prediction and tabulate categories per hop (plus ``all``)."""
    preds = {str(p["claim_id"]): p for p in predictions}
    by_claim: dict[str, list[Mapping]] = defaultdict(list)
    for row in traces:
        by_claim[str(row["claim_id"])].append(row)
    human = {}
    for ann in annotations:
        if ann.claim_id not in preds:
            raise ValueError(f"annotation references unknown claim_id {ann.claim_id!r}")
        human[ann.claim_id] = ann

    counts: dict[str, Counter] = {"all": Counter()}
    unannotated: Counter = Counter({"all": 0})
    tags = {}
    for cid, p in preds.items():
        if not p.get("gold_label") or p["predicted_label"] == p["gold_label"]:
            continue
        keys = ["all"] if p.get("hops") is None else [_hop_key(p["hops"]), "all"]
        for key in keys:
            counts.setdefault(key, Counter())
            unannotated.setdefault(key, 0)
        if cid in human:
            tag = human[cid]
        else:
            category = auto_category(by_claim.get(cid, []))
            tag = ErrorAnnotation(cid, category, "auto: from parse diagnostics") if category else None
        if tag is None:
            for key in keys:
                unannotated[key] += 1
            continue
        tags[cid] = tag
        for key in keys:
            counts[key][tag.category] += 1
    ordered = dict(sorted(counts.items(), key=lambda kv: (kv[0] == "all", kv[0])))
    return ErrorSummary(ordered, unannotated, tags)
