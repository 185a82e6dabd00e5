"""HOVER / FEVEROUS-S claim loading and JSONL helpers.

Dataset files are JSONL, one claim per line:

HOVER: ``uid`` (or ``id``), ``claim``, ``label`` (SUPPORTED | NOT_SUPPORTED),
``num_hops``, and either ``gold_evidence_ids`` or ``supporting_facts``
(``[[title, sentence_index], ...]``; titles become doc ids).

FEVEROUS-S: ``id``, ``claim``, ``label`` (SUPPORTS | REFUTES; anything else is
skipped), and either ``gold_evidence_ids`` or ``evidence``
(``[{"content": ["<page>_sentence_<n>", ...]}, ...]``; pages become doc ids).
The file is expected to be pre-filtered to sentence-only claims.

Either format may carry ``gold_evidence``: inline ``[{id, title, text}]`` docs.
"""

from __future__ import annotations

import json
import logging
import os
from collections import Counter
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field

from .engine import VeracityLabel
from .retrieval import EvidenceDoc

log = logging.getLogger(__name__)

FORMATS = ("hover", "feverous_s")

_LABELS = {
    "hover": {"SUPPORTED": VeracityLabel.SUPPORTED, "NOT_SUPPORTED": VeracityLabel.REFUTED},
    "feverous_s": {"SUPPORTS": VeracityLabel.SUPPORTED, "REFUTES": VeracityLabel.REFUTED},
}


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ClaimRecord:
    claim_id: str
    text: str
    gold_label: VeracityLabel | None = None
    hops: int | None = None
    gold_evidence_ids: tuple[str, ...] = ()
    gold_evidence: tuple[EvidenceDoc, ...] = ()


@dataclass
class Dataset:
    records: list[ClaimRecord]
    skipped: Counter = field(default_factory=Counter)

    def __iter__(self) -> Iterator[ClaimRecord]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def hop_counts(self) -> dict[int, int]:
        return dict(sorted(Counter(r.hops for r in self.records if r.hops is not None).items()))


def read_jsonl(path: str | os.PathLike) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(row, dict):
                raise DatasetError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, row


def dump_line(row: dict) -> str:
    return json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n"


def _dedup(items: Iterable[str]) -> tuple[str, ...]:
    return tuple(dict.fromkeys(items))


def _hover_evidence(row: dict) -> tuple[str, ...]:
    if "gold_evidence_ids" in row:
        return _dedup(str(x) for x in row["gold_evidence_ids"])
    return _dedup(str(fact[0]) for fact in row.get("supporting_facts", []))


def _feverous_evidence(row: dict) -> tuple[str, ...]:
    if "gold_evidence_ids" in row:
        return _dedup(str(x) for x in row["gold_evidence_ids"])
    ids = []
    for group in row.get("evidence", []):
        for element in group.get("content", []):
            page, sep, _ = str(element).partition("_sentence_")
            ids.append(page if sep else str(element))
    return _dedup(ids)


def _normalize_label(raw) -> str:
    return str(raw).strip().upper().replace(" ", "_")


def load_dataset(path: str | os.PathLike, format: str) -> Dataset:
    """Load claims, mapping labels to Supported/Refuted and skipping other labels."""
    if format not in FORMATS:
        raise DatasetError(f"unknown dataset format {format!r}; expected one of {FORMATS}")
    labels = _LABELS[format]
    records: list[ClaimRecord] = []
    skipped: Counter = Counter()
    for lineno, row in read_jsonl(path):
        try:
            claim_id = str(row["uid"] if "uid" in row else row["id"])
            text = str(row["claim"])
            raw_label = _normalize_label(row["label"])
            if raw_label not in labels:
                skipped[raw_label] += 1
                continue
            if format == "hover":
                hops = int(row["num_hops"])
                evidence_ids = _hover_evidence(row)
            else:
                hops = None
                evidence_ids = _feverous_evidence(row)
            inline = tuple(EvidenceDoc.from_dict(d) for d in row.get("gold_evidence", []))
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise DatasetError(f"{path}:{lineno}: malformed record ({exc!r})") from None
        if inline and not evidence_ids:
            evidence_ids = tuple(d.doc_id for d in inline)
        records.append(ClaimRecord(claim_id, text, labels[raw_label], hops, evidence_ids, inline))
    if skipped:
        log.info("%s: skipped %d records with labels %s", path, sum(skipped.values()), dict(skipped))
    return Dataset(records, skipped)
