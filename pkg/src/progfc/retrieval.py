"""BM25 evidence retrieval over a paragraph corpus.

Scoring is Okapi BM25 with ``idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5))``.
Rankings sort by descending score and break ties by ascending doc_id.
"""

from __future__ import annotations

import heapq
import json
import logging
import math
import mmap
import os
import re
import struct
import sys
import tempfile
import zlib
from array import array
from bisect import bisect_left
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Protocol

from .dsl import ReasoningProgram, StepKind, TemplateString

if TYPE_CHECKING:
    from .datasets import ClaimRecord
    from .engine import Binding

log = logging.getLogger(__name__)

DEFAULT_K1 = 0.9
DEFAULT_B = 0.4
DEFAULT_EVIDENCE_BUDGET = 3000
EVIDENCE_SEPARATOR = "\n\n"

_TOKEN_RE = re.compile(r"[^\W_]+")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class EvidenceDoc:
    doc_id: str
    title: str
    text: str

    def to_dict(self) -> dict:
        return {"id": self.doc_id, "title": self.title, "text": self.text}

    @classmethod
    def from_dict(cls, d: Mapping) -> EvidenceDoc:
        return cls(str(d["id"]), str(d.get("title", "")), str(d["text"]))


def tokenize(text: str) -> list[str]:
    """Lowercase, split on non-alphanumerics. No stemming or stopwords."""
    return _TOKEN_RE.findall(text.lower())


def read_corpus(path: str | os.PathLike) -> Iterator[EvidenceDoc]:
    """Stream ``{id, title, text}`` records from a JSONL corpus file."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield EvidenceDoc.from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusError(f"{path}:{lineno}: malformed corpus record ({exc})") from None


# --- index -------------------------------------------------------------------


class _ListStore:
    def __init__(self, docs: list[EvidenceDoc]):
        self._docs = docs

    def get(self, ordinal: int) -> EvidenceDoc:
        return self._docs[ordinal]

    def close(self) -> None:
        pass


class _MmapStore:
    def __init__(self, mm: mmap.mmap, base: int, offsets: array, lengths: array):
        self._mm = mm
        self._base = base
        self._offsets = offsets
        self._lengths = lengths

    def get(self, ordinal: int) -> EvidenceDoc:
        start = self._base + self._offsets[ordinal]
        raw = self._mm[start : start + self._lengths[ordinal]]
        return EvidenceDoc.from_dict(json.loads(raw.decode("utf-8")))

    def close(self) -> None:
        self._mm.close()


@dataclass
class Bm25Index:
    """Inverted index; immutable once built, safe for concurrent reads."""

    postings: dict[str, tuple[array, array]]
    doc_lengths: array
    doc_ids: list[str]
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B
    _store: object = field(default=None, repr=False)
    _ordinal_by_id: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._ordinal_by_id:
            self._ordinal_by_id = {d: i for i, d in enumerate(self.doc_ids)}

    @property
    def doc_count(self) -> int:
        return len(self.doc_lengths)

    @property
    def avg_doc_length(self) -> float:
        return sum(self.doc_lengths) / len(self.doc_lengths) if self.doc_lengths else 0.0

    def df(self, term: str) -> int:
        entry = self.postings.get(term)
        return len(entry[0]) if entry else 0

    def idf(self, term: str) -> float:
        df = self.df(term)
        return math.log(1.0 + (self.doc_count - df + 0.5) / (df + 0.5))

    def tf(self, term: str, ordinal: int) -> int:
        entry = self.postings.get(term)
        if not entry:
            return 0
        ords, tfs = entry
        i = bisect_left(ords, ordinal)
        if i < len(ords) and ords[i] == ordinal:
            return tfs[i]
        return 0

    def doc(self, ordinal: int) -> EvidenceDoc:
        return self._store.get(ordinal)

    def ordinal(self, doc_id: str) -> int | None:
        return self._ordinal_by_id.get(doc_id)

    def get(self, doc_id: str) -> EvidenceDoc | None:
        i = self._ordinal_by_id.get(doc_id)
        return None if i is None else self.doc(i)

    def close(self) -> None:
        if self._store is not None:
            self._store.close()

    def save(self, path: str | os.PathLike) -> None:
        docs = [self.doc(i) for i in range(self.doc_count)]
        _write_index_file(path, self, docs)

    @classmethod
    def load(cls, path: str | os.PathLike) -> Bm25Index:
        return _read_index_file(path)


class IndexBuilder:
    """Single-writer incremental index construction."""

    def __init__(self, k1: float = DEFAULT_K1, b: float = DEFAULT_B):
        self.k1 = k1
        self.b = b
        self._postings: dict[str, tuple[array, array]] = {}
        self._lengths = array("I")
        self._ids: list[str] = []
        self._seen: dict[str, int] = {}

    def add(self, doc: EvidenceDoc) -> int:
        if doc.doc_id in self._seen:
            raise CorpusError(f"duplicate doc_id {doc.doc_id!r}")
        ordinal = len(self._ids)
        self._seen[doc.doc_id] = ordinal
        self._ids.append(doc.doc_id)
        tokens = tokenize(doc.text)
        self._lengths.append(len(tokens))
        counts: dict[str, int] = {}
        for tok in tokens:
            counts[tok] = counts.get(tok, 0) + 1
        for term, tf in counts.items():
            entry = self._postings.get(term)
            if entry is None:
                entry = self._postings[term] = (array("I"), array("I"))
            entry[0].append(ordinal)
            entry[1].append(tf)
        return ordinal

    def build(self, store) -> Bm25Index:
        return Bm25Index(
            postings=self._postings,
            doc_lengths=self._lengths,
            doc_ids=self._ids,
            k1=self.k1,
            b=self.b,
            _store=store,
            _ordinal_by_id=self._seen,
        )


def ingest_corpus(
    source: Iterable[EvidenceDoc] | str | os.PathLike,
    k1: float = DEFAULT_K1,
    b: float = DEFAULT_B,
) -> Bm25Index:
    """Build an in-memory index from documents or a JSONL corpus path."""
    if isinstance(source, (str, os.PathLike)):
        source = read_corpus(source)
    builder = IndexBuilder(k1, b)
    docs: list[EvidenceDoc] = []
    for doc in source:
        builder.add(doc)
        docs.append(doc)
    return builder.build(_ListStore(docs))


# --- index file --------------------------------------------------------------
#
# Layout (little-endian):
#   magic "PFCBM25\0" | version u32 | k1 f64 | b f64 | doc_count u64
#   4 x (offset u64, length u64) section table: ids, doc_table, doc_data, postings
#   ids:       zlib(JSON array of doc ids)
#   doc_table: doc_count x (offset u64, length u32, token_count u32) into doc_data
#   doc_data:  concatenated UTF-8 JSON docs, read lazily through mmap
#   postings:  zlib(repeat: term_len u32, term, n u32, n x ordinal u32, n x tf u32)

MAGIC = b"PFCBM25\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIddQ")
_SECTION = struct.Struct("<QQ")
_DOC_ENTRY = struct.Struct("<QII")


class IndexFormatError(ValueError):
    pass


def _pack_postings(postings: dict[str, tuple[array, array]]) -> bytes:
    comp = zlib.compressobj()
    chunks = []
    for term in sorted(postings):
        ords, tfs = postings[term]
        tb = term.encode("utf-8")
        o = array("I", ords)
        t = array("I", tfs)
        if sys.byteorder == "big":
            o.byteswap()
            t.byteswap()
        chunks.append(comp.compress(struct.pack("<I", len(tb)) + tb + struct.pack("<I", len(o))))
        chunks.append(comp.compress(o.tobytes() + t.tobytes()))
    chunks.append(comp.flush())
    return b"".join(chunks)


def _unpack_postings(blob: bytes) -> dict[str, tuple[array, array]]:
    data = zlib.decompress(blob)
    out: dict[str, tuple[array, array]] = {}
    pos = 0
    swap = sys.byteorder == "big"
    while pos < len(data):
        (tlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        term = data[pos : pos + tlen].decode("utf-8")
        pos += tlen
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        ords = array("I")
        ords.frombytes(data[pos : pos + 4 * n])
        pos += 4 * n
        tfs = array("I")
        tfs.frombytes(data[pos : pos + 4 * n])
        pos += 4 * n
        if swap:
            ords.byteswap()
            tfs.byteswap()
        out[term] = (ords, tfs)
    return out


def _write_sections(path, k1, b, doc_count, ids_blob, doc_table, doc_data_file, postings_blob):
    header_size = _HEADER.size + 4 * _SECTION.size
    doc_data_len = os.fstat(doc_data_file.fileno()).st_size
    sizes = [len(ids_blob), len(doc_table), doc_data_len, len(postings_blob)]
    offsets = []
    pos = header_size
    for size in sizes:
        offsets.append(pos)
        pos += size
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as out:
        out.write(_HEADER.pack(MAGIC, FORMAT_VERSION, k1, b, doc_count))
        for off, size in zip(offsets, sizes):
            out.write(_SECTION.pack(off, size))
        out.write(ids_blob)
        out.write(doc_table)
        doc_data_file.seek(0)
        while chunk := doc_data_file.read(1 << 20):
            out.write(chunk)
        out.write(postings_blob)
    os.replace(tmp, path)


def _write_index_file(path, index: Bm25Index, docs: Iterable[EvidenceDoc]) -> None:
    table = bytearray()
    with tempfile.TemporaryFile() as data:
        offset = 0
        for i, doc in enumerate(docs):
            raw = json.dumps(doc.to_dict(), ensure_ascii=False).encode("utf-8")
            data.write(raw)
            table += _DOC_ENTRY.pack(offset, len(raw), index.doc_lengths[i])
            offset += len(raw)
        data.flush()
        ids_blob = zlib.compress(json.dumps(index.doc_ids).encode("utf-8"))
        _write_sections(
            path, index.k1, index.b, index.doc_count, ids_blob, bytes(table), data,
            _pack_postings(index.postings),
        )


def build_index_file(
    source: Iterable[EvidenceDoc] | str | os.PathLike,
    out_path: str | os.PathLike,
    k1: float = DEFAULT_K1,
    b: float = DEFAULT_B,
) -> int:
    """Stream a corpus straight to an index file; doc texts are never all held in memory.

    Returns the number of documents indexed.
    """
    if isinstance(source, (str, os.PathLike)):
        source = read_corpus(source)
    builder = IndexBuilder(k1, b)
    table = bytearray()
    with tempfile.TemporaryFile() as data:
        offset = 0
        for doc in source:
            ordinal = builder.add(doc)
            raw = json.dumps(doc.to_dict(), ensure_ascii=False).encode("utf-8")
            data.write(raw)
            table += _DOC_ENTRY.pack(offset, len(raw), builder._lengths[ordinal])
            offset += len(raw)
            if (ordinal + 1) % 100_000 == 0:
                log.info("indexed %d documents", ordinal + 1)
        data.flush()
        ids_blob = zlib.compress(json.dumps(builder._ids).encode("utf-8"))
        _write_sections(
            out_path, k1, b, len(builder._ids), ids_blob, bytes(table), data,
            _pack_postings(builder._postings),
        )
    return len(builder._ids)


def _read_index_file(path) -> Bm25Index:
    with open(path, "rb") as fh:
        if os.fstat(fh.fileno()).st_size < _HEADER.size + 4 * _SECTION.size:
            raise IndexFormatError(f"{path}: file too short for an index header")
        mm = mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ)
    try:
        magic, version, k1, b, doc_count = _HEADER.unpack_from(mm, 0)
        if magic != MAGIC:
            raise IndexFormatError(f"{path}: not a progfc index (bad magic)")
        if version != FORMAT_VERSION:
            raise IndexFormatError(f"{path}: unsupported index version {version}")
        sections = [
            _SECTION.unpack_from(mm, _HEADER.size + i * _SECTION.size) for i in range(4)
        ]
        (ids_off, ids_len), (tab_off, tab_len), (data_off, _), (post_off, post_len) = sections
        doc_ids = json.loads(zlib.decompress(mm[ids_off : ids_off + ids_len]).decode("utf-8"))
        if len(doc_ids) != doc_count or tab_len != doc_count * _DOC_ENTRY.size:
            raise IndexFormatError(f"{path}: section sizes disagree with doc_count")
        offsets, lengths, doc_lengths = array("Q"), array("I"), array("I")
        for i in range(doc_count):
            off, length, toks = _DOC_ENTRY.unpack_from(mm, tab_off + i * _DOC_ENTRY.size)
            offsets.append(off)
            lengths.append(length)
            doc_lengths.append(toks)
        postings = _unpack_postings(mm[post_off : post_off + post_len])
    except IndexFormatError:
        mm.close()
        raise
    except (struct.error, zlib.error, ValueError, IndexError) as exc:
        mm.close()
        raise IndexFormatError(f"{path}: corrupt index ({exc})") from None
    except Exception:
        mm.close()
        raise
    return Bm25Index(
        postings=postings,
        doc_lengths=doc_lengths,
        doc_ids=doc_ids,
        k1=k1,
        b=b,
        _store=_MmapStore(mm, data_off, offsets, lengths),
    )


# --- scoring and ranking ----------------------------------------------------


def _term_weight(idf: float, tf: int, doc_len: int, avgdl: float, k1: float, b: float) -> float:
    norm = k1 * (1.0 - b + b * doc_len / avgdl)
    return idf * tf * (k1 + 1.0) / (tf + norm)


def bm25_score(index: Bm25Index, query_terms: list[str], ordinal: int) -> float:
    avgdl = index.avg_doc_length
    doc_len = index.doc_lengths[ordinal]
    score = 0.0
    for term in query_terms:
        tf = index.tf(term, ordinal)
        if tf:
            score += _term_weight(index.idf(term), tf, doc_len, avgdl, index.k1, index.b)
    return score


@dataclass(frozen=True)
class RetrievalResult:
    ranked: tuple[tuple[str, float], ...] = ()

    @property
    def doc_ids(self) -> list[str]:
        return [d for d, _ in self.ranked]

    def top(self, k: int) -> RetrievalResult:
        return RetrievalResult(self.ranked[:k])

    def __len__(self) -> int:
        return len(self.ranked)


def _rank(scored: Iterable[tuple[str, float]], k: int | None) -> RetrievalResult:
    key = lambda item: (-item[1], item[0])  # noqa: E731
    if k is None:
        return RetrievalResult(tuple(sorted(scored, key=key)))
    return RetrievalResult(tuple(heapq.nsmallest(k, scored, key=key)))


def retrieve(index: Bm25Index, query: str, k: int) -> RetrievalResult:
    if k < 1:
        raise ValueError("k must be >= 1")
    terms = tokenize(query)
    avgdl = index.avg_doc_length
    lengths = index.doc_lengths
    k1, b = index.k1, index.b
    scores: dict[int, float] = {}
    # Term-at-a-time; per-doc sums accumulate in query-term order, as in bm25_score.
    for term in terms:
        entry = index.postings.get(term)
        if not entry:
            continue
        idf = index.idf(term)
        for ordinal, tf in zip(*entry):
            scores[ordinal] = scores.get(ordinal, 0.0) + _term_weight(
                idf, tf, lengths[ordinal], avgdl, k1, b
            )
    ids = index.doc_ids
    return _rank(((ids[o], s) for o, s in scores.items() if s > 0.0), k)


def combine_results(results: Iterable[RetrievalResult], k: int | None = 10) -> RetrievalResult:
    """Union of several rankings, each doc keeping its best score, re-ranked."""
    best: dict[str, float] = {}
    for result in results:
        for doc_id, score in result.ranked:
            if doc_id not in best or score > best[doc_id]:
                best[doc_id] = score
    return _rank(best.items(), k)


def step_queries(program: ReasoningProgram, env: Mapping[str, Binding]) -> dict[int, str]:
    """Substituted argument of every Question/Verify step whose placeholders are bound."""
    from .engine import ExecError, substitute

    queries: dict[int, str] = {}
    for i, step in enumerate(program.steps):
        if step.kind is StepKind.PREDICT or not isinstance(step.argument, TemplateString):
            continue
        try:
            queries[i] = substitute(step.argument, env)
        except ExecError:
            continue
    return queries


def retrieve_for_queries(
    index: Bm25Index, queries: Mapping[int, str], per_step_k: int = 10, combined_k: int = 10
) -> tuple[dict[int, RetrievalResult], RetrievalResult]:
    per_step = {i: retrieve(index, q, per_step_k) for i, q in queries.items()}
    return per_step, combine_results(per_step.values(), combined_k)


def iterative_retrieve(
    program: ReasoningProgram,
    env: Mapping[str, Binding],
    index: Bm25Index,
    per_step_k: int = 10,
    combined_k: int = 10,
) -> tuple[dict[int, RetrievalResult], RetrievalResult]:
    """Retrieve per program step, querying with each step's substituted argument.

    Steps whose placeholders are not yet bound in ``env`` are skipped.
    """
    return retrieve_for_queries(index, step_queries(program, env), per_step_k, combined_k)


def recall_at_k(result: RetrievalResult, gold_ids: Iterable[str], k: int = 10) -> float:
    gold = set(gold_ids)
    if not gold:
        raise ValueError("gold_ids must be non-empty")
    return len(gold.intersection(result.doc_ids[:k])) / len(gold)


def fit_evidence(docs: list[EvidenceDoc], budget: int | None) -> list[EvidenceDoc]:
    """Drop trailing (lowest-ranked) docs until the joined text fits ``budget`` chars.

    A single doc longer than the budget is truncated rather than dropped.
    """
    if budget is None or not docs:
        return list(docs)
    kept = list(docs)
    while len(kept) > 1 and len(EVIDENCE_SEPARATOR.join(d.text for d in kept)) > budget:
        kept.pop()
    if len(kept[0].text) > budget:
        d = kept[0]
        kept[0] = EvidenceDoc(d.doc_id, d.title, d.text[:budget])
    return kept


# --- evidence selection per setting ------------------------------------------


class EvidenceSelector(Protocol):
    def select(self, query: str, claim: ClaimRecord) -> list[EvidenceDoc]: ...


class NoEvidence:
    """Closed-book: handlers see no evidence."""

    def select(self, query: str, claim: ClaimRecord) -> list[EvidenceDoc]:
        return []


class GoldEvidence:
    """Every step sees all of the claim's gold docs, within the character budget."""

    def __init__(self, lookup: Bm25Index | Mapping[str, EvidenceDoc] | None = None,
                 budget: int | None = DEFAULT_EVIDENCE_BUDGET):
        self.lookup = lookup
        self.budget = budget

    def select(self, query: str, claim: ClaimRecord) -> list[EvidenceDoc]:
        if claim.gold_evidence:
            docs = list(claim.gold_evidence)
        else:
            docs = []
            for doc_id in claim.gold_evidence_ids:
                doc = self.lookup.get(doc_id) if self.lookup is not None else None
                if doc is None:
                    raise LookupError(f"gold evidence {doc_id!r} not found for claim {claim.claim_id}")
                docs.append(doc)
        return fit_evidence(docs, self.budget)


class Bm25Evidence:
    """Open-book: each step retrieves its own top-k docs with BM25."""

    def __init__(self, index: Bm25Index, k: int = 10, budget: int | None = DEFAULT_EVIDENCE_BUDGET):
        self.index = index
        self.k = k
        self.budget = budget

    def select(self, query: str, claim: ClaimRecord) -> list[EvidenceDoc]:
        result = retrieve(self.index, query, self.k)
        docs = [self.index.get(doc_id) for doc_id in result.doc_ids]
        return fit_evidence(docs, self.budget)
