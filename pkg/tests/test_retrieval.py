from __future__ import annotations

import json
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from progfc.datasets import ClaimRecord
from progfc.dsl import parse_program
from progfc.engine import Binding
from progfc.retrieval import (
    MAGIC,
    Bm25Evidence,
    Bm25Index,
    CorpusError,
    EvidenceDoc,
    GoldEvidence,
    IndexFormatError,
    RetrievalResult,
    bm25_score,
    build_index_file,
    combine_results,
    fit_evidence,
    ingest_corpus,
    iterative_retrieve,
    recall_at_k,
    retrieve,
    tokenize,
)

from .fixtures import brute_force_rank, random_corpus, random_query, two_hop_fixture

TOY = [
    EvidenceDoc("a", "A", "the cat sat on the mat"),
    EvidenceDoc("b", "B", "the dog"),
    EvidenceDoc("c", "C", "cat and dog and cat"),
]


def test_tokenize():
    assert tokenize("Hello, World! It's 2023_x") == ["hello", "world", "it", "s", "2023", "x"]
    assert tokenize("Zoë Saldaña") == ["zoë", "saldaña"]


def test_toy_index_statistics():
    index = ingest_corpus(TOY)
    assert index.doc_count == 3
    assert index.avg_doc_length == pytest.approx((6 + 2 + 5) / 3)
    assert index.df("cat") == 2 and index.tf("cat", 2) == 2 and index.tf("cat", 1) == 0


def test_postings_match_hand_counts():
    # 20 docs; doc i contains "alpha" i%3+1 times and "beta" only when i%4 == 0.
    docs = [
        EvidenceDoc(f"d{i:02d}", "", " ".join(["alpha"] * (i % 3 + 1) + (["beta"] if i % 4 == 0 else []) + ["pad"]))
        for i in range(20)
    ]
    index = ingest_corpus(docs)
    ords, tfs = index.postings["alpha"]
    assert list(ords) == list(range(20))
    assert list(tfs) == [1, 2, 3] * 6 + [1, 2]
    ords, tfs = index.postings["beta"]
    assert list(ords) == [0, 4, 8, 12, 16] and list(tfs) == [1] * 5
    assert list(index.doc_lengths)[:4] == [3, 3, 4, 2]
    assert all(o < index.doc_count for ords, _ in index.postings.values() for o in ords)


def test_duplicate_id_rejected():
    with pytest.raises(CorpusError, match="'a'"):
        ingest_corpus(TOY + [EvidenceDoc("a", "", "again")])


def test_single_doc_closed_form():
    index = ingest_corpus([EvidenceDoc("x", "", "red red blue")])
    # N=1, df=1 for both terms; dl == avgdl so the length norm is 1.
    idf = math.log(1 + 0.5 / 1.5)
    expected = idf * 2 * 1.9 / (2 + 0.9) + idf * 1 * 1.9 / (1 + 0.9)
    assert bm25_score(index, ["red", "blue"], 0) == pytest.approx(expected, rel=1e-12)
    assert bm25_score(index, ["green"], 0) == 0.0


def test_absent_term_contributes_zero():
    index = ingest_corpus(TOY)
    assert bm25_score(index, ["cat", "zebra"], 0) == bm25_score(index, ["cat"], 0)


def test_idf_sanity():
    index = ingest_corpus(TOY)
    assert index.idf("the") > 0  # the +1 inside the log keeps idf positive
    docs = [EvidenceDoc(str(i), "", "common" + (" rare" if i == 0 else "")) for i in range(5)]
    index = ingest_corpus(docs)
    assert index.idf("common") < index.idf("rare")


@pytest.mark.parametrize("seed", range(5))
def test_retrieve_matches_brute_force(seed):
    rng = random.Random(seed)
    docs = random_corpus(rng, max_docs=200, max_terms=30)
    index = ingest_corpus(docs)
    for _ in range(5):
        q = random_query(rng, docs)
        got = retrieve(index, q, 10).ranked
        want = brute_force_rank(docs, q, 10)
        assert [d for d, _ in got] == [d for d, _ in want]
        for (_, s1), (_, s2) in zip(got, want):
            assert s1 == pytest.approx(s2, rel=1e-9)


def test_retrieve_edge_cases():
    index = ingest_corpus(TOY)
    assert retrieve(index, "zebra", 5).ranked == ()
    assert len(retrieve(index, "cat dog the", 100)) == 3
    with pytest.raises(ValueError):
        retrieve(index, "cat", 0)


def test_tie_break_by_doc_id():
    docs = [EvidenceDoc(i, "", "same words") for i in ("b", "c", "a")]
    assert retrieve(ingest_corpus(docs), "same", 3).doc_ids == ["a", "b", "c"]


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_retrieve_prefix_property(seed):
    rng = random.Random(seed)
    docs = random_corpus(rng, max_docs=60, max_terms=10)
    index = ingest_corpus(docs)
    q = random_query(rng, docs)
    for k in range(1, 8):
        assert retrieve(index, q, k).ranked == retrieve(index, q, k + 1).ranked[:k]


@given(st.integers(1, 8), st.integers(0, 8), st.integers(0, 3))
def test_score_monotone_in_tf(tf, pads, swaps):
    # Swapping padding for the query term raises tf while length, avgdl and df stay put.
    swaps = min(swaps, pads)
    others = [EvidenceDoc("o1", "", "term x y z"), EvidenceDoc("o2", "", "y z w")]
    lo = ingest_corpus(others + [EvidenceDoc("t", "", " ".join(["term"] * tf + ["pad"] * pads))])
    hi = ingest_corpus(others + [EvidenceDoc("t", "", " ".join(["term"] * (tf + swaps) + ["pad"] * (pads - swaps)))])
    assert hi.avg_doc_length == lo.avg_doc_length
    assert bm25_score(hi, ["term"], 2) >= bm25_score(lo, ["term"], 2)


def test_score_monotone_in_tf_fixed_stats():
    index = ingest_corpus([EvidenceDoc("a", "", "t t t p"), EvidenceDoc("b", "", "t p p p")])
    # Equal lengths, so only tf differs.
    assert bm25_score(index, ["t"], 0) > bm25_score(index, ["t"], 1)


# --- combining and recall -------------------------------------------------------


def test_combine_keeps_max_and_reranks():
    r1 = RetrievalResult((("a", 3.0), ("b", 1.0)))
    r2 = RetrievalResult((("b", 2.0), ("c", 2.0)))
    assert combine_results([r1, r2]).ranked == (("a", 3.0), ("b", 2.0), ("c", 2.0))
    assert combine_results([r1, r1]).ranked == r1.ranked
    assert combine_results([r1]).ranked == r1.ranked


def test_combine_truncates_to_ten():
    r1 = RetrievalResult(tuple((f"x{i:02d}", 100.0 - i) for i in range(10)))
    r2 = RetrievalResult(tuple((f"y{i:02d}", 99.5 - i) for i in range(10)))
    combined = combine_results([r1, r2])
    everything = sorted(r1.ranked + r2.ranked, key=lambda x: (-x[1], x[0]))
    assert combined.ranked == tuple(everything[:10])


def test_recall_at_k():
    r = RetrievalResult((("x", 3.0), ("y", 2.0), ("g1", 1.0)))
    assert recall_at_k(r, {"x", "y"}, 10) == 1.0
    assert recall_at_k(r, {"q"}, 10) == 0.0
    assert recall_at_k(r, {"g1", "g2"}, 10) == 0.5
    assert recall_at_k(r, {"g1"}, 2) == 0.0
    with pytest.raises(ValueError):
        recall_at_k(r, set(), 10)


def test_iterative_retrieval_on_two_hop_fixture():
    docs, claims, programs, fixture = two_hop_fixture(20)
    index = ingest_corpus(docs)
    claim = claims[3]
    prog = parse_program(programs[claim.claim_id])
    one_step = retrieve(index, claim.text, 10)
    assert recall_at_k(one_step, claim.gold_evidence_ids, 10) == 0.5
    env = {"answer_1": Binding("answer_1", "Quenby3 Marlowe3", 0)}
    per_step, combined = iterative_retrieve(prog, env, index)
    assert set(per_step) == {0, 1}
    assert recall_at_k(combined, claim.gold_evidence_ids, 10) == 1.0


def test_iterative_skips_unbound_steps():
    prog = parse_program('a = Question("Who won?")\nf = Verify("{a} lost.")\nl = Predict(f)')
    per_step, _ = iterative_retrieve(prog, {}, ingest_corpus(TOY))
    assert set(per_step) == {0}


def test_one_step_program_combined_equals_step():
    prog = parse_program('f = Verify("the cat")\nl = Predict(f)')
    index = ingest_corpus(TOY)
    per_step, combined = iterative_retrieve(prog, {}, index)
    assert combined.ranked == per_step[0].top(10).ranked


# --- evidence selection -------------------------------------------------------


def test_fit_evidence_budget():
    docs = [EvidenceDoc(str(i), "", "x" * 10) for i in range(4)]
    assert [d.doc_id for d in fit_evidence(docs, 22)] == ["0", "1"]
    assert [d.doc_id for d in fit_evidence(docs, None)] == ["0", "1", "2", "3"]
    (only,) = fit_evidence([EvidenceDoc("big", "", "y" * 50)], 20)
    assert only.text == "y" * 20


def test_gold_and_bm25_selectors():
    index = ingest_corpus(TOY)
    claim = ClaimRecord("c", "cat", None, None, ("c", "a"))
    assert [d.doc_id for d in GoldEvidence(index).select("anything", claim)] == ["c", "a"]
    inline = ClaimRecord("c", "cat", None, None, ("z",), (EvidenceDoc("z", "", "inline text"),))
    assert [d.text for d in GoldEvidence(None).select("q", inline)] == ["inline text"]
    with pytest.raises(LookupError):
        GoldEvidence(index).select("q", ClaimRecord("c", "x", None, None, ("missing",)))
    assert [d.doc_id for d in Bm25Evidence(index, k=2).select("cat", claim)] == ["c", "a"]


# --- index file ---------------------------------------------------------------


def test_index_file_round_trip(tmp_path):
    rng = random.Random(3)
    docs = random_corpus(rng, max_docs=300, max_terms=40)
    docs.append(EvidenceDoc("weird\nid é", "Tïtle", "ünïcode text t1"))
    corpus = tmp_path / "corpus.jsonl"
    corpus.write_text("".join(json.dumps(d.to_dict()) + "\n" for d in docs), encoding="utf-8")
    assert build_index_file(corpus, tmp_path / "a.idx") == len(docs)
    mem = ingest_corpus(docs)
    mem.save(tmp_path / "b.idx")
    for name in ("a.idx", "b.idx"):
        disk = Bm25Index.load(tmp_path / name)
        try:
            assert disk.doc_ids == mem.doc_ids
            assert list(disk.doc_lengths) == list(mem.doc_lengths)
            assert {t: (list(o), list(f)) for t, (o, f) in disk.postings.items()} == {
                t: (list(o), list(f)) for t, (o, f) in mem.postings.items()
            }
            assert (disk.k1, disk.b) == (0.9, 0.4)
            assert disk.get("weird\nid é") == docs[-1]
            for q in ("t1 t2", "t3", "text"):
                assert retrieve(disk, q, 10) == retrieve(mem, q, 10)
        finally:
            disk.close()
    assert (tmp_path / "a.idx").read_bytes()[:8] == MAGIC


def test_index_file_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.idx"
    bad.write_bytes(b"")
    with pytest.raises(IndexFormatError):
        Bm25Index.load(bad)
    bad.write_bytes(b"NOTANIDX" + b"\0" * 200)
    with pytest.raises(IndexFormatError, match="magic"):
        Bm25Index.load(bad)
    ingest_corpus(TOY).save(bad)
    data = bytearray(bad.read_bytes())
    data[8] = 99  # version
    bad.write_bytes(bytes(data))
    with pytest.raises(IndexFormatError, match="version"):
        Bm25Index.load(bad)


def test_index_file_truncated(tmp_path):
    path = tmp_path / "x.idx"
    ingest_corpus(TOY).save(path)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(IndexFormatError):
        Bm25Index.load(path)


def test_corpus_reader_errors(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text('{"id": "a", "text": "x"}\n{"title": "no id"}\n')
    with pytest.raises(CorpusError, match=":2:"):
        ingest_corpus(path)
