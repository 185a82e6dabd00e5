"""Oracles and synthetic data shared by the unit and acceptance tests."""

from __future__ import annotations

import json
import math
import random
from collections import Counter
from pathlib import Path

from progfc.datasets import ClaimRecord
from progfc.engine import VeracityLabel
from progfc.retrieval import EvidenceDoc

# --- BM25 brute force --------------------------------------------------------
# Written straight from the formula; every doc is scored, nothing is indexed.


def brute_force_scores(docs: list[EvidenceDoc], query: str, k1: float = 0.9, b: float = 0.4) -> dict[str, float]:
    tokenized = {d.doc_id: d.text.lower().split() for d in docs}
    n = len(docs)
    avgdl = sum(len(t) for t in tokenized.values()) / n
    df = Counter()
    for toks in tokenized.values():
        df.update(set(toks))
    scores = {}
    for doc_id, toks in tokenized.items():
        tf = Counter(toks)
        total = 0.0
        for term in query.lower().split():
            f = tf[term]
            if not f:
                continue
            idf = math.log(1 + (n - df[term] + 0.5) / (df[term] + 0.5))
            total += idf * f * (k1 + 1) / (f + k1 * (1 - b + b * len(toks) / avgdl))
        scores[doc_id] = total
    return scores


def brute_force_rank(docs, query, k, k1=0.9, b=0.4) -> list[tuple[str, float]]:
    scores = brute_force_scores(docs, query, k1, b)
    ranked = sorted(((d, s) for d, s in scores.items() if s > 0), key=lambda x: (-x[1], x[0]))
    return ranked[:k]


def random_corpus(rng: random.Random, max_docs: int = 1000, max_terms: int = 50) -> list[EvidenceDoc]:
    vocab = [f"t{i}" for i in range(rng.randint(1, max_terms))]
    n = rng.randint(1, max_docs)
    # Unpadded numeric ids so lexicographic order differs from insertion order.
    ids = rng.sample(range(10 * n), n)
    docs = []
    for i in ids:
        length = rng.randint(1, 30)
        words = [rng.choice(vocab) for _ in range(length)]
        docs.append(EvidenceDoc(f"d{i}", "", " ".join(words)))
    return docs


def random_query(rng: random.Random, docs: list[EvidenceDoc]) -> str:
    vocab = sorted({w for d in docs for w in d.text.split()}) + ["absent"]
    return " ".join(rng.choice(vocab) for _ in range(rng.randint(1, 5)))


# --- synthetic two-hop corpus ------------------------------------------------
# Claim i names film i; the film's director appears only in the film doc and in
# the director's own doc, which shares no token with the claim.


def two_hop_fixture(pairs: int = 100):
    docs, claims, programs, fixture = [], [], {}, {}
    for i in range(pairs):
        film, person = f"Zorblax{i}", f"Quenby{i} Marlowe{i}"
        docs.append(EvidenceDoc(f"film_{i}", film, f"{film} is a film directed by {person}."))
        docs.append(EvidenceDoc(f"person_{i}", person, f"{person} grew up near Tolliver{i} and studied painting."))
        claim = f"The director of the film {film} is a celebrated filmmaker."
        claims.append(ClaimRecord(f"c{i}", claim, VeracityLabel.SUPPORTED, 2, (f"film_{i}", f"person_{i}")))
        programs[f"c{i}"] = (
            f'answer_1 = Question("Who directed the film {film}?")\n'
            'fact_1 = Verify("{answer_1} is a celebrated filmmaker.")\n'
            "label = Predict(fact_1)"
        )
        fixture[f"Who directed the film {film}?"] = person
        fixture[f"{person} is a celebrated filmmaker."] = True
    return docs, claims, programs, fixture


# --- twenty-claim pipeline fixture ---------------------------------------------


def pipeline_fixture(tmp: Path, n: int = 20) -> dict[str, Path]:
    """Dataset, recorded programs and handler fixture for mock-backed runs.

    Claim i gets three programs: two valid ones and (for odd i) one malformed,
    so votes, ties and fallbacks all occur.
    """
    rows, samples, fixture = [], [], {}
    for i in range(n):
        born = i % 3 != 0
        rows.append({
            "uid": f"h{i}",
            "claim": f"Person{i} was born in Place{i} and wrote Book{i}.",
            "label": "SUPPORTED" if born and i % 2 else "NOT_SUPPORTED",
            "num_hops": 2 + i % 3,
            "supporting_facts": [[f"Person{i}", 0], [f"Book{i}", 1]],
        })
        good = (
            f'fact_1 = Verify("Person{i} was born in Place{i}.")\n'
            f'fact_2 = Verify("Person{i} wrote Book{i}.")\n'
            "label = Predict(fact_1 and fact_2)"
        )
        alt = (
            f'answer_1 = Question("Who wrote Book{i}?")\n'
            'fact_1 = Verify("{answer_1} was born in Place' + str(i) + '.")\n'
            "label = Predict(fact_1)"
        )
        texts = [good, alt, "fact_1 = Verify(oops" if i % 2 else good]
        samples.append({"claim_id": f"h{i}", "samples": [{"text": t} for t in texts]})
        fixture[f"Person{i} was born in Place{i}."] = born
        fixture[f"Person{i} wrote Book{i}."] = i % 2 == 1
        fixture[f"Who wrote Book{i}?"] = f"Person{i}"
    paths = {"dataset": tmp / "claims.jsonl", "programs": tmp / "programs.jsonl", "fixture": tmp / "fixture.json"}
    paths["dataset"].write_text("".join(json.dumps(r) + "\n" for r in rows))
    paths["programs"].write_text("".join(json.dumps(s) + "\n" for s in samples))
    paths["fixture"].write_text(json.dumps(fixture))
    return paths
