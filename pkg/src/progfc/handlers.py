"""Question/Verify sub-task handlers and their prompt formats."""

from __future__ import annotations

import abc
import enum
import re
import threading
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from typing import NamedTuple, Protocol

from .client import HandlerError
from .retrieval import DEFAULT_EVIDENCE_BUDGET, EVIDENCE_SEPARATOR, EvidenceDoc, fit_evidence

QUESTION_MAX_TOKENS = 64
VERIFY_MAX_TOKENS = 8

UNPARSEABLE_VERIFY = "unparseable verify output"


class EvidenceSetting(str, enum.Enum):
    GOLD = "gold"
    OPEN_BOOK = "open_book"
    CLOSED_BOOK = "closed_book"


_SLOT_RE = re.compile(r"\{(EVIDENCE|QUESTION|CLAIM)\}")


@dataclass(frozen=True)
class PromptTemplate:
    setting: EvidenceSetting
    kind: str  # "question" | "verify"
    template: str

    def __post_init__(self):
        if self.setting is EvidenceSetting.CLOSED_BOOK and "{EVIDENCE}" in self.template:
            raise ValueError("closed-book templates take no evidence")

    def render(self, **slots: str) -> str:
        # Single pass so slot values containing "{CLAIM}" etc. are left alone.
        return _SLOT_RE.sub(lambda m: slots[m.group(1)], self.template)


_WITH_EVIDENCE_Q = "{EVIDENCE}\nQ: {QUESTION}? The answer is:"
_WITH_EVIDENCE_V = "{EVIDENCE}\nQ: Is it true that {CLAIM}? True or False? The answer is:"

TEMPLATES: dict[tuple[EvidenceSetting, str], PromptTemplate] = {
    (EvidenceSetting.GOLD, "question"): PromptTemplate(EvidenceSetting.GOLD, "question", _WITH_EVIDENCE_Q),
    (EvidenceSetting.OPEN_BOOK, "question"): PromptTemplate(EvidenceSetting.OPEN_BOOK, "question", _WITH_EVIDENCE_Q),
    (EvidenceSetting.CLOSED_BOOK, "question"): PromptTemplate(
        EvidenceSetting.CLOSED_BOOK, "question", "Q: {QUESTION}? The answer is:"
    ),
    (EvidenceSetting.GOLD, "verify"): PromptTemplate(EvidenceSetting.GOLD, "verify", _WITH_EVIDENCE_V),
    (EvidenceSetting.OPEN_BOOK, "verify"): PromptTemplate(EvidenceSetting.OPEN_BOOK, "verify", _WITH_EVIDENCE_V),
    (EvidenceSetting.CLOSED_BOOK, "verify"): PromptTemplate(
        EvidenceSetting.CLOSED_BOOK, "verify", "Q: Is it true that {CLAIM}? True or False? The answer is:"
    ),
}


def _template_for(setting, kind: str, evidence: Sequence[EvidenceDoc]) -> PromptTemplate:
    setting = EvidenceSetting(setting)
    if setting is EvidenceSetting.CLOSED_BOOK and evidence:
        raise ValueError("closed-book prompts take no evidence")
    # Retrieval can come back empty; fall back to the evidence-free layout.
    if not evidence:
        setting = EvidenceSetting.CLOSED_BOOK
    return TEMPLATES[(setting, kind)]


def _evidence_block(evidence: Sequence[EvidenceDoc], budget: int | None) -> str:
    return EVIDENCE_SEPARATOR.join(d.text for d in fit_evidence(list(evidence), budget))


def _clean_question(question: str) -> str:
    return question.strip().rstrip("?").rstrip()


def _clean_claim(claim: str) -> str:
    claim = claim.strip()
    if claim.endswith(".") or claim.endswith("?"):
        claim = claim[:-1].rstrip()
    return claim


def build_question_prompt(
    question: str,
    evidence: Sequence[EvidenceDoc],
    setting: EvidenceSetting | str,
    budget: int | None = DEFAULT_EVIDENCE_BUDGET,
) -> str:
    tpl = _template_for(setting, "question", evidence)
    return tpl.render(EVIDENCE=_evidence_block(evidence, budget), QUESTION=_clean_question(question))


def build_verify_prompt(
    claim: str,
    evidence: Sequence[EvidenceDoc],
    setting: EvidenceSetting | str,
    budget: int | None = DEFAULT_EVIDENCE_BUDGET,
) -> str:
    tpl = _template_for(setting, "verify", evidence)
    return tpl.render(EVIDENCE=_evidence_block(evidence, budget), CLAIM=_clean_claim(claim))


_WORD_RE = re.compile(r"[^\W\d_]+")
_TRUE_WORDS = frozenset({"true", "yes", "supported"})
_FALSE_WORDS = frozenset({"false", "no", "refuted"})


class VerifyOutcome(NamedTuple):
    value: bool
    anomaly: str | None = None


def parse_verify_output(text: str) -> VerifyOutcome:
    """Map raw Verify output to a boolean by its first alphabetic token.

    Anything other than true/yes/supported or false/no/refuted becomes
    ``False`` with an anomaly note.
    """
    m = _WORD_RE.search(text or "")
    word = m.group().casefold() if m else ""
    if word in _TRUE_WORDS:
        return VerifyOutcome(True)
    if word in _FALSE_WORDS:
        return VerifyOutcome(False)
    return VerifyOutcome(False, UNPARSEABLE_VERIFY)


class SubTaskHandler(abc.ABC):
    """Question and Verify executors for one evidence setting."""

    concurrent_safe: bool = False

    @abc.abstractmethod
    def question(self, question: str, evidence: Sequence[EvidenceDoc]) -> str: ...

    @abc.abstractmethod
    def check(self, claim: str, evidence: Sequence[EvidenceDoc]) -> VerifyOutcome:
        """Verify with the anomaly note (if any) kept alongside the verdict."""

    def verify(self, claim: str, evidence: Sequence[EvidenceDoc]) -> bool:
        return self.check(claim, evidence).value


class Completer(Protocol):
    def complete(self, prompt: str, n: int = 1, *, temperature=None, max_tokens=None, stop=None) -> list[str]: ...


class LmHandler(SubTaskHandler):
    """Handler backed by a completion endpoint, greedy decoding by default."""

    concurrent_safe = True

    def __init__(
        self,
        client: Completer,
        setting: EvidenceSetting | str,
        *,
        budget: int | None = DEFAULT_EVIDENCE_BUDGET,
        question_tokens: int = QUESTION_MAX_TOKENS,
        verify_tokens: int = VERIFY_MAX_TOKENS,
        temperature: float = 0.0,
    ):
        self.client = client
        self.setting = EvidenceSetting(setting)
        self.budget = budget
        self.question_tokens = question_tokens
        self.verify_tokens = verify_tokens
        self.temperature = temperature
        self.concurrent_safe = getattr(client, "concurrent_safe", False)

    def _evidence(self, evidence):
        return [] if self.setting is EvidenceSetting.CLOSED_BOOK else evidence

    def question(self, question: str, evidence: Sequence[EvidenceDoc]) -> str:
        prompt = build_question_prompt(question, self._evidence(evidence), self.setting, self.budget)
        (text,) = self.client.complete(
            prompt, 1, temperature=self.temperature, max_tokens=self.question_tokens
        )
        answer = text.strip()
        if not answer:
            raise HandlerError(f"empty answer to question {question!r}")
        return answer

    def check(self, claim: str, evidence: Sequence[EvidenceDoc]) -> VerifyOutcome:
        prompt = build_verify_prompt(claim, self._evidence(evidence), self.setting, self.budget)
        (text,) = self.client.complete(
            prompt, 1, temperature=self.temperature, max_tokens=self.verify_tokens
        )
        return parse_verify_output(text)


def normalize_key(text: str) -> str:
    return " ".join(text.casefold().split()).rstrip(" .?!")


class MockHandler(SubTaskHandler):
    """Deterministic fixture-backed handler.

    String values answer questions, boolean values judge claims; keys match
    after :func:`normalize_key`.
    """

    concurrent_safe = True

    def __init__(self, fixture: Mapping[str, str | bool]):
        self.answers = {normalize_key(k): v for k, v in fixture.items() if not isinstance(v, bool)}
        self.claims = {normalize_key(k): v for k, v in fixture.items() if isinstance(v, bool)}
        self.calls: list[tuple[str, str, tuple[str, ...]]] = []
        self._lock = threading.Lock()

    def _log(self, kind: str, text: str, evidence: Sequence[EvidenceDoc]) -> None:
        with self._lock:
            self.calls.append((kind, text, tuple(d.doc_id for d in evidence)))

    def question(self, question: str, evidence: Sequence[EvidenceDoc]) -> str:
        self._log("question", question, evidence)
        answer = self.answers.get(normalize_key(question))
        if answer is None:
            raise HandlerError(f"question not in fixture: {question!r}")
        if not str(answer).strip():
            raise HandlerError(f"empty answer to question {question!r}")
        return str(answer)

    def check(self, claim: str, evidence: Sequence[EvidenceDoc]) -> VerifyOutcome:
        self._log("verify", claim, evidence)
        value = self.claims.get(normalize_key(claim))
        if value is None:
            return VerifyOutcome(False, "claim not in fixture")
        return VerifyOutcome(value)


def mock_handler(fixture: Mapping[str, str | bool]) -> MockHandler:
    return MockHandler(fixture)


class SerializedHandler(SubTaskHandler):
    """Wraps a handler that is not concurrent-safe behind a lock."""

    concurrent_safe = True

    def __init__(self, inner: SubTaskHandler):
        self.inner = inner
        self._lock = threading.Lock()

    def question(self, question, evidence):
        with self._lock:
            return self.inner.question(question, evidence)

    def check(self, claim, evidence):
        with self._lock:
            return self.inner.check(claim, evidence)
