"""Step-by-step interpreter for reasoning programs, plus majority-vote aggregation."""

from __future__ import annotations

import enum
import logging
from collections import Counter
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Union

from .client import HandlerError
from .dsl import (
    And,
    LogicExpr,
    Not,
    Or,
    ReasoningProgram,
    StepKind,
    TemplateString,
    Var,
    Placeholder,
    render_expr,
    resolve_name,
)
from .handlers import EvidenceSetting, SubTaskHandler
from .retrieval import (
    DEFAULT_EVIDENCE_BUDGET,
    Bm25Evidence,
    Bm25Index,
    EvidenceSelector,
    GoldEvidence,
    NoEvidence,
)

if TYPE_CHECKING:
    from .datasets import ClaimRecord

log = logging.getLogger(__name__)


class VeracityLabel(str, enum.Enum):
    SUPPORTED = "Supported"
    REFUTED = "Refuted"

    @classmethod
    def from_bool(cls, value: bool) -> VeracityLabel:
        return cls.SUPPORTED if value else cls.REFUTED

    def as_bool(self) -> bool:
        return self is VeracityLabel.SUPPORTED


Value = Union[str, bool]


@dataclass(frozen=True)
class Binding:
    name: str
    value: Value  # str from Question, bool from Verify/Predict
    origin_step: int

    def text(self) -> str:
        if isinstance(self.value, bool):
            return "True" if self.value else "False"
        return self.value

    def to_dict(self) -> dict:
        return {"name": self.name, "value": self.value, "origin_step": self.origin_step}


class ExecError(Exception):
    UNBOUND = "unbound_variable"
    AMBIGUOUS = "ambiguous_case_match"
    TYPE_MISMATCH = "type_mismatch"
    HANDLER_FAILURE = "handler_failure"

    def __init__(self, kind: str, detail: str, step_index: int = -1):
        super().__init__(f"{kind}: {detail}")
        self.kind = kind
        self.detail = detail
        self.step_index = step_index

    def to_dict(self) -> dict:
        return {"kind": self.kind, "step_index": self.step_index, "detail": self.detail}


def _lookup(name: str, env: Mapping[str, Binding]) -> Binding:
    resolved, err = resolve_name(name, list(env))
    if err == "ambiguous":
        raise ExecError(ExecError.AMBIGUOUS, f"{name!r} matches several variables by case")
    if resolved is None:
        raise ExecError(ExecError.UNBOUND, f"{name!r} is not bound")
    return env[resolved]


def substitute(arg: TemplateString, env: Mapping[str, Binding]) -> str:
    parts = []
    for seg in arg.segments:
        if isinstance(seg, Placeholder):
            parts.append(_lookup(seg.name, env).text())
        else:
            parts.append(seg.text)
    return "".join(parts)


def eval_logic(expr: LogicExpr, env: Mapping[str, Binding]) -> bool:
    if isinstance(expr, Var):
        value = _lookup(expr.name, env).value
        if not isinstance(value, bool):
            raise ExecError(ExecError.TYPE_MISMATCH, f"{expr.name!r} holds text, not a truth value")
        return value
    if isinstance(expr, Not):
        return not eval_logic(expr.operand, env)
    if isinstance(expr, And):
        # Evaluate both sides so type errors surface regardless of short-circuiting.
        left, right = eval_logic(expr.left, env), eval_logic(expr.right, env)
        return left and right
    if isinstance(expr, Or):
        left, right = eval_logic(expr.left, env), eval_logic(expr.right, env)
        return left or right
    raise TypeError(f"not a logic expression: {expr!r}")


def _substitute_expr(expr: LogicExpr, env: Mapping[str, Binding]) -> str:
    """Rendered expression with each variable replaced by its truth value."""

    def swap(e: LogicExpr) -> LogicExpr:
        if isinstance(e, Var):
            return Var(_lookup(e.name, env).text())
        if isinstance(e, Not):
            return Not(swap(e.operand))
        return type(e)(swap(e.left), swap(e.right))

    return render_expr(swap(expr))


@dataclass
class StepRecord:
    step_index: int
    kind: StepKind
    target_var: str
    raw_argument: str
    substituted_argument: str
    evidence_doc_ids: list[str]
    result: Binding
    handler_anomaly: str | None = None

    def to_dict(self) -> dict:
        return {
            "step_index": self.step_index,
            "kind": self.kind.value,
            "target_var": self.target_var,
            "raw_argument": self.raw_argument,
            "substituted_argument": self.substituted_argument,
            "evidence_doc_ids": list(self.evidence_doc_ids),
            "result": self.result.to_dict(),
            "handler_anomaly": self.handler_anomaly,
        }


@dataclass
class ExecutionTrace:
    """Record of one program run; doubles as the human-readable explanation."""

    claim_id: str
    program_source: str
    step_records: list[StepRecord] = field(default_factory=list)
    final_label: VeracityLabel | None = None
    failure: ExecError | None = None

    @property
    def env(self) -> dict[str, Binding]:
        return {r.result.name: r.result for r in self.step_records}

    def to_dict(self) -> dict:
        return {
            "claim_id": self.claim_id,
            "program_source": self.program_source,
            "steps": [r.to_dict() for r in self.step_records],
            "final_label": self.final_label.value if self.final_label else None,
            "failure": self.failure.to_dict() if self.failure else None,
        }


@dataclass
class ExecSettings:
    setting: EvidenceSetting = EvidenceSetting.CLOSED_BOOK
    per_step_k: int = 10
    evidence_budget: int | None = DEFAULT_EVIDENCE_BUDGET
    # Open-book retrieval index; in the gold setting, optional doc lookup by id.
    index: Bm25Index | None = None

    def __post_init__(self):
        self.setting = EvidenceSetting(self.setting)

    def selector(self) -> EvidenceSelector:
        if self.setting is EvidenceSetting.CLOSED_BOOK:
            return NoEvidence()
        if self.setting is EvidenceSetting.GOLD:
            return GoldEvidence(self.index, self.evidence_budget)
        if self.index is None:
            raise ValueError("open-book execution needs a retrieval index")
        return Bm25Evidence(self.index, self.per_step_k, self.evidence_budget)


def execute(
    program: ReasoningProgram,
    handler: SubTaskHandler,
    claim: ClaimRecord,
    settings: ExecSettings,
    selector: EvidenceSelector | None = None,
) -> ExecutionTrace:
    """Run ``program`` in order; the first failing step ends the run."""
    selector = selector or settings.selector()
    trace = ExecutionTrace(claim.claim_id, program.source_text)
    env: dict[str, Binding] = {}
    for i, step in enumerate(program.steps):
        try:
            record = _run_step(i, step, env, handler, claim, selector)
        except ExecError as exc:
            exc.step_index = i
            trace.failure = exc
            return trace
        env[step.target_var] = record.result
        trace.step_records.append(record)
    last = trace.step_records[-1].result.value
    if not isinstance(last, bool):
        trace.failure = ExecError(
            ExecError.TYPE_MISMATCH, "final step did not produce a truth value", len(program) - 1
        )
        return trace
    trace.final_label = VeracityLabel.from_bool(last)
    return trace


def _run_step(i, step, env, handler, claim, selector) -> StepRecord:
    if step.kind is StepKind.PREDICT:
        value = eval_logic(step.argument, env)
        return StepRecord(
            i, step.kind, step.target_var, render_expr(step.argument),
            _substitute_expr(step.argument, env), [], Binding(step.target_var, value, i),
        )
    text = substitute(step.argument, env)
    anomaly = None
    try:
        evidence = selector.select(text, claim)
        if step.kind is StepKind.QUESTION:
            value: Value = handler.question(text, evidence)
        else:
            value, anomaly = handler.check(text, evidence)
    except HandlerError as exc:
        raise ExecError(ExecError.HANDLER_FAILURE, str(exc)) from exc
    except Exception as exc:  # handlers are pluggable; any crash is a handler failure
        raise ExecError(ExecError.HANDLER_FAILURE, f"{type(exc).__name__}: {exc}") from exc
    return StepRecord(
        i, step.kind, step.target_var, step.argument.source(), text,
        [d.doc_id for d in evidence], Binding(step.target_var, value, i), anomaly,
    )


# --- aggregation -------------------------------------------------------------


class FallbackMode(str, enum.Enum):
    DIRECT_VERIFY = "direct_verify"
    SUPPORTED = "supported"
    REFUTED = "refuted"


@dataclass
class FallbackPolicy:
    """Verdict used when the vote ties or every program failed.

    ``direct_verify`` asks the handler to Verify the raw claim (the one-step
    baseline). If that call fails too, the claim is judged Refuted.
    """

    mode: FallbackMode = FallbackMode.DIRECT_VERIFY
    handler: SubTaskHandler | None = None
    selector: EvidenceSelector | None = None

    def __post_init__(self):
        self.mode = FallbackMode(self.mode)
        if self.mode is FallbackMode.DIRECT_VERIFY and self.handler is None:
            raise ValueError("direct_verify fallback needs a handler")

    def resolve(self, claim: ClaimRecord) -> VeracityLabel:
        if self.mode is FallbackMode.SUPPORTED:
            return VeracityLabel.SUPPORTED
        if self.mode is FallbackMode.REFUTED:
            return VeracityLabel.REFUTED
        try:
            evidence = self.selector.select(claim.text, claim) if self.selector else []
            value, _ = self.handler.check(claim.text, evidence)
        except Exception as exc:
            log.warning("direct-verify fallback failed for %s: %s", claim.claim_id, exc)
            return VeracityLabel.REFUTED
        return VeracityLabel.from_bool(value)


def majority(verdicts: Sequence[VeracityLabel | None]) -> VeracityLabel | None:
    """Strict majority over present verdicts (duplicates count); None on tie or no votes."""
    counts = Counter(v for v in verdicts if v is not None)
    sup, ref = counts[VeracityLabel.SUPPORTED], counts[VeracityLabel.REFUTED]
    if sup > ref:
        return VeracityLabel.SUPPORTED
    if ref > sup:
        return VeracityLabel.REFUTED
    return None


def aggregate(
    verdicts: Sequence[VeracityLabel | None], claim: ClaimRecord, fallback: FallbackPolicy
) -> VeracityLabel:
    if not verdicts:
        raise ValueError("need at least one verdict slot")
    winner = majority(verdicts)
    return winner if winner is not None else fallback.resolve(claim)
