"""Reasoning-program DSL: tokenizer, parser, validator and canonical renderer.

Grammar (one statement per line)::

    program   := line+
    line      := IDENT "=" kind "(" arg ")"
    kind      := "Question" | "Verify" | "Predict"
    arg       := STRING                      (Question, Verify)
               | or_expr                     (Predict)
    or_expr   := and_expr ("or" and_expr)*
    and_expr  := not_expr ("and" not_expr)*
    not_expr  := "not" not_expr | atom
    atom      := IDENT | "(" or_expr ")"
    STRING    := ["f"|"F"] ('"' ... '"' | "'" ... "'")

Inside a STRING, ``{name}`` is a placeholder, ``{{`` and ``}}`` are literal
braces. Blank lines, ``#`` comments and a ``def program():`` header are skipped.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Union

IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_FULL_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
_HEADER_RE = re.compile(r"def\s+[A-Za-z_][A-Za-z0-9_]*\s*\(\s*\)\s*:\s*\Z")
_ASSIGN_LINE_RE = re.compile(r"\s*[A-Za-z_][A-Za-z0-9_]*\s*=(?!=)")

KEYWORDS = frozenset({"and", "or", "not"})
CONSTANTS = frozenset({"True", "False", "None"})


class StepKind(enum.Enum):
    QUESTION = "Question"
    VERIFY = "Verify"
    PREDICT = "Predict"

    @classmethod
    def lookup(cls, name: str) -> StepKind | None:
        # Kind names match case-insensitively: published exemplars contain `predict(...)`.
        folded = name.casefold()
        for kind in cls:
            if kind.value.casefold() == folded:
                return kind
        return None


# --- AST ---------------------------------------------------------------------


@dataclass(frozen=True)
class Literal:
    text: str


@dataclass(frozen=True)
class Placeholder:
    name: str


Segment = Union[Literal, Placeholder]


@dataclass(frozen=True)
class TemplateString:
    segments: tuple[Segment, ...]

    @property
    def placeholders(self) -> list[str]:
        return [s.name for s in self.segments if isinstance(s, Placeholder)]

    def source(self) -> str:
        """Template text with placeholders as ``{name}`` and braces escaped."""
        out = []
        for seg in self.segments:
            if isinstance(seg, Placeholder):
                out.append("{" + seg.name + "}")
            else:
                out.append(seg.text.replace("{", "{{").replace("}", "}}"))
        return "".join(out)


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Not:
    operand: LogicExpr


@dataclass(frozen=True)
class And:
    left: LogicExpr
    right: LogicExpr


@dataclass(frozen=True)
class Or:
    left: LogicExpr
    right: LogicExpr


LogicExpr = Union[Var, Not, And, Or]
Argument = Union[TemplateString, Var, Not, And, Or]


def logic_vars(expr: LogicExpr) -> list[str]:
    """Variable names in left-to-right order (with repeats)."""
    if isinstance(expr, Var):
        return [expr.name]
    if isinstance(expr, Not):
        return logic_vars(expr.operand)
    return logic_vars(expr.left) + logic_vars(expr.right)


@dataclass(frozen=True)
class ReasoningStep:
    target_var: str
    kind: StepKind
    argument: Argument
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class ReasoningProgram:
    steps: tuple[ReasoningStep, ...]
    source_text: str = field(default="", compare=False)

    def __len__(self) -> int:
        return len(self.steps)


# --- diagnostics -------------------------------------------------------------

SYNTAX_ERROR = "syntax_error"
SEMANTIC_ERROR = "semantic_error"
SEMANTIC_KINDS = ("token", "structure", "subtask")


@dataclass(frozen=True)
class ParseDiagnostic:
    severity: str
    message: str
    line: int
    column: int
    sub_kind: str | None = None

    def __post_init__(self):
        if self.severity == SYNTAX_ERROR and self.sub_kind is not None:
            raise ValueError("syntax errors carry no sub_kind")
        if self.severity == SEMANTIC_ERROR and self.sub_kind not in SEMANTIC_KINDS:
            raise ValueError(f"semantic errors need a sub_kind in {SEMANTIC_KINDS}")
        if self.severity not in (SYNTAX_ERROR, SEMANTIC_ERROR):
            raise ValueError(f"unknown severity {self.severity!r}")

    @property
    def category(self) -> str:
        """``syntax`` or ``semantic_<sub_kind>``, the error-taxonomy bucket."""
        if self.severity == SYNTAX_ERROR:
            return "syntax"
        return f"semantic_{self.sub_kind}"

    def format(self) -> str:
        return f"{self.severity}:{self.sub_kind or ''}:{self.line}:{self.column}:{self.message}"

    def to_dict(self) -> dict:
        return {
            "severity": self.severity,
            "sub_kind": self.sub_kind,
            "line": self.line,
            "column": self.column,
            "message": self.message,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ParseDiagnostic:
        return cls(d["severity"], d["message"], d["line"], d["column"], d.get("sub_kind"))


def format_diagnostics(diags: list[ParseDiagnostic]) -> str:
    return "\n".join(d.format() for d in diags)


class _SyntaxFailure(Exception):
    def __init__(self, message: str, column: int):
        super().__init__(message)
        self.message = message
        self.column = column


# --- tokenizer ---------------------------------------------------------------


@dataclass(frozen=True)
class _Token:
    kind: str  # ident, string, "=", "(", ")", ","
    text: str
    column: int  # 1-based
    value: str = ""  # decoded string contents


def _tokenize(line: str) -> list[_Token]:
    tokens: list[_Token] = []
    i, n = 0, len(line)
    while i < n:
        ch = line[i]
        if ch.isspace():
            i += 1
            continue
        col = i + 1
        if ch in "fF" and i + 1 < n and line[i + 1] in "\"'":
            i += 1
            ch = line[i]
        if ch in "\"'":
            quote = ch
            j = i + 1
            buf: list[str] = []
            while j < n and line[j] != quote:
                if line[j] == "\\" and j + 1 < n and line[j + 1] in "\\\"'":
                    buf.append(line[j + 1])
                    j += 2
                    continue
                buf.append(line[j])
                j += 1
            if j >= n:
                raise _SyntaxFailure("unterminated string literal", col)
            tokens.append(_Token("string", line[col - 1 : j + 1], col, "".join(buf)))
            i = j + 1
            continue
        m = IDENT_RE.match(line, i)
        if m:
            tokens.append(_Token("ident", m.group(), col))
            i = m.end()
            continue
        if ch in "=(),":
            if ch == "=" and line.startswith("==", i):
                raise _SyntaxFailure("unexpected '=='", col)
            tokens.append(_Token(ch, ch, col))
            i += 1
            continue
        raise _SyntaxFailure(f"unexpected character {ch!r}", col)
    return tokens


# --- template strings --------------------------------------------------------


def parse_template(text: str) -> TemplateString:
    """Split decoded string contents into literal and placeholder segments.

    Raises ValueError on an unbalanced or malformed brace.
    """
    segments: list[Segment] = []
    buf: list[str] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch == "{":
            if text.startswith("{{", i):
                buf.append("{")
                i += 2
                continue
            close = text.find("}", i + 1)
            if close < 0:
                raise ValueError(f"unclosed '{{' at offset {i}")
            name = text[i + 1 : close]
            if not _FULL_IDENT_RE.match(name):
                raise ValueError(f"invalid placeholder {{{name}}}")
            if buf:
                segments.append(Literal("".join(buf)))
                buf = []
            segments.append(Placeholder(name))
            i = close + 1
        elif ch == "}":
            if text.startswith("}}", i):
                buf.append("}")
                i += 2
                continue
            raise ValueError(f"unmatched '}}' at offset {i}")
        else:
            buf.append(ch)
            i += 1
    if buf:
        segments.append(Literal("".join(buf)))
    return TemplateString(tuple(segments))


# --- expression parser -------------------------------------------------------


class _ExprParser:
    def __init__(self, tokens: list[_Token], end_column: int):
        self.tokens = tokens
        self.pos = 0
        self.end_column = end_column

    def peek(self) -> _Token | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def column(self) -> int:
        tok = self.peek()
        return tok.column if tok else self.end_column

    def parse(self) -> LogicExpr:
        if not self.tokens:
            raise _SyntaxFailure("Predict needs a logical expression", self.end_column)
        expr = self.or_expr()
        if self.peek() is not None:
            tok = self.peek()
            raise _SyntaxFailure(f"unexpected {tok.text!r} in expression", tok.column)
        return expr

    def _is_kw(self, word: str) -> bool:
        tok = self.peek()
        return tok is not None and tok.kind == "ident" and tok.text == word

    def or_expr(self) -> LogicExpr:
        left = self.and_expr()
        while self._is_kw("or"):
            self.pos += 1
            left = Or(left, self.and_expr())
        return left

    def and_expr(self) -> LogicExpr:
        left = self.not_expr()
        while self._is_kw("and"):
            self.pos += 1
            left = And(left, self.not_expr())
        return left

    def not_expr(self) -> LogicExpr:
        if self._is_kw("not"):
            self.pos += 1
            return Not(self.not_expr())
        return self.atom()

    def atom(self) -> LogicExpr:
        tok = self.peek()
        if tok is None:
            raise _SyntaxFailure("expression ended unexpectedly", self.end_column)
        if tok.kind == "(":
            self.pos += 1
            inner = self.or_expr()
            close = self.peek()
            if close is None or close.kind != ")":
                raise _SyntaxFailure("unbalanced parentheses in expression", self.column())
            self.pos += 1
            return inner
        if tok.kind == "ident":
            if tok.text in KEYWORDS:
                raise _SyntaxFailure(f"unexpected operator {tok.text!r}", tok.column)
            if tok.text in CONSTANTS:
                raise _SyntaxFailure(f"constant {tok.text} is not allowed in Predict", tok.column)
            nxt = self.tokens[self.pos + 1] if self.pos + 1 < len(self.tokens) else None
            if nxt is not None and nxt.kind == "(":
                raise _SyntaxFailure(f"nested call to {tok.text!r} is not allowed", tok.column)
            self.pos += 1
            return Var(tok.text)
        raise _SyntaxFailure(f"unexpected {tok.text!r} in expression", tok.column)


# --- line parser -------------------------------------------------------------


def _parse_line(line: str, lineno: int) -> ReasoningStep:
    tokens = _tokenize(line)
    end_col = len(line.rstrip()) + 1
    if not tokens:
        raise _SyntaxFailure("empty statement", 1)

    target = tokens[0]
    if target.kind != "ident" or target.text in KEYWORDS or target.text in CONSTANTS:
        raise _SyntaxFailure("statement must start with a variable name", target.column)
    if len(tokens) < 2 or tokens[1].kind != "=":
        col = tokens[1].column if len(tokens) > 1 else end_col
        raise _SyntaxFailure("missing '=' after variable name", col)
    if len(tokens) < 3 or tokens[2].kind != "ident":
        col = tokens[2].column if len(tokens) > 2 else end_col
        raise _SyntaxFailure("expected Question, Verify or Predict call", col)
    func = tokens[2]
    kind = StepKind.lookup(func.text)
    if kind is None:
        raise _SyntaxFailure(f"unknown function {func.text!r}", func.column)
    if len(tokens) < 4 or tokens[3].kind != "(":
        col = tokens[3].column if len(tokens) > 3 else end_col
        raise _SyntaxFailure(f"expected '(' after {func.text}", col)

    # Matching close paren for the call.
    depth = 0
    close_idx = None
    for idx in range(3, len(tokens)):
        if tokens[idx].kind == "(":
            depth += 1
        elif tokens[idx].kind == ")":
            depth -= 1
            if depth == 0:
                close_idx = idx
                break
    if close_idx is None:
        raise _SyntaxFailure("unbalanced parentheses", tokens[3].column)
    if close_idx != len(tokens) - 1:
        raise _SyntaxFailure("unexpected text after call", tokens[close_idx + 1].column)
    inner = tokens[4:close_idx]

    if kind is StepKind.PREDICT:
        if any(t.kind == "string" for t in inner):
            tok = next(t for t in inner if t.kind == "string")
            raise _SyntaxFailure("Predict takes a logical expression, not a string", tok.column)
        if any(t.kind == "," for t in inner):
            tok = next(t for t in inner if t.kind == ",")
            raise _SyntaxFailure("Predict takes exactly one argument", tok.column)
        argument: Argument = _ExprParser(inner, tokens[close_idx].column).parse()
    else:
        if len(inner) != 1 or inner[0].kind != "string":
            col = inner[0].column if inner else tokens[close_idx].column
            if len(inner) >= 2 and inner[0].kind == "ident" and inner[1].kind == "(":
                raise _SyntaxFailure(f"nested call to {inner[0].text!r} is not allowed", col)
            raise _SyntaxFailure(f"{kind.value} takes exactly one string argument", col)
        try:
            argument = parse_template(inner[0].value)
        except ValueError as exc:
            raise _SyntaxFailure(str(exc), inner[0].column) from None
    return ReasoningStep(target.text, kind, argument, lineno)


# --- validation --------------------------------------------------------------


def resolve_name(name: str, defined: list[str]) -> tuple[str | None, str | None]:
    """Resolve ``name`` against ``defined`` names.

    Exact match first, then a unique case-insensitive match. Returns
    ``(resolved, error)`` where error is ``"unbound"`` or ``"ambiguous"``.
    """
    if name in defined:
        return name, None
    folded = name.casefold()
    hits = sorted({d for d in defined if d.casefold() == folded})
    if len(hits) == 1:
        return hits[0], None
    if len(hits) > 1:
        return None, "ambiguous"
    return None, "unbound"


def _validate(steps: list[ReasoningStep]) -> list[ParseDiagnostic]:
    diags: list[ParseDiagnostic] = []

    def sem(sub: str, msg: str, line: int, col: int = 1):
        diags.append(ParseDiagnostic(SEMANTIC_ERROR, msg, line, col, sub))

    if not steps:
        sem("structure", "program has no steps", 1)
        return diags

    predict_idx = [i for i, s in enumerate(steps) if s.kind is StepKind.PREDICT]
    if not predict_idx:
        sem("structure", "program has no Predict step", steps[-1].line)
    elif len(predict_idx) > 1:
        for i in predict_idx[1:]:
            sem("structure", "multiple Predict steps", steps[i].line)
    elif predict_idx[0] != len(steps) - 1:
        sem("structure", "Predict must be the final step", steps[predict_idx[0]].line)

    defined: list[str] = []
    kinds: dict[str, StepKind] = {}
    for step in steps:
        if isinstance(step.argument, TemplateString):
            for name in step.argument.placeholders:
                _, err = resolve_name(name, defined)
                if err == "unbound":
                    sem("token", f"placeholder {{{name}}} is not assigned by an earlier step", step.line)
                elif err == "ambiguous":
                    sem("token", f"placeholder {{{name}}} matches several variables by case", step.line)
        else:
            for name in logic_vars(step.argument):
                resolved, err = resolve_name(name, defined)
                if err == "unbound":
                    sem("token", f"variable {name!r} is not assigned by an earlier step", step.line)
                elif err == "ambiguous":
                    sem("token", f"variable {name!r} matches several variables by case", step.line)
                elif kinds[resolved] is StepKind.QUESTION:
                    sem("subtask", f"variable {name!r} holds a Question answer, not a truth value", step.line)
        if step.target_var in defined:
            sem("token", f"variable {step.target_var!r} is assigned more than once", step.line)
        else:
            defined.append(step.target_var)
            kinds[step.target_var] = step.kind
    return diags


# --- public API --------------------------------------------------------------


def parse_program(text: str | bytes) -> ReasoningProgram | list[ParseDiagnostic]:
    """Parse and validate a reasoning program.

    Never raises on malformed input: returns either a validated program or the
    diagnostics found. Syntax errors suppress semantic checks.
    """
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="replace")
    steps: list[ReasoningStep] = []
    syntax: list[ParseDiagnostic] = []
    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.rstrip("\r")
        stripped = line.strip()
        if not stripped or stripped.startswith("#") or _HEADER_RE.match(stripped):
            continue
        try:
            steps.append(_parse_line(line, lineno))
        except _SyntaxFailure as exc:
            syntax.append(ParseDiagnostic(SYNTAX_ERROR, exc.message, lineno, exc.column))
        except RecursionError:
            syntax.append(ParseDiagnostic(SYNTAX_ERROR, "expression nested too deeply", lineno, 1))
    if syntax:
        return syntax
    diags = _validate(steps)
    if diags:
        return diags
    return ReasoningProgram(tuple(steps), text)


def extract_program_block(completion: str) -> str:
    """Cut the generated program out of a raw completion.

    Leading blank lines are skipped; the block ends at the first blank line,
    the first ``#`` line, or end of text. Returns "" if it holds no assignment.
    """
    lines = completion.split("\n")
    start = 0
    while start < len(lines) and not lines[start].strip():
        start += 1
    block: list[str] = []
    for line in lines[start:]:
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            break
        block.append(line)
    if not any(_ASSIGN_LINE_RE.match(line) for line in block):
        return ""
    return "\n".join(block)


_PRECEDENCE = {Or: 1, And: 2, Not: 3, Var: 4}


def render_expr(expr: LogicExpr) -> str:
    if isinstance(expr, Var):
        return expr.name
    if isinstance(expr, Not):
        inner = render_expr(expr.operand)
        if isinstance(expr.operand, (And, Or)):
            inner = f"({inner})"
        return f"not {inner}"
    op = "and" if isinstance(expr, And) else "or"
    prec = _PRECEDENCE[type(expr)]
    left = render_expr(expr.left)
    if _PRECEDENCE[type(expr.left)] < prec:
        left = f"({left})"
    right = render_expr(expr.right)
    # Operators are left-associative, so an equal-precedence right child needs parens.
    if _PRECEDENCE[type(expr.right)] <= prec:
        right = f"({right})"
    return f"{left} {op} {right}"


def _quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def render_step(step: ReasoningStep) -> str:
    if isinstance(step.argument, TemplateString):
        arg = _quote(step.argument.source())
    else:
        arg = render_expr(step.argument)
    return f"{step.target_var} = {step.kind.value}({arg})"


def render_program(program: ReasoningProgram) -> str:
    """Canonical one-line-per-step text; re-parses to an equal program."""
    return "\n".join(render_step(s) for s in program.steps)
