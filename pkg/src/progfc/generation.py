"""Few-shot program-generation prompts and sampling of candidate programs."""

from __future__ import annotations

import logging
import os
import textwrap
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from importlib import resources

from .client import HandlerError
from .dsl import (
    SYNTAX_ERROR,
    ParseDiagnostic,
    ReasoningProgram,
    extract_program_block,
    format_diagnostics,
    parse_program,
)

log = logging.getLogger(__name__)

BUNDLED_SETS = ("hover", "feverous")
CLAIM_PREFIX = "# The claim is that "
PROGRAM_HEADER = "def program():"
DEFAULT_STOP = ("\n# The claim", "\n\n\n")


@dataclass(frozen=True)
class Exemplar:
    claim: str
    program_text: str


@dataclass(frozen=True)
class ExemplarSet:
    name: str
    instruction: str
    exemplars: tuple[Exemplar, ...]


def parse_exemplar_text(text: str, name: str = "custom", validate: bool = True) -> ExemplarSet:
    """Parse the exemplar asset format.

    Blocks are separated by ``---`` lines. The first block is the instruction;
    each later block is a ``CLAIM: ...`` line, a ``PROGRAM:`` line, then the
    indented program.
    """
    blocks: list[list[str]] = [[]]
    for line in text.split("\n"):
        if line.strip() == "---":
            blocks.append([])
        else:
            blocks[-1].append(line)
    instruction = "\n".join(blocks[0]).strip()
    exemplars = []
    for n, block in enumerate(blocks[1:], start=1):
        while block and not block[-1].strip():
            block.pop()
        if len(block) < 3 or not block[0].startswith("CLAIM:") or block[1].strip() != "PROGRAM:":
            raise ValueError(f"exemplar block {n} of {name!r} must start with 'CLAIM:' then 'PROGRAM:'")
        claim = block[0][len("CLAIM:"):].strip()
        program = textwrap.dedent("\n".join(block[2:])).strip("\n")
        if validate:
            parsed = parse_program(program)
            if not isinstance(parsed, ReasoningProgram):
                raise ValueError(
                    f"exemplar {n} of {name!r} does not parse:\n{format_diagnostics(parsed)}"
                )
        exemplars.append(Exemplar(claim, program))
    return ExemplarSet(name, instruction, tuple(exemplars))


def load_exemplars(name_or_path: str | os.PathLike) -> ExemplarSet:
    """Load a bundled set (``hover``, ``feverous``) or an exemplar file."""
    if str(name_or_path) in BUNDLED_SETS:
        ref = resources.files("progfc") / "assets" / "exemplars" / f"{name_or_path}.txt"
        return parse_exemplar_text(ref.read_text(encoding="utf-8"), str(name_or_path))
    with open(name_or_path, encoding="utf-8") as fh:
        return parse_exemplar_text(fh.read(), os.path.basename(str(name_or_path)))


def _one_line(claim: str) -> str:
    return " ".join(claim.split())


def build_generation_prompt(exemplar_set: ExemplarSet, claim: str) -> str:
    if not claim.strip():
        raise ValueError("claim must be non-empty")
    parts = [exemplar_set.instruction]
    for ex in exemplar_set.exemplars:
        body = "\n".join("    " + line for line in ex.program_text.split("\n"))
        parts.append(f"{CLAIM_PREFIX}{_one_line(ex.claim)}\n{PROGRAM_HEADER}\n{body}")
    parts.append(f"{CLAIM_PREFIX}{_one_line(claim)}\n{PROGRAM_HEADER}")
    return "\n\n".join(parts)


def claim_from_prompt(prompt: str) -> str:
    """The input claim of a generation prompt (its last claim line)."""
    idx = prompt.rfind(CLAIM_PREFIX)
    if idx < 0:
        return ""
    return prompt[idx + len(CLAIM_PREFIX):].split("\n", 1)[0]


@dataclass
class GenerationConfig:
    exemplar_set: ExemplarSet
    num_programs: int = 5
    temperature: float = 0.7
    max_new_tokens: int = 256
    stop: tuple[str, ...] = DEFAULT_STOP

    def __post_init__(self):
        if self.num_programs < 1:
            raise ValueError("num_programs must be >= 1")
        if self.num_programs % 2 == 0:
            log.warning("num_programs=%d is even; ties go to the fallback policy", self.num_programs)


@dataclass
class GeneratedSample:
    text: str
    program: ReasoningProgram | None = None
    diagnostics: list[ParseDiagnostic] = field(default_factory=list)

    @property
    def parse_ok(self) -> bool:
        return self.program is not None

    def to_dict(self) -> dict:
        out: dict = {"text": self.text, "parse_ok": self.parse_ok}
        if self.diagnostics:
            out["diagnostics"] = [d.to_dict() for d in self.diagnostics]
        return out

    @classmethod
    def from_text(cls, text: str) -> GeneratedSample:
        block = extract_program_block(text)
        if not block:
            return cls(text, None, [ParseDiagnostic(SYNTAX_ERROR, "no program found in completion", 0, 0)])
        parsed = parse_program(block)
        if isinstance(parsed, ReasoningProgram):
            return cls(text, parsed)
        return cls(text, None, parsed)

    @classmethod
    def from_dict(cls, d: Mapping) -> GeneratedSample:
        # Re-parse rather than trust the stored flag.
        return cls.from_text(d.get("text", ""))


class Completer:
    """In-process completer: a function from prompt to ``n`` texts (tests, replays)."""

    concurrent_safe = True

    def __init__(self, fn: Callable[[str, int], Sequence[str]]):
        self.fn = fn

    def complete(self, prompt: str, n: int = 1, **_) -> list[str]:
        texts = list(self.fn(prompt, n))
        if len(texts) != n:
            raise HandlerError(f"expected {n} completions, got {len(texts)}")
        return texts


def generate_programs(config: GenerationConfig, endpoint, claim: str) -> list[GeneratedSample]:
    """Sample ``num_programs`` candidate programs, in sample order, duplicates kept."""
    n = config.num_programs
    prompt = build_generation_prompt(config.exemplar_set, claim)
    try:
        texts = endpoint.complete(
            prompt, n, temperature=config.temperature, max_tokens=config.max_new_tokens, stop=config.stop
        )
    except HandlerError as exc:
        log.warning("program generation failed: %s", exc)
        diag = ParseDiagnostic(SYNTAX_ERROR, f"generation failed: {exc}", 0, 0)
        return [GeneratedSample("", None, [diag]) for _ in range(n)]
    return [GeneratedSample.from_text(t) for t in texts]
