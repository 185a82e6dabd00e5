"""Closed-book prompting baselines: direct, CoT, zero-shot CoT and Self-Ask.

Templates live in ``assets/closed_book/<style>.txt`` with an ``<input_claim>``
marker. Answers are read from the last true/false word of the completion.
"""

from __future__ import annotations

import re
from functools import cache
from importlib import resources

from .engine import VeracityLabel

STYLES = ("direct", "cot", "zs-cot", "self-ask")
CLAIM_MARKER = "<input_claim>"

_TF_RE = re.compile(r"\b(true|false)\b", re.IGNORECASE)


@cache
def load_template(style: str) -> str:
    if style not in STYLES:
        raise ValueError(f"unknown prompt style {style!r}; expected one of {STYLES}")
    ref = resources.files("progfc") / "assets" / "closed_book" / f"{style}.txt"
    return ref.read_text(encoding="utf-8").rstrip("\n")


def build_baseline_prompt(style: str, claim: str) -> str:
    text = " ".join(claim.split())
    if text.endswith("."):
        text = text[:-1]
    return load_template(style).replace(CLAIM_MARKER, text)


def parse_baseline_output(text: str) -> tuple[VeracityLabel, str | None]:
    """Last "true"/"false" in the completion decides; none found means Refuted + anomaly."""
    hits = _TF_RE.findall(text or "")
    if not hits:
        return VeracityLabel.REFUTED, "no True/False in baseline output"
    return VeracityLabel.from_bool(hits[-1].lower() == "true"), None
