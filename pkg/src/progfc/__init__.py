"""Fact-checking by generating and executing small reasoning programs."""

from __future__ import annotations

from .dsl import ParseDiagnostic, ReasoningProgram, parse_program, render_program
from .engine import ExecSettings, ExecutionTrace, FallbackPolicy, VeracityLabel, aggregate, execute, majority
from .handlers import EvidenceSetting, LmHandler, MockHandler, SubTaskHandler
from .metrics import macro_f1
from .pipeline import RunConfig, load_run_config, run_pipeline
from .retrieval import Bm25Index, EvidenceDoc, ingest_corpus, retrieve

__all__ = [
    "Bm25Index",
    "EvidenceDoc",
    "EvidenceSetting",
    "ExecSettings",
    "ExecutionTrace",
    "FallbackPolicy",
    "LmHandler",
    "MockHandler",
    "ParseDiagnostic",
    "ReasoningProgram",
    "RunConfig",
    "SubTaskHandler",
    "VeracityLabel",
    "aggregate",
    "execute",
    "ingest_corpus",
    "load_run_config",
    "macro_f1",
    "majority",
    "parse_program",
    "render_program",
    "retrieve",
    "run_pipeline",
]
