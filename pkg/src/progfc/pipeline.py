"""End-to-end runs: generate programs, execute them, vote, score.

Output layout: ``{out_root}/{config_hash}/`` holding ``predictions.jsonl``,
``traces.jsonl``, ``metrics.json`` and ``config.json``. Reruns skip claims
that already have a prediction line.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import logging
import os
import threading
from collections import defaultdict
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .baselines import STYLES, build_baseline_prompt, parse_baseline_output
from .client import LmClient, LmEndpointConfig
from .datasets import ClaimRecord, Dataset, dump_line, load_dataset, read_jsonl
from .engine import (
    ExecSettings,
    FallbackMode,
    FallbackPolicy,
    VeracityLabel,
    aggregate,
    execute,
    majority,
)
from .generation import GeneratedSample, GenerationConfig, generate_programs, load_exemplars
from .handlers import EvidenceSetting, LmHandler, MockHandler, SerializedHandler, SubTaskHandler
from .metrics import f1_report
from .retrieval import (
    DEFAULT_EVIDENCE_BUDGET,
    Bm25Index,
    recall_at_k,
    retrieve,
    retrieve_for_queries,
)

log = logging.getLogger(__name__)

PROGRAM_STYLE = "program"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    setting: EvidenceSetting = EvidenceSetting.CLOSED_BOOK
    dataset: str | None = None
    dataset_format: str = "hover"
    exemplars: str = "hover"
    num_programs: int = 5
    temperature: float = 0.7
    max_new_tokens: int = 256
    programs_file: str | None = None
    generator_endpoint: LmEndpointConfig | None = None
    handler_endpoint: LmEndpointConfig | None = None
    fixture_file: str | None = None
    index: str | None = None
    per_step_k: int = 10
    evidence_budget: int | None = DEFAULT_EVIDENCE_BUDGET
    fallback: FallbackMode = FallbackMode.DIRECT_VERIFY
    prompt_style: str = PROGRAM_STYLE
    seed: int = 0
    workers: int = 1
    out_root: str = "run"

    def __post_init__(self):
        self.setting = EvidenceSetting(self.setting)
        self.fallback = FallbackMode(self.fallback)

    def validate(self, dataset: Dataset | None = None) -> list[str]:
        """Raise ConfigError on fatal problems; return non-fatal warnings."""
        warnings = []
        if self.prompt_style not in (PROGRAM_STYLE, *STYLES):
            raise ConfigError(f"unknown prompt_style {self.prompt_style!r}")
        if self.prompt_style != PROGRAM_STYLE and self.setting is not EvidenceSetting.CLOSED_BOOK:
            raise ConfigError("baseline prompt styles run in the closed_book setting only")
        if self.setting is EvidenceSetting.OPEN_BOOK and not self.index:
            raise ConfigError("open_book runs need retrieval.index")
        if self.setting is EvidenceSetting.CLOSED_BOOK and self.index:
            warnings.append("retrieval.index is ignored in the closed_book setting")
        if self.setting is EvidenceSetting.GOLD and dataset is not None:
            missing = [r.claim_id for r in dataset if not r.gold_evidence_ids]
            if missing:
                raise ConfigError(f"gold setting: {len(missing)} records lack gold evidence ids, e.g. {missing[0]}")
            if not self.index and any(not r.gold_evidence for r in dataset):
                raise ConfigError("gold setting: records without inline gold_evidence need retrieval.index for lookup")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        for w in warnings:
            log.warning(w)
        return warnings

    def fingerprint(self) -> dict:
        """The settings that determine results (paths to outputs excluded)."""
        d = {
            "setting": self.setting.value,
            "dataset": self.dataset,
            "dataset_format": self.dataset_format,
            "exemplars": self.exemplars,
            "num_programs": self.num_programs,
            "temperature": self.temperature,
            "max_new_tokens": self.max_new_tokens,
            "programs_file": self.programs_file,
            "fixture_file": self.fixture_file,
            "index": self.index if self.setting is not EvidenceSetting.CLOSED_BOOK else None,
            "per_step_k": self.per_step_k,
            "evidence_budget": self.evidence_budget,
            "fallback": self.fallback.value,
            "prompt_style": self.prompt_style,
            "seed": self.seed,
        }
        for key in ("generator_endpoint", "handler_endpoint"):
            ep = getattr(self, key)
            d[key] = None if ep is None else {
                "base_url": ep.base_url, "model": ep.model_name,
                "max_new_tokens": ep.max_new_tokens, "temperature": ep.temperature,
            }
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.fingerprint(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]

    def output_dir(self) -> Path:
        return Path(self.out_root) / self.config_hash()


def _opt(section: Mapping[str, str], key: str) -> str | None:
    value = section.get(key, "").strip()
    return value or None


def load_run_config(path: str | os.PathLike) -> RunConfig:
    """Read an INI run config; relative paths resolve against the file's directory."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";",))
    if not parser.read(path, encoding="utf-8"):
        raise ConfigError(f"cannot read config file {path}")
    base = Path(path).resolve().parent

    def rel(value: str | None) -> str | None:
        return None if value is None else str(base / value)

    run = parser["run"] if parser.has_section("run") else {}
    gen = parser["generation"] if parser.has_section("generation") else {}
    ret = parser["retrieval"] if parser.has_section("retrieval") else {}
    hnd = parser["handler"] if parser.has_section("handler") else {}
    try:
        exemplars = gen.get("exemplars", "hover").strip()
        if exemplars not in ("hover", "feverous"):
            exemplars = rel(exemplars)
        budget = ret.get("evidence_budget", str(DEFAULT_EVIDENCE_BUDGET)).strip()
        return RunConfig(
            setting=run.get("setting", "closed_book").strip(),
            dataset=rel(_opt(run, "dataset")),
            dataset_format=run.get("format", "hover").strip(),
            exemplars=exemplars,
            num_programs=int(gen.get("num_programs", "5")),
            temperature=float(gen.get("temperature", "0.7")),
            max_new_tokens=int(gen.get("max_new_tokens", "256")),
            programs_file=rel(_opt(gen, "programs_file")),
            generator_endpoint=(
                LmEndpointConfig.from_section(parser["generator_endpoint"])
                if parser.has_section("generator_endpoint") else None
            ),
            handler_endpoint=(
                LmEndpointConfig.from_section(parser["endpoint"]) if parser.has_section("endpoint") else None
            ),
            fixture_file=rel(_opt(hnd, "fixture")),
            index=rel(_opt(ret, "index")),
            per_step_k=int(ret.get("per_step_k", "10")),
            evidence_budget=None if budget.lower() == "none" else int(budget),
            fallback=run.get("fallback", "direct_verify").strip(),
            prompt_style=run.get("prompt_style", PROGRAM_STYLE).strip(),
            seed=int(run.get("seed", "0")),
            workers=int(run.get("workers", "1")),
            out_root=rel(run.get("out_root", "run").strip()),
        )
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


# --- program sources ---------------------------------------------------------

ProgramSource = Callable[[ClaimRecord], list[GeneratedSample]]


def endpoint_source(config: GenerationConfig, endpoint) -> ProgramSource:
    return lambda claim: generate_programs(config, endpoint, claim.text)


def load_program_samples(path: str | os.PathLike) -> dict[str, list[GeneratedSample]]:
    """Read ``progfc generate`` output: ``{claim_id, samples: [{text, ...}]}`` per line."""
    table = {}
    for _, row in read_jsonl(path):
        table[str(row["claim_id"])] = [GeneratedSample.from_dict(s) for s in row["samples"]]
    return table


def replay_source(table: Mapping[str, list[GeneratedSample]]) -> ProgramSource:
    def source(claim: ClaimRecord) -> list[GeneratedSample]:
        if claim.claim_id not in table:
            raise KeyError(f"no recorded programs for claim {claim.claim_id}")
        return table[claim.claim_id]

    return source


# --- running -----------------------------------------------------------------


@dataclass
class ClaimOutcome:
    claim: ClaimRecord
    trace_rows: list[dict]
    prediction: dict


@dataclass
class RunReport:
    output_dir: Path
    predictions: list[dict]
    metrics: dict
    processed: int
    skipped: int
    warnings: list[str] = field(default_factory=list)


def _prediction_row(claim: ClaimRecord, label: VeracityLabel, votes, fallback_used: bool, error=None) -> dict:
    return {
        "claim_id": claim.claim_id,
        "predicted_label": label.value,
        "gold_label": claim.gold_label.value if claim.gold_label else None,
        "hops": claim.hops,
        "votes": [v.value if v else None for v in votes],
        "fallback_used": fallback_used,
        "error": error,
    }


def _run_programs(claim, source, handler, settings, selector, fallback) -> ClaimOutcome:
    samples = source(claim)
    rows, votes = [], []
    for idx, sample in enumerate(samples):
        if sample.program is None:
            votes.append(None)
            rows.append({
                "claim_id": claim.claim_id, "program_index": idx, "program_source": sample.text,
                "steps": [], "final_label": None, "failure": None,
                "diagnostics": [d.to_dict() for d in sample.diagnostics],
            })
            continue
        trace = execute(sample.program, handler, claim, settings, selector)
        votes.append(trace.final_label)
        rows.append({**trace.to_dict(), "program_index": idx, "diagnostics": []})
    if not votes:
        votes = [None]
    winner = majority(votes)
    label = winner if winner is not None else aggregate(votes, claim, fallback)
    return ClaimOutcome(claim, rows, _prediction_row(claim, label, votes, winner is None))


def _run_baseline(claim, style, completer, max_tokens) -> ClaimOutcome:
    prompt = build_baseline_prompt(style, claim.text)
    (text,) = completer.complete(prompt, 1, temperature=0.0, max_tokens=max_tokens)
    label, anomaly = parse_baseline_output(text)
    row = {
        "claim_id": claim.claim_id, "program_index": 0, "program_source": prompt, "steps": [],
        "final_label": label.value, "failure": None, "diagnostics": [],
        "baseline_output": text, "anomaly": anomaly,
    }
    return ClaimOutcome(claim, [row], _prediction_row(claim, label, [label], False))


def _existing_predictions(path: Path) -> dict[str, dict]:
    if not path.exists():
        return {}
    return {str(row["claim_id"]): row for _, row in read_jsonl(path)}


def _prune_traces(path: Path, keep: set[str]) -> None:
    """Drop trace lines of claims without a prediction (a run interrupted mid-claim)."""
    if not path.exists():
        return
    rows = [row for _, row in read_jsonl(path) if str(row.get("claim_id")) in keep]
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.writelines(dump_line(r) for r in rows)
    os.replace(tmp, path)


def compute_metrics(predictions: Iterable[Mapping]) -> dict:
    rows = [p for p in predictions if p.get("gold_label")]
    out: dict = {
        "n_predictions": 0, "n_fallback": 0, "n_errors": 0,
    }
    if not rows:
        return out
    preds = [VeracityLabel(p["predicted_label"]) for p in rows]
    golds = [VeracityLabel(p["gold_label"]) for p in rows]
    overall = f1_report(preds, golds)
    out.update({
        "n_predictions": len(rows),
        "n_fallback": sum(1 for p in rows if p.get("fallback_used")),
        "n_errors": sum(1 for p in rows if p.get("error")),
        "macro_f1": overall.macro_f1,
        "overall": overall.to_dict(),
    })
    by_hop: dict[int, list] = defaultdict(list)
    for p, pl, gl in zip(rows, preds, golds):
        if p.get("hops") is not None:
            by_hop[int(p["hops"])].append((pl, gl))
    if by_hop:
        out["per_hop"] = {
            str(h): f1_report([a for a, _ in pairs], [b for _, b in pairs]).to_dict()
            for h, pairs in sorted(by_hop.items())
        }
    return out


def _write_json(path: Path, data) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def build_handler(config: RunConfig) -> SubTaskHandler:
    if config.fixture_file:
        with open(config.fixture_file, encoding="utf-8") as fh:
            return MockHandler(json.load(fh))
    if config.handler_endpoint is None:
        raise ConfigError("no [endpoint] section and no handler fixture configured")
    return LmHandler(LmClient(config.handler_endpoint), config.setting, budget=config.evidence_budget)


def build_program_source(config: RunConfig) -> ProgramSource:
    if config.programs_file:
        return replay_source(load_program_samples(config.programs_file))
    if config.generator_endpoint is None:
        raise ConfigError("no [generator_endpoint] section and no generation.programs_file configured")
    gen = GenerationConfig(
        load_exemplars(config.exemplars), config.num_programs, config.temperature, config.max_new_tokens
    )
    return endpoint_source(gen, LmClient(config.generator_endpoint))


def run_pipeline(
    config: RunConfig,
    dataset: Dataset | Sequence[ClaimRecord] | None = None,
    *,
    program_source: ProgramSource | None = None,
    handler: SubTaskHandler | None = None,
    baseline_completer=None,
    index: Bm25Index | None = None,
) -> RunReport:
    """Run every claim not already predicted; components default to those in ``config``."""
    if dataset is None:
        if not config.dataset:
            raise ConfigError("no dataset given")
        dataset = load_dataset(config.dataset, config.dataset_format)
    if not isinstance(dataset, Dataset):
        dataset = Dataset(list(dataset))
    warnings = config.validate(dataset)

    out_dir = config.output_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    pred_path, trace_path = out_dir / "predictions.jsonl", out_dir / "traces.jsonl"
    done = _existing_predictions(pred_path)
    _prune_traces(trace_path, set(done))
    _write_json(out_dir / "config.json", config.fingerprint())
    todo = [c for c in dataset if c.claim_id not in done]
    log.info("%d claims to run, %d already done", len(todo), len(dataset) - len(todo))

    if todo:
        if index is None and config.index and config.setting is not EvidenceSetting.CLOSED_BOOK:
            index = Bm25Index.load(config.index)
        settings = ExecSettings(config.setting, config.per_step_k, config.evidence_budget, index)
        baseline = config.prompt_style != PROGRAM_STYLE
        if baseline:
            if baseline_completer is None:
                if config.handler_endpoint is None:
                    raise ConfigError("baseline prompt styles need an [endpoint] section")
                baseline_completer = LmClient(config.handler_endpoint)
            max_tokens = config.handler_endpoint.max_new_tokens if config.handler_endpoint else 128
            work = lambda claim: _run_baseline(claim, config.prompt_style, baseline_completer, max_tokens)  # noqa: E731
        else:
            handler = handler or build_handler(config)
            if not handler.concurrent_safe and config.workers > 1:
                handler = SerializedHandler(handler)
            program_source = program_source or build_program_source(config)
            selector = settings.selector()
            fallback = FallbackPolicy(
                config.fallback,
                handler if config.fallback is FallbackMode.DIRECT_VERIFY else None,
                selector,
            )

            def work(claim: ClaimRecord) -> ClaimOutcome:
                try:
                    return _run_programs(claim, program_source, handler, settings, selector, fallback)
                except Exception as exc:
                    log.warning("claim %s failed: %s", claim.claim_id, exc)
                    label = fallback.resolve(claim)
                    return ClaimOutcome(
                        claim, [], _prediction_row(claim, label, [None], True, f"{type(exc).__name__}: {exc}")
                    )

        write_lock = threading.Lock()
        with open(pred_path, "a", encoding="utf-8") as pred_fh, open(trace_path, "a", encoding="utf-8") as trace_fh:
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                # map() yields in dataset order, so output order is independent of scheduling.
                for outcome in pool.map(work, todo):
                    with write_lock:
                        trace_fh.writelines(dump_line(r) for r in outcome.trace_rows)
                        trace_fh.flush()
                        pred_fh.write(dump_line(outcome.prediction))
                        pred_fh.flush()

    order = {c.claim_id: i for i, c in enumerate(dataset)}
    predictions = sorted(_existing_predictions(pred_path).values(), key=lambda p: order.get(p["claim_id"], len(order)))
    metrics = compute_metrics(predictions)
    _write_json(out_dir / "metrics.json", metrics)
    return RunReport(out_dir, predictions, metrics, len(todo), len(dataset) - len(todo), warnings)


# --- retrieval evaluation ----------------------------------------------------


def trace_queries(trace_rows: Iterable[Mapping]) -> dict[str, dict[int, str]]:
    """Per claim, the substituted Question/Verify arguments of its first executed program."""
    chosen: dict[str, dict[int, str]] = {}
    for row in sorted(trace_rows, key=lambda r: (str(r["claim_id"]), r.get("program_index", 0))):
        cid = str(row["claim_id"])
        if cid in chosen:
            continue
        queries = {
            s["step_index"]: s["substituted_argument"]
            for s in row.get("steps", [])
            if s["kind"] in ("Question", "Verify")
        }
        if queries:
            chosen[cid] = queries
    return chosen


def evaluate_retrieval(
    index: Bm25Index,
    dataset: Iterable[ClaimRecord],
    k: int = 10,
    mode: str = "onestep",
    queries: Mapping[str, Mapping[int, str]] | None = None,
    per_step_k: int = 10,
) -> dict:
    """Mean recall@k of gold docs, one-step (claim as query) or iterative (per step)."""
    if mode not in ("onestep", "iterative"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "iterative" and queries is None:
        raise ValueError("iterative mode needs per-claim step queries (from traces)")
    per_hop: dict[str, list[float]] = defaultdict(list)
    missing = 0
    for claim in dataset:
        if not claim.gold_evidence_ids:
            continue
        if mode == "onestep":
            result = retrieve(index, claim.text, k)
        else:
            step_q = queries.get(claim.claim_id)
            if not step_q:
                missing += 1
                step_q = {0: claim.text}
            _, result = retrieve_for_queries(index, step_q, per_step_k, k)
        r = recall_at_k(result, claim.gold_evidence_ids, k)
        per_hop["all"].append(r)
        if claim.hops is not None:
            per_hop[f"{claim.hops}-hop"].append(r)
    return {
        "mode": mode,
        "k": k,
        "recall": {key: sum(v) / len(v) for key, v in sorted(per_hop.items())},
        "n": len(per_hop["all"]),
        "claims_without_trace": missing,
    }
