"""``progfc`` command line: index, generate, execute, run, eval, retrieve-eval, errors."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .annotation import classify_errors, load_annotations
from .baselines import STYLES
from .client import LmClient
from .datasets import DatasetError, dump_line, load_dataset, read_jsonl
from .engine import ExecSettings, execute
from .generation import GenerationConfig, generate_programs, load_exemplars
from .handlers import EvidenceSetting
from .pipeline import (
    PROGRAM_STYLE,
    ConfigError,
    RunConfig,
    build_handler,
    compute_metrics,
    evaluate_retrieval,
    load_program_samples,
    load_run_config,
    run_pipeline,
    trace_queries,
)
from .retrieval import Bm25Index, CorpusError, IndexFormatError, build_index_file

log = logging.getLogger("progfc")


def _config(args) -> RunConfig:
    config = load_run_config(args.config) if args.config else RunConfig()
    overrides = {}
    for name in ("dataset", "dataset_format", "setting", "index", "fixture_file", "out_root", "workers", "prompt_style"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return dataclasses.replace(config, **overrides) if overrides else config


def _dataset(config: RunConfig):
    if not config.dataset:
        raise ConfigError("no dataset: pass --dataset or set run.dataset in the config")
    return load_dataset(config.dataset, config.dataset_format)


def _write_lines(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(dump_line(r) for r in rows)


def _emit(data, out: str | None) -> None:
    text = json.dumps(data, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def cmd_index(args) -> int:
    count = build_index_file(args.corpus, args.out, k1=args.k1, b=args.b)
    print(f"indexed {count} docs -> {args.out}")
    return 0


def cmd_generate(args) -> int:
    config = _config(args)
    if config.generator_endpoint is None:
        raise ConfigError("generate needs a [generator_endpoint] section in the config")
    gen = GenerationConfig(
        load_exemplars(args.exemplars or config.exemplars),
        args.num_programs or config.num_programs,
        config.temperature,
        config.max_new_tokens,
    )
    client = LmClient(config.generator_endpoint)
    rows = []
    for claim in _dataset(config):
        samples = generate_programs(gen, client, claim.text)
        rows.append({"claim_id": claim.claim_id, "samples": [s.to_dict() for s in samples]})
    _write_lines(args.out, rows)
    ok = sum(s["parse_ok"] for r in rows for s in r["samples"])
    total = sum(len(r["samples"]) for r in rows)
    print(f"{len(rows)} claims, {ok}/{total} programs parsed -> {args.out}")
    return 0


def cmd_execute(args) -> int:
    config = _config(args)
    dataset = _dataset(config)
    config.validate(dataset)
    table = load_program_samples(args.programs)
    index = Bm25Index.load(config.index) if config.index and config.setting is not EvidenceSetting.CLOSED_BOOK else None
    settings = ExecSettings(config.setting, config.per_step_k, config.evidence_budget, index)
    handler = build_handler(config)
    rows = []
    for claim in dataset:
        for idx, sample in enumerate(table.get(claim.claim_id, [])):
            if sample.program is None:
                rows.append({
                    "claim_id": claim.claim_id, "program_index": idx, "program_source": sample.text,
                    "steps": [], "final_label": None, "failure": None,
                    "diagnostics": [d.to_dict() for d in sample.diagnostics],
                })
                continue
            trace = execute(sample.program, handler, claim, settings)
            rows.append({**trace.to_dict(), "program_index": idx, "diagnostics": []})
    _write_lines(args.out, rows)
    failed = sum(1 for r in rows if r["final_label"] is None)
    print(f"{len(rows)} programs executed, {failed} without a verdict -> {args.out}")
    return 0


def cmd_run(args) -> int:
    config = _config(args)
    report = run_pipeline(config)
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"{report.processed} claims run, {report.skipped} already done -> {report.output_dir}")
    if "macro_f1" in report.metrics:
        print(f"macro-F1 {100 * report.metrics['macro_f1']:.2f}")
    return 0


def cmd_eval(args) -> int:
    rows = [row for _, row in read_jsonl(args.predictions)]
    metrics = compute_metrics(rows)
    _emit(metrics, args.out)
    return 0


def cmd_retrieve_eval(args) -> int:
    dataset = load_dataset(args.dataset, args.format)
    queries = None
    if args.mode == "iterative":
        if not args.traces:
            raise ConfigError("--mode iterative needs --traces (step arguments come from executed programs)")
        queries = trace_queries(row for _, row in read_jsonl(args.traces))
    index = Bm25Index.load(args.index)
    try:
        result = evaluate_retrieval(index, dataset, args.k, args.mode, queries, args.per_step_k)
    finally:
        index.close()
    _emit(result, args.out)
    return 0


def cmd_errors(args) -> int:
    traces = [row for _, row in read_jsonl(args.traces)]
    predictions = [row for _, row in read_jsonl(args.predictions)]
    annotations = load_annotations(args.annotations) if args.annotations else []
    summary = classify_errors(traces, predictions, annotations)
    if args.json:
        _emit(summary.to_dict(), None)
    else:
        print(summary.format_table())
    return 0


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI run config")
    p.add_argument("--dataset", help="claims JSONL (overrides run.dataset)")
    p.add_argument("--format", dest="dataset_format", choices=["hover", "feverous_s"])
    p.add_argument("--setting", choices=[s.value for s in EvidenceSetting])
    p.add_argument("--index", help="BM25 index file")
    p.add_argument("--fixture", dest="fixture_file", help="mock handler fixture JSON")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="progfc", description="Program-guided fact-checking.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", help="build a BM25 index file from a corpus JSONL")
    p.add_argument("--corpus", required=True, help="corpus JSONL of {id, title, text}")
    p.add_argument("--out", required=True)
    p.add_argument("--k1", type=float, default=0.9)
    p.add_argument("--b", type=float, default=0.4)
    p.set_defaults(fn=cmd_index)

    p = sub.add_parser("generate", help="sample reasoning programs for each claim")
    _add_run_options(p)
    p.add_argument("--exemplars", help="hover, feverous, or an exemplar file")
    p.add_argument("-n", "--n", "--num-programs", dest="num_programs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("execute", help="execute generated programs and write traces")
    _add_run_options(p)
    p.add_argument("--programs", required=True, help="output of `progfc generate`")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_execute)

    p = sub.add_parser("run", help="end-to-end run (resumable)")
    _add_run_options(p)
    p.add_argument("--prompt-style", choices=[PROGRAM_STYLE, *STYLES])
    p.add_argument("--out-root")
    p.add_argument("--workers", type=int)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("eval", help="macro-F1 (overall and per hop) from predictions")
    p.add_argument("predictions")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("retrieve-eval", help="recall@k of one-step vs iterative retrieval")
    p.add_argument("--index", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--format", default="hover", choices=["hover", "feverous_s"])
    p.add_argument("--mode", default="onestep", choices=["onestep", "iterative"])
    p.add_argument("--traces", help="traces JSONL (iterative mode)")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--per-step-k", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_retrieve_eval)

    p = sub.add_parser("errors", help="error-category table for wrong predictions")
    p.add_argument("--traces", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--annotations", help="human annotations JSONL")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_errors)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.fn(args)
    except (ConfigError, DatasetError, CorpusError, IndexFormatError, FileNotFoundError, ValueError) as exc:
        print(f"progfc: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
