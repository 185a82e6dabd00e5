from __future__ import annotations

import json

import pytest

from progfc import cli
from progfc.cli import main

from .fixtures import pipeline_fixture, two_hop_fixture


def _write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


@pytest.fixture
def run_files(tmp_path):
    paths = pipeline_fixture(tmp_path, n=6)
    (tmp_path / "run.ini").write_text(
        "[run]\ndataset = claims.jsonl\nout_root = out\n"
        "[generation]\nprograms_file = programs.jsonl\n"
        "[handler]\nfixture = fixture.json\n"
    )
    return tmp_path, paths


def test_run_eval_errors(run_files, capsys):
    tmp, _ = run_files
    assert main(["run", "--config", str(tmp / "run.ini")]) == 0
    out = capsys.readouterr().out
    assert "6 claims run, 0 already done" in out
    (out_dir,) = (tmp / "out").iterdir()
    assert main(["run", "--config", str(tmp / "run.ini")]) == 0
    assert "0 claims run, 6 already done" in capsys.readouterr().out

    assert main(["eval", str(out_dir / "predictions.jsonl"), "--out", str(tmp / "m.json")]) == 0
    assert json.loads((tmp / "m.json").read_text()) == json.loads((out_dir / "metrics.json").read_text())

    args = ["errors", "--traces", str(out_dir / "traces.jsonl"), "--predictions", str(out_dir / "predictions.jsonl")]
    assert main(args) == 0
    assert "incorrect_execution" in capsys.readouterr().out
    assert main(args + ["--json"]) == 0
    assert set(json.loads(capsys.readouterr().out)) == {"percent", "counts", "unannotated"}


def test_execute_matches_run_traces(run_files, capsys):
    tmp, paths = run_files
    out = tmp / "traces.jsonl"
    assert main(["execute", "--config", str(tmp / "run.ini"), "--programs", str(paths["programs"]), "--out", str(out)]) == 0
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(rows) == 18
    assert sum(r["final_label"] is None for r in rows) == 3


def test_generate_with_stub_client(run_files, monkeypatch):
    tmp, _ = run_files

    class StubClient:
        def __init__(self, config):
            self.config = config

        def complete(self, prompt, n=1, **kw):
            return ['fact_1 = Verify("x.")\nlabel = Predict(fact_1)'] * n

    monkeypatch.setattr(cli, "LmClient", StubClient)
    with open(tmp / "run.ini", "a") as fh:
        fh.write("[generator_endpoint]\nbase_url = http://localhost:9\nmodel = stub\n")
    out = tmp / "gen.jsonl"
    assert main(["generate", "--config", str(tmp / "run.ini"), "-n", "3", "--out", str(out)]) == 0
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(rows) == 6 and all(len(r["samples"]) == 3 and r["samples"][0]["parse_ok"] for r in rows)


def test_index_and_retrieve_eval(tmp_path, capsys):
    docs, claims, programs, fixture = two_hop_fixture(10)
    corpus = _write_jsonl(tmp_path / "corpus.jsonl", [d.to_dict() for d in docs])
    dataset = _write_jsonl(tmp_path / "claims.jsonl", [
        {"uid": c.claim_id, "claim": c.text, "label": "SUPPORTED", "num_hops": 2, "gold_evidence_ids": list(c.gold_evidence_ids)}
        for c in claims
    ])
    idx = tmp_path / "wiki.idx"
    assert main(["index", "--corpus", str(corpus), "--out", str(idx)]) == 0
    assert "indexed 20 docs" in capsys.readouterr().out

    assert main(["retrieve-eval", "--index", str(idx), "--dataset", str(dataset)]) == 0
    assert json.loads(capsys.readouterr().out)["recall"]["all"] == pytest.approx(0.5)

    _write_jsonl(tmp_path / "programs.jsonl", [{"claim_id": k, "samples": [{"text": v}]} for k, v in programs.items()])
    (tmp_path / "fixture.json").write_text(json.dumps(fixture))
    traces = tmp_path / "traces.jsonl"
    assert main([
        "execute", "--dataset", str(dataset), "--setting", "open_book", "--index", str(idx),
        "--fixture", str(tmp_path / "fixture.json"), "--programs", str(tmp_path / "programs.jsonl"), "--out", str(traces),
    ]) == 0
    capsys.readouterr()
    assert main([
        "retrieve-eval", "--index", str(idx), "--dataset", str(dataset), "--mode", "iterative", "--traces", str(traces),
    ]) == 0
    assert json.loads(capsys.readouterr().out)["recall"]["all"] == 1.0


def test_user_errors_exit_2(tmp_path, capsys):
    assert main(["run", "--dataset", str(tmp_path / "missing.jsonl")]) == 2
    assert "progfc: error" in capsys.readouterr().err
    assert main(["run", "--setting", "open_book", "--dataset", "x"]) == 2
    (tmp_path / "garbage.idx").write_bytes(b"not an index")
    (tmp_path / "d.jsonl").write_text("")
    assert main(["retrieve-eval", "--index", str(tmp_path / "garbage.idx"), "--dataset", str(tmp_path / "d.jsonl")]) == 2
    assert main(["retrieve-eval", "--index", "x", "--dataset", str(tmp_path / "d.jsonl"), "--mode", "iterative"]) == 2
    with pytest.raises(SystemExit):
        main(["nonsense"])
