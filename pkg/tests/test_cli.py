"""End-to-end tests of the command-line interface with a scripted backend."""

import json
from pathlib import Path
from typing import Any

import pytest
import yaml

from ragcoder.cli import EXIT_ERROR, EXIT_OK, EXIT_PARTIAL, main

from .conftest import GUIDELINES, TABULAR

GENERATED = json.dumps(
    {
        "results": [
            {"code": "I10", "evidence": ["hypertension"]},
            {"code": "N18.9", "evidence": ["chronic kidney disease"]},
        ]
    }
)
KEEP_BOTH = json.dumps(
    {"results": [{"code": "I10", "justification": "documented"}, {"code": "N18.9", "justification": "documented"}]}
)
FOUND = json.dumps({"status": "found", "bullets": ["Assign I12.- when hypertension and CKD coexist."]})
AUDIT = "Code: I10\nThought: supported\nDecision: retain\n\nCode: N18.9\nThought: supported\nDecision: retain\n\nFinal Answer: I10, N18.9"

NOTES = [
    {
        "note_id": "n1",
        "encounter_id": "e1",
        "note_type": "discharge summary",
        "text": "Long-standing hypertension with chronic kidney disease.",
        "gold_codes": ["I10", "N18.9"],
    },
    {
        "note_id": "n2",
        "encounter_id": "e2",
        "note_type": "discharge summary",
        "text": "Follow-up for hypertension and chronic kidney disease.",
        "gold_codes": ["I10", "N18.9"],
    },
]


def _write_jsonl(path: Path, records: list[dict[str, Any]]) -> Path:
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


@pytest.fixture
def workspace(tmp_path: Path) -> dict[str, Path]:
    """Graph, guideline store, dataset and a mock-backend config on disk."""
    graph = tmp_path / "kg" / "graph.txt"
    store = tmp_path / "store"
    assert main(["build-kg", "--tabular", str(TABULAR), "--out", str(graph)]) == EXIT_OK
    assert main(["index-guidelines", "--guidelines", str(GUIDELINES), "--out", str(store), "--tag", "2022"]) == EXIT_OK

    config = {
        "backends": {
            "offline": {
                "kind": "mock",
                "model": "offline",
                "script": [
                    {"pattern": "<KnowledgeGraph>", "response": KEEP_BOTH},
                    {"pattern": "<Guidelines>", "response": FOUND},
                    {"pattern": "get_relevant_summaries_for_code", "response": AUDIT},
                    {"pattern": "<Note>", "response": GENERATED},
                ],
            }
        },
        "pipeline": {"workers": 1},
        "fewshot": {"k": 0},
        "knowledge_graph": {"path": str(graph)},
        "guidelines": {"store": str(store)},
    }
    config_path = tmp_path / "run.yaml"
    config_path.write_text(yaml.safe_dump(config), encoding="utf-8")
    return {
        "root": tmp_path,
        "graph": graph,
        "store": store,
        "config": config_path,
        "dataset": _write_jsonl(tmp_path / "dev.jsonl", NOTES),
    }


def _predictions(path: Path) -> list[dict[str, Any]]:
    return [json.loads(line) for line in path.read_text().splitlines()]


# build-kg


def test_build_kg(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    """Test the graph, its stats and the manifest are written, reproducibly."""
    out = tmp_path / "graph.txt"
    assert main(["build-kg", "--tabular", str(TABULAR), "--out", str(out)]) == EXIT_OK
    stats = json.loads(capsys.readouterr().out)
    assert stats["version"] == "2022"
    assert stats["edges_by_kind"]["excludes1"] == 11
    assert json.loads((tmp_path / "graph.txt.stats.json").read_text()) == stats

    manifest = json.loads((tmp_path / "graph.txt.manifest.json").read_text())
    assert manifest["command"] == "build-kg"
    assert manifest["tabular_version"] == "2022"
    assert set(manifest["input_hashes"]) == {"tabular"}

    again = tmp_path / "again.txt"
    assert main(["build-kg", "--tabular", str(TABULAR), "--out", str(again)]) == EXIT_OK
    assert again.read_bytes() == out.read_bytes()


def test_build_kg_version_tag(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    """Test --tag overrides the version read from the XML."""
    out = tmp_path / "graph.txt"
    assert main(["build-kg", "--tabular", str(TABULAR), "--out", str(out), "--tag", "2025"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["version"] == "2025"
    assert out.read_text().startswith("# version: 2025")


def test_build_kg_missing_input(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    """Test a missing tabular list is a fatal error."""
    code = main(["build-kg", "--tabular", str(tmp_path / "nope.xml"), "--out", str(tmp_path / "g.txt")])
    assert code == EXIT_ERROR
    assert "Tabular list not found" in capsys.readouterr().err


def test_build_kg_malformed_xml(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    """Test malformed XML reports the byte offset."""
    bad = tmp_path / "bad.xml"
    bad.write_text("<ICD10CM.tabular><chapter>")
    assert main(["build-kg", "--tabular", str(bad), "--out", str(tmp_path / "g.txt")]) == EXIT_ERROR
    assert "byte offset" in capsys.readouterr().err


# index-guidelines


def test_index_guidelines(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    """Test the store is written and the ToC listed."""
    out = tmp_path / "store"
    assert main(["index-guidelines", "--guidelines", str(GUIDELINES), "--out", str(out), "--tag", "2022"]) == EXIT_OK
    listing = capsys.readouterr().out
    assert "I.C.9" in listing
    assert "I00-I99" in listing
    assert {p.name for p in out.iterdir()} >= {"guidelines.txt", "toc.json", "store.json", "manifest.json"}
    assert json.loads((out / "store.json").read_text())["version"] == "2022"


def test_index_guidelines_needs_toc(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    """Test a document without contents fails until a sidecar ToC is supplied."""
    text = tmp_path / "guidelines.txt"
    text.write_text("Section I. Conventions\nSome rules.\nSection II. Principal diagnosis\nMore rules.\n")
    out = tmp_path / "store"
    assert main(["index-guidelines", "--guidelines", str(text), "--out", str(out)]) == EXIT_ERROR
    assert "sidecar" in capsys.readouterr().err

    toc = tmp_path / "toc.json"
    toc.write_text(
        json.dumps(
            [
                {"section_id": "I", "title": "Conventions", "line": 1},
                {"section_id": "II", "title": "Principal diagnosis"},
            ]
        )
    )
    assert main(["index-guidelines", "--guidelines", str(text), "--toc", str(toc), "--out", str(out)]) == EXIT_OK
    listing = capsys.readouterr().out.splitlines()
    assert "[degraded]" not in listing[0]
    assert listing[1].endswith("[degraded]")


# build-index


def test_build_index(workspace: dict[str, Path], capsys: pytest.CaptureFixture[str]) -> None:
    """Test the few-shot index is built with the configured embedder."""
    capsys.readouterr()
    out = workspace["root"] / "index.jsonl"
    args = ["build-index", "--dataset", str(workspace["dataset"]), "--config", str(workspace["config"]), "--out", str(out)]
    assert main(args) == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary == {"count": 2, "dimension": 256, "fingerprint": "hashing:256"}
    assert json.loads(out.read_text().splitlines()[0])["count"] == 2


# code


def test_code_full_pipeline(workspace: dict[str, Path]) -> None:
    """Test predictions, trails, ledger, audit log and manifest of a full run."""
    out = workspace["root"] / "out" / "pred.jsonl"
    args = ["code", "--dataset", str(workspace["dataset"]), "--config", str(workspace["config"]), "--out", str(out)]
    assert main(args) == EXIT_OK

    predictions = _predictions(out)
    assert [p["note_id"] for p in predictions] == ["n1", "n2"]
    assert all(p["codes"] == ["I10", "N18.9"] and p["status"] == "ok" for p in predictions)
    steps = [t["step"] for t in predictions[0]["trails"][0]["trail"]]
    assert steps == ["1", "2", "4"]

    ledger = json.loads((out.parent / "pred.jsonl.ledger.json").read_text())
    assert list(ledger["steps"]) == ["1", "2", "3", "4"]
    assert ledger["steps"]["3"]["calls"] == 2

    audit = [json.loads(line) for line in (out.parent / "pred.jsonl.audit.jsonl").read_text().splitlines()]
    assert audit[0]["action"] == "run_start"
    assert audit[-1]["action"] == "run_end"
    assert len({r["run_id"] for r in audit}) == 1

    manifest = json.loads((out.parent / "pred.jsonl.manifest.json").read_text())
    assert manifest["stages"] == "1234"
    assert manifest["backend_fingerprints"]["generator"] == "mock:offline"
    assert manifest["tabular_version"] == "2022"
    assert manifest["guidelines_version"] == "2022"


def test_code_exports_summaries(workspace: dict[str, Path], capsys: pytest.CaptureFixture[str]) -> None:
    """Test the summaries cached during a run are exported as JSONL and listed in the manifest."""
    out = workspace["root"] / "pred.jsonl"
    summaries = workspace["root"] / "summaries.jsonl"
    base = ["code", "--dataset", str(workspace["dataset"]), "--config", str(workspace["config"]), "--out", str(out)]
    assert main([*base, "--export-summaries", str(summaries)]) == EXIT_OK

    records = _predictions(summaries)
    assert [r["code"] for r in records] == ["I10", "N18.9"]
    assert all(r["status"] == "found" and r["version"] == "2022" for r in records)
    manifest = json.loads((workspace["root"] / "pred.jsonl.manifest.json").read_text())
    assert manifest["outputs"]["summaries"] == str(summaries)

    capsys.readouterr()
    gated = workspace["root"] / "gated.jsonl"
    args = [*base[:-1], str(gated), "--stages", "12", "--export-summaries", str(summaries)]
    assert main(args) == EXIT_ERROR
    assert "--export-summaries" in capsys.readouterr().err
    assert not gated.exists()


def test_code_is_deterministic(workspace: dict[str, Path]) -> None:
    """Test two runs with the mock backend write identical predictions."""
    outputs = []
    for name in ("a.jsonl", "b.jsonl"):
        out = workspace["root"] / name
        args = ["code", "--dataset", str(workspace["dataset"]), "--config", str(workspace["config"]), "--out", str(out)]
        assert main(args) == EXIT_OK
        outputs.append(out.read_bytes())
    assert outputs[0] == outputs[1]


def test_code_stage_gating(workspace: dict[str, Path]) -> None:
    """Test --stages 12 reproduces the first two steps of a full run."""
    trails = {}
    for stages in ("12", "1234"):
        out = workspace["root"] / f"pred{stages}.jsonl"
        args = [
            "code",
            "--dataset", str(workspace["dataset"]),
            "--config", str(workspace["config"]),
            "--stages", stages,
            "--out", str(out),
        ]  # fmt: skip
        assert main(args) == EXIT_OK
        trails[stages] = [
            [[e for e in t["trail"] if e["step"] in ("1", "2")] for t in p["trails"]] for p in _predictions(out)
        ]
    assert trails["12"] == trails["1234"]


def test_code_partial_failure(workspace: dict[str, Path], tmp_path: Path) -> None:
    """Test failed notes are recorded and the exit code reports a partial run."""
    config = yaml.safe_load(workspace["config"].read_text())
    config["backends"]["offline"]["script"] = [{"pattern": "<Note>", "response": "not json"}]
    config_path = tmp_path / "failing.yaml"
    config_path.write_text(yaml.safe_dump(config))

    out = tmp_path / "pred.jsonl"
    args = ["code", "--dataset", str(workspace["dataset"]), "--config", str(config_path), "--stages", "1", "--out", str(out)]
    assert main(args) == EXIT_PARTIAL
    predictions = _predictions(out)
    assert [p["status"] for p in predictions] == ["failed", "failed"]
    assert all(p["failed_step"] == "1" for p in predictions)


def test_code_invalid_stages(workspace: dict[str, Path], capsys: pytest.CaptureFixture[str]) -> None:
    """Test a non-prefix stage selector is rejected."""
    capsys.readouterr()
    out = workspace["root"] / "pred.jsonl"
    args = ["code", "--dataset", str(workspace["dataset"]), "--config", str(workspace["config"]), "--stages", "13", "--out", str(out)]
    assert main(args) == EXIT_ERROR
    assert "--stages" in capsys.readouterr().err
    assert not out.exists()


# eval and alpha


def test_eval_and_alpha(workspace: dict[str, Path], capsys: pytest.CaptureFixture[str]) -> None:
    """Test perfect predictions score 1 and agree perfectly with the gold annotation."""
    out = workspace["root"] / "pred.jsonl"
    args = ["code", "--dataset", str(workspace["dataset"]), "--config", str(workspace["config"]), "--out", str(out)]
    assert main(args) == EXIT_OK
    capsys.readouterr()

    assert main(["eval", "--gold", str(workspace["dataset"]), "--pred", str(out), "--json"]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["micro"] == {"precision": 1.0, "recall": 1.0, "f1": 1.0}
    assert report["encounters"] == 2

    assert main(["eval", "--gold", str(workspace["dataset"]), "--pred", str(out)]) == EXIT_OK
    assert "Micro F1" in capsys.readouterr().out

    assert main(["alpha", "--a", str(workspace["dataset"]), "--b", str(out), "--scope", "diagnosis"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out) == {"alpha": 1.0, "scope": "diagnosis", "encounters": 2}


def test_eval_with_filter(workspace: dict[str, Path], capsys: pytest.CaptureFixture[str]) -> None:
    """Test a code-space filter drops predictions outside it."""
    capsys.readouterr()
    pred = _write_jsonl(
        workspace["root"] / "pred.jsonl",
        [{"note_id": "n1", "codes": ["I10", "N18.9", "R03.0"]}, {"note_id": "n2", "codes": ["I10", "N18.9"]}],
    )
    allowed = workspace["root"] / "space.txt"
    allowed.write_text("I10\nN18.9\n")
    assert main(["eval", "--gold", str(workspace["dataset"]), "--pred", str(pred), "--json", "--filter", str(allowed)]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["micro"]["precision"] == 1.0
    assert report["filter"] == "space"


def test_eval_orphan_predictions(workspace: dict[str, Path], capsys: pytest.CaptureFixture[str]) -> None:
    """Test predictions for unknown notes are a fatal error."""
    capsys.readouterr()
    pred = _write_jsonl(workspace["root"] / "pred.jsonl", [{"note_id": "ghost", "codes": ["I10"]}])
    assert main(["eval", "--gold", str(workspace["dataset"]), "--pred", str(pred)]) == EXIT_ERROR
    assert "ghost" in capsys.readouterr().err
