"""Command-line entry point for ragcoder."""

import argparse
import asyncio
import json
import logging
import sys
import uuid
from collections.abc import Sequence
from pathlib import Path

from . import __version__
from .audit import AuditLogger
from .client import Backend, create_backend
from .config import AGENT_ROLES, RunConfig, get_settings, load_run_config, parse_stages
from .errors import ConfigError, RagCoderError
from .evaluation import (
    CodeSpaceFilter,
    evaluate,
    ingest_dataset,
    krippendorff_alpha,
    load_annotations,
    load_predictions,
)
from .fewshot import FewShotIndex, build_index, create_embedder
from .gateway import LLMGateway, UsageLedger
from .guidelines import GuidelineStore
from .knowledge_graph import load_graph, parse_tabular_list
from .manifest import RunManifest, manifest_path
from .pipeline import PipelineDependencies, check_dependencies, run_batch

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_ERROR = 2


def _require(path: str | Path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _sibling(output: Path, suffix: str) -> Path:
    return output.with_name(output.name + suffix)


def cmd_build_kg(args: argparse.Namespace) -> int:
    tabular = _require(args.tabular, "Tabular list")
    manifest = RunManifest(command="build-kg")
    manifest.add_input("tabular", tabular)

    graph = parse_tabular_list(tabular, version=args.version)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    graph.dump(out)
    stats = graph.stats()
    _sibling(out, ".stats.json").write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")

    manifest.tabular_version = graph.version
    manifest.outputs = {"graph": str(out), "stats": str(_sibling(out, ".stats.json"))}
    manifest.finish(manifest_path(out))
    print(json.dumps(stats, indent=2))
    return EXIT_OK


def cmd_index_guidelines(args: argparse.Namespace) -> int:
    guidelines = _require(args.guidelines, "Guidelines text")
    toc = _require(args.toc, "Sidecar ToC") if args.toc else None
    manifest = RunManifest(command="index-guidelines", guidelines_version=args.version)
    manifest.add_input("guidelines", guidelines)
    if toc is not None:
        manifest.add_input("toc", toc)

    store = GuidelineStore.from_files(guidelines, args.version, toc_file=toc)
    out = Path(args.out)
    store.save(out)

    manifest.outputs = {"store": str(out)}
    manifest.finish(out / "manifest.json")
    for entry in store.listing():
        flag = " [degraded]" if entry["degraded"] else ""
        print(f"{entry['section_id']:<12} {entry['code_range'] or '':<10} {entry['title']}{flag}")
    return EXIT_OK


def _load_config(path: str | None) -> RunConfig:
    return load_run_config(path or get_settings().config_file)


def build_gateways(config: RunConfig, ledger: UsageLedger) -> dict[str, LLMGateway]:
    """One gateway per agent role; roles naming the same backend share its instance."""
    instances: dict[str, Backend] = {}
    gateways: dict[str, LLMGateway] = {}
    for role in AGENT_ROLES:
        try:
            backend_config = config.backend_for(role)
        except ConfigError:
            continue
        name = config.agents.get(role) or next(iter(config.backends))
        if name not in instances:
            instances[name] = create_backend(backend_config)
        gateways[role] = LLMGateway(instances[name], backend_config, ledger)
    return gateways


def cmd_build_index(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    dataset = _require(args.dataset, "Dataset")
    notes = [note for encounter in ingest_dataset(dataset) for note in encounter.notes]
    embedder = create_embedder(config.embedder)
    index = asyncio.run(build_index(notes, embedder, batch_size=config.embedder.batch_size))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    index.save(out)

    manifest = RunManifest(command="build-index", config_hash=config.config_hash())
    manifest.add_input("dataset", dataset)
    manifest.backend_fingerprints = {"embedder": embedder.fingerprint}
    manifest.outputs = {"index": str(out)}
    manifest.finish(manifest_path(out))
    print(json.dumps({"count": len(index), "dimension": index.dimension, "fingerprint": index.fingerprint}))
    return EXIT_OK


def cmd_code(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    if args.stages:
        stages, self_correction = parse_stages(args.stages)
        rounds = config.pipeline.self_correction_rounds or 1 if self_correction else 0
        config.pipeline = config.pipeline.model_copy(update={"stages": stages, "self_correction_rounds": rounds})
    pipeline = config.pipeline

    dataset = _require(args.dataset, "Dataset")
    notes = [note for encounter in ingest_dataset(dataset) for note in encounter.notes]

    graph_path = args.graph or config.knowledge_graph.path
    graph = load_graph(_require(graph_path, "Knowledge graph"), config.knowledge_graph.version) if graph_path else None

    store = None
    store_path = args.guidelines or config.guidelines.store
    if store_path and 3 in pipeline.stages:
        store = GuidelineStore.load(
            _require(store_path, "Guideline store"),
            cache_dir=config.guidelines.cache_dir,
            general_sections=config.guidelines.general_sections,
            max_chars=config.guidelines.max_chars,
        )
    if args.export_summaries and store is None:
        raise ConfigError("--export-summaries needs stage 3 and a guideline store")

    index = embedder = None
    index_path = args.index or config.fewshot.index
    if index_path and config.fewshot.k > 0:
        index = FewShotIndex.load(_require(index_path, "Few-shot index"))
        embedder = create_embedder(config.embedder)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    run_id = uuid.uuid4().hex[:12]
    audit = AuditLogger(_sibling(out, ".audit.jsonl"), run_id)
    ledger = UsageLedger()
    gateways = build_gateways(config, ledger)
    deps = PipelineDependencies(
        gateways,
        graph=graph,
        store=store,
        index=index,
        embedder=embedder,
        audit=audit,
        fewshot=config.fewshot,
    )
    check_dependencies(pipeline, deps)

    manifest = RunManifest(
        command="code",
        config_hash=config.config_hash(),
        tabular_version=graph.version if graph else None,
        guidelines_version=store.version if store else None,
        backend_fingerprints={role: g.fingerprint for role, g in sorted(gateways.items())},
        stages=pipeline.stage_label,
    )
    manifest.add_input("dataset", dataset)
    audit.log("run_start", detail={"notes": len(notes), "stages": pipeline.stage_label})

    results = asyncio.run(run_batch(notes, pipeline, deps))

    with open(out, "w", encoding="utf-8") as f:
        for result in results:
            f.write(json.dumps(result.to_prediction()) + "\n")
    ledger_path = _sibling(out, ".ledger.json")
    ledger_path.write_text(json.dumps(ledger.to_dict(), indent=2) + "\n", encoding="utf-8")

    failed = [r.note_id for r in results if r.status == "failed"]
    audit.log("run_end", status="partial" if failed else "success", detail={"failed": failed})
    manifest.outputs = {
        "predictions": str(out),
        "ledger": str(ledger_path),
        "audit": str(audit.path),
    }
    if args.export_summaries and store is not None:
        count = store.export_summaries(args.export_summaries)
        manifest.outputs["summaries"] = str(args.export_summaries)
        logger.info("Exported %d guideline summaries to %s", count, args.export_summaries)
    manifest.finish(manifest_path(out))

    print(ledger.render_table())
    if failed:
        print(f"{len(failed)} of {len(results)} note(s) failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = _load_config(args.config) if args.config else RunConfig()
    scope = args.scope or config.evaluation.scope
    universe = args.macro_universe or config.evaluation.macro_universe
    encounters = ingest_dataset(_require(args.gold, "Gold dataset"))
    predictions = load_predictions(_require(args.pred, "Predictions"))
    code_filter = CodeSpaceFilter.from_file(_require(args.filter, "Filter")) if args.filter else None

    report = evaluate(encounters, predictions, scope=scope, macro_universe=universe, code_filter=code_filter)
    if args.json:
        print(report.to_json())
    else:
        print(report.render_table(Path(args.pred).stem))
    return EXIT_OK


def cmd_alpha(args: argparse.Namespace) -> int:
    a = load_annotations(_require(args.a, "Annotation file"))
    b = load_annotations(_require(args.b, "Annotation file"))
    alpha = krippendorff_alpha(a, b, scope=args.scope)
    print(json.dumps({"alpha": alpha, "scope": args.scope, "encounters": len(set(a) & set(b))}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ragcoder", description="Knowledge-grounded ICD-10-CM coding")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="WARNING", help="Logging level (default: WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-kg", help="Parse the tabular list into a knowledge graph")
    p.add_argument("--tabular", required=True, help="ICD-10-CM tabular list XML")
    p.add_argument("--out", required=True, help="Graph dump to write")
    p.add_argument("--tag", dest="version", default=None, help="Version tag (default: from the XML)")
    p.set_defaults(func=cmd_build_kg)

    p = sub.add_parser("index-guidelines", help="Index the coding guidelines by table of contents")
    p.add_argument("--guidelines", required=True, help="Guidelines plain text")
    p.add_argument("--toc", default=None, help="Sidecar ToC JSON for broken extractions")
    p.add_argument("--out", required=True, help="Store directory to write")
    p.add_argument("--tag", dest="version", default="unknown", help="Guidelines version tag")
    p.set_defaults(func=cmd_index_guidelines)

    p = sub.add_parser("build-index", help="Embed training notes into a few-shot index")
    p.add_argument("--dataset", required=True, help="Training dataset JSONL")
    p.add_argument("--config", default=None, help="Run configuration YAML")
    p.add_argument("--out", required=True, help="Index file to write")
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("code", help="Run the coding pipeline over a dataset")
    p.add_argument("--dataset", required=True, help="Dataset JSONL")
    p.add_argument("--config", default=None, help="Run configuration YAML")
    p.add_argument("--stages", default=None, help="1, 12, 123, 1234 or 1+sc (default: from config)")
    p.add_argument("--out", required=True, help="Predictions JSONL to write")
    p.add_argument("--graph", default=None, help="Knowledge graph (overrides config)")
    p.add_argument("--guidelines", default=None, help="Guideline store directory (overrides config)")
    p.add_argument("--index", default=None, help="Few-shot index (overrides config)")
    p.add_argument("--export-summaries", default=None, help="Write the cached guideline summaries as JSONL")
    p.set_defaults(func=cmd_code)

    p = sub.add_parser("eval", help="Score predictions at encounter level")
    p.add_argument("--gold", required=True, help="Gold dataset JSONL")
    p.add_argument("--pred", required=True, help="Predictions JSONL")
    p.add_argument("--filter", default=None, help="Allowed code list, one per line")
    p.add_argument("--config", default=None, help="Run configuration YAML")
    p.add_argument("--scope", choices=["diagnosis", "procedure", "all"], default=None)
    p.add_argument("--macro-universe", choices=["union", "gold"], default=None)
    p.add_argument("--json", action="store_true", help="Print the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("alpha", help="Krippendorff's alpha between two annotation files")
    p.add_argument("--a", required=True, help="First annotation JSONL")
    p.add_argument("--b", required=True, help="Second annotation JSONL")
    p.add_argument("--scope", choices=["diagnosis", "procedure", "all"], default="all")
    p.set_defaults(func=cmd_alpha)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return int(args.func(args))
    except (RagCoderError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
