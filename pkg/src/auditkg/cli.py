"""Command-line entry point: ``auditkg kg ...`` and ``auditkg audit ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import sys
from pathlib import Path
from typing import Any, Mapping, Sequence, TextIO

from . import graph as kg
from .builder import GraphBuilder, load_manifest
from .config import Config, ConfigError, load_config
from .corpus import load_project
from .errors import AuditKGError, EmptyProject, ParseError
from .fuzz import ForgeExecutor, ReplayExecutor
from .graph import BusinessType, KnowledgeGraph
from .harness import ForgeToolchain, WorkspaceOnlyToolchain
from .llm import LLMGateway, MockProvider, OpenAICompatibleProvider, Provider
from .orchestrator import AuditConfig, AuditReportOut, run_audit

log = logging.getLogger("auditkg")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse exits 2 by default
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--seed", type=int, help="seed for every random choice")
    p.add_argument("--mock-script", dest="mock_script", help="scripted provider transcript (JSON)")
    p.add_argument("--mock-cost", dest="mock_cost_per_call", help="fixed USD cost per mock call")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="auditkg", description="Knowledge-graph-driven smart contract auditing.")
    top = parser.add_subparsers(dest="group", required=True, parser_class=_Parser)

    kg_p = top.add_parser("kg", help="knowledge graph commands")
    kg_sub = kg_p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = kg_sub.add_parser("build", help="build a graph from a manifest of audited projects")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--chunk-size", dest="chunk_size", type=int)
    _common(p)
    p = kg_sub.add_parser("stats", help="node and edge counts")
    p.add_argument("graph")
    p = kg_sub.add_parser("query", help="semantics of a business type and their linked patterns")
    p.add_argument("graph")
    p.add_argument("--business", required=True, choices=[b.value for b in BusinessType], metavar="TYPE")

    audit_p = top.add_parser("audit", help="audit commands")
    audit_sub = audit_p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = audit_sub.add_parser("run", help="audit one project against a graph")
    p.add_argument("--project", required=True)
    p.add_argument("--kg", required=True)
    p.add_argument("--budget", help="USD ceiling for provider spend")
    p.add_argument("--workspace")
    p.add_argument("--mock-executor", dest="mock_executor", help="directory of recorded fuzz outcomes")
    p.add_argument("--timeout", dest="fuzz_timeout", type=float)
    p.add_argument("--max-attempts", dest="max_attempts", type=int)
    p.add_argument("--regeneration-cap", dest="regeneration_cap", type=int)
    p.add_argument("--chunk-size", dest="chunk_size", type=int)
    p.add_argument("--no-update-kg", action="store_true", help="do not write findings back to the graph")
    _common(p)
    p = audit_sub.add_parser("report", help="print the report of a finished audit")
    p.add_argument("workspace")
    return parser


def _config(args: argparse.Namespace, env: Mapping[str, str]) -> Config:
    keys = ("seed", "mock_script", "mock_cost_per_call", "chunk_size", "budget", "workspace",
            "mock_executor", "fuzz_timeout", "max_attempts", "regeneration_cap")
    flags = {k: getattr(args, k, None) for k in keys}
    return load_config(flags, env, getattr(args, "config", None))


def _provider(cfg: Config) -> Provider:
    if cfg.mock_script:
        path = Path(cfg.mock_script)
        if not path.is_file():
            raise UserError(f"mock script not found: {path}")
        return MockProvider.from_file(path, cost_per_call=cfg.mock_cost_per_call)
    if not cfg.api_key:
        raise UserError("no provider configured: set AUDITKG_API_KEY (or OPENAI_API_KEY) or pass --mock-script")
    return OpenAICompatibleProvider(cfg.base_url, cfg.api_key)


def _load_graph(path: str) -> KnowledgeGraph:
    try:
        return kg.load(path)
    except FileNotFoundError as exc:
        raise UserError(f"graph not found: {path}") from exc
    except ParseError as exc:
        raise UserError(f"{path}: {exc}") from exc


def cmd_kg_build(args: argparse.Namespace, env: Mapping[str, str], out: TextIO) -> int:
    manifest = Path(args.manifest)
    if not manifest.is_file():
        raise UserError(f"manifest not found: {manifest}")
    cfg = _config(args, env)
    try:
        corpus_set = load_manifest(manifest)
    except (ValueError, KeyError, OSError, AuditKGError) as exc:
        raise UserError(f"bad manifest {manifest}: {exc}") from exc
    gateway = LLMGateway(_provider(cfg), cfg.roles())
    builder = GraphBuilder(gateway, max_chunk_units=cfg.chunk_size)
    graph = builder.build(corpus_set)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    kg.save(graph, args.out)
    for name, reason in builder.failures:
        print(f"skipped {name}: {reason}", file=sys.stderr)
    print(_stats_line(graph), file=out)
    return EXIT_OK


def _stats_line(graph: KnowledgeGraph) -> str:
    stats = graph.stats()
    head = ["semantics", "patterns", "links", "projects", "findings"]
    rest = sorted(k for k in stats if k not in head)
    return " ".join(f"{k}={stats[k]}" for k in head + rest)


def cmd_kg_stats(args: argparse.Namespace, env: Mapping[str, str], out: TextIO) -> int:
    print(_stats_line(_load_graph(args.graph)), file=out)
    return EXIT_OK


def cmd_kg_query(args: argparse.Namespace, env: Mapping[str, str], out: TextIO) -> int:
    graph = _load_graph(args.graph)
    for sem in graph.query_semantics_by_business([BusinessType(args.business)]):
        print(f"{sem.id}\t{sem.title}", file=out)
        for pattern, rationale in graph.linked_patterns(sem.id):
            print(f"  -> {pattern.id}\t{pattern.title}", file=out)
    return EXIT_OK


def cmd_audit_run(args: argparse.Namespace, env: Mapping[str, str], out: TextIO) -> int:
    cfg = _config(args, env)
    graph = _load_graph(args.kg)
    try:
        corpus = load_project(args.project)
    except (FileNotFoundError, NotADirectoryError, EmptyProject) as exc:
        raise UserError(f"cannot load project {args.project}: {exc}") from exc
    if cfg.mock_executor:
        inner = ForgeExecutor() if ForgeExecutor.available() else None
        executor: Any = ReplayExecutor(cfg.mock_executor, inner)
        toolchain: Any = ForgeToolchain() if inner is not None else WorkspaceOnlyToolchain()
    else:
        if not ForgeExecutor.available():
            raise UserError("forge is not on PATH; install Foundry or pass --mock-executor")
        executor, toolchain = ForgeExecutor(), ForgeToolchain()
    if cfg.seed is not None:
        random.seed(cfg.seed)
    audit_cfg = AuditConfig(timeout=cfg.fuzz_timeout, max_attempts=cfg.max_attempts,
                            regeneration_cap=cfg.regeneration_cap, max_chunk_units=cfg.chunk_size,
                            seed=cfg.seed)
    workspace = Path(cfg.workspace)
    report = run_audit(corpus, graph, cfg.budget, provider=_provider(cfg), toolchain=toolchain,
                       executor=executor, roles=cfg.roles(), config=audit_cfg, workspace=workspace)
    if not args.no_update_kg and report.findings:
        kg.save(graph, args.kg)
    print(f"findings={len(report.findings)} calls={report.ledger.get('calls', 0)} "
          f"spend_usd={report.ledger.get('total_usd', '0')} halted={report.halted!r} "
          f"workspace={workspace}", file=out)
    return EXIT_OK


def cmd_audit_report(args: argparse.Namespace, env: Mapping[str, str], out: TextIO) -> int:
    path = Path(args.workspace) / "report.json"
    if not path.is_file():
        raise UserError(f"no report in {args.workspace}")
    try:
        report = AuditReportOut.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except (ValueError, KeyError) as exc:
        raise UserError(f"unreadable report {path}: {exc}") from exc
    out.write(report.to_markdown())
    return EXIT_OK


COMMANDS = {
    ("kg", "build"): cmd_kg_build,
    ("kg", "stats"): cmd_kg_stats,
    ("kg", "query"): cmd_kg_query,
    ("audit", "run"): cmd_audit_run,
    ("audit", "report"): cmd_audit_report,
}


def run_cli(argv: Sequence[str] | None = None, env: Mapping[str, str] | None = None,
            out: TextIO | None = None) -> int:
    env = os.environ if env is None else env
    out = sys.stdout if out is None else out
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[(args.group, args.command)](args, env, out)
    except (UserError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"auditkg: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"auditkg: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
