"""The knowledge-driven audit loop.

map -> schedule -> for each pair: specification -> harness -> compile/repair
-> fuzz -> reflect. A problematic specification or harness sends the pair
back to specification generation (bounded by the regeneration cap); a
confirmed finding is reported and written back into the knowledge graph.
"""

from __future__ import annotations

import json
import logging
import tempfile
from dataclasses import dataclass, field
from decimal import Decimal
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

from .builder import GraphBuilder, format_nodes
from .corpus import DEFAULT_MAX_CHUNK_UNITS, ProjectCorpus, batch_chunks, chunk_corpus
from .errors import (
    AuditKGError,
    Blocked,
    BudgetExhausted,
    MalformedOutput,
    RunFailed,
    StructuralCheckFailed,
    ToolchainCrash,
    ValidationFailed,
)
from .fuzz import DEFAULT_TIMEOUT, Executor, Violation
from .graph import AuditFindingNode, EdgeKind, KnowledgeGraph, NodeKind, ProjectNode, Severity
from .harness import DEFAULT_MAX_ATTEMPTS, Toolchain, compile_and_repair, synthesize_harness
from .llm import BudgetGuard, LLMGateway, ModelRole, Provider, Role, TemplateId, UsageLedger
from .memory import EntryKind, WorkingMemory
from .specification import AuditSpecification, generate_specification

log = logging.getLogger(__name__)

DEFAULT_REGENERATION_CAP = 2


class VerdictKind(str, Enum):
    TRUE_FINDING = "TrueFinding"
    EXPECTED_BEHAVIOR = "ExpectedBehavior"
    PROBLEMATIC = "ProblematicSpecOrHarness"
    OUT_OF_SCOPE = "OutOfScope"


@dataclass(frozen=True)
class Verdict:
    kind: VerdictKind
    reasoning: str
    severity: Severity | None = None
    title: str = ""


@dataclass(frozen=True)
class SemanticVulnPair:
    id: str
    semantic: str
    pattern: str
    rationale: str = ""


@dataclass
class ReportedFinding:
    title: str
    pair: SemanticVulnPair
    spec: AuditSpecification
    violation: Violation
    verdict: Verdict
    severity: Severity = Severity.MEDIUM
    graph_node: str | None = None

    def body(self) -> str:
        return f"{self.spec.attack_narrative}\n\n{self.violation.render()}\n\nReflection: {self.verdict.reasoning}"

    def to_dict(self) -> dict[str, Any]:
        return {
            "title": self.title,
            "pair": {"id": self.pair.id, "semantic": self.pair.semantic, "pattern": self.pair.pattern},
            "spec_version": self.spec.version,
            "specification": self.spec.to_dict(),
            "violation": self.violation.to_dict(),
            "verdict": {"kind": self.verdict.kind.value, "reasoning": self.verdict.reasoning},
            "severity_estimate": self.severity.value,
            "severity_is_advisory": True,
            "graph_node": self.graph_node,
        }


@dataclass
class AuditReportOut:
    project: str
    findings: list[ReportedFinding] = field(default_factory=list)
    ledger: dict[str, Any] = field(default_factory=dict)
    coverage: dict[str, float] = field(default_factory=dict)
    pairs: list[dict[str, Any]] = field(default_factory=list)
    halted: str = "pairs exhausted"

    def to_dict(self) -> dict[str, Any]:
        return {
            "project": self.project,
            "findings": [f.to_dict() for f in self.findings],
            "ledger": self.ledger,
            "coverage": {k: round(v, 6) for k, v in sorted(self.coverage.items())},
            "pairs": self.pairs,
            "halted": self.halted,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    def to_markdown(self) -> str:
        out = [f"# Audit report: {self.project}", ""]
        out.append(f"Loop ended: {self.halted}. Provider calls: {self.ledger.get('calls', 0)}, "
                   f"spend: ${self.ledger.get('total_usd', '0')}.")
        out += ["", f"## Findings ({len(self.findings)})", ""]
        if not self.findings:
            out.append("No confirmed findings.")
        for i, f in enumerate(self.findings, 1):
            out += [
                f"### {i}. {f.title}",
                "",
                f"- Severity (advisory): {f.severity.value}",
                f"- Pair: {f.pair.semantic} -> {f.pair.pattern}",
                f"- Specification version: {f.spec.version}",
                "",
                "```",
                f.violation.render(),
                "```",
                "",
                f.verdict.reasoning,
                "",
            ]
        out += ["## Pairs", "", "| pair | status | spec versions |", "|---|---|---|"]
        for p in self.pairs:
            out.append(f"| {p['id']} | {p['status']} | {p['spec_versions']} |")
        out += ["", "## Coverage by semantic", ""]
        for sem, ratio in sorted(self.coverage.items()):
            out.append(f"- {sem}: {ratio:.1%}")
        return "\n".join(out).rstrip() + "\n"

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> AuditReportOut:
        """Rebuild a report (findings included) from its JSON form."""
        findings = []
        for f in d.get("findings", []):
            pair = SemanticVulnPair(f["pair"]["id"], f["pair"]["semantic"], f["pair"]["pattern"])
            findings.append(ReportedFinding(
                f["title"], pair,
                AuditSpecification.from_dict(f["specification"]),
                Violation.from_dict(f["violation"]),
                Verdict(VerdictKind(f["verdict"]["kind"]), f["verdict"]["reasoning"]),
                Severity(f["severity_estimate"]), f.get("graph_node"),
            ))
        return cls(d["project"], findings, dict(d.get("ledger", {})), dict(d.get("coverage", {})),
                   list(d.get("pairs", [])), d.get("halted", ""))


MAPPING_SCHEMA = {
    "type": "object",
    "required": ["matches"],
    "properties": {
        "matches": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["semantic", "reasoning"],
                "properties": {"semantic": {"type": "string"}, "reasoning": {"type": "string"}},
            },
        }
    },
}

REFLECTION_SCHEMA = {
    "type": "object",
    "required": ["matches_specification", "reasoning"],
    "properties": {
        "matches_specification": {"type": "boolean"},
        "mismatch_kind": {"enum": [VerdictKind.EXPECTED_BEHAVIOR.value, VerdictKind.PROBLEMATIC.value, None]},
        "in_scope": {"type": ["boolean", "null"]},
        "severity": {"enum": ["High", "Medium", None]},
        "title": {"type": "string"},
        "reasoning": {"type": "string"},
    },
}


def load_general_rules() -> str:
    return resources.files("auditkg").joinpath("data/general_rules.txt").read_text(encoding="utf-8")


# --------------------------------------------------------------------------- mapper


@dataclass
class KnowledgeMapping:
    pairs: list[SemanticVulnPair]
    business_types: list[Any] = field(default_factory=list)


def _map(gateway: LLMGateway, corpus: ProjectCorpus, graph: KnowledgeGraph,
         max_chunk_units: int) -> KnowledgeMapping:
    if not graph.nodes(NodeKind.SEMANTIC):
        return KnowledgeMapping([])
    builder = GraphBuilder(gateway, graph, max_chunk_units=max_chunk_units)
    chunks = chunk_corpus(corpus, max_chunk_units)
    if not chunks:
        return KnowledgeMapping([])
    try:
        business = builder.classify_business_types(chunks, purpose="audit:map:classify")
        known = graph.query_semantics_by_business(business.types)
        if not known:
            log.info("no graph semantics under %s", [b.value for b in business.types])
            return KnowledgeMapping([], business.types)
        extracted = []
        for i, batch in enumerate(batch_chunks(chunks, max_chunk_units)):
            extracted += builder.extract_semantics(batch, [], business.types, purpose=f"audit:map:extract:{i}")
        known_ids = {n.id for n in known}
        matched: dict[str, str] = {}
        for i, cand in enumerate(extracted):
            reply = gateway.ask(
                TemplateId.MAPPING,
                {"PROJECT SEMANTIC": f"{cand.title}: {cand.description}", "KNOWN SEMANTICS": format_nodes(known)},
                MAPPING_SCHEMA,
                purpose=f"audit:map:match:{i}",
            )
            for m in reply.parsed["matches"]:
                if m["semantic"] in known_ids:
                    matched.setdefault(m["semantic"], m["reasoning"])
                else:
                    log.warning("mapper proposed unknown semantic %s", m["semantic"])
    except BudgetExhausted:
        raise
    except AuditKGError as exc:
        log.warning("knowledge mapping failed: %s", exc)
        return KnowledgeMapping([])
    pairs: dict[str, SemanticVulnPair] = {}
    for sem_id, reasoning in matched.items():
        for pattern, _ in graph.linked_patterns(sem_id):
            pid = f"{sem_id}~{pattern.id}"
            pairs.setdefault(pid, SemanticVulnPair(pid, sem_id, pattern.id, reasoning))
    return KnowledgeMapping(list(pairs.values()), business.types)


def map_knowledge(gateway: LLMGateway, corpus: ProjectCorpus, graph: KnowledgeGraph,
                  max_chunk_units: int = DEFAULT_MAX_CHUNK_UNITS) -> list[SemanticVulnPair]:
    return _map(gateway, corpus, graph, max_chunk_units).pairs


def schedule_pairs(pairs: Sequence[SemanticVulnPair], memory: WorkingMemory) -> list[SemanticVulnPair]:
    """Least-covered semantics first; ties keep insertion order."""
    return sorted(pairs, key=lambda p: memory.coverage_ratio(p.semantic))


# --------------------------------------------------------------------------- reflector


def reflect_finding(
    gateway: LLMGateway,
    violation: Violation,
    spec: AuditSpecification,
    scope_notes: str,
    memory: WorkingMemory,
    general_rules: str | None = None,
) -> Verdict:
    rules = load_general_rules() if general_rules is None else general_rules
    try:
        reply = gateway.ask(
            TemplateId.REFLECTION,
            {
                "SPECIFICATION": spec.dumps(),
                "VIOLATION": violation.render(),
                "SCOPE NOTES": scope_notes,
                "GENERAL RULES": rules,
            },
            REFLECTION_SCHEMA,
            purpose=f"audit:{spec.pair_id}:reflect:v{spec.version}",
        )
        parsed = reply.parsed
        reasoning = parsed["reasoning"] or reply.reasoning
        severity = Severity(parsed["severity"]) if parsed.get("severity") else None
        if not parsed["matches_specification"]:
            kind = VerdictKind(parsed.get("mismatch_kind") or VerdictKind.PROBLEMATIC.value)
        elif parsed.get("in_scope") is False:
            kind = VerdictKind.OUT_OF_SCOPE
        else:
            kind = VerdictKind.TRUE_FINDING
        verdict = Verdict(kind, reasoning, severity, parsed.get("title", ""))
    except MalformedOutput as exc:
        verdict = Verdict(VerdictKind.PROBLEMATIC, f"reflection output unusable: {exc}")
    memory.record_feedback(spec.pair_id, verdict.kind.value, verdict.reasoning)
    return verdict


# --------------------------------------------------------------------------- graph feedback


@dataclass
class IngestSummary:
    finding: str | None
    edges: list[str] = field(default_factory=list)
    created: bool = False


def ensure_project(graph: KnowledgeGraph, corpus: ProjectCorpus, business_types: Sequence[Any] = ()) -> str:
    node = graph.project_by_name(corpus.name)
    pid = node.id if node else graph.add_node(ProjectNode(corpus.name, corpus.ref or corpus.root))
    for bt in business_types:
        graph.add_edge(EdgeKind.BELONGS_TO, pid, bt)
    return pid


def ingest_finding(graph: KnowledgeGraph, finding: ReportedFinding, project_id: str) -> IngestSummary:
    """Write a confirmed finding back into the graph, all or nothing."""
    if finding.verdict.kind is not VerdictKind.TRUE_FINDING:
        raise ValueError("only TrueFinding verdicts are ingested")
    node = AuditFindingNode(finding.title, finding.severity, finding.body())
    for edge in graph.edges(EdgeKind.HAS, source=project_id):
        if graph.node(edge.target).fingerprint == node.fingerprint:
            finding.graph_node = edge.target
            return IngestSummary(edge.target)
    with graph.transaction():
        fid = graph.add_node(node)
        edges = [graph.add_edge(EdgeKind.HAS, project_id, fid),
                 graph.add_edge(EdgeKind.CONTRIBUTES_TO, finding.pair.pattern, fid)]
        for attack in graph.attack_types_of(finding.pair.pattern):
            edges.append(graph.add_edge(EdgeKind.INVOLVES, fid, attack))
    finding.graph_node = fid
    return IngestSummary(fid, edges, True)


# --------------------------------------------------------------------------- loop


@dataclass
class AuditConfig:
    timeout: float = DEFAULT_TIMEOUT
    max_attempts: int = DEFAULT_MAX_ATTEMPTS
    regeneration_cap: int = DEFAULT_REGENERATION_CAP
    max_chunk_units: int = DEFAULT_MAX_CHUNK_UNITS
    seed: int | None = None
    forge_std: str | None = None
    general_rules: str | None = None


class Auditor:
    def __init__(
        self,
        corpus: ProjectCorpus,
        graph: KnowledgeGraph,
        gateway: LLMGateway,
        toolchain: Toolchain,
        executor: Executor,
        workspace: str | Path,
        config: AuditConfig | None = None,
    ):
        self.corpus = corpus
        self.graph = graph
        self.gateway = gateway
        self.toolchain = toolchain
        self.executor = executor
        self.workspace = Path(workspace)
        self.config = config or AuditConfig()
        for sub in ("specs", "harnesses", "runs"):
            (self.workspace / sub).mkdir(parents=True, exist_ok=True)
        log_path = self.workspace / "memory.log"
        log_path.write_text("", encoding="utf-8")
        self.memory = WorkingMemory(log_path)
        self.report = AuditReportOut(corpus.name)
        self.business_types: list[Any] = []
        self.rules = self.config.general_rules or load_general_rules()

    def _describe(self, node_id: str) -> str:
        node = self.graph.node(node_id)
        return f"[{node.id}] {node.title}: {node.description}"

    def _blocked(self, pair: SemanticVulnPair, stage: str, exc: Exception) -> str:
        self.memory.record_failure(pair.id, stage, {"blocked": True, "reason": str(exc)})
        return f"blocked at {stage}"

    def process_pair(self, pair: SemanticVulnPair) -> str:
        cfg = self.config
        feedback = self.memory.feedback_for(pair.id)
        previous: AuditSpecification | None = None
        safe = pair.id.replace("~", "__")
        for version in range(cfg.regeneration_cap + 1):
            self.memory.record_spec_attempt(pair.id, version)
            try:
                spec = generate_specification(
                    self.gateway, pair.id, self._describe(pair.semantic), self._describe(pair.pattern),
                    self.corpus, feedback, previous=previous, version=version,
                    max_source_units=cfg.max_chunk_units,
                )
            except (ValidationFailed, MalformedOutput) as exc:
                return self._blocked(pair, "specification", exc)
            (self.workspace / "specs" / f"{safe}-v{version}.json").write_text(spec.dumps(), encoding="utf-8")
            try:
                harness = synthesize_harness(self.gateway, spec, self.corpus)
                compiled = compile_and_repair(
                    self.gateway, harness, spec, self.corpus, self.toolchain,
                    self.workspace / "harnesses" / safe, max_attempts=cfg.max_attempts,
                    memory=self.memory, forge_std=cfg.forge_std,
                )
            except (StructuralCheckFailed, MalformedOutput, Blocked) as exc:
                return self._blocked(pair, "harness", exc)
            try:
                outcome = self.executor.run(compiled, cfg.timeout, cfg.seed)
            except (RunFailed, ToolchainCrash) as exc:
                self.memory.record_failure(pair.id, "run", {"reason": str(exc), "spec_version": version})
                feedback = self.memory.feedback_for(pair.id) + [f"fuzz run failed: {exc}"]
                previous = spec
                continue
            (self.workspace / "runs" / f"{safe}-v{version}.json").write_text(outcome.dumps(), encoding="utf-8")
            # harness files differ per pair; only project sources share a fixed line universe
            coverage = outcome.coverage.restricted(d.path for d in self.corpus.sources())
            self.memory.record_coverage(pair.semantic, coverage, pair.id)
            if outcome.violation is None:
                return "clean run"
            verdict = reflect_finding(self.gateway, outcome.violation, spec, self.corpus.scope_notes,
                                      self.memory, self.rules)
            if verdict.kind is VerdictKind.TRUE_FINDING:
                self._report(pair, spec, outcome.violation, verdict)
                return VerdictKind.TRUE_FINDING.value
            if verdict.kind is not VerdictKind.PROBLEMATIC:
                return verdict.kind.value
            feedback = self.memory.feedback_for(pair.id)
            previous = spec
        return "regeneration cap reached"

    def _report(self, pair: SemanticVulnPair, spec: AuditSpecification, violation: Violation,
                verdict: Verdict) -> None:
        pattern = self.graph.node(pair.pattern)
        finding = ReportedFinding(
            verdict.title or f"{pattern.title} in {self.corpus.name}",
            pair, spec, violation, verdict, verdict.severity or Severity.MEDIUM,
        )
        pid = ensure_project(self.graph, self.corpus, self.business_types)
        ingest_finding(self.graph, finding, pid)
        self.report.findings.append(finding)

    def run(self, budget_check: BudgetGuard | None = None) -> AuditReportOut:
        guard = budget_check or self.gateway.guard
        try:
            mapping = _map(self.gateway, self.corpus, self.graph, self.config.max_chunk_units)
            self.business_types = mapping.business_types
            pending = list(mapping.pairs)
            while pending:
                remaining = guard.remaining
                if remaining is not None and remaining <= 0:
                    self.report.halted = "budget exhausted"
                    break
                pending = schedule_pairs(pending, self.memory)
                pair = pending.pop(0)
                try:
                    status = self.process_pair(pair)
                except BudgetExhausted as exc:
                    log.info("halting: %s", exc)
                    self.report.pairs.append(self._pair_row(pair, "interrupted by budget"))
                    self.report.halted = "budget exhausted"
                    break
                except AuditKGError as exc:
                    log.warning("pair %s failed: %s", pair.id, exc)
                    status = f"failed: {exc}"
                self.report.pairs.append(self._pair_row(pair, status))
            for pair in pending:
                self.report.pairs.append(self._pair_row(pair, "not started"))
        except BudgetExhausted as exc:
            log.info("halting: %s", exc)
            self.report.halted = "budget exhausted"
        return self._finish()

    def _pair_row(self, pair: SemanticVulnPair, status: str) -> dict[str, Any]:
        return {"id": pair.id, "status": status,
                "spec_versions": self.memory.count(pair.id, EntryKind.SPEC_ATTEMPT)}

    def _finish(self) -> AuditReportOut:
        self.report.ledger = self.gateway.ledger.summary()
        semantics = sorted({e.key for e in self.memory.select(EntryKind.COVERAGE)})
        self.report.coverage = {s: self.memory.coverage_ratio(s) for s in semantics}
        (self.workspace / "report.json").write_text(self.report.dumps(), encoding="utf-8")
        (self.workspace / "report.md").write_text(self.report.to_markdown(), encoding="utf-8")
        return self.report


def run_audit(
    corpus: ProjectCorpus,
    graph: KnowledgeGraph,
    budget: Decimal | float | str,
    *,
    provider: Provider,
    toolchain: Toolchain,
    executor: Executor,
    roles: Mapping[Role, ModelRole] | None = None,
    config: AuditConfig | None = None,
    workspace: str | Path | None = None,
) -> AuditReportOut:
    """Audit one project with its own ledger capped at ``budget`` USD."""
    budget = Decimal(str(budget))
    if budget <= 0:
        raise ValueError("budget must be positive")
    ledger = UsageLedger()
    gateway = LLMGateway(provider, roles, ledger, BudgetGuard(ledger, budget))
    ws = Path(workspace) if workspace is not None else Path(tempfile.mkdtemp(prefix="auditkg-"))
    return Auditor(corpus, graph, gateway, toolchain, executor, ws, config).run()
