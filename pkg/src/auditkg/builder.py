"""Three-stage knowledge extraction from historical projects and audit reports.

Stage I classifies each project into business types and extracts DeFi
semantics, merging them into existing semantics of the same business types.
Stage II does the same for audit findings, attack types and vulnerability
patterns. Stage III links the project's semantics to the patterns found in
its own report.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Sequence

from .corpus import (
    DEFAULT_MAX_CHUNK_UNITS,
    AuditReport,
    Chunk,
    Finding,
    ProjectCorpus,
    batch_chunks,
    chunk_corpus,
    format_chunks,
    load_project,
    load_report,
)
from .errors import (
    AuditKGError,
    BudgetExhausted,
    ClassificationEmpty,
    DanglingMergeTarget,
    LinkOutOfScope,
)
from .graph import (
    AttackType,
    AuditFindingNode,
    BusinessType,
    DefiSemanticNode,
    EdgeKind,
    KnowledgeGraph,
    NodeKind,
    ProjectNode,
    VulnerabilityPatternNode,
)
from .llm import LLMGateway, TemplateId

log = logging.getLogger(__name__)

PRIOR_CAP = 50


def load_category_bank() -> dict[str, dict[str, dict[str, str]]]:
    text = resources.files("auditkg").joinpath("data/categories.json").read_text(encoding="utf-8")
    return json.loads(text)


def describe_categories(bank: dict[str, dict[str, str]], names: Iterable[str] | None = None) -> list[str]:
    wanted = None if names is None else set(names)
    return [
        f"{name}: {entry['definition']} Example: {entry['example']}"
        for name, entry in bank.items()
        if wanted is None or name in wanted
    ]


def classification_schema(enum: type[Enum]) -> dict[str, Any]:
    return {
        "type": "object",
        "required": ["verdicts"],
        "properties": {
            "verdicts": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["category", "applies", "reasoning"],
                    "properties": {
                        "category": {"enum": [m.value for m in enum]},
                        "applies": {"type": "boolean"},
                        "reasoning": {"type": "string"},
                    },
                },
            }
        },
    }


def extraction_schema(*, exactly_one: bool = False) -> dict[str, Any]:
    items: dict[str, Any] = {
        "type": "array",
        "items": {
            "type": "object",
            "required": ["title", "description", "reasoning"],
            "properties": {
                "title": {"type": "string", "minLength": 1},
                "description": {"type": "string", "minLength": 1},
                "reasoning": {"type": "string"},
                "merge_target": {"type": ["string", "null"]},
            },
        },
    }
    if exactly_one:
        items.update(minItems=1, maxItems=1)
    return {"type": "object", "required": ["items"], "properties": {"items": items}}


LINK_SCHEMA = {
    "type": "object",
    "required": ["links"],
    "properties": {
        "links": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["semantic", "pattern", "reasoning"],
                "properties": {
                    "semantic": {"type": "string"},
                    "pattern": {"type": "string"},
                    "reasoning": {"type": "string"},
                },
            },
        }
    },
}


@dataclass
class Candidate:
    """An extracted semantic or pattern, novel unless ``merge_target`` is set."""

    title: str
    description: str
    reasoning: str = ""
    merge_target: str | None = None


CandidateSemantic = Candidate
CandidatePattern = Candidate


@dataclass
class Classification:
    types: list[Any]
    reasoning: dict[str, str] = field(default_factory=dict)

    def __iter__(self):
        return iter(self.types)


@dataclass
class ProjectReportPair:
    project_id: str
    semantics: list[str]
    patterns: list[str]


@dataclass
class ChangeSummary:
    added: list[str] = field(default_factory=list)
    merged: list[str] = field(default_factory=list)
    edges: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class ProposedLink:
    semantic: str
    pattern: str
    reasoning: str


def format_nodes(nodes: Sequence[DefiSemanticNode | VulnerabilityPatternNode]) -> list[str]:
    return [f"[{n.id}] {n.title}: {n.description}" for n in nodes]


def format_finding(finding: Finding | AuditFindingNode) -> str:
    return f"### {finding.title} ({finding.severity.value})\n{finding.body}"


class GraphBuilder:
    """Runs the extraction stages against one graph with one gateway."""

    def __init__(
        self,
        gateway: LLMGateway,
        graph: KnowledgeGraph | None = None,
        *,
        max_chunk_units: int = DEFAULT_MAX_CHUNK_UNITS,
        prior_cap: int = PRIOR_CAP,
    ):
        self.gateway = gateway
        self.graph = graph if graph is not None else KnowledgeGraph()
        self.max_chunk_units = max_chunk_units
        self.prior_cap = prior_cap
        self.bank = load_category_bank()
        self.dropped_links: list[ProposedLink] = []
        self.failures: list[tuple[str, str]] = []

    # ---------------------------------------------------------- classification
    def _classify(self, enum: type[Enum], bank_key: str, inputs: Iterable[str], input_kind: str,
                  item_kind: str, purpose: str) -> Classification:
        positive: dict[str, str] = {}
        for text in inputs:
            reply = self.gateway.ask(
                TemplateId.CLASSIFICATION,
                {
                    "CATEGORIES WITH EXAMPLES": describe_categories(self.bank[bank_key]),
                    "INPUT KIND": input_kind,
                    "ITEM KIND": item_kind,
                    "INPUTS": text,
                },
                classification_schema(enum),
                purpose=purpose,
            )
            for verdict in reply.parsed["verdicts"]:
                if verdict["applies"]:
                    positive.setdefault(verdict["category"], verdict["reasoning"])
        types = [m for m in enum if m.value in positive]
        if not types:
            raise ClassificationEmpty(f"{purpose}: no category applies")
        return Classification(types, {t.value: positive[t.value] for t in types})

    def classify_business_types(self, chunks: Sequence[Chunk], purpose: str = "classify") -> Classification:
        if not chunks:
            raise ValueError("classification needs at least one chunk")
        batches = [format_chunks(b) for b in batch_chunks(list(chunks), self.max_chunk_units)]
        return self._classify(BusinessType, "business_types", batches,
                              "project source code and documents", "function", purpose)

    def classify_attack_types(self, finding: Finding | AuditFindingNode,
                              purpose: str = "classify-finding") -> Classification:
        return self._classify(AttackType, "attack_types", [format_finding(finding)],
                              "audit report entry", "audit finding", purpose)

    # -------------------------------------------------------------- extraction
    def _extract(self, inputs: str, prior: Sequence[Any], *, label: str, bank_key: str,
                 categories: Iterable[str] | None, input_kind: str, item_kind: str,
                 exactly_one: bool, purpose: str) -> list[Candidate]:
        reply = self.gateway.ask(
            TemplateId.EXTRACTION,
            {
                "ITEM LABEL": label,
                "CATEGORIES WITH EXAMPLES": describe_categories(self.bank[bank_key], categories),
                "INPUT KIND": input_kind,
                "ITEM KIND": item_kind,
                "PREVIOUS ITEMS": format_nodes(prior),
                "INPUTS": inputs,
            },
            extraction_schema(exactly_one=exactly_one),
            purpose=purpose,
        )
        allowed = {n.id for n in prior}
        out = []
        for item in reply.parsed["items"]:
            target = item.get("merge_target") or None
            if target is not None and target not in allowed:
                raise DanglingMergeTarget(f"{purpose}: merge target {target!r} was not among the known entries")
            out.append(Candidate(item["title"], item["description"], item.get("reasoning", ""), target))
        return out

    def extract_semantics(self, chunks: Sequence[Chunk], prior: Sequence[DefiSemanticNode],
                          business_types: Iterable[BusinessType] | None = None,
                          purpose: str = "extract") -> list[CandidateSemantic]:
        names = None if business_types is None else [BusinessType(b).value for b in business_types]
        return self._extract(
            format_chunks(list(chunks)), prior, label="DeFi semantics", bank_key="business_types",
            categories=names, input_kind="project source code and documents", item_kind="contract",
            exactly_one=False, purpose=purpose,
        )

    def extract_pattern(self, finding: Finding | AuditFindingNode, prior: Sequence[VulnerabilityPatternNode],
                        attack_types: Iterable[AttackType] | None = None,
                        purpose: str = "extract-finding") -> CandidatePattern:
        names = None if attack_types is None else [AttackType(a).value for a in attack_types]
        return self._extract(
            format_finding(finding), prior, label="vulnerability patterns", bank_key="attack_types",
            categories=names, input_kind="audit report entry", item_kind="audit finding",
            exactly_one=True, purpose=purpose,
        )[0]

    def extract_patterns(self, report: AuditReport,
                         prior: Sequence[VulnerabilityPatternNode]) -> list[CandidatePattern]:
        return [self.extract_pattern(f, prior, purpose=f"extract-finding:{i}")
                for i, f in enumerate(report.findings)]

    def prior_semantics(self, business_types: Iterable[BusinessType]) -> list[DefiSemanticNode]:
        nodes = self.graph.query_semantics_by_business(business_types)
        return sorted(nodes, key=lambda n: -n.revision)[: self.prior_cap]

    def prior_patterns(self, attack_types: Iterable[AttackType]) -> list[VulnerabilityPatternNode]:
        nodes = self.graph.query_patterns_by_attack(attack_types)
        return sorted(nodes, key=lambda n: -n.revision)[: self.prior_cap]

    # ------------------------------------------------------------- application
    def apply_candidates(self, project_id: str, business_types: Iterable[BusinessType],
                         candidates: Sequence[CandidateSemantic]) -> ChangeSummary:
        g = self.graph
        types = [BusinessType(b) for b in business_types]
        summary = ChangeSummary()
        for cand in candidates:
            node = DefiSemanticNode(cand.title, cand.description)
            if cand.merge_target is not None:
                if not g.has_node(cand.merge_target):
                    raise DanglingMergeTarget(cand.merge_target)
                sid = g.merge_semantics(cand.merge_target, node, cand.description)
                summary.merged.append(sid)
            else:
                before = len(g.nodes(NodeKind.SEMANTIC))
                sid = g.add_node(node)
                (summary.added if len(g.nodes(NodeKind.SEMANTIC)) > before else summary.merged).append(sid)
            summary.edges.append(g.add_edge(EdgeKind.CONTAINS, project_id, sid))
            for bt in types:
                summary.edges.append(g.add_edge(EdgeKind.UNDERLIES, sid, bt))
        return summary

    def apply_pattern(self, finding_id: str, attack_types: Iterable[AttackType],
                      candidate: CandidatePattern) -> ChangeSummary:
        g = self.graph
        summary = ChangeSummary()
        node = VulnerabilityPatternNode(candidate.title, candidate.description)
        if candidate.merge_target is not None:
            if not g.has_node(candidate.merge_target):
                raise DanglingMergeTarget(candidate.merge_target)
            pid = g.merge_patterns(candidate.merge_target, node, candidate.description)
            summary.merged.append(pid)
        else:
            before = len(g.nodes(NodeKind.PATTERN))
            pid = g.add_node(node)
            (summary.added if len(g.nodes(NodeKind.PATTERN)) > before else summary.merged).append(pid)
        summary.edges.append(g.add_edge(EdgeKind.CONTRIBUTES_TO, pid, finding_id))
        for at in attack_types:
            summary.edges.append(g.add_edge(EdgeKind.POSES, pid, AttackType(at)))
        return summary

    # ----------------------------------------------------------------- linking
    def project_report_pair(self, project_id: str) -> ProjectReportPair:
        g = self.graph
        semantics = sorted({e.target for e in g.edges(EdgeKind.CONTAINS, source=project_id)})
        findings = {e.target for e in g.edges(EdgeKind.HAS, source=project_id)}
        patterns = sorted({e.source for e in g.edges(EdgeKind.CONTRIBUTES_TO) if e.target in findings})
        return ProjectReportPair(project_id, semantics, patterns)

    def link_pair(self, pair: ProjectReportPair, purpose: str = "link") -> list[str]:
        """Ask for semantic-pattern links and store those inside the pair's universe."""
        if not pair.semantics or not pair.patterns:
            return []
        g = self.graph
        reply = self.gateway.ask(
            TemplateId.LINKING,
            {
                "DEFI SEMANTICS": format_nodes([g.node(i) for i in pair.semantics]),
                "VULNERABILITY PATTERNS": format_nodes([g.node(i) for i in pair.patterns]),
            },
            LINK_SCHEMA,
            purpose=purpose,
        )
        semantics, patterns = set(pair.semantics), set(pair.patterns)
        added = []
        for link in reply.parsed["links"]:
            proposed = ProposedLink(link["semantic"], link["pattern"], link["reasoning"])
            try:
                if proposed.semantic not in semantics or proposed.pattern not in patterns:
                    raise LinkOutOfScope(f"{proposed.semantic} -> {proposed.pattern} is outside the pair")
            except LinkOutOfScope as exc:
                log.warning("dropping link: %s", exc)
                self.dropped_links.append(proposed)
                continue
            added.append(g.add_edge(EdgeKind.MAY_INTRODUCE, proposed.semantic, proposed.pattern,
                                    proposed.reasoning))
        return added

    # ------------------------------------------------------------------ driver
    def build_project(self, corpus: ProjectCorpus, report: AuditReport) -> str:
        g = self.graph
        tag = f"kg:{corpus.name}"
        chunks = chunk_corpus(corpus, self.max_chunk_units)
        if not chunks:
            raise ClassificationEmpty(f"{corpus.name}: corpus has no text")
        business = self.classify_business_types(chunks, purpose=f"{tag}:classify")
        pid = g.add_node(ProjectNode(corpus.name, corpus.ref or corpus.root))
        for bt in business.types:
            g.add_edge(EdgeKind.BELONGS_TO, pid, bt)

        # Stage I
        for i, batch in enumerate(batch_chunks(chunks, self.max_chunk_units)):
            prior = self.prior_semantics(business.types)
            candidates = self.extract_semantics(batch, prior, business.types, purpose=f"{tag}:extract:{i}")
            self.apply_candidates(pid, business.types, candidates)

        # Stage II
        for i, finding in enumerate(report.findings):
            try:
                attack = self.classify_attack_types(finding, purpose=f"{tag}:classify-finding:{i}")
            except ClassificationEmpty as exc:
                log.warning("skipping finding %r: %s", finding.title, exc)
                continue
            fid = g.add_node(AuditFindingNode(finding.title, finding.severity, finding.body))
            g.add_edge(EdgeKind.HAS, pid, fid)
            for at in attack.types:
                g.add_edge(EdgeKind.INVOLVES, fid, at)
            prior = self.prior_patterns(attack.types)
            candidate = self.extract_pattern(finding, prior, attack.types, purpose=f"{tag}:extract-finding:{i}")
            self.apply_pattern(fid, attack.types, candidate)

        # Stage III
        self.link_pair(self.project_report_pair(pid), purpose=f"{tag}:link")
        return pid

    def build(self, corpus_set: Iterable[tuple[ProjectCorpus, AuditReport]]) -> KnowledgeGraph:
        for corpus, report in corpus_set:
            try:
                with self.graph.transaction():
                    self.build_project(corpus, report)
                    problems = self.graph.validate()
                    if problems:
                        raise AuditKGError("; ".join(problems))
            except BudgetExhausted:
                log.warning("budget exhausted while processing %s; stopping", corpus.name)
                self.failures.append((corpus.name, "budget exhausted"))
                break
            except AuditKGError as exc:
                log.warning("skipping project %s: %s", corpus.name, exc)
                self.failures.append((corpus.name, str(exc)))
        return self.graph


def build_graph(corpus_set: Iterable[tuple[ProjectCorpus, AuditReport]], gateway: LLMGateway,
                **kwargs: Any) -> KnowledgeGraph:
    return GraphBuilder(gateway, **kwargs).build(corpus_set)


def load_manifest(path: str | Path) -> list[tuple[ProjectCorpus, AuditReport]]:
    """Read a build manifest: a JSON list of {project_dir, findings_file}.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    entries = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(entries, list):
        raise ValueError(f"{path}: manifest must be a JSON list")
    out = []
    for entry in entries:
        project_dir = path.parent / entry["project_dir"]
        corpus = load_project(project_dir)
        corpus.ref = str(entry["project_dir"])
        report = load_report(path.parent / entry["findings_file"], corpus.name)
        out.append((corpus, report))
    return out
