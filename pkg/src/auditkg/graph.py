"""Bipartite auditing knowledge graph.

The DeFi side holds Solidity projects, DeFi semantics and the closed set of
business types; the vulnerability side holds audit findings, vulnerability
patterns and the closed set of attack types. Business and attack types are
enum values rather than nodes, so edges pointing at them store the value.

The graph is single-writer: callers serialize mutations, reads may overlap.
"""

from __future__ import annotations

import copy
import hashlib
import json
import re
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator, Union

from .errors import KindMismatch, NotFound, ParseError, SchemaViolation, UnsupportedVersion

FORMAT_VERSION = 1


class BusinessType(str, Enum):
    LENDING = "Lending"
    DEXES = "Dexes"
    YIELD = "Yield"
    SERVICES = "Services"
    DERIVATIVES = "Derivatives"
    YIELD_AGGREGATOR = "YieldAggregator"
    REAL_WORLD_ASSETS = "RealWorldAssets"
    STABLECOINS = "Stablecoins"
    INDEXES = "Indexes"
    INSURANCE = "Insurance"
    NFT_MARKETPLACE = "NFTMarketplace"
    NFT_LENDING = "NFTLending"
    CROSS_CHAIN = "CrossChain"


class AttackType(str, Enum):
    ACCESS_CONTROL = "AccessControl"
    ARITHMETIC = "Arithmetic"
    BLOCK_MANIPULATION = "BlockManipulation"
    CRYPTOGRAPHIC = "Cryptographic"
    DENIAL_OF_SERVICE = "DenialOfService"
    REENTRANCY = "Reentrancy"
    STORAGE_AND_MEMORY = "StorageAndMemory"


class Severity(str, Enum):
    HIGH = "High"
    MEDIUM = "Medium"


class NodeKind(str, Enum):
    PROJECT = "project"
    SEMANTIC = "semantic"
    PATTERN = "pattern"
    FINDING = "finding"


class EdgeKind(str, Enum):
    BELONGS_TO = "BelongsTo"
    CONTAINS = "Contains"
    UNDERLIES = "Underlies"
    CONTRIBUTES_TO = "ContributesTo"
    POSES = "Poses"
    INVOLVES = "Involves"
    HAS = "Has"
    MAY_INTRODUCE = "MayIntroduce"


ID_PREFIX = {
    NodeKind.PROJECT: "proj",
    NodeKind.SEMANTIC: "sem",
    NodeKind.PATTERN: "pat",
    NodeKind.FINDING: "find",
}
_PREFIX_KIND = {v: k for k, v in ID_PREFIX.items()}
_SECTION = {
    NodeKind.PROJECT: "projects",
    NodeKind.SEMANTIC: "semantics",
    NodeKind.PATTERN: "patterns",
    NodeKind.FINDING: "findings",
}

# Endpoint table: (source node kind, target kind). Targets may be an enum class.
ENDPOINTS: dict[EdgeKind, tuple[NodeKind, Any]] = {
    EdgeKind.BELONGS_TO: (NodeKind.PROJECT, BusinessType),
    EdgeKind.CONTAINS: (NodeKind.PROJECT, NodeKind.SEMANTIC),
    EdgeKind.UNDERLIES: (NodeKind.SEMANTIC, BusinessType),
    EdgeKind.CONTRIBUTES_TO: (NodeKind.PATTERN, NodeKind.FINDING),
    EdgeKind.POSES: (NodeKind.PATTERN, AttackType),
    EdgeKind.INVOLVES: (NodeKind.FINDING, AttackType),
    EdgeKind.HAS: (NodeKind.PROJECT, NodeKind.FINDING),
    EdgeKind.MAY_INTRODUCE: (NodeKind.SEMANTIC, NodeKind.PATTERN),
}

_WS = re.compile(r"\s+")


def normalize_text(text: str) -> str:
    return _WS.sub(" ", text.strip().lower())


def fingerprint(title: str, description: str) -> str:
    """Exact-duplicate key: hash of lowercased, whitespace-collapsed text."""
    payload = normalize_text(title) + "\n" + normalize_text(description)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


@dataclass
class ProjectNode:
    name: str
    source_ref: str = ""
    id: str = ""

    kind = NodeKind.PROJECT


@dataclass
class DefiSemanticNode:
    title: str
    description: str
    merged_from: list[str] = field(default_factory=list)
    id: str = ""
    revision: int = 0  # graph clock value of the last insert/merge

    kind = NodeKind.SEMANTIC

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.title, self.description)


@dataclass
class VulnerabilityPatternNode:
    title: str
    description: str
    merged_from: list[str] = field(default_factory=list)
    id: str = ""
    revision: int = 0

    kind = NodeKind.PATTERN

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.title, self.description)


@dataclass
class AuditFindingNode:
    title: str
    severity: Severity
    body: str
    id: str = ""

    kind = NodeKind.FINDING

    def __post_init__(self) -> None:
        self.severity = Severity(self.severity)

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.title, self.body)


Node = Union[ProjectNode, DefiSemanticNode, VulnerabilityPatternNode, AuditFindingNode]
AbstractNode = Union[DefiSemanticNode, VulnerabilityPatternNode]


@dataclass(frozen=True)
class Edge:
    id: str
    kind: EdgeKind
    source: str
    target: str
    rationale: str | None = None


def kind_of_id(node_id: str) -> NodeKind | None:
    prefix, _, _ = node_id.partition("-")
    return _PREFIX_KIND.get(prefix)


class KnowledgeGraph:
    """In-memory auditing knowledge graph with merge-on-insert semantics."""

    def __init__(self) -> None:
        self._nodes: dict[str, Node] = {}
        self._edges: dict[str, Edge] = {}
        self._triples: dict[tuple[EdgeKind, str, str], str] = {}
        self._fingerprints: dict[tuple[NodeKind, str], str] = {}
        self._counters: dict[NodeKind, int] = {k: 0 for k in NodeKind}
        self._edge_counter = 0
        self._clock = 0
        self.version = FORMAT_VERSION

    # ------------------------------------------------------------------ nodes
    def add_node(self, node: Node) -> str:
        """Insert ``node`` and return its id.

        Semantics and patterns whose fingerprint is already known are not
        inserted; the id of the stored node is returned instead.
        """
        kind = node.kind
        if kind is NodeKind.PROJECT:
            if not node.name.strip():
                raise SchemaViolation("project name must be non-empty")
        elif kind in (NodeKind.SEMANTIC, NodeKind.PATTERN):
            if not node.title.strip():
                raise SchemaViolation(f"{kind.value} title must be non-empty")
            existing = self._fingerprints.get((kind, node.fingerprint))
            if existing is None:
                for fp in node.merged_from:
                    existing = self._fingerprints.get((kind, fp))
                    if existing is not None:
                        break
            if existing is not None:
                return existing
        elif kind is NodeKind.FINDING:
            if not node.title.strip():
                raise SchemaViolation("finding title must be non-empty")

        node = copy.deepcopy(node)
        self._counters[kind] += 1
        node.id = f"{ID_PREFIX[kind]}-{self._counters[kind]:06d}"
        if kind in (NodeKind.SEMANTIC, NodeKind.PATTERN):
            if not node.merged_from:
                node.merged_from = [node.fingerprint]
            self._clock += 1
            node.revision = self._clock
            self._index_fingerprints(node)
        self._nodes[node.id] = node
        return node.id

    def _index_fingerprints(self, node: AbstractNode) -> None:
        for fp in [node.fingerprint, *node.merged_from]:
            self._fingerprints.setdefault((node.kind, fp), node.id)

    def node(self, node_id: str) -> Node:
        try:
            return self._nodes[node_id]
        except KeyError:
            raise NotFound(f"unknown node: {node_id}") from None

    def has_node(self, node_id: str) -> bool:
        return node_id in self._nodes

    def nodes(self, kind: NodeKind | None = None) -> list[Node]:
        ids = sorted(self._nodes)
        return [self._nodes[i] for i in ids if kind is None or self._nodes[i].kind is kind]

    def find_by_fingerprint(self, kind: NodeKind, fp: str) -> str | None:
        return self._fingerprints.get((kind, fp))

    # ------------------------------------------------------------------ edges
    def _check_endpoint(self, endpoint: str, expected: Any, role: str, kind: EdgeKind) -> str:
        if isinstance(expected, NodeKind):
            node = self._nodes.get(endpoint)
            if node is None:
                raise SchemaViolation(f"{kind.value}: {role} {endpoint!r} does not exist")
            if node.kind is not expected:
                raise SchemaViolation(
                    f"{kind.value}: {role} {endpoint!r} is a {node.kind.value}, expected {expected.value}"
                )
            return endpoint
        try:
            return expected(endpoint).value
        except ValueError:
            raise SchemaViolation(
                f"{kind.value}: {role} {endpoint!r} is not a {expected.__name__}"
            ) from None

    def add_edge(
        self,
        kind: EdgeKind | str,
        source: str,
        target: str | Enum,
        rationale: str | None = None,
    ) -> str:
        kind = EdgeKind(kind)
        if isinstance(target, Enum):
            target = target.value
        src_kind, dst_kind = ENDPOINTS[kind]
        source = self._check_endpoint(source, src_kind, "source", kind)
        target = self._check_endpoint(target, dst_kind, "target", kind)
        key = (kind, source, target)
        if key in self._triples:
            return self._triples[key]
        if kind is EdgeKind.HAS:
            owner = self.edges(EdgeKind.HAS, target=target)
            if owner:
                raise SchemaViolation(
                    f"finding {target} already belongs to {owner[0].source}; Has is one-to-many"
                )
        self._edge_counter += 1
        edge = Edge(f"edge-{self._edge_counter:06d}", kind, source, target, rationale)
        self._edges[edge.id] = edge
        self._triples[key] = edge.id
        return edge.id

    def edge(self, edge_id: str) -> Edge:
        try:
            return self._edges[edge_id]
        except KeyError:
            raise NotFound(f"unknown edge: {edge_id}") from None

    def edges(
        self,
        kind: EdgeKind | None = None,
        *,
        source: str | None = None,
        target: str | None = None,
    ) -> list[Edge]:
        return [
            e
            for e in sorted(self._edges.values(), key=lambda e: e.id)
            if (kind is None or e.kind is kind)
            and (source is None or e.source == source)
            and (target is None or e.target == target)
        ]

    def degree(self, node_id: str) -> tuple[int, int]:
        """(incoming, outgoing) edge counts."""
        incoming = sum(1 for e in self._edges.values() if e.target == node_id)
        outgoing = sum(1 for e in self._edges.values() if e.source == node_id)
        return incoming, outgoing

    # ----------------------------------------------------------------- merges
    def _merge(
        self,
        kind: NodeKind,
        existing_id: str,
        candidate: AbstractNode,
        synthesized_description: str,
        title: str | None,
    ) -> str:
        node = self.node(existing_id)
        if node.kind is not kind:
            raise KindMismatch(f"{existing_id} is a {node.kind.value}, expected {kind.value}")
        if not synthesized_description.strip():
            raise SchemaViolation("synthesized description must be non-empty")
        node.description = synthesized_description
        if title and title.strip():
            node.title = title
        node.merged_from.append(candidate.fingerprint)
        self._clock += 1
        node.revision = self._clock
        self._index_fingerprints(node)
        return existing_id

    def merge_semantics(
        self,
        existing_id: str,
        candidate: DefiSemanticNode,
        synthesized_description: str,
        title: str | None = None,
    ) -> str:
        """Fold ``candidate`` into an existing semantic; ids and edges survive."""
        return self._merge(NodeKind.SEMANTIC, existing_id, candidate, synthesized_description, title)

    def merge_patterns(
        self,
        existing_id: str,
        candidate: VulnerabilityPatternNode,
        synthesized_description: str,
        title: str | None = None,
    ) -> str:
        return self._merge(NodeKind.PATTERN, existing_id, candidate, synthesized_description, title)

    # ---------------------------------------------------------------- queries
    def query_semantics_by_business(
        self, business_types: Iterable[BusinessType | str]
    ) -> list[DefiSemanticNode]:
        wanted = {BusinessType(b).value for b in business_types}
        ids = {e.source for e in self._edges.values() if e.kind is EdgeKind.UNDERLIES and e.target in wanted}
        return [self._nodes[i] for i in sorted(ids)]

    def query_patterns_by_attack(
        self, attack_types: Iterable[AttackType | str]
    ) -> list[VulnerabilityPatternNode]:
        wanted = {AttackType(a).value for a in attack_types}
        ids = {e.source for e in self._edges.values() if e.kind is EdgeKind.POSES and e.target in wanted}
        return [self._nodes[i] for i in sorted(ids)]

    def linked_patterns(self, semantic_id: str) -> list[tuple[VulnerabilityPatternNode, str | None]]:
        node = self.node(semantic_id)
        if node.kind is not NodeKind.SEMANTIC:
            raise KindMismatch(f"{semantic_id} is not a semantic")
        links = sorted(self.edges(EdgeKind.MAY_INTRODUCE, source=semantic_id), key=lambda e: e.target)
        return [(self._nodes[e.target], e.rationale) for e in links]

    def business_types_of(self, semantic_id: str) -> list[str]:
        return sorted(e.target for e in self.edges(EdgeKind.UNDERLIES, source=semantic_id))

    def attack_types_of(self, node_id: str) -> list[str]:
        kind = EdgeKind.POSES if self.node(node_id).kind is NodeKind.PATTERN else EdgeKind.INVOLVES
        return sorted(e.target for e in self.edges(kind, source=node_id))

    def project_by_name(self, name: str) -> ProjectNode | None:
        for node in self.nodes(NodeKind.PROJECT):
            if node.name == name:
                return node
        return None

    def stats(self) -> dict[str, int]:
        out = {
            "projects": len(self.nodes(NodeKind.PROJECT)),
            "semantics": len(self.nodes(NodeKind.SEMANTIC)),
            "patterns": len(self.nodes(NodeKind.PATTERN)),
            "findings": len(self.nodes(NodeKind.FINDING)),
            "links": 0,
        }
        for kind in EdgeKind:
            out[f"edges.{kind.value}"] = 0
        for e in self._edges.values():
            out[f"edges.{e.kind.value}"] += 1
        out["links"] = out[f"edges.{EdgeKind.MAY_INTRODUCE.value}"]
        return out

    # ------------------------------------------------------------- integrity
    def validate(self) -> list[str]:
        """Return every schema problem found; empty when the graph is sound."""
        problems = []
        for e in self._edges.values():
            src_kind, dst_kind = ENDPOINTS[e.kind]
            for role, endpoint, expected in (("source", e.source, src_kind), ("target", e.target, dst_kind)):
                try:
                    self._check_endpoint(endpoint, expected, role, e.kind)
                except SchemaViolation as exc:
                    problems.append(f"{e.id}: {exc}")
        owners: dict[str, int] = {}
        for e in self._edges.values():
            if e.kind is EdgeKind.HAS:
                owners[e.target] = owners.get(e.target, 0) + 1
        for node in self.nodes(NodeKind.FINDING):
            if owners.get(node.id, 0) != 1:
                problems.append(f"{node.id}: has {owners.get(node.id, 0)} incoming Has edges")
        seen = set()
        for e in self._edges.values():
            key = (e.kind, e.source, e.target)
            if key in seen:
                problems.append(f"{e.id}: duplicate {key}")
            seen.add(key)
        return problems

    @contextmanager
    def transaction(self) -> Iterator[KnowledgeGraph]:
        """All-or-nothing block: state is restored if the body raises."""
        snapshot = copy.deepcopy(self.__dict__)
        try:
            yield self
        except BaseException:
            self.__dict__.clear()
            self.__dict__.update(snapshot)
            raise

    # ------------------------------------------------------------ persistence
    def to_dict(self) -> dict[str, Any]:
        nodes: dict[str, list[dict[str, Any]]] = {s: [] for s in _SECTION.values()}
        for node in self.nodes():
            record: dict[str, Any] = {"id": node.id}
            if node.kind is NodeKind.PROJECT:
                record.update(name=node.name, source_ref=node.source_ref)
            elif node.kind is NodeKind.FINDING:
                record.update(title=node.title, severity=node.severity.value, body=node.body)
            else:
                record.update(
                    title=node.title,
                    description=node.description,
                    merged_from=list(node.merged_from),
                    revision=node.revision,
                )
            nodes[_SECTION[node.kind]].append(record)
        edges = [
            {"id": e.id, "kind": e.kind.value, "from": e.source, "to": e.target, "rationale": e.rationale}
            for e in self.edges()
        ]
        return {"version": self.version, "nodes": nodes, "edges": edges}

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> KnowledgeGraph:
        if not isinstance(doc, dict) or "version" not in doc:
            raise ParseError("document is not a versioned graph object")
        if doc["version"] != FORMAT_VERSION:
            raise UnsupportedVersion(f"graph format version {doc['version']!r} (expected {FORMAT_VERSION})")
        g = cls()
        try:
            sections = doc["nodes"]
            for rec in sections["projects"]:
                g._restore(ProjectNode(name=rec["name"], source_ref=rec.get("source_ref", ""), id=rec["id"]))
            for rec in sections["semantics"]:
                g._restore(DefiSemanticNode(rec["title"], rec["description"], list(rec["merged_from"]),
                                            rec["id"], int(rec["revision"])))
            for rec in sections["patterns"]:
                g._restore(VulnerabilityPatternNode(rec["title"], rec["description"], list(rec["merged_from"]),
                                                    rec["id"], int(rec["revision"])))
            for rec in sections["findings"]:
                g._restore(AuditFindingNode(rec["title"], Severity(rec["severity"]), rec["body"], rec["id"]))
            for rec in doc["edges"]:
                edge = Edge(rec["id"], EdgeKind(rec["kind"]), rec["from"], rec["to"], rec.get("rationale"))
                if edge.id in g._edges or (edge.kind, edge.source, edge.target) in g._triples:
                    raise ParseError(f"duplicate edge {edge.id}")
                g._edges[edge.id] = edge
                g._triples[(edge.kind, edge.source, edge.target)] = edge.id
                g._edge_counter = max(g._edge_counter, _ordinal(edge.id, "edge"))
        except ParseError:
            raise
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ParseError(f"malformed graph document: {exc!r}") from exc
        problems = g.validate()
        if problems:
            raise ParseError("graph violates schema: " + "; ".join(problems[:5]))
        return g

    def _restore(self, node: Node) -> None:
        kind = node.kind
        if kind_of_id(node.id) is not kind or node.id in self._nodes:
            raise ParseError(f"bad or duplicate node id {node.id!r} in {_SECTION[kind]}")
        self._nodes[node.id] = node
        self._counters[kind] = max(self._counters[kind], _ordinal(node.id, ID_PREFIX[kind]))
        if kind in (NodeKind.SEMANTIC, NodeKind.PATTERN):
            self._clock = max(self._clock, node.revision)
            self._index_fingerprints(node)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, ensure_ascii=False) + "\n"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = None  # type: ignore[assignment]


def _ordinal(identifier: str, prefix: str) -> int:
    head, _, tail = identifier.partition("-")
    if head != prefix or not tail.isdigit():
        raise ParseError(f"malformed id {identifier!r}")
    return int(tail)


def save(graph: KnowledgeGraph, path: str | Path) -> None:
    Path(path).write_text(graph.dumps(), encoding="utf-8")


def loads(data: bytes | str) -> KnowledgeGraph:
    raw = data.encode("utf-8") if isinstance(data, str) else data
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"invalid UTF-8: {exc.reason}", offset=exc.start) from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise ParseError(f"{exc.msg} at byte {offset}", offset=offset) from exc
    return KnowledgeGraph.from_dict(doc)


def load(path: str | Path) -> KnowledgeGraph:
    return loads(Path(path).read_bytes())
