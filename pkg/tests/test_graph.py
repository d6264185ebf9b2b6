from __future__ import annotations

import json
import random

import pytest
from hypothesis import given, settings

from auditkg import graph as kg
from auditkg.errors import KindMismatch, NotFound, ParseError, SchemaViolation, UnsupportedVersion
from auditkg.graph import (
    AttackType,
    AuditFindingNode,
    BusinessType,
    DefiSemanticNode,
    EdgeKind,
    KnowledgeGraph,
    NodeKind,
    ProjectNode,
    Severity,
    VulnerabilityPatternNode,
    fingerprint,
)
from strategies import random_graph, random_op, seeds


def sem(title: str, desc: str = "a mechanism") -> DefiSemanticNode:
    return DefiSemanticNode(title, desc)


def pat(title: str, desc: str = "a flaw") -> VulnerabilityPatternNode:
    return VulnerabilityPatternNode(title, desc)


def test_first_project_gets_first_id():
    g = KnowledgeGraph()
    assert g.add_node(ProjectNode("alpha")) == "proj-000001"
    assert len(g.nodes()) == 1


def test_duplicate_fingerprint_returns_existing_id():
    g = KnowledgeGraph()
    first = g.add_node(sem("Swap token X to token Y", "exact input swap"))
    again = g.add_node(sem("  swap TOKEN x to token y ", "exact   input swap"))
    assert again == first
    assert len(g.nodes(NodeKind.SEMANTIC)) == 1


def test_distinct_semantics_get_increasing_ids():
    g = KnowledgeGraph()
    titles = ["swap", "lend", "bridge"]
    ids = [g.add_node(sem(t)) for t in titles]
    assert len({n.id for n in g.nodes(NodeKind.SEMANTIC)}) == 3
    assert ids == sorted(ids) and len(set(ids)) == 3
    assert ids == ["sem-000001", "sem-000002", "sem-000003"]


def test_fingerprint_normalizes_case_and_whitespace():
    assert fingerprint("A  B", "c\nd") == fingerprint("a b", " C d ")
    assert fingerprint("a", "b") != fingerprint("a", "c")


def test_second_has_edge_into_finding_rejected():
    g = KnowledgeGraph()
    p1 = g.add_node(ProjectNode("one"))
    p2 = g.add_node(ProjectNode("two"))
    f = g.add_node(AuditFindingNode("bug", Severity.HIGH, "body"))
    g.add_edge(EdgeKind.HAS, p1, f)
    with pytest.raises(SchemaViolation):
        g.add_edge(EdgeKind.HAS, p2, f)


def test_duplicate_edge_is_noop():
    g = KnowledgeGraph()
    p = g.add_node(ProjectNode("one"))
    s = g.add_node(sem("swap"))
    e1 = g.add_edge(EdgeKind.CONTAINS, p, s)
    e2 = g.add_edge(EdgeKind.CONTAINS, p, s)
    assert e1 == e2
    assert len(g.edges()) == 1


@pytest.mark.parametrize(
    "kind, src, dst",
    [
        (EdgeKind.CONTAINS, "sem", "proj"),
        (EdgeKind.UNDERLIES, "sem", "Reentrancy"),
        (EdgeKind.POSES, "pat", "Dexes"),
        (EdgeKind.MAY_INTRODUCE, "pat", "sem"),
        (EdgeKind.HAS, "proj", "sem"),
        (EdgeKind.CONTAINS, "proj", "sem-000999"),
    ],
)
def test_endpoint_kind_mismatch(kind, src, dst):
    g = KnowledgeGraph()
    ids = {"proj": g.add_node(ProjectNode("p")), "sem": g.add_node(sem("s")), "pat": g.add_node(pat("x"))}
    with pytest.raises(SchemaViolation):
        g.add_edge(kind, ids.get(src, src), ids.get(dst, dst))
    assert g.edges() == []


def test_linked_patterns_returns_rationale():
    g = KnowledgeGraph()
    s = g.add_node(sem("Proportional share accounting"))
    p = g.add_node(pat("First depositor inflation"))
    g.add_edge(EdgeKind.MAY_INTRODUCE, s, p, "allocation follows the ratio")
    [(node, why)] = g.linked_patterns(s)
    assert node.id == p and why == "allocation follows the ratio"


def test_linked_patterns_matches_edge_filter():
    g = KnowledgeGraph()
    s = g.add_node(sem("s"))
    other = g.add_node(sem("t"))
    pats = [g.add_node(pat(f"p{i}")) for i in range(4)]
    for p in reversed(pats[:3]):
        g.add_edge(EdgeKind.MAY_INTRODUCE, s, p)
    g.add_edge(EdgeKind.MAY_INTRODUCE, other, pats[3])
    expected = sorted(e.target for e in g.edges() if e.kind is EdgeKind.MAY_INTRODUCE and e.source == s)
    assert [n.id for n, _ in g.linked_patterns(s)] == expected
    assert len(expected) == 3
    assert g.linked_patterns(g.add_node(sem("lonely"))) == []


def test_linked_patterns_errors():
    g = KnowledgeGraph()
    p = g.add_node(pat("x"))
    with pytest.raises(NotFound):
        g.linked_patterns("sem-000042")
    with pytest.raises(KindMismatch):
        g.linked_patterns(p)


def test_query_semantics_by_business():
    g = KnowledgeGraph()
    assert g.query_semantics_by_business([BusinessType.DEXES]) == []
    s1 = g.add_node(sem("swap"))
    s2 = g.add_node(sem("lend"))
    g.add_edge(EdgeKind.UNDERLIES, s1, BusinessType.DEXES)
    g.add_edge(EdgeKind.UNDERLIES, s2, BusinessType.LENDING)
    assert [n.id for n in g.query_semantics_by_business({BusinessType.DEXES})] == [s1]
    g.add_edge(EdgeKind.UNDERLIES, s1, BusinessType.LENDING)
    got = g.query_semantics_by_business({"Dexes", "Lending"})
    assert [n.id for n in got] == [s1, s2]
    assert g.query_semantics_by_business(set()) == []


def test_merge_swaps_keeps_curve_distinct():
    g = KnowledgeGraph()
    v2 = g.add_node(sem("Swap token X to token Y", "constant-product swap between two reserves"))
    v3 = DefiSemanticNode("Swap token X to token Y", "concentrated-liquidity swap within a price range")
    merged = g.merge_semantics(v2, v3, "swap one token for another; price from a constant-product or "
                                       "concentrated-liquidity curve")
    curve = g.add_node(sem("Swap among three pooled tokens", "stable-swap invariant over three assets"))
    assert merged == v2
    assert curve != v2
    assert len(g.nodes(NodeKind.SEMANTIC)) == 2
    assert "constant-product" in g.node(v2).description
    assert g.node(v2).merged_from[-1] == v3.fingerprint


def test_identity_merge_grows_merged_from_only():
    g = KnowledgeGraph()
    s = g.add_node(sem("swap", "exact input swap"))
    before = g.node(s)
    title, desc, provenance = before.title, before.description, list(before.merged_from)
    g.merge_semantics(s, sem("swap", "exact input swap"), "exact input swap")
    after = g.node(s)
    assert (after.title, after.description) == (title, desc)
    assert len(after.merged_from) == len(provenance) + 1


def test_merge_preserves_edges_and_accepts_new():
    g = KnowledgeGraph()
    projects = [g.add_node(ProjectNode(f"p{i}")) for i in range(3)]
    s = g.add_node(sem("swap"))
    for p in projects[:2]:
        g.add_edge(EdgeKind.CONTAINS, p, s)
    g.merge_semantics(s, sem("swap v3"), "merged")
    g.add_edge(EdgeKind.CONTAINS, projects[2], s)
    assert len(g.edges(EdgeKind.CONTAINS, target=s)) == 3


def test_merge_kind_mismatch():
    g = KnowledgeGraph()
    p = g.add_node(pat("flaw"))
    with pytest.raises(KindMismatch):
        g.merge_semantics(p, sem("s"), "d")


def test_merged_candidate_fingerprint_is_rejected_later():
    g = KnowledgeGraph()
    s = g.add_node(sem("swap", "v2"))
    cand = sem("swap", "v3")
    g.merge_semantics(s, cand, "v2 or v3")
    assert g.add_node(sem("swap", "v3")) == s


def test_transaction_rolls_back():
    g = KnowledgeGraph()
    g.add_node(ProjectNode("keep"))
    before = g.dumps()
    with pytest.raises(SchemaViolation):
        with g.transaction():
            g.add_node(sem("temp"))
            g.add_edge(EdgeKind.CONTAINS, "proj-000001", "proj-000001")
    assert g.dumps() == before


# ----------------------------------------------------------------- persistence


def test_empty_round_trip(tmp_path):
    g = KnowledgeGraph()
    kg.save(g, tmp_path / "g.json")
    assert kg.load(tmp_path / "g.json") == g


def test_hundred_node_round_trip(tmp_path):
    g = random_graph(7, 400)
    assert len(g.nodes()) >= 100
    kg.save(g, tmp_path / "g.json")
    back = kg.load(tmp_path / "g.json")
    assert back == g
    assert {n.id for n in back.nodes()} == {n.id for n in g.nodes()}
    assert {(e.kind, e.source, e.target, e.rationale) for e in back.edges()} == {
        (e.kind, e.source, e.target, e.rationale) for e in g.edges()
    }


def test_loaded_graph_continues_id_sequence():
    g = random_graph(3, 50)
    back = kg.loads(g.dumps())
    assert back.add_node(ProjectNode("fresh")) == g.add_node(ProjectNode("fresh"))


def test_truncated_file_reports_offset():
    text = random_graph(11, 40).dumps()
    cut = text[: len(text) // 2]
    with pytest.raises(ParseError) as err:
        kg.loads(cut)
    assert err.value.offset is not None
    assert 0 <= err.value.offset <= len(cut.encode())


def test_version_mismatch():
    doc = json.loads(KnowledgeGraph().dumps())
    doc["version"] = 99
    with pytest.raises(UnsupportedVersion):
        kg.loads(json.dumps(doc))


def test_invalid_utf8():
    with pytest.raises(ParseError):
        kg.loads(b'{"version": 1, "nodes": "\xff"}')


def test_dangling_edge_in_document_rejected():
    g = KnowledgeGraph()
    p = g.add_node(ProjectNode("p"))
    s = g.add_node(sem("s"))
    g.add_edge(EdgeKind.CONTAINS, p, s)
    doc = json.loads(g.dumps())
    doc["nodes"]["semantics"] = []
    with pytest.raises(ParseError):
        kg.loads(json.dumps(doc))


def test_stats_counts():
    g = KnowledgeGraph()
    p = g.add_node(ProjectNode("p"))
    s = g.add_node(sem("s"))
    x = g.add_node(pat("x"))
    g.add_edge(EdgeKind.MAY_INTRODUCE, s, x)
    g.add_edge(EdgeKind.POSES, x, AttackType.REENTRANCY)
    g.add_edge(EdgeKind.BELONGS_TO, p, BusinessType.YIELD)
    stats = g.stats()
    assert (stats["projects"], stats["semantics"], stats["patterns"], stats["links"]) == (1, 1, 1, 1)
    assert stats["edges.Poses"] == 1


# ----------------------------------------------------------------- properties


def _check_schema(g: KnowledgeGraph) -> None:
    for e in g.edges():
        src_kind, dst_kind = kg.ENDPOINTS[e.kind]
        assert g.node(e.source).kind is src_kind
        if isinstance(dst_kind, NodeKind):
            assert g.node(e.target).kind is dst_kind
        else:
            dst_kind(e.target)
    for f in g.nodes(NodeKind.FINDING):
        assert len(g.edges(EdgeKind.HAS, target=f.id)) == 1
    assert g.validate() == []


@settings(max_examples=200, deadline=None)
@given(seeds)
def test_mutation_sequences_preserve_schema(seed):
    rng = random.Random(seed)
    g = KnowledgeGraph()
    for _ in range(30):
        try:
            random_op(g, rng)
        except (SchemaViolation, KindMismatch, NotFound):
            pass
        _check_schema(g)


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_merge_never_decreases_degree(seed):
    g = random_graph(seed, 60)
    rng = random.Random(seed)
    for node in g.nodes(NodeKind.SEMANTIC):
        before = g.degree(node.id)
        g.merge_semantics(node.id, sem(f"cand {rng.random()}"), "merged description")
        after = g.degree(node.id)
        assert after[0] >= before[0] and after[1] >= before[1]


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_round_trip_property(seed):
    g = random_graph(seed, 80)
    text = g.dumps()
    back = kg.loads(text)
    assert back == g
    assert back.dumps() == text
