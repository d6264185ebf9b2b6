"""Random graph generators shared by the property tests."""

from __future__ import annotations

import random

from hypothesis import strategies as st

from auditkg.errors import AuditKGError
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
)

WORDS = ["swap", "vault", "share", "oracle", "price", "bridge", "fee", "loan", "reward", "token"]


def _text(rng: random.Random, n: int) -> str:
    return " ".join(rng.choice(WORDS) for _ in range(n))


def random_op(g: KnowledgeGraph, rng: random.Random) -> None:
    """Apply one random mutation; invalid requests are allowed to raise AuditKGError."""
    ids = {k: [n.id for n in g.nodes(k)] for k in NodeKind}
    op = rng.randrange(9)
    if op == 0:
        g.add_node(ProjectNode(f"p{rng.randrange(1000)}"))
    elif op == 1:
        g.add_node(DefiSemanticNode(_text(rng, 2), _text(rng, 4)))
    elif op == 2:
        g.add_node(VulnerabilityPatternNode(_text(rng, 2), _text(rng, 4)))
    elif op == 3 and ids[NodeKind.PROJECT]:
        # a finding only exists together with its Has edge
        with g.transaction():
            fid = g.add_node(AuditFindingNode(_text(rng, 3), rng.choice(list(Severity)), _text(rng, 5)))
            g.add_edge(EdgeKind.HAS, rng.choice(ids[NodeKind.PROJECT]), fid)
    elif op == 4 and ids[NodeKind.SEMANTIC]:
        kind = rng.choice([NodeKind.SEMANTIC, NodeKind.PATTERN])
        pool = ids[kind] or ids[NodeKind.SEMANTIC]
        target = rng.choice(pool)
        cand_cls = DefiSemanticNode if kind is NodeKind.SEMANTIC else VulnerabilityPatternNode
        merge = g.merge_semantics if rng.random() < 0.5 else g.merge_patterns
        merge(target, cand_cls(_text(rng, 2), _text(rng, 4)), _text(rng, 5))
    else:
        kind = rng.choice(list(EdgeKind))
        every = [i for v in ids.values() for i in v]
        enums = [b.value for b in BusinessType] + [a.value for a in AttackType]
        endpoints = every + enums + ["ghost-000001"]
        if not every:
            return
        g.add_edge(kind, rng.choice(every), rng.choice(endpoints), rng.choice([None, _text(rng, 3)]))


def random_graph(seed: int, steps: int) -> KnowledgeGraph:
    rng = random.Random(seed)
    g = KnowledgeGraph()
    for _ in range(steps):
        try:
            random_op(g, rng)
        except AuditKGError:
            pass
    return g


seeds = st.integers(min_value=0, max_value=2**32 - 1)
