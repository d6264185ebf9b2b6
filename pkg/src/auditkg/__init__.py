"""Knowledge-graph-driven auditing of DeFi smart contracts."""

from .builder import GraphBuilder, build_graph, load_manifest
from .corpus import ProjectCorpus, chunk_corpus, load_project, load_report, parse_report
from .fuzz import CoverageMap, FuzzOutcome, Violation, merge_coverage, parse_coverage
from .graph import AttackType, BusinessType, EdgeKind, KnowledgeGraph, NodeKind, load, loads, save
from .llm import BudgetGuard, LLMGateway, MockProvider, UsageLedger, ledger_total
from .memory import WorkingMemory
from .orchestrator import (
    AuditConfig,
    AuditReportOut,
    SemanticVulnPair,
    Verdict,
    VerdictKind,
    ingest_finding,
    map_knowledge,
    reflect_finding,
    run_audit,
    schedule_pairs,
)
from .specification import AuditSpecification, generate_specification, validate_specification

__version__ = "0.1.0"
