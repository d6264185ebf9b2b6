from __future__ import annotations

from pathlib import Path

import pytest

from auditkg import graph as kg
from auditkg.corpus import load_project

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = ROOT / "fixtures"
MINICORPUS = FIXTURES / "minicorpus"
VAULT = FIXTURES / "vault"


@pytest.fixture
def mini_graph() -> kg.KnowledgeGraph:
    return kg.load(MINICORPUS / "graph.json")


@pytest.fixture
def vault_corpus():
    return load_project(VAULT / "lendvault")


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter) -> None:
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
