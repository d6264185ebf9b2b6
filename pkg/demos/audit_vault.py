# %% [markdown]
# # Auditing a vault with the knowledge graph
#
# The vault under `fixtures/vault/lendvault` mints `floor(a * S / A)` shares
# and reads `A` from its token balance. We audit it against the mini-corpus
# graph. The provider is scripted and fuzz outcomes are replayed from
# `fixtures/vault/recorded`, so this runs without Foundry.

# %%
import tempfile
from pathlib import Path

from auditkg import MockProvider, load_project
from auditkg import graph as kg
from auditkg.fuzz import ReplayExecutor
from auditkg.harness import WorkspaceOnlyToolchain
from auditkg.orchestrator import run_audit

ROOT = Path(__file__).resolve().parents[1] if "__file__" in globals() else Path.cwd()
VAULT = ROOT / "fixtures" / "vault"

graph = kg.load(ROOT / "fixtures" / "minicorpus" / "graph.json")
corpus = load_project(VAULT / "lendvault")
print(corpus.scope_notes)

# %% [markdown]
# One pair comes out of mapping: proportional share accounting and the
# first-depositor donation pattern. The loop writes its specification,
# harness, run and memory log into a workspace.

# %%
workspace = Path(tempfile.mkdtemp(prefix="vault-audit-"))
report = run_audit(
    corpus, graph, "5",
    provider=MockProvider.from_file(VAULT / "mock_script.json"),
    toolchain=WorkspaceOnlyToolchain(),
    executor=ReplayExecutor(VAULT / "recorded"),
    workspace=workspace,
)
print(report.pairs)
print(sorted(p.name for p in workspace.iterdir()))

# %% [markdown]
# The confirmed finding carries the violating trace and the end state.

# %%
finding = report.findings[0]
print(finding.title)
print(finding.violation.render())

# %% [markdown]
# It was also written back into the graph under a new project node.

# %%
print(graph.stats()["findings"], "findings in the graph now")
print(graph.node(finding.graph_node).title)
