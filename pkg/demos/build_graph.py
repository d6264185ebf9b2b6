# %% [markdown]
# # Building a knowledge graph from audited projects
#
# Three small audited projects ship under `fixtures/minicorpus`: two DEXes and
# a lending vault. A scripted provider stands in for the language model, so the
# build is deterministic and needs no API key.

# %%
from pathlib import Path

from auditkg import LLMGateway, MockProvider, build_graph, load_manifest
from auditkg.graph import BusinessType, EdgeKind

ROOT = Path(__file__).resolve().parents[1] if "__file__" in globals() else Path.cwd()
MINI = ROOT / "fixtures" / "minicorpus"

provider = MockProvider.from_file(MINI / "mock_script.json")
gateway = LLMGateway(provider)
graph = build_graph(load_manifest(MINI / "manifest.json"), gateway)
graph.stats()

# %% [markdown]
# Both DEX projects describe the same swap mechanism. The second and third
# extractions named the existing node as their merge target, so one semantic
# node carries all three descriptions.

# %%
swap = graph.node("sem-000001")
print(swap.title)
print(len(swap.merged_from), "merged descriptions")
print([e.source for e in graph.edges(EdgeKind.CONTAINS, target=swap.id)])

# %% [markdown]
# Querying by business type returns the semantics and the vulnerability
# patterns they were linked to.

# %%
for sem in graph.query_semantics_by_business([BusinessType.LENDING]):
    print(sem.id, sem.title)
    for pattern, rationale in graph.linked_patterns(sem.id):
        print("   ->", pattern.id, pattern.title)

# %% [markdown]
# Every provider call went through the ledger, tagged by purpose.

# %%
for e in gateway.ledger.entries[:5]:
    print(e.purpose, e.prompt_tokens, e.completion_tokens)
print(len(gateway.ledger), "calls in total")
