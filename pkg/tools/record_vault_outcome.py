"""Record the fuzz outcome replayed for the vault fixture.

Without Foundry on the machine, the invariant campaign is reproduced on the
integer share model: random handler sequences (attackerDeposit, attackerDonate,
victimDeposit, with the harness's bounds and balances) are run until the
post-0 oracle fails, then the failing sequence is shrunk by dropping calls and
lowering amounts. Coverage is attributed per Vault.sol function from the calls
the shrunk sequence makes.

    python tools/record_vault_outcome.py [--seed N] [--runs N]

The outcome is written to fixtures/vault/recorded/<harness content hash>.json.
"""

from __future__ import annotations

import argparse
import random
import re
from pathlib import Path

from auditkg.fuzz import (
    CallRecord,
    CoverageMap,
    FileCoverage,
    FuzzOutcome,
    ProportionalShareFixture,
    ReplayExecutor,
    StateChange,
    Violation,
    run_id_for,
)
from auditkg.harness import HarnessSource
from auditkg.llm import MockProvider, TemplateId, extract_json

ROOT = Path(__file__).resolve().parents[1]
FIXTURE = ROOT / "fixtures" / "vault"
ATTACKER_FUNDS = 1_000_000_000_000
VICTIM_DEPOSIT = 1_000_000
DICTIONARY = [1, 2, 10, 1_000, 999_999, 1_000_000, 1_000_001, ATTACKER_FUNDS]
HANDLERS = ["attackerDeposit", "attackerDonate", "victimDeposit"]


def scripted_harness() -> HarnessSource:
    script = MockProvider.from_file(FIXTURE / "mock_script.json")
    reply = script._entries[(TemplateId.HARNESS_SYNTHESIS, 0)]
    return HarnessSource.from_reply(extract_json(reply)[0])


def bound(x: int, lo: int, hi: int) -> int:
    # forge-std bound(): wrap into [lo, hi]
    return lo + x % (hi - lo + 1) if hi >= lo else lo


def execute(seq: list[tuple[str, int]]) -> tuple[ProportionalShareFixture, list[tuple[str, int]], bool]:
    """Run a handler sequence; return the final state, the calls made and whether post-0 failed."""
    vault = ProportionalShareFixture()
    attacker = ATTACKER_FUNDS
    victim_deposited = 0
    made = []
    for name, raw in seq:
        if name == "attackerDeposit":
            if attacker == 0:
                continue
            amount = bound(raw, 1, attacker)
            vault.deposit("attacker", amount)
            attacker -= amount
        elif name == "attackerDonate":
            if attacker == 0:
                continue
            amount = bound(raw, 1, attacker)
            vault.donate(amount)
            attacker -= amount
        else:
            if victim_deposited:
                continue
            amount = VICTIM_DEPOSIT
            vault.deposit("victim", amount)
            victim_deposited = amount
        made.append((name, amount))
        if victim_deposited and vault.balances.get("victim", 0) == 0:
            return vault, made, True
    return vault, made, False


def random_sequence(rng: random.Random, depth: int) -> list[tuple[str, int]]:
    seq = []
    for _ in range(depth):
        raw = rng.choice(DICTIONARY) if rng.random() < 0.5 else rng.randrange(ATTACKER_FUNDS)
        seq.append((rng.choice(HANDLERS), raw))
    return seq


def shrink(seq: list[tuple[str, int]]) -> list[tuple[str, int]]:
    changed = True
    while changed:
        changed = False
        for i in range(len(seq)):
            cand = seq[:i] + seq[i + 1:]
            if execute(cand)[2]:
                seq, changed = cand, True
                break
        if changed:
            continue
        for i, (name, amount) in enumerate(seq):  # raw handler inputs; 0 bounds to 1
            lo, hi = 0, amount
            while lo < hi:  # smallest amount that still fails
                mid = (lo + hi) // 2
                if execute(seq[:i] + [(name, mid)] + seq[i + 1:])[2]:
                    hi = mid
                else:
                    lo = mid + 1
            if lo < amount:
                seq, changed = seq[:i] + [(name, lo)] + seq[i + 1:], True
    return seq


def function_lines(source: str) -> dict[str, set[int]]:
    """Statement lines of each function body in a flat Solidity contract."""
    out: dict[str, set[int]] = {}
    current = None
    depth = 0
    for lineno, line in enumerate(source.splitlines(), 1):
        m = re.match(r"\s*function\s+(\w+)", line)
        if m and current is None:
            current, depth = m.group(1), 0
            out[current] = set()
        if current is not None:
            depth += line.count("{") - line.count("}")
            if line.strip().endswith(";"):
                out[current].add(lineno)
            if depth == 0 and "}" in line:
                current = None
    return out


def coverage_for(made: list[tuple[str, int]]) -> CoverageMap:
    path = "src/Vault.sol"
    funcs = function_lines((FIXTURE / "lendvault" / path).read_text(encoding="utf-8"))
    hit = set()
    if any(name != "attackerDonate" for name, _ in made):
        hit |= {"deposit", "previewDeposit", "totalAssets"}
    covered = set().union(*(funcs[f] for f in hit)) if hit else set()
    instrumentable = set().union(*funcs.values())
    return CoverageMap({path: FileCoverage(frozenset(covered), frozenset(instrumentable))})


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--runs", type=int, default=256)
    ap.add_argument("--depth", type=int, default=15)
    args = ap.parse_args()

    rng = random.Random(args.seed)
    failing = None
    for _ in range(args.runs):
        seq = random_sequence(rng, args.depth)
        if execute(seq)[2]:
            failing = seq
            break
    if failing is None:
        raise SystemExit("no violation found")
    seq = shrink(failing)
    vault, made, _ = execute(seq)

    trace = tuple(
        CallRecord("attacker" if name != "victimDeposit" else "victim", "VaultHandler", name,
                   () if name == "victimDeposit" else (str(amount),))
        for name, amount in made
    )
    diff = (
        StateChange("Vault", "totalShares", "0", str(vault.total_shares)),
        StateChange("Vault", "totalAssets", "0", str(vault.total_assets)),
        StateChange("Vault", "sharesOf(victim)", "0", str(vault.balances.get("victim", 0))),
        StateChange("Vault", "sharesOf(attacker)", "0", str(vault.balances.get("attacker", 0))),
    )
    harness = scripted_harness()
    h = harness.content_hash()
    outcome = FuzzOutcome(
        run_id_for(h, None),
        coverage_for(made),
        Violation("post-0", trace, diff, "oracle:post-0"),
        0.0,
    )
    path = ReplayExecutor(FIXTURE / "recorded").record(h, outcome)
    print(f"wrote {path.relative_to(ROOT)}")
    print(outcome.violation.render())


if __name__ == "__main__":
    main()
