from __future__ import annotations

import json
import stat
import sys
import textwrap

import pytest
from hypothesis import given, settings, strategies as st

from auditkg.errors import AttributionMismatch, ParseError, RunFailed, ToolchainCrash
from auditkg.fuzz import (
    CallRecord,
    CoverageMap,
    FileCoverage,
    ForgeExecutor,
    FuzzOutcome,
    ProportionalShareFixture,
    ReplayExecutor,
    ScriptedExecutor,
    StateChange,
    Violation,
    merge_coverage,
    parse_coverage,
    parse_forge_failure,
    run_id_for,
)
from auditkg.harness import CompiledHarness, HarnessFile, HarnessSource


def cov(path: str, covered, total, tag="sem-000001") -> CoverageMap:
    return CoverageMap({path: FileCoverage(frozenset(covered), frozenset(total))}, tag)


def test_minimal_lcov():
    c = parse_coverage("SF:src/A.sol\nDA:1,1\nDA:2,0\nLF:2\nLH:1\nend_of_record\n")
    assert c.covered_count() == 1 and c.total_count() == 2 and c.ratio() == 0.5


def test_two_file_record_matches_hand_parse():
    raw = textwrap.dedent("""\
        TN:
        SF:src/Vault.sol
        FN:10,Vault.deposit
        FNDA:3,Vault.deposit
        DA:10,3
        DA:11,3
        DA:14,0
        BRDA:11,0,0,1
        LF:3
        LH:2
        end_of_record
        SF:src/MockToken.sol
        DA:5,0
        DA:6,0
        DA:9,12
        LF:3
        LH:1
        end_of_record
        """)
    c = parse_coverage(raw)
    assert c.files == {
        "src/Vault.sol": FileCoverage(frozenset({10, 11}), frozenset({10, 11, 14})),
        "src/MockToken.sol": FileCoverage(frozenset({9}), frozenset({5, 6, 9})),
    }


@pytest.mark.parametrize("raw,line", [
    ("garbage", 1),
    ("SF:a\nDA:x,1\nend_of_record", 2),
    ("DA:1,1", 1),
    ("SF:a\nDA:1,1", 2),
    ("SF:a\nSF:b\nend_of_record", 2),
    ("end_of_record", 1),
    ("SF:a\nLF:two\nend_of_record", 2),
])
def test_bad_lcov(raw, line):
    with pytest.raises(ParseError) as err:
        parse_coverage(raw)
    assert err.value.line == line


def test_merge_identity_and_union():
    a = cov("f", {1, 2}, {1, 2, 3, 4})
    assert merge_coverage(a, CoverageMap.empty("sem-000001")) == a
    merged = merge_coverage(a, cov("f", {2, 3}, {1, 2, 3, 4}))
    assert merged.ratio() == 0.75


def test_merge_tag_mismatch():
    with pytest.raises(AttributionMismatch):
        merge_coverage(cov("f", {1}, {1}, "a"), cov("f", {1}, {1}, "b"))


def test_covered_must_be_instrumentable():
    with pytest.raises(ValueError):
        FileCoverage(frozenset({3}), frozenset({1}))


coverage_maps = st.dictionaries(
    st.sampled_from(["a.sol", "b.sol", "c.sol"]),
    st.sets(st.integers(1, 40), max_size=20).flatmap(
        lambda total: st.tuples(st.sets(st.sampled_from(sorted(total)), max_size=len(total)) if total
                                else st.just(set()), st.just(total))),
    max_size=3,
)


def to_map(d) -> CoverageMap:
    return CoverageMap({p: FileCoverage(frozenset(c), frozenset(t)) for p, (c, t) in d.items()}, "s")


@settings(max_examples=300, deadline=None)
@given(coverage_maps, coverage_maps)
def test_merge_equals_brute_force_union(x, y):
    merged = merge_coverage(to_map(x), to_map(y))
    for path in set(x) | set(y):
        cx, tx = x.get(path, (set(), set()))
        cy, ty = y.get(path, (set(), set()))
        assert merged.files[path].covered == cx | cy
        assert merged.files[path].instrumentable == tx | ty
    assert set(merged.files) == set(x) | set(y)
    assert 0.0 <= merged.ratio() <= 1.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sets(st.integers(1, 50)), min_size=1, max_size=8))
def test_ratio_monotone_over_runs_with_fixed_universe(runs):
    universe = frozenset(range(1, 51))
    acc = CoverageMap.empty("s")
    last = 0.0
    for covered in runs:
        acc = merge_coverage(acc, CoverageMap({"v.sol": FileCoverage(frozenset(covered), universe)}, "s"))
        assert acc.ratio() >= last
        last = acc.ratio()


def test_coverage_round_trip():
    c = cov("src/A.sol", {1, 5}, {1, 2, 5})
    assert CoverageMap.from_dict(json.loads(json.dumps(c.to_dict()))) == c


FORGE_FAIL = """
[FAIL: oracle:post-0]
        [Sequence]
                sender=0x00000000000000000000000000000000000A11CE addr=[test/auditkg/VaultInvariant.t.sol:VaultHandler]0x2e234DAe75C793f67A35089C9d99245E1C58470b calldata=attackerDeposit(uint256) args=[0]
                sender=0x00000000000000000000000000000000000A11CE addr=[test/auditkg/VaultInvariant.t.sol:VaultHandler]0x2e234DAe75C793f67A35089C9d99245E1C58470b calldata=attackerDonate(uint256) args=[999999 [9.999e5]]
                sender=0x0000000000000000000000000000000000000B0B addr=[test/auditkg/VaultInvariant.t.sol:VaultHandler]0x2e234DAe75C793f67A35089C9d99245E1C58470b calldata=victimDeposit() args=[]
 invariant_victimReceivesShares() (runs: 1, calls: 3, reverts: 0)
Logs:
  state:Vault.totalShares 1
  state:Vault.totalAssets 1000001
  state:Vault.totalShares 1
  state:Vault.totalAssets 2000001
  state:Vault.sharesOf(victim) 0
  state:Other.thing 7
"""


def test_parse_forge_failure():
    v = parse_forge_failure(FORGE_FAIL, tracked=["Vault"])
    assert v.oracle_id == "post-0"
    assert [c.function for c in v.trace] == ["attackerDeposit", "attackerDonate", "victimDeposit"]
    assert v.trace[1].arguments == ("999999",) and v.trace[2].arguments == ()
    assert v.trace[0].callee == "VaultHandler"
    assert v.state_after("Vault", "totalAssets") == "2000001"
    assert v.state_after("Vault", "sharesOf(victim)") == "0"
    assert v.state_after("Other", "thing") is None
    assert parse_forge_failure("[PASS] invariant_x() (runs: 256)") is None


def test_violation_round_trip_and_render():
    v = parse_forge_failure(FORGE_FAIL)
    assert Violation.from_dict(v.to_dict()) == v
    text = v.render()
    assert "failing oracle: post-0" in text and "Vault.totalShares: 1 -> 1" in text


def test_share_fixture_ratio():
    f = ProportionalShareFixture()
    assert f.deposit("a", 100) == 100
    f.donate(50)
    assert f.preview_deposit(30) == 30 * 100 // 150
    with pytest.raises(ValueError):
        f.deposit("a", 0)
    with pytest.raises(ValueError):
        f.donate(0)


def test_share_fixture_inflation():
    f = ProportionalShareFixture()
    f.deposit("attacker", 1)
    f.donate(10**6)
    assert f.deposit("victim", 10**6) == 0
    assert (f.total_shares, f.total_assets) == (1, 2_000_001)
    assert f.redeemable("attacker") == 2_000_001


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(1, 10**9)), max_size=12), st.integers(1, 10**9))
def test_share_fixture_matches_formula(ops, amount):
    f = ProportionalShareFixture()
    for is_deposit, a in ops:
        if is_deposit:
            f.deposit("x", a)
        else:
            f.donate(a)
    S, A = f.total_shares, f.total_assets
    expected = amount if S == 0 else amount * S // A
    assert f.deposit("y", amount) == expected
    assert f.total_shares == S + expected


def compiled(tmp_path, source="contract T {}") -> CompiledHarness:
    h = HarnessSource([HarnessFile("T.t.sol", source)], "T", ["f"])
    (tmp_path / "foundry.toml").write_text("[profile.default]\n")
    return CompiledHarness(h, tmp_path, h.content_hash())


def outcome(run_id="r", violation=None) -> FuzzOutcome:
    return FuzzOutcome(run_id, cov("src/A.sol", {1}, {1, 2}), violation, 1.5)


def test_replay_is_byte_identical(tmp_path):
    c = compiled(tmp_path)
    store = tmp_path / "store"
    o = outcome(run_id_for(c.content_hash, 3), parse_forge_failure(FORGE_FAIL))
    ReplayExecutor(store).record(c.content_hash, o)
    a = ReplayExecutor(store).run(c, seed=3)
    b = ReplayExecutor(store).run(c, seed=3)
    assert a == o and a.dumps() == b.dumps() == o.dumps()


def test_replay_miss_without_inner(tmp_path):
    with pytest.raises(RunFailed):
        ReplayExecutor(tmp_path / "empty").run(compiled(tmp_path))


def test_replay_miss_records_inner(tmp_path):
    c = compiled(tmp_path)
    inner = ScriptedExecutor([outcome()])
    replay = ReplayExecutor(tmp_path / "store", inner)
    replay.run(c)
    replay.run(c)
    assert inner.calls == 1 and replay.path_for(c.content_hash).exists()


def test_corrupt_recording(tmp_path):
    c = compiled(tmp_path)
    replay = ReplayExecutor(tmp_path / "store")
    replay.store.mkdir()
    replay.path_for(c.content_hash).write_text("{}")
    with pytest.raises(ToolchainCrash):
        replay.run(c)


def test_scripted_executor_sequence(tmp_path):
    ex = ScriptedExecutor([RunFailed("timeout"), outcome()])
    with pytest.raises(RunFailed):
        ex.run(compiled(tmp_path))
    assert ex.run(compiled(tmp_path)).run_id == "r"
    assert ex.run(compiled(tmp_path)).run_id == "r"


def fake_forge(tmp_path, test_out: str, test_code: int, write_lcov: bool = True) -> str:
    """A stand-in forge: prints ``test_out`` for ``test`` and writes lcov for ``coverage``."""
    script = tmp_path / "forge"
    script.write_text(textwrap.dedent(f"""\
        #!{sys.executable}
        import sys
        args = sys.argv[1:]
        if args[0] == "test":
            print({test_out!r})
            sys.exit({test_code})
        if args[0] == "coverage" and {write_lcov!r}:
            path = args[args.index("--report-file") + 1]
            open(path, "w").write("SF:src/A.sol\\nDA:1,1\\nDA:2,0\\nend_of_record\\n")
        """))
    script.chmod(script.stat().st_mode | stat.S_IEXEC)
    return str(script)


def test_forge_tautological_oracle_has_no_violation(tmp_path):
    ws = tmp_path / "ws"
    ws.mkdir()
    forge = fake_forge(tmp_path, "[PASS] invariant_true() (runs: 256, calls: 128000)", 0)
    out = ForgeExecutor(forge).run(compiled(ws, 'function invariant_true() public { require(true, "oracle:post-0"); }'),
                                   timeout=5, seed=1)
    assert out.violation is None and out.coverage.ratio() == 0.5


def test_forge_violation(tmp_path):
    ws = tmp_path / "ws"
    ws.mkdir()
    out = ForgeExecutor(fake_forge(tmp_path, FORGE_FAIL, 1), tracked_contracts=["Vault"]).run(compiled(ws), 5)
    assert out.violation.oracle_id == "post-0"
    assert out.violation.state_after("Vault", "totalShares") == "1"


def test_forge_crash_exit_code(tmp_path):
    ws = tmp_path / "ws"
    ws.mkdir()
    with pytest.raises(ToolchainCrash):
        ForgeExecutor(fake_forge(tmp_path, "panic", 101)).run(compiled(ws), 5)


def test_corrupted_artifact_path(tmp_path):
    c = compiled(tmp_path)
    c = CompiledHarness(c.harness, tmp_path / "does-not-exist", c.content_hash)
    with pytest.raises(ToolchainCrash):
        ForgeExecutor("forge").run(c, 5)


def test_timeout_must_be_positive(tmp_path):
    with pytest.raises(ValueError):
        ForgeExecutor("forge").run(compiled(tmp_path), 0)


def test_state_change_dataclass():
    s = StateChange("Vault", "totalShares", "0", "1")
    v = Violation("post-0", (CallRecord("a", "H", "f"),), (s,))
    assert v.state_after("Vault", "totalShares") == "1"


def test_ratio_can_drop_when_the_universe_grows():
    a = cov("a.sol", {1, 2}, {1, 2})
    grown = merge_coverage(a, cov("b.sol", set(), {1, 2, 3}))
    assert grown.ratio() < a.ratio()
    assert grown.restricted(["a.sol"]).ratio() == 1.0
