"""Fuzz execution, lcov coverage and violation evidence.

``ForgeExecutor`` drives ``forge test`` in invariant mode and ``forge
coverage``; ``ReplayExecutor`` serves recorded outcomes keyed by harness
content hash so the audit loop can run without the toolchain.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import shutil
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Iterable, Mapping, Protocol, Sequence

from .errors import AttributionMismatch, ParseError, RunFailed, ToolchainCrash

if TYPE_CHECKING:
    from .harness import CompiledHarness

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 300.0
GRACE_SECONDS = 60.0


# --------------------------------------------------------------------------- coverage


@dataclass(frozen=True)
class FileCoverage:
    covered: frozenset[int]
    instrumentable: frozenset[int]

    def __post_init__(self) -> None:
        if not self.covered <= self.instrumentable:
            raise ValueError("covered lines must be instrumentable")


@dataclass(frozen=True)
class CoverageMap:
    files: Mapping[str, FileCoverage] = field(default_factory=dict)
    tag: str = ""  # semantic the coverage is attributed to

    @classmethod
    def empty(cls, tag: str = "") -> CoverageMap:
        return cls({}, tag)

    def covered_count(self) -> int:
        return sum(len(f.covered) for f in self.files.values())

    def total_count(self) -> int:
        return sum(len(f.instrumentable) for f in self.files.values())

    def ratio(self) -> float:
        total = self.total_count()
        return self.covered_count() / total if total else 0.0

    def restricted(self, paths: Iterable[str]) -> CoverageMap:
        keep = set(paths)
        return CoverageMap({p: f for p, f in self.files.items() if p in keep}, self.tag)

    def with_tag(self, tag: str) -> CoverageMap:
        return CoverageMap(dict(self.files), tag)

    def to_dict(self) -> dict[str, Any]:
        return {
            "tag": self.tag,
            "files": {
                path: {"covered": sorted(f.covered), "instrumentable": sorted(f.instrumentable)}
                for path, f in sorted(self.files.items())
            },
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> CoverageMap:
        files = {
            path: FileCoverage(frozenset(v["covered"]), frozenset(v["instrumentable"]))
            for path, v in d.get("files", {}).items()
        }
        return cls(files, d.get("tag", ""))


_LCOV_LINE = re.compile(r"^([A-Z]+):(.*)$")


def parse_coverage(raw: str, tag: str = "") -> CoverageMap:
    """Parse lcov tracefile text into exact per-file line sets."""
    covered: dict[str, set[int]] = {}
    lines: dict[str, set[int]] = {}
    current: str | None = None
    for lineno, line in enumerate(raw.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line == "end_of_record":
            if current is None:
                raise ParseError(f"line {lineno}: end_of_record without SF", line=lineno)
            current = None
            continue
        m = _LCOV_LINE.match(line)
        if m is None:
            raise ParseError(f"line {lineno}: not an lcov record: {line[:60]!r}", line=lineno)
        key, value = m.groups()
        if key == "SF":
            if current is not None:
                raise ParseError(f"line {lineno}: SF inside an open record", line=lineno)
            current = value.strip()
            covered.setdefault(current, set())
            lines.setdefault(current, set())
        elif key == "DA":
            if current is None:
                raise ParseError(f"line {lineno}: DA outside a record", line=lineno)
            parts = value.split(",")
            try:
                number, hits = int(parts[0]), int(parts[1])
            except (IndexError, ValueError):
                raise ParseError(f"line {lineno}: malformed DA {value!r}", line=lineno) from None
            if number <= 0 or hits < 0:
                raise ParseError(f"line {lineno}: invalid DA {value!r}", line=lineno)
            lines[current].add(number)
            if hits > 0:
                covered[current].add(number)
        elif key in ("LF", "LH", "FNF", "FNH", "BRF", "BRH"):
            if current is None:
                raise ParseError(f"line {lineno}: {key} outside a record", line=lineno)
            if not value.strip().isdigit():
                raise ParseError(f"line {lineno}: malformed {key} {value!r}", line=lineno)
        # TN, FN, FNDA, BRDA and other records carry nothing we need
    if current is not None:
        raise ParseError("unterminated record at end of input", line=len(raw.splitlines()))
    files = {path: FileCoverage(frozenset(covered[path]), frozenset(lines[path])) for path in lines}
    return CoverageMap(files, tag)


def merge_coverage(old: CoverageMap, new: CoverageMap) -> CoverageMap:
    if old.tag != new.tag:
        raise AttributionMismatch(f"cannot merge coverage for {old.tag!r} with {new.tag!r}")
    files = dict(old.files)
    for path, f in new.files.items():
        prev = files.get(path)
        files[path] = f if prev is None else FileCoverage(
            prev.covered | f.covered, prev.instrumentable | f.instrumentable)
    return CoverageMap(files, old.tag)


# --------------------------------------------------------------------------- outcomes


@dataclass(frozen=True)
class CallRecord:
    caller: str
    callee: str
    function: str
    arguments: tuple[str, ...] = ()
    outcome: str = "ok"


@dataclass(frozen=True)
class StateChange:
    contract: str
    variable: str
    before: str
    after: str


@dataclass(frozen=True)
class Violation:
    oracle_id: str
    trace: tuple[CallRecord, ...]
    state_diff: tuple[StateChange, ...]
    reason: str = ""

    def state_after(self, contract: str, variable: str) -> str | None:
        for change in self.state_diff:
            if change.contract == contract and change.variable == variable:
                return change.after
        return None

    def to_dict(self) -> dict[str, Any]:
        return {
            "oracle_id": self.oracle_id,
            "reason": self.reason,
            "trace": [
                {"caller": c.caller, "callee": c.callee, "function": c.function,
                 "arguments": list(c.arguments), "outcome": c.outcome}
                for c in self.trace
            ],
            "state_diff": [
                {"contract": s.contract, "variable": s.variable, "before": s.before, "after": s.after}
                for s in self.state_diff
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Violation:
        return cls(
            d["oracle_id"],
            tuple(CallRecord(c["caller"], c["callee"], c["function"], tuple(str(a) for a in c.get("arguments", [])),
                             c.get("outcome", "ok")) for c in d.get("trace", [])),
            tuple(StateChange(s["contract"], s["variable"], str(s["before"]), str(s["after"]))
                  for s in d.get("state_diff", [])),
            d.get("reason", ""),
        )

    def render(self) -> str:
        lines = [f"failing oracle: {self.oracle_id}"]
        if self.reason:
            lines.append(f"reason: {self.reason}")
        lines.append("trace:")
        for i, c in enumerate(self.trace, 1):
            lines.append(f"  {i}. {c.caller} -> {c.callee}.{c.function}({', '.join(c.arguments)}) [{c.outcome}]")
        lines.append("state changes:")
        for s in self.state_diff:
            lines.append(f"  {s.contract}.{s.variable}: {s.before} -> {s.after}")
        return "\n".join(lines)


@dataclass(frozen=True)
class FuzzOutcome:
    run_id: str
    coverage: CoverageMap
    violation: Violation | None = None
    wall_time: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "coverage": self.coverage.to_dict(),
            "violation": None if self.violation is None else self.violation.to_dict(),
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> FuzzOutcome:
        v = d.get("violation")
        return cls(d["run_id"], CoverageMap.from_dict(d["coverage"]),
                   None if v is None else Violation.from_dict(v), float(d.get("wall_time", 0.0)))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


# --------------------------------------------------------------------------- share fixture


@dataclass
class ProportionalShareFixture:
    """Integer model of proportional-share accounting (ERC4626-like).

    Minting follows ``s = floor(a * S / A)`` once shares exist; while no shares
    exist the depositor gets ``s = a``, the seeding behaviour first-depositor
    attacks exploit. Donations raise ``A`` without minting.
    """

    total_shares: int = 0
    total_assets: int = 0
    balances: dict[str, int] = field(default_factory=dict)

    def preview_deposit(self, amount: int) -> int:
        if self.total_shares == 0:
            return amount
        return amount * self.total_shares // self.total_assets

    def deposit(self, who: str, amount: int) -> int:
        if amount <= 0:
            raise ValueError("deposit must be positive")
        minted = self.preview_deposit(amount)
        self.total_assets += amount
        self.total_shares += minted
        self.balances[who] = self.balances.get(who, 0) + minted
        return minted

    def donate(self, amount: int) -> None:
        if amount <= 0:
            raise ValueError("donation must be positive")
        self.total_assets += amount

    def redeemable(self, who: str) -> int:
        shares = self.balances.get(who, 0)
        return shares * self.total_assets // self.total_shares if self.total_shares else 0


# --------------------------------------------------------------------------- executors


class Executor(Protocol):
    def run(self, compiled: CompiledHarness, timeout: float = DEFAULT_TIMEOUT,
            seed: int | None = None) -> FuzzOutcome: ...


def run_id_for(content_hash: str, seed: int | None) -> str:
    return hashlib.sha256(f"{content_hash}:{seed}".encode()).hexdigest()[:16]


_SEQ = re.compile(
    r"sender=(?P<sender>\S+)\s+addr=\[(?P<target>[^\]]*)\](?P<addr>\S*)\s+"
    r"calldata=(?P<fn>[\w$]+)\([^)]*\)\s+args=\[(?P<args>.*)\]"
)
_FAIL = re.compile(r"\[FAIL[.:]?\s*(?:reason:\s*)?(?P<reason>[^\]]*)\]")
_ORACLE = re.compile(r"oracle:(?P<id>[\w-]+)")
_STATE = re.compile(r"state:(?P<contract>[\w$]+)\.(?P<var>[\w$()]+)\s*[:=]?\s*(?P<value>-?\S+)")


def _split_args(text: str) -> tuple[str, ...]:
    out, depth, cur = [], 0, ""
    for ch in text:
        if ch in "([{":
            depth += 1
        elif ch in ")]}":
            depth -= 1
        if ch == "," and depth == 0:
            out.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        out.append(cur.strip())
    # forge annotates large numbers, e.g. "1000000 [1e6]"
    return tuple(re.sub(r"\s*\[[^\]]*\]$", "", a) for a in out)


def parse_forge_failure(output: str, tracked: Iterable[str] = ()) -> Violation | None:
    """Recover the failing oracle, call sequence and tracked state from verbose forge output."""
    fail = _FAIL.search(output)
    if fail is None:
        return None
    oracle = _ORACLE.search(output[fail.start():])
    trace = []
    for m in _SEQ.finditer(output):
        callee = m.group("target").rsplit(":", 1)[-1] or m.group("addr")
        trace.append(CallRecord(m.group("sender"), callee, m.group("fn"), _split_args(m.group("args"))))
    tracked = set(tracked)
    first: dict[tuple[str, str], str] = {}
    last: dict[tuple[str, str], str] = {}
    for m in _STATE.finditer(output):
        key = (m.group("contract"), m.group("var"))
        if tracked and key[0] not in tracked:
            continue
        first.setdefault(key, m.group("value"))
        last[key] = m.group("value")
    diff = tuple(StateChange(c, v, first[(c, v)], last[(c, v)]) for c, v in sorted(first))
    return Violation(oracle.group("id") if oracle else "unknown", tuple(trace), diff, fail.group("reason").strip())


class ForgeExecutor:
    """Runs a compiled harness under ``forge test`` (invariant mode) and ``forge coverage``."""

    def __init__(self, forge: str = "forge", *, tracked_contracts: Sequence[str] = (),
                 grace: float = GRACE_SECONDS):
        self.forge = forge
        self.tracked_contracts = tuple(tracked_contracts)
        self.grace = grace

    @staticmethod
    def available(forge: str = "forge") -> bool:
        return shutil.which(forge) is not None

    def _run(self, args: list[str], cwd: Path, timeout: float, env: Mapping[str, str]):
        try:
            return subprocess.run([self.forge, *args], cwd=cwd, capture_output=True, text=True,
                                  timeout=timeout, env={**os.environ, **env})
        except FileNotFoundError as exc:
            raise ToolchainCrash(f"forge not found: {exc}") from exc
        except subprocess.TimeoutExpired:
            return None

    def run(self, compiled: CompiledHarness, timeout: float = DEFAULT_TIMEOUT,
            seed: int | None = None) -> FuzzOutcome:
        if timeout <= 0:
            raise ValueError("timeout must be positive")
        ws = Path(compiled.workspace)
        if not ws.is_dir() or not (ws / "foundry.toml").exists():
            raise ToolchainCrash(f"no compiled workspace at {ws}")
        env = {"FOUNDRY_INVARIANT_TIMEOUT": str(int(timeout)), "FOUNDRY_INVARIANT_FAIL_ON_REVERT": "false"}
        match = ["--match-contract", compiled.harness.entry_contract]
        seed_args = ["--fuzz-seed", str(seed)] if seed is not None else []
        started = time.monotonic()
        test = self._run(["test", *match, *seed_args, "-vvvv"], ws, timeout + self.grace, env)
        timed_out = test is None
        violation = None
        if not timed_out:
            output = test.stdout + test.stderr
            if test.returncode not in (0, 1):
                raise ToolchainCrash(f"forge test exited {test.returncode}: {output[-2000:]}")
            if test.returncode == 1:
                violation = parse_forge_failure(output, self.tracked_contracts)
                if violation is None:
                    raise ToolchainCrash(f"forge test failed without a test failure: {output[-2000:]}")
        report = ws / "runs" / "lcov.info"
        report.parent.mkdir(parents=True, exist_ok=True)
        cov = self._run(["coverage", *match, *seed_args, "--report", "lcov", "--report-file", str(report)],
                        ws, timeout + self.grace, env)
        if report.exists():
            coverage = parse_coverage(report.read_text(encoding="utf-8"))
        elif timed_out:
            raise RunFailed("fuzz run timed out without coverage")
        else:
            log.warning("forge coverage produced no report: %s", "" if cov is None else cov.stderr[-500:])
            coverage = CoverageMap.empty()
        return FuzzOutcome(run_id_for(compiled.content_hash, seed), coverage, violation,
                           round(time.monotonic() - started, 3))


class ReplayExecutor:
    """Serve outcomes recorded under ``<store>/<content hash>.json``.

    With an ``inner`` executor, misses are run for real and recorded.
    """

    def __init__(self, store: str | Path, inner: Executor | None = None):
        self.store = Path(store)
        self.inner = inner

    def path_for(self, content_hash: str) -> Path:
        return self.store / f"{content_hash}.json"

    def record(self, content_hash: str, outcome: FuzzOutcome) -> Path:
        self.store.mkdir(parents=True, exist_ok=True)
        path = self.path_for(content_hash)
        path.write_text(outcome.dumps(), encoding="utf-8")
        return path

    def run(self, compiled: CompiledHarness, timeout: float = DEFAULT_TIMEOUT,
            seed: int | None = None) -> FuzzOutcome:
        path = self.path_for(compiled.content_hash)
        if path.exists():
            try:
                return FuzzOutcome.from_dict(json.loads(path.read_text(encoding="utf-8")))
            except (KeyError, TypeError, ValueError) as exc:
                raise ToolchainCrash(f"corrupt recording {path}: {exc}") from exc
        if self.inner is None:
            raise RunFailed(f"no recorded outcome for harness {compiled.content_hash}")
        outcome = self.inner.run(compiled, timeout, seed)
        self.record(compiled.content_hash, outcome)
        return outcome


class ScriptedExecutor:
    """Returns queued outcomes in order; the last one repeats."""

    def __init__(self, outcomes: Sequence[FuzzOutcome | Exception]):
        if not outcomes:
            raise ValueError("at least one outcome is required")
        self.outcomes = list(outcomes)
        self.calls = 0

    def run(self, compiled: CompiledHarness, timeout: float = DEFAULT_TIMEOUT,
            seed: int | None = None) -> FuzzOutcome:
        item = self.outcomes[min(self.calls, len(self.outcomes) - 1)]
        self.calls += 1
        if isinstance(item, Exception):
            raise item
        return item
