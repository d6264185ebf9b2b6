"""Foundry harness synthesis and the compile-repair loop."""

from __future__ import annotations

import hashlib
import logging
import re
import shutil
import subprocess
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Any, Protocol, Sequence

from .corpus import DocKind, ProjectCorpus
from .errors import Blocked, StructuralCheckFailed
from .llm import LLMGateway, Role, TemplateId, render_prompt
from .memory import WorkingMemory
from .specification import AuditSpecification

log = logging.getLogger(__name__)

DEFAULT_MAX_ATTEMPTS = 5
HARNESS_DIR = "test/auditkg"

_FILE_SCHEMA = {
    "type": "object",
    "required": ["path", "source"],
    "properties": {"path": {"type": "string", "minLength": 1}, "source": {"type": "string"}},
}
HARNESS_SCHEMA = {
    "type": "object",
    "required": ["files", "entry_contract", "handler_names"],
    "properties": {
        "files": {"type": "array", "minItems": 1, "items": _FILE_SCHEMA},
        "entry_contract": {"type": "string", "minLength": 1},
        "handler_names": {"type": "array", "items": {"type": "string"}},
        "patch_summary": {"type": "string"},
    },
}
REPAIR_SCHEMA = {**HARNESS_SCHEMA, "required": [*HARNESS_SCHEMA["required"], "patch_summary"]}

_ORACLE_REQUIRE = re.compile(r"\brequire\s*\((?:[^;]*?),\s*\"oracle:([\w-]+)\"\s*\)", re.DOTALL)


@dataclass(frozen=True)
class HarnessFile:
    path: str  # relative to the harness directory
    source: str


@dataclass
class HarnessSource:
    files: list[HarnessFile]
    entry_contract: str
    handler_names: list[str] = field(default_factory=list)

    def text(self) -> str:
        return "\n".join(f.source for f in self.files)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for f in sorted(self.files, key=lambda f: f.path):
            h.update(f.path.encode() + b"\0" + f.source.encode() + b"\0")
        h.update(self.entry_contract.encode())
        return h.hexdigest()[:24]

    def oracle_ids(self) -> list[str]:
        return _ORACLE_REQUIRE.findall(self.text())

    def render(self) -> str:
        return "\n\n".join(f"// ==== {f.path}\n{f.source}" for f in self.files)

    @classmethod
    def from_reply(cls, parsed: dict[str, Any]) -> HarnessSource:
        return cls([HarnessFile(f["path"], f["source"]) for f in parsed["files"]],
                   parsed["entry_contract"], list(parsed.get("handler_names", [])))


@dataclass(frozen=True)
class RepairAttempt:
    attempt: int
    diagnostics: str
    patch_summary: str = ""


@dataclass
class CompiledHarness:
    harness: HarnessSource
    workspace: Path
    content_hash: str
    repairs: list[RepairAttempt] = field(default_factory=list)


def structural_problems(harness: HarnessSource, spec: AuditSpecification) -> list[str]:
    """Text-scan checks: setUp, one require per invariant, handlers, deployments."""
    text = harness.text()
    problems = []
    for f in harness.files:
        p = PurePosixPath(f.path)
        if p.is_absolute() or ".." in p.parts:
            problems.append(f"harness path {f.path!r} escapes the harness directory")
    if not re.search(r"\bfunction\s+setUp\s*\(", text):
        problems.append("no setUp() function")
    if not re.search(rf"\bcontract\s+{re.escape(harness.entry_contract)}\b", text):
        problems.append(f"entry contract {harness.entry_contract!r} is not declared")
    found = Counter(harness.oracle_ids())
    expected = spec.oracle_ids()
    for oid in expected:
        if found[oid] != 1:
            problems.append(f"oracle {oid} appears {found[oid]} times (expected exactly once)")
    for oid in sorted(set(found) - set(expected)):
        problems.append(f"oracle {oid} does not correspond to a specified invariant")
    if not harness.handler_names:
        problems.append("no handlers declared")
    for name in harness.handler_names:
        if not re.search(rf"\bfunction\s+{re.escape(name)}\s*\(", text):
            problems.append(f"handler {name!r} is not defined")
    for d in spec.initial_state.deploy:
        if not re.search(rf"\bnew\s+{re.escape(d.contract)}\s*[({{]", text):
            problems.append(f"setUp does not deploy {d.contract}")
    return problems


def _project_source(corpus: ProjectCorpus, limit: int = 32_000) -> str:
    return "\n\n".join(f"// {d.path}\n{d.text}" for d in corpus.sources())[:limit]


def synthesize_harness(gateway: LLMGateway, spec: AuditSpecification, corpus: ProjectCorpus) -> HarnessSource:
    if spec.initial_state.is_empty():
        raise ValueError("specification has no initial state")
    bindings = {
        "SPECIFICATION": spec.dumps(),
        "PROJECT SOURCE": _project_source(corpus),
        "ORACLE IDS": ", ".join(f"{oid} ({inv.subject} {inv.relation.value} {inv.bound})"
                                for oid, inv in spec.oracles().items()),
    }
    problems: list[str] = []
    for attempt in range(2):
        prompt = render_prompt(TemplateId.HARNESS_SYNTHESIS, bindings)
        if problems:
            prompt += "\n\n# Problems with your previous harness\n" + "\n".join(f"- {p}" for p in problems)
        reply, _ = gateway.complete_structured(
            Role.SYNTHESIS, prompt, HARNESS_SCHEMA, template=TemplateId.HARNESS_SYNTHESIS,
            purpose=f"audit:{spec.pair_id}:harness:v{spec.version}" + (":retry" if attempt else ""),
        )
        harness = HarnessSource.from_reply(reply.parsed)
        problems = structural_problems(harness, spec)
        if not problems:
            return harness
        log.info("harness for %s failed structural check: %s", spec.pair_id, problems)
    raise StructuralCheckFailed(f"harness for {spec.pair_id} failed structural checks", problems)


# --------------------------------------------------------------------------- toolchains


@dataclass(frozen=True)
class BuildResult:
    ok: bool
    diagnostics: str = ""


class Toolchain(Protocol):
    def build(self, workspace: Path) -> BuildResult: ...


class ForgeToolchain:
    def __init__(self, forge: str = "forge", timeout: float = 600.0):
        self.forge = forge
        self.timeout = timeout

    @staticmethod
    def available(forge: str = "forge") -> bool:
        return shutil.which(forge) is not None

    def build(self, workspace: Path) -> BuildResult:
        try:
            proc = subprocess.run([self.forge, "build"], cwd=workspace, capture_output=True, text=True,
                                  timeout=self.timeout)
        except subprocess.TimeoutExpired:
            return BuildResult(False, "forge build timed out")
        return BuildResult(proc.returncode == 0, (proc.stdout + proc.stderr).strip())


class ScriptedToolchain:
    """Replays a fixed sequence of build results; the last one repeats."""

    def __init__(self, results: Sequence[BuildResult | bool]):
        if not results:
            raise ValueError("at least one result is required")
        self.results = [r if isinstance(r, BuildResult) else BuildResult(bool(r), "" if r else "error")
                        for r in results]
        self.builds = 0

    def build(self, workspace: Path) -> BuildResult:
        result = self.results[min(self.builds, len(self.results) - 1)]
        self.builds += 1
        return result


class WorkspaceOnlyToolchain:
    """Lays out the workspace and reports success without compiling."""

    def build(self, workspace: Path) -> BuildResult:
        return BuildResult(True, "compilation skipped")


_IGNORE = shutil.ignore_patterns(".git", "out", "cache", "node_modules")


def prepare_workspace(corpus: ProjectCorpus, harness: HarnessSource, workspace: str | Path,
                      forge_std: str | Path | None = None) -> Path:
    """Overlay the project and harness in ``workspace``; project files are copied, never touched."""
    ws = Path(workspace)
    root = Path(corpus.root) if corpus.root else None
    if not (ws / ".project").exists():
        if root is not None and root.is_dir():
            shutil.copytree(root, ws, ignore=_IGNORE, dirs_exist_ok=True)
        else:
            for d in corpus.documents:
                if d.kind in (DocKind.SOURCE, DocKind.TEST):
                    target = ws / d.path
                    target.parent.mkdir(parents=True, exist_ok=True)
                    target.write_text(d.text, encoding="utf-8")
        (ws / ".project").write_text(corpus.name, encoding="utf-8")
    if not (ws / "foundry.toml").exists():
        paths = [d.path for d in corpus.sources()]
        src = next((top for top in ("src", "contracts")
                    if paths and all(p.startswith(top + "/") for p in paths)), ".")
        (ws / "foundry.toml").write_text(
            f'[profile.default]\nsrc = "{src}"\ntest = "test"\nlibs = ["lib"]\n', encoding="utf-8")
    if forge_std is not None and not (ws / "lib" / "forge-std").exists():
        (ws / "lib").mkdir(exist_ok=True)
        (ws / "lib" / "forge-std").symlink_to(Path(forge_std).resolve(), target_is_directory=True)
    hdir = ws / HARNESS_DIR
    if hdir.exists():
        shutil.rmtree(hdir)
    for f in harness.files:
        target = hdir / f.path
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(f.source, encoding="utf-8")
    return ws


def compile_and_repair(
    gateway: LLMGateway,
    harness: HarnessSource,
    spec: AuditSpecification,
    corpus: ProjectCorpus,
    toolchain: Toolchain,
    workspace: str | Path,
    *,
    max_attempts: int = DEFAULT_MAX_ATTEMPTS,
    memory: WorkingMemory | None = None,
    forge_std: str | Path | None = None,
) -> CompiledHarness:
    """Compile, feeding full diagnostics back for repair, up to ``max_attempts`` builds.

    Every failed build is recorded in ``memory``. No repair is requested after
    the final failure, so Synthesis calls stay within 1 + ``max_attempts``.
    """
    if max_attempts < 1:
        raise ValueError("max_attempts must be at least 1")
    repairs: list[RepairAttempt] = []
    patch_summary = ""
    for attempt in range(1, max_attempts + 1):
        problems = structural_problems(harness, spec)
        if problems:
            result = BuildResult(False, "structural check failed:\n" + "\n".join(problems))
        else:
            ws = prepare_workspace(corpus, harness, workspace, forge_std)
            result = toolchain.build(ws)
        if result.ok:
            return CompiledHarness(harness, Path(workspace), harness.content_hash(), repairs)
        record = RepairAttempt(attempt, result.diagnostics, patch_summary)
        repairs.append(record)
        if memory is not None:
            memory.record_failure(spec.pair_id, "compile", {
                "attempt": attempt, "diagnostics": result.diagnostics,
                "patch_summary": patch_summary, "spec_version": spec.version,
            })
        if attempt == max_attempts:
            break
        reply = gateway.ask(
            TemplateId.HARNESS_REPAIR,
            {
                "HARNESS": harness.render(),
                "DIAGNOSTICS": result.diagnostics,
                "REPAIR HISTORY": [f"attempt {r.attempt}: {r.patch_summary or 'initial synthesis'}"
                                   for r in repairs],
            },
            REPAIR_SCHEMA,
            role=Role.SYNTHESIS,
            purpose=f"audit:{spec.pair_id}:repair:v{spec.version}:{attempt}",
        )
        harness = HarnessSource.from_reply(reply.parsed)
        patch_summary = reply.parsed.get("patch_summary", "")
    raise Blocked(max_attempts, repairs[-1].diagnostics if repairs else "")
