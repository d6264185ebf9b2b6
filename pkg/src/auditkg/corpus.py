"""Project trees and audit reports turned into LLM-ready corpora."""

from __future__ import annotations

import json
import logging
import os
import re
import unicodedata
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .errors import EmptyProject, ParseError
from .graph import Severity

log = logging.getLogger(__name__)

DEFAULT_MAX_CHUNK_UNITS = 32_000

# dependency and build output directories never hold project code
SKIP_DIRS = {"node_modules", "__pycache__"}
# build output and vendored dependencies, only at the project root
ROOT_SKIP_DIRS = {"lib", "out", "cache", "artifacts", "broadcast"}
TEST_DIRS = {"test", "tests"}
TEXT_SUFFIXES = {".md", ".txt", ".rst", ".adoc", ""}


class DocKind(str, Enum):
    SOURCE = "Source"
    README = "Readme"
    DOC = "Doc"
    TEST = "Test"


@dataclass(frozen=True)
class Document:
    path: str  # posix path relative to the project root
    kind: DocKind
    text: str


@dataclass
class ProjectCorpus:
    name: str
    documents: list[Document]
    scope_notes: str = ""
    root: str = ""
    ref: str = ""  # stable locator recorded in the graph; defaults to root

    def sources(self) -> list[Document]:
        return [d for d in self.documents if d.kind is DocKind.SOURCE]

    def source_text(self) -> str:
        return "\n".join(d.text for d in self.documents if d.kind in (DocKind.SOURCE, DocKind.TEST))


@dataclass(frozen=True)
class Chunk:
    origin: str
    index: int
    text: str


@dataclass(frozen=True)
class Finding:
    title: str
    severity: Severity
    body: str


@dataclass
class AuditReport:
    project_name: str
    findings: list[Finding] = field(default_factory=list)


def normalize(text: str) -> str:
    return unicodedata.normalize("NFC", text.replace("\r\n", "\n").replace("\r", "\n"))


def _read_text(path: Path) -> str | None:
    try:
        return normalize(path.read_text(encoding="utf-8"))
    except UnicodeDecodeError:
        log.debug("skipping non-UTF-8 file %s", path)
        return None


def _classify(rel: Path) -> DocKind | None:
    parts = rel.parts
    name = rel.name
    if name.endswith(".sol"):
        in_test = any(p.lower() in TEST_DIRS for p in parts[:-1]) or name.endswith(".t.sol")
        return DocKind.TEST if in_test else DocKind.SOURCE
    if name.lower().startswith("readme"):
        return DocKind.README
    if parts[0].lower() == "docs" and rel.suffix.lower() in TEXT_SUFFIXES:
        return DocKind.DOC
    return None


def load_project(path: str | Path, name: str | None = None) -> ProjectCorpus:
    """Walk a project directory into a corpus.

    Documents come README first, then in path-lexicographic order.
    """
    root = Path(path)
    if not root.is_dir():
        raise NotADirectoryError(str(root))
    docs: list[Document] = []
    for dirpath, dirnames, filenames in os.walk(root):
        at_root = Path(dirpath) == root
        dirnames[:] = sorted(d for d in dirnames if not d.startswith(".") and d not in SKIP_DIRS
                             and not (at_root and d in ROOT_SKIP_DIRS))
        for filename in sorted(filenames):
            full = Path(dirpath) / filename
            rel = full.relative_to(root)
            kind = _classify(rel)
            if kind is None:
                continue
            text = _read_text(full)
            if text is None:
                continue
            docs.append(Document(rel.as_posix(), kind, text))
    if not any(d.kind is DocKind.SOURCE for d in docs):
        raise EmptyProject(f"no Solidity sources under {root}")
    docs.sort(key=lambda d: (d.kind is not DocKind.README, d.path))
    readme = next((d for d in docs if d.kind is DocKind.README and "/" not in d.path), None)
    scope = extract_scope_notes(readme.text) if readme else ""
    return ProjectCorpus(name=name or root.resolve().name, documents=docs, scope_notes=scope, root=str(root))


_HEADING = re.compile(r"^(#{1,6})\s+(.*?)\s*#*\s*$")
_SCOPE_TITLES = re.compile(r"^(scope|out[\s-]+of[\s-]+scope)\b", re.IGNORECASE)


def extract_scope_notes(readme: str) -> str:
    """Collect the README sections headed Scope / Out of scope, headings included."""
    sections: list[str] = []
    capture_level: int | None = None
    current: list[str] = []
    for line in readme.split("\n"):
        m = _HEADING.match(line)
        if m:
            level = len(m.group(1))
            if capture_level is not None and level <= capture_level:
                sections.append("\n".join(current).strip())
                capture_level, current = None, []
            if capture_level is None and _SCOPE_TITLES.match(m.group(2)):
                capture_level, current = level, [line]
                continue
        if capture_level is not None:
            current.append(line)
    if capture_level is not None:
        sections.append("\n".join(current).strip())
    return "\n\n".join(s for s in sections if s)


def chunk_document(text: str, max_chunk_units: int) -> list[str]:
    """Split at line boundaries where possible; a line longer than the limit is cut."""
    pieces: list[str] = []
    current = ""
    for line in text.splitlines(keepends=True):
        while len(line) > max_chunk_units:
            if current:
                pieces.append(current)
                current = ""
            pieces.append(line[:max_chunk_units])
            line = line[max_chunk_units:]
        if len(current) + len(line) > max_chunk_units:
            pieces.append(current)
            current = ""
        current += line
    if current:
        pieces.append(current)
    return pieces


def chunk_corpus(corpus: ProjectCorpus, max_chunk_units: int = DEFAULT_MAX_CHUNK_UNITS) -> list[Chunk]:
    if max_chunk_units <= 0:
        raise ValueError("max_chunk_units must be positive")
    chunks = []
    for doc in corpus.documents:
        for i, piece in enumerate(chunk_document(doc.text, max_chunk_units)):
            chunks.append(Chunk(doc.path, i, piece))
    return chunks


_SEVERITIES = {"High": Severity.HIGH, "Medium": Severity.MEDIUM, "QA": None}


def parse_report(text: str, project_name: str) -> AuditReport:
    findings = []
    for lineno, line in enumerate(normalize(text).split("\n"), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"record {lineno}: {exc.msg}", line=lineno) from exc
        if not isinstance(rec, dict):
            raise ParseError(f"record {lineno}: expected an object", line=lineno)
        title = rec.get("title")
        label = rec.get("severity")
        if not isinstance(title, str) or not title.strip():
            raise ParseError(f"record {lineno}: missing title", line=lineno)
        if label not in _SEVERITIES:
            raise ParseError(f"record {lineno} ({title!r}): unknown severity {label!r}", line=lineno)
        severity = _SEVERITIES[label]
        if severity is None:
            continue
        body = rec.get("body", "")
        if not isinstance(body, str):
            raise ParseError(f"record {lineno} ({title!r}): body must be text", line=lineno)
        findings.append(Finding(title, severity, body))
    return AuditReport(project_name, findings)


def load_report(path: str | Path, project_name: str | None = None) -> AuditReport:
    path = Path(path)
    return parse_report(path.read_text(encoding="utf-8"), project_name or path.stem)


def batch_chunks(chunks: list[Chunk], max_units: int = DEFAULT_MAX_CHUNK_UNITS) -> list[list[Chunk]]:
    """Group consecutive chunks so each group's text fits one prompt."""
    batches: list[list[Chunk]] = []
    size = 0
    for chunk in chunks:
        if batches and size + len(chunk.text) <= max_units:
            batches[-1].append(chunk)
            size += len(chunk.text)
        else:
            batches.append([chunk])
            size = len(chunk.text)
    return batches


def format_chunks(chunks: list[Chunk]) -> str:
    return "\n\n".join(f"### {c.origin} (part {c.index + 1})\n```\n{c.text}\n```" for c in chunks)
