"""Shared append-only working memory of an audit run."""

from __future__ import annotations

import json
import threading
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterator, Mapping

from .fuzz import CoverageMap, merge_coverage


class EntryKind(str, Enum):
    COVERAGE = "CoverageRecord"
    FAILURE = "ExecutionFailure"
    FEEDBACK = "ReflectionFeedback"
    SPEC_ATTEMPT = "SpecAttempt"


@dataclass(frozen=True)
class MemoryEntry:
    seq: int
    kind: EntryKind
    key: str  # pair id, or semantic id for coverage records
    body: str  # canonical JSON; entries are immutable once written

    @property
    def data(self) -> dict[str, Any]:
        return json.loads(self.body)

    def to_json(self) -> str:
        return json.dumps({"seq": self.seq, "kind": self.kind.value, "key": self.key, "data": self.data},
                          sort_keys=True, ensure_ascii=False)


class WorkingMemory:
    """Totally ordered log of coverage, failures, feedback and spec attempts.

    When ``log_path`` is given every entry is also appended to that JSON-lines
    file as it is written.
    """

    def __init__(self, log_path: str | Path | None = None):
        self._entries: list[MemoryEntry] = []
        self._counts: Counter[tuple[str, EntryKind]] = Counter()
        self._coverage: dict[str, CoverageMap] = {}
        self._lock = threading.Lock()
        self.log_path = None if log_path is None else Path(log_path)

    def append(self, kind: EntryKind, key: str, data: Mapping[str, Any]) -> MemoryEntry:
        with self._lock:
            entry = MemoryEntry(len(self._entries), EntryKind(kind), key,
                                json.dumps(data, sort_keys=True, ensure_ascii=False))
            if entry.kind is EntryKind.COVERAGE:
                cov = CoverageMap.from_dict(data["coverage"]).with_tag(key)
                prev = self._coverage.get(key)
                self._coverage[key] = cov if prev is None else merge_coverage(prev, cov)
            self._entries.append(entry)
            self._counts[(key, entry.kind)] += 1
            if self.log_path is not None:
                with self.log_path.open("a", encoding="utf-8") as fh:
                    fh.write(entry.to_json() + "\n")
            return entry

    # writers
    def record_coverage(self, semantic_id: str, coverage: CoverageMap, pair_id: str = "") -> MemoryEntry:
        return self.append(EntryKind.COVERAGE, semantic_id,
                           {"pair": pair_id, "coverage": coverage.with_tag(semantic_id).to_dict()})

    def record_failure(self, pair_id: str, stage: str, detail: Mapping[str, Any]) -> MemoryEntry:
        return self.append(EntryKind.FAILURE, pair_id, {"stage": stage, **detail})

    def record_feedback(self, pair_id: str, verdict: str, reasoning: str) -> MemoryEntry:
        return self.append(EntryKind.FEEDBACK, pair_id, {"verdict": verdict, "reasoning": reasoning})

    def record_spec_attempt(self, pair_id: str, version: int) -> MemoryEntry:
        return self.append(EntryKind.SPEC_ATTEMPT, pair_id, {"version": version})

    # readers
    @property
    def entries(self) -> tuple[MemoryEntry, ...]:
        with self._lock:
            return tuple(self._entries)

    def __iter__(self) -> Iterator[MemoryEntry]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self._entries)

    def select(self, kind: EntryKind | None = None, key: str | None = None) -> list[MemoryEntry]:
        return [e for e in self.entries if (kind is None or e.kind is kind) and (key is None or e.key == key)]

    def count(self, key: str, kind: EntryKind) -> int:
        return self._counts[(key, EntryKind(kind))]

    def coverage(self, semantic_id: str) -> CoverageMap:
        return self._coverage.get(semantic_id, CoverageMap.empty(semantic_id))

    def coverage_ratio(self, semantic_id: str) -> float:
        cov = self._coverage.get(semantic_id)
        return 0.0 if cov is None else cov.ratio()

    def feedback_for(self, pair_id: str) -> list[str]:
        return [f"{e.data['verdict']}: {e.data['reasoning']}" for e in self.select(EntryKind.FEEDBACK, pair_id)]

    def is_blocked(self, pair_id: str) -> bool:
        return any(e.data.get("blocked") for e in self.select(EntryKind.FAILURE, pair_id))

    @classmethod
    def load(cls, path: str | Path) -> WorkingMemory:
        """Rebuild a memory from its JSON-lines log (the log is not reopened for writing)."""
        mem = cls()
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                rec = json.loads(line)
                mem.append(EntryKind(rec["kind"]), rec["key"], rec["data"])
        return mem
