"""Three-state auditing specifications and their generation.

A specification pins an attack scenario for one semantic-vulnerability pair
as invariants over named contract state: the initial state after setup, the
state right before the attack, and the state once the flaw is triggered.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Sequence

from .corpus import ProjectCorpus
from .errors import ValidationFailed
from .llm import LLMGateway, TemplateId

log = logging.getLogger(__name__)


class Relation(str, Enum):
    EQ = "Eq"
    NEQ = "Neq"
    LT = "Lt"
    LE = "Le"
    GT = "Gt"
    GE = "Ge"
    WITHIN = "Within"  # |subject - bound| <= tolerance * |bound|


@dataclass(frozen=True)
class StateSubject:
    contract: str
    member: str  # variable or accessor, e.g. "totalSupply" or "sharesOf(victim)"
    qualifier: str = ""

    def __str__(self) -> str:
        q = f" [{self.qualifier}]" if self.qualifier else ""
        return f"{self.contract}.{self.member}{q}"


@dataclass(frozen=True)
class StateInvariant:
    subject: StateSubject
    relation: Relation
    bound: str
    description: str = ""
    tolerance: float | None = None


@dataclass(frozen=True)
class DeployDirective:
    contract: str
    label: str = ""


@dataclass(frozen=True)
class FundDirective:
    account: str
    token: str  # contract name, or ETH for native balance
    amount: str


@dataclass
class InitialState:
    deploy: list[DeployDirective] = field(default_factory=list)
    fund: list[FundDirective] = field(default_factory=list)
    invariants: list[StateInvariant] = field(default_factory=list)

    def is_empty(self) -> bool:
        return not (self.deploy or self.fund or self.invariants)


@dataclass
class AuditSpecification:
    pair_id: str
    version: int
    initial_state: InitialState
    pre_vuln_state: list[StateInvariant]
    post_vuln_state: list[StateInvariant]
    attack_narrative: str = ""

    def oracle_ids(self) -> list[str]:
        return [f"pre-{i}" for i in range(len(self.pre_vuln_state))] + [
            f"post-{i}" for i in range(len(self.post_vuln_state))
        ]

    def oracles(self) -> dict[str, StateInvariant]:
        invariants = list(self.pre_vuln_state) + list(self.post_vuln_state)
        return dict(zip(self.oracle_ids(), invariants))

    def sections(self) -> dict[str, Any]:
        d = self.to_dict()
        return {k: d[k] for k in ("initial_state", "pre_vuln_state", "post_vuln_state", "attack_narrative")}

    def to_dict(self) -> dict[str, Any]:
        return json.loads(json.dumps(asdict(self), default=_enum_value))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, d: dict[str, Any], *, pair_id: str | None = None, version: int | None = None
                  ) -> AuditSpecification:
        init = d.get("initial_state") or {}
        return cls(
            pair_id=pair_id if pair_id is not None else d["pair_id"],
            version=version if version is not None else int(d["version"]),
            initial_state=InitialState(
                deploy=[DeployDirective(x["contract"], x.get("label", "")) for x in init.get("deploy", [])],
                fund=[FundDirective(x["account"], x["token"], str(x["amount"])) for x in init.get("fund", [])],
                invariants=[_invariant(x) for x in init.get("invariants", [])],
            ),
            pre_vuln_state=[_invariant(x) for x in d.get("pre_vuln_state", [])],
            post_vuln_state=[_invariant(x) for x in d.get("post_vuln_state", [])],
            attack_narrative=d.get("attack_narrative", ""),
        )


def _enum_value(obj: Any) -> Any:
    if isinstance(obj, Enum):
        return obj.value
    raise TypeError(repr(obj))


def _invariant(x: dict[str, Any]) -> StateInvariant:
    s = x["subject"]
    tol = x.get("tolerance")
    return StateInvariant(
        StateSubject(s["contract"], s["member"], s.get("qualifier", "") or ""),
        Relation(x["relation"]),
        str(x["bound"]),
        x.get("description", ""),
        None if tol is None else float(tol),
    )


_INVARIANT_SCHEMA = {
    "type": "object",
    "required": ["subject", "relation", "bound"],
    "properties": {
        "subject": {
            "type": "object",
            "required": ["contract", "member"],
            "properties": {
                "contract": {"type": "string", "minLength": 1},
                "member": {"type": "string", "minLength": 1},
                "qualifier": {"type": "string"},
            },
        },
        "relation": {"enum": [r.value for r in Relation]},
        "bound": {"type": ["string", "number", "boolean"]},
        "description": {"type": "string"},
        "tolerance": {"type": ["number", "null"]},
    },
}

SPEC_SCHEMA = {
    "type": "object",
    "required": ["initial_state", "pre_vuln_state", "post_vuln_state", "attack_narrative"],
    "properties": {
        "attack_narrative": {"type": "string"},
        "initial_state": {
            "type": "object",
            "properties": {
                "deploy": {
                    "type": "array",
                    "items": {"type": "object", "required": ["contract"],
                              "properties": {"contract": {"type": "string"}, "label": {"type": "string"}}},
                },
                "fund": {
                    "type": "array",
                    "items": {"type": "object", "required": ["account", "token", "amount"],
                              "properties": {"account": {"type": "string"}, "token": {"type": "string"},
                                             "amount": {"type": ["string", "number"]}}},
                },
                "invariants": {"type": "array", "items": _INVARIANT_SCHEMA},
            },
        },
        "pre_vuln_state": {"type": "array", "items": _INVARIANT_SCHEMA},
        "post_vuln_state": {"type": "array", "items": _INVARIANT_SCHEMA},
    },
}

_IDENT = re.compile(r"[A-Za-z_$][A-Za-z0-9_$]*")
_NAMED_BOUND = re.compile(r"^([A-Za-z_$][\w$]*)\.([A-Za-z_$][\w$]*)")
NATIVE_TOKENS = {"ETH", "native"}


def declared_contracts(source: str) -> set[str]:
    return set(re.findall(r"\b(?:contract|library|interface)\s+([A-Za-z_$][\w$]*)", source))


def _mentions(source: str, name: str) -> bool:
    return re.search(rf"(?<![\w$]){re.escape(name)}(?![\w$])", source) is not None


def validate_specification(spec: AuditSpecification, corpus: ProjectCorpus) -> list[str]:
    """Return the violations found; an empty list means it is usable."""
    source = corpus.source_text()
    contracts = declared_contracts(source)
    problems = []
    if spec.initial_state.is_empty():
        problems.append("initial_state is empty")
    if not spec.pre_vuln_state:
        problems.append("pre_vuln_state is empty")
    if not spec.post_vuln_state:
        problems.append("post_vuln_state is empty")
    for d in spec.initial_state.deploy:
        if d.contract not in contracts:
            problems.append(f"unresolvable deployment: contract {d.contract!r} not declared in project")
    for f in spec.initial_state.fund:
        if f.token not in NATIVE_TOKENS and f.token not in contracts:
            problems.append(f"unresolvable funding token {f.token!r}")
    sections = [("initial", spec.initial_state.invariants), ("pre", spec.pre_vuln_state),
                ("post", spec.post_vuln_state)]
    for name, invariants in sections:
        for i, inv in enumerate(invariants):
            where = f"{name}[{i}]"
            if inv.subject.contract not in contracts:
                problems.append(f"{where}: unresolvable subject contract {inv.subject.contract!r}")
            member = _IDENT.match(inv.subject.member)
            if member is None or not _mentions(source, member.group(0)):
                problems.append(f"{where}: unresolvable subject member {inv.subject.member!r}")
            bound = _NAMED_BOUND.match(inv.bound)
            if bound and (bound.group(1) not in contracts or not _mentions(source, bound.group(2))):
                problems.append(f"{where}: unresolvable bound {inv.bound!r}")
            if inv.relation is Relation.WITHIN and not (inv.tolerance is not None and 0 < inv.tolerance <= 1):
                problems.append(f"{where}: Within needs a tolerance in (0, 1]")
    return problems


def generate_specification(
    gateway: LLMGateway,
    pair_id: str,
    semantic: str,
    pattern: str,
    corpus: ProjectCorpus,
    feedback: Sequence[str] = (),
    *,
    previous: AuditSpecification | None = None,
    version: int = 0,
    max_source_units: int = 32_000,
) -> AuditSpecification:
    """Concretize one semantic-vulnerability pair into a project specification.

    ``feedback`` holds earlier reflection verdicts for the pair and is placed in
    the prompt verbatim. A draft that fails validation, or repeats the rejected
    ``previous`` spec, gets one guided retry before :class:`ValidationFailed`.
    """
    source = "\n\n".join(f"// {d.path}\n{d.text}" for d in corpus.sources())[:max_source_units]
    notes = list(feedback)
    violations: list[str] = []
    for attempt in range(2):
        reply = gateway.ask(
            TemplateId.SPEC_GENERATION,
            {"SEMANTIC": semantic, "PATTERN": pattern, "PROJECT SOURCE": source, "FEEDBACK": notes},
            SPEC_SCHEMA,
            purpose=f"audit:{pair_id}:spec:v{version}" + (":retry" if attempt else ""),
        )
        spec = AuditSpecification.from_dict(reply.parsed, pair_id=pair_id, version=version)
        violations = validate_specification(spec, corpus)
        if feedback and previous is not None and spec.sections() == previous.sections():
            violations.append("specification is unchanged from the rejected version")
        if not violations:
            return spec
        log.info("spec for %s rejected: %s", pair_id, violations)
        notes = list(feedback) + ["The previous draft was invalid: " + "; ".join(violations)]
    raise ValidationFailed(f"no valid specification for {pair_id}", violations)
