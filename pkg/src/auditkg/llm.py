"""Provider-agnostic LLM access with structured replies and cost accounting.

Every call goes through :class:`LLMGateway`, which checks the budget guard
before talking to the provider, validates the JSON verdict at the end of the
reply against a schema, retries once with a repair note, and records usage in
an append-only :class:`UsageLedger`.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from decimal import Decimal
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol, Sequence

import jsonschema

from .errors import BudgetExhausted, MalformedOutput, ProviderError, UnboundPlaceholder

log = logging.getLogger(__name__)

NONE_SENTINEL = "(none)"


class TemplateId(str, Enum):
    CLASSIFICATION = "Classification"
    EXTRACTION = "Extraction"
    LINKING = "Linking"
    SPEC_GENERATION = "SpecGeneration"
    HARNESS_SYNTHESIS = "HarnessSynthesis"
    HARNESS_REPAIR = "HarnessRepair"
    REFLECTION = "Reflection"
    MAPPING = "Mapping"


class Role(str, Enum):
    REASONING = "Reasoning"
    SYNTHESIS = "Synthesis"


TEMPLATES: dict[TemplateId, str] = {
    TemplateId.CLASSIFICATION: """\
# Task
Sort the material below into one or more of these categories:
{%CATEGORIES WITH EXAMPLES%}

# How to work
Read all of the {%INPUT KIND%} before judging anything. Compare every {%ITEM KIND%} with each \
category definition and its example, and disregard names, branding and other details that are \
specific to this one project. For every category, first write the technical argument for or \
against it, and only then give a verdict.

# Material
{%INPUTS%}
""",
    TemplateId.EXTRACTION: """\
# Task
Turn the material below into abstract {%ITEM LABEL%} for these categories:
{%CATEGORIES WITH EXAMPLES%}

# How to work
Read all of the {%INPUT KIND%}. For each {%ITEM KIND%}, describe the mechanism it implements and \
what it is meant to achieve as a general model, dropping implementation details, in the style of \
the examples. Then compare each model with the known entries listed under "Known entries" and \
judge novelty on the abstract logic only. Before deciding, spell out which parts of the mechanism \
overlap an existing entry or why nothing comparable exists. A novel item gets no merge_target. \
An overlapping item names the entry id as merge_target and carries a rewritten description that \
covers both the known entry and the new variation.

# Known entries
{%PREVIOUS ITEMS%}

# Material
{%INPUTS%}
""",
    TemplateId.LINKING: """\
# Task
Decide which vulnerability patterns each DeFi semantic below can give rise to.

## DeFi semantics
{%DEFI SEMANTICS%}

## Vulnerability patterns
{%VULNERABILITY PATTERNS%}

# How to work
Go through the patterns one at a time and, for each semantic, argue whether the mechanism is \
exposed to that kind of flaw. Emit a link only when the relation is close and you can state why. \
Use only the ids listed above.
""",
    TemplateId.MAPPING: """\
# Task
A DeFi semantic was extracted from the project under audit. Find the entries in the knowledge \
base that describe the same mechanism.

## Extracted semantic
{%PROJECT SEMANTIC%}

## Knowledge base semantics
{%KNOWN SEMANTICS%}

# How to work
Compare the abstract mechanics, not names. Argue each candidate briefly and report only real \
matches, by id. Report no match rather than a weak one.
""",
    TemplateId.SPEC_GENERATION: """\
# Task
Write an auditing specification that tests whether this project is affected by the pattern below \
through the given DeFi semantic.

## DeFi semantic
{%SEMANTIC%}

## Vulnerability pattern
{%PATTERN%}

## Project source
{%PROJECT SOURCE%}

## Feedback from earlier attempts
{%FEEDBACK%}

# How to work
Describe three states of the attack as invariants over named contract state:
- initial_state: what setup must have happened before any call (contracts deployed, accounts funded),
- pre_vuln_state: what holds just before the attack,
- post_vuln_state: what holds once the flaw has been exercised.
Every subject must name a contract and a member that exist in the project source. Relations are \
Eq, Neq, Lt, Le, Gt, Ge or Within (Within needs a relative tolerance). If feedback is present, \
address every point it raises and change the specification accordingly.
""",
    TemplateId.HARNESS_SYNTHESIS: """\
# Task
Write a Foundry invariant-testing harness for the specification below.

## Specification
{%SPECIFICATION%}

## Project source
{%PROJECT SOURCE%}

# Rules
- setUp() deploys every contract in the deployment list and funds every listed account.
- Handlers are thin wrappers, each making a few external calls that exercise the semantic.
- Each pre/post invariant becomes exactly one require whose message is "oracle:<id>" using \
these ids: {%ORACLE IDS%}
- Log tracked state as `state:<Contract>.<member>` so that state changes can be recovered.
- Put the harness under test/ and do not modify project sources.
""",
    TemplateId.HARNESS_REPAIR: """\
# Task
The harness below does not compile. Fix it.

## Harness
{%HARNESS%}

## Compiler output
{%DIAGNOSTICS%}

## Earlier repair attempts
{%REPAIR HISTORY%}

# Rules
Keep every "oracle:<id>" require, setUp() and the handlers. Change only what the errors require \
and summarize the change in patch_summary.
""",
    TemplateId.REFLECTION: """\
# Task
A fuzzing oracle failed. Decide whether the failure is a real instance of the specified attack.

## Specification
{%SPECIFICATION%}

## Violation (trace and state changes)
{%VIOLATION%}

## Project scope notes
{%SCOPE NOTES%}

## General judging rules
{%GENERAL RULES%}

# How to work
1. Compare the trace and the state changes with the attack narrative and the post-vuln invariants. \
Set matches_specification accordingly.
2. If it does not match, set mismatch_kind: ExpectedBehavior when the contract reverted or behaved \
as designed (for example an access-control check), ProblematicSpecOrHarness when the oracle failed \
because of the harness or specification (for example a contract that setUp never deployed).
3. If it matches, check the scope notes and the rules and set in_scope. Findings that rely on \
conditions the project excludes are out of scope even when technically valid.
""",
}

_PLACEHOLDER = re.compile(r"\{%([^%{}]+)%\}")


def placeholders(template_id: TemplateId) -> list[str]:
    return list(dict.fromkeys(_PLACEHOLDER.findall(TEMPLATES[TemplateId(template_id)])))


def _render_value(value: Any) -> str:
    if isinstance(value, str):
        return value if value.strip() else NONE_SENTINEL
    if isinstance(value, Mapping):
        return json.dumps(value, indent=2, sort_keys=True, ensure_ascii=False)
    if isinstance(value, Iterable):
        items = [str(v) for v in value]
        return "\n".join(f"- {v}" for v in items) if items else NONE_SENTINEL
    return str(value)


def render_prompt(template_id: TemplateId | str, bindings: Mapping[str, Any]) -> str:
    """Substitute ``{%NAME%}`` markers; every marker must be bound."""
    body = TEMPLATES[TemplateId(template_id)]
    for name in placeholders(TemplateId(template_id)):
        if name not in bindings:
            raise UnboundPlaceholder(name)
    return _PLACEHOLDER.sub(lambda m: _render_value(bindings[m.group(1)]), body)


# --------------------------------------------------------------------------- accounting


@dataclass(frozen=True)
class ModelRole:
    role: Role
    model_name: str
    input_cost: Decimal = Decimal(0)  # USD per prompt token
    output_cost: Decimal = Decimal(0)  # USD per completion token

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_cost", Decimal(str(self.input_cost)))
        object.__setattr__(self, "output_cost", Decimal(str(self.output_cost)))
        if self.input_cost < 0 or self.output_cost < 0:
            raise ValueError("unit costs must be non-negative")

    def cost(self, prompt_tokens: int, completion_tokens: int) -> Decimal:
        return self.input_cost * prompt_tokens + self.output_cost * completion_tokens


@dataclass(frozen=True)
class UsageEntry:
    role: Role
    prompt_tokens: int
    completion_tokens: int
    cost: Decimal
    purpose: str


class UsageLedger:
    """Append-only, thread-safe record of provider usage."""

    def __init__(self) -> None:
        self._entries: list[UsageEntry] = []
        self._lock = threading.Lock()

    def append(self, entry: UsageEntry) -> None:
        with self._lock:
            self._entries.append(entry)

    @property
    def entries(self) -> tuple[UsageEntry, ...]:
        with self._lock:
            return tuple(self._entries)

    def total(self) -> Decimal:
        return sum((e.cost for e in self.entries), Decimal(0))

    def __len__(self) -> int:
        return len(self._entries)

    def summary(self) -> dict[str, Any]:
        by_role: dict[str, dict[str, Any]] = {}
        for e in self.entries:
            slot = by_role.setdefault(e.role.value, {"calls": 0, "prompt_tokens": 0,
                                                      "completion_tokens": 0, "cost_usd": Decimal(0)})
            slot["calls"] += 1
            slot["prompt_tokens"] += e.prompt_tokens
            slot["completion_tokens"] += e.completion_tokens
            slot["cost_usd"] += e.cost
        for slot in by_role.values():
            slot["cost_usd"] = str(slot["cost_usd"])
        return {"calls": len(self), "total_usd": str(self.total()), "by_role": by_role}


def ledger_total(ledger: UsageLedger) -> Decimal:
    return ledger.total()


class BudgetGuard:
    """Pre-call ceiling on ledger spend. ``budget=None`` means unlimited."""

    def __init__(self, ledger: UsageLedger, budget: Decimal | float | str | None = None):
        self.ledger = ledger
        self.budget = None if budget is None else Decimal(str(budget))

    @property
    def remaining(self) -> Decimal | None:
        if self.budget is None:
            return None
        return self.budget - self.ledger.total()

    def check(self, estimate: Decimal = Decimal(0)) -> None:
        remaining = self.remaining
        if remaining is None:
            return
        if remaining <= 0 or estimate > remaining:
            raise BudgetExhausted(f"remaining ${remaining} cannot cover call estimated at ${estimate}")


# --------------------------------------------------------------------------- providers


@dataclass(frozen=True)
class ProviderResponse:
    text: str
    prompt_tokens: int
    completion_tokens: int
    cost: Decimal | None = None  # providers with flat pricing report it directly


class Provider(Protocol):
    def complete(self, model: ModelRole, prompt: str, *, template: TemplateId) -> ProviderResponse: ...

    def estimate_cost(self, model: ModelRole, prompt: str) -> Decimal: ...


def approx_tokens(text: str) -> int:
    return max(1, (len(text) + 3) // 4)


@dataclass
class _ScriptEntry:
    template: TemplateId
    index: int | None  # None matches any ordinal not scripted explicitly
    reply: str


class MockProvider:
    """Deterministic provider replaying scripted replies.

    Replies are keyed by (template id, ordinal of the call for that template).
    An entry with index ``"*"`` answers every ordinal without an explicit entry.
    """

    def __init__(self, script: Sequence[Mapping[str, Any]] = (), *, cost_per_call: Decimal | str | None = None):
        self._entries: dict[tuple[TemplateId, int | None], str] = {}
        for raw in script:
            entry = self._parse_entry(raw)
            self._entries[(entry.template, entry.index)] = entry.reply
        self.cost_per_call = None if cost_per_call is None else Decimal(str(cost_per_call))
        self.calls: list[tuple[TemplateId, str]] = []
        self._ordinals: dict[TemplateId, int] = {}
        self._lock = threading.Lock()

    @staticmethod
    def _parse_entry(raw: Mapping[str, Any]) -> _ScriptEntry:
        index = raw.get("index", "*")
        reply = raw["reply"]
        if not isinstance(reply, str):
            reply = json.dumps(reply, indent=2, sort_keys=True, ensure_ascii=False)
        return _ScriptEntry(TemplateId(raw["template"]), None if index == "*" else int(index), reply)

    @classmethod
    def from_file(cls, path: str | Path, **kwargs: Any) -> MockProvider:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, list):
            raise ValueError(f"{path}: mock script must be a JSON array")
        return cls(data, **kwargs)

    def estimate_cost(self, model: ModelRole, prompt: str) -> Decimal:
        if self.cost_per_call is not None:
            return self.cost_per_call
        return model.cost(approx_tokens(prompt), 0)

    def complete(self, model: ModelRole, prompt: str, *, template: TemplateId) -> ProviderResponse:
        template = TemplateId(template)
        with self._lock:
            ordinal = self._ordinals.get(template, 0)
            self._ordinals[template] = ordinal + 1
            self.calls.append((template, prompt))
        reply = self._entries.get((template, ordinal), self._entries.get((template, None)))
        if reply is None:
            raise ProviderError(f"mock script has no reply for {template.value}#{ordinal}")
        return ProviderResponse(reply, approx_tokens(prompt), approx_tokens(reply), self.cost_per_call)

    def prompts(self, template: TemplateId) -> list[str]:
        return [p for t, p in self.calls if t is TemplateId(template)]


class OpenAICompatibleProvider:
    """Chat-completions client for any OpenAI-compatible endpoint.

    Model parameters are left at provider defaults.
    """

    def __init__(self, base_url: str, api_key: str, *, timeout: float = 600.0):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.timeout = timeout

    def estimate_cost(self, model: ModelRole, prompt: str) -> Decimal:
        return model.cost(approx_tokens(prompt), 0)

    def complete(self, model: ModelRole, prompt: str, *, template: TemplateId) -> ProviderResponse:
        body = json.dumps({"model": model.model_name, "messages": [{"role": "user", "content": prompt}]})
        request = urllib.request.Request(
            f"{self.base_url}/chat/completions",
            data=body.encode("utf-8"),
            headers={"Content-Type": "application/json", "Authorization": f"Bearer {self.api_key}"},
        )
        try:
            with urllib.request.urlopen(request, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            raise ProviderError(f"{template.value}: {exc}") from exc
        try:
            text = payload["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"unexpected response shape: {str(payload)[:200]}") from exc
        usage = payload.get("usage") or {}
        return ProviderResponse(
            text,
            int(usage.get("prompt_tokens", approx_tokens(prompt))),
            int(usage.get("completion_tokens", approx_tokens(text))),
        )


# --------------------------------------------------------------------------- structured calls


@dataclass(frozen=True)
class StructuredReply:
    raw: str
    parsed: Any
    reasoning: str


_FENCE = re.compile(r"```(?:json)?\s*\n(.*?)```", re.DOTALL)


def extract_json(text: str) -> tuple[Any, int]:
    """Return the last JSON value in ``text`` and where it starts.

    A fenced json block wins; otherwise the last top-level object or array.
    """
    fences = list(_FENCE.finditer(text))
    for m in reversed(fences):
        try:
            return json.loads(m.group(1)), m.start()
        except json.JSONDecodeError:
            continue
    decoder = json.JSONDecoder()
    found: tuple[Any, int] | None = None
    end = -1
    for i, ch in enumerate(text):
        if ch not in "{[" or i < end:
            continue
        try:
            value, stop = decoder.raw_decode(text, i)
        except json.JSONDecodeError:
            continue
        found, end = (value, i), stop
    if found is None:
        raise ValueError("no JSON value in reply")
    return found


def parse_structured(text: str, schema: Mapping[str, Any]) -> StructuredReply:
    parsed, start = extract_json(text)
    jsonschema.validate(parsed, schema)
    reasoning = text[:start].strip()
    if not reasoning and isinstance(parsed, dict) and isinstance(parsed.get("reasoning"), str):
        reasoning = parsed["reasoning"]
    return StructuredReply(text, parsed, reasoning)


def output_contract(schema: Mapping[str, Any]) -> str:
    return (
        "\n# Reply format\nReason step by step first. End the reply with a single ```json fenced block "
        "that validates against this JSON schema:\n"
        + json.dumps(schema, indent=2, sort_keys=True)
    )


DEFAULT_ROLES = {
    Role.REASONING: ModelRole(Role.REASONING, "gpt-5.1"),
    Role.SYNTHESIS: ModelRole(Role.SYNTHESIS, "gpt-5-mini"),
}


class LLMGateway:
    def __init__(
        self,
        provider: Provider,
        roles: Mapping[Role, ModelRole] | None = None,
        ledger: UsageLedger | None = None,
        guard: BudgetGuard | None = None,
    ):
        self.provider = provider
        self.roles = dict(DEFAULT_ROLES if roles is None else roles)
        self.ledger = ledger if ledger is not None else UsageLedger()
        self.guard = guard if guard is not None else BudgetGuard(self.ledger)

    def _call(self, model: ModelRole, prompt: str, template: TemplateId, purpose: str,
              guard: BudgetGuard) -> tuple[ProviderResponse, UsageEntry]:
        guard.check(self.provider.estimate_cost(model, prompt))
        response = self.provider.complete(model, prompt, template=template)
        cost = response.cost if response.cost is not None else model.cost(
            response.prompt_tokens, response.completion_tokens)
        entry = UsageEntry(model.role, response.prompt_tokens, response.completion_tokens, cost, purpose)
        self.ledger.append(entry)
        return response, entry

    def complete_structured(
        self,
        role: Role,
        prompt: str,
        output_schema: Mapping[str, Any],
        budget_guard: BudgetGuard | None = None,
        *,
        template: TemplateId,
        purpose: str = "",
    ) -> tuple[StructuredReply, list[UsageEntry]]:
        guard = budget_guard or self.guard
        model = self.roles[Role(role)]
        full_prompt = prompt + "\n" + output_contract(output_schema)
        usage = []
        response, entry = self._call(model, full_prompt, template, purpose, guard)
        usage.append(entry)
        try:
            return parse_structured(response.text, output_schema), usage
        except (ValueError, jsonschema.ValidationError) as exc:
            problem = getattr(exc, "message", str(exc))
            log.info("%s reply rejected (%s); retrying once", template.value, problem)
        repair = (
            full_prompt
            + "\n\n# Previous reply rejected\n"
            + f"Your previous reply could not be used: {problem}\n"
            + "Answer again and end with a JSON block that satisfies the schema exactly."
        )
        response, entry = self._call(model, repair, template, purpose + ":repair", guard)
        usage.append(entry)
        try:
            return parse_structured(response.text, output_schema), usage
        except (ValueError, jsonschema.ValidationError) as exc:
            raise MalformedOutput(f"{template.value}: {getattr(exc, 'message', exc)}") from exc

    def ask(
        self,
        template: TemplateId,
        bindings: Mapping[str, Any],
        schema: Mapping[str, Any],
        *,
        role: Role = Role.REASONING,
        purpose: str = "",
    ) -> StructuredReply:
        """Render ``template`` and run one structured completion."""
        reply, _ = self.complete_structured(
            role, render_prompt(template, bindings), schema, template=template, purpose=purpose
        )
        return reply


def roles_from_env(env: Mapping[str, str] | None = None) -> dict[Role, ModelRole]:
    env = os.environ if env is None else env
    roles = {}
    for role, default in DEFAULT_ROLES.items():
        key = role.value.upper()
        roles[role] = ModelRole(
            role,
            env.get(f"AUDITKG_{key}_MODEL", default.model_name),
            Decimal(env.get(f"AUDITKG_{key}_INPUT_COST", "0")),
            Decimal(env.get(f"AUDITKG_{key}_OUTPUT_COST", "0")),
        )
    return roles
