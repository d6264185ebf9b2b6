"""Run configuration: flags > environment > TOML file > defaults."""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, fields
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .llm import DEFAULT_ROLES, ModelRole, Role

ENV_PREFIX = "AUDITKG_"


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    reasoning_model: str = DEFAULT_ROLES[Role.REASONING].model_name
    reasoning_input_cost: Decimal = Decimal(0)  # USD per token
    reasoning_output_cost: Decimal = Decimal(0)
    synthesis_model: str = DEFAULT_ROLES[Role.SYNTHESIS].model_name
    synthesis_input_cost: Decimal = Decimal(0)
    synthesis_output_cost: Decimal = Decimal(0)
    base_url: str = "https://api.openai.com/v1"
    api_key: str = ""
    chunk_size: int = 32_000
    fuzz_timeout: float = 300.0
    max_attempts: int = 5
    regeneration_cap: int = 2
    budget: Decimal = Decimal(100)
    workspace: str = "auditkg-workspace"
    mock_script: str = ""
    mock_executor: str = ""
    mock_cost_per_call: Decimal | None = None
    seed: int | None = None

    def roles(self) -> dict[Role, ModelRole]:
        return {
            Role.REASONING: ModelRole(Role.REASONING, self.reasoning_model,
                                      self.reasoning_input_cost, self.reasoning_output_cost),
            Role.SYNTHESIS: ModelRole(Role.SYNTHESIS, self.synthesis_model,
                                      self.synthesis_input_cost, self.synthesis_output_cost),
        }

    def validate(self) -> None:
        for name in ("chunk_size", "fuzz_timeout", "max_attempts", "budget"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.regeneration_cap < 0:
            raise ConfigError("regeneration_cap must be non-negative")
        for name in ("reasoning_input_cost", "reasoning_output_cost",
                     "synthesis_input_cost", "synthesis_output_cost"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")


_TYPES: dict[str, Any] = {
    "chunk_size": int, "max_attempts": int, "regeneration_cap": int, "seed": int,
    "fuzz_timeout": float,
    "budget": Decimal, "mock_cost_per_call": Decimal,
    "reasoning_input_cost": Decimal, "reasoning_output_cost": Decimal,
    "synthesis_input_cost": Decimal, "synthesis_output_cost": Decimal,
}


def _coerce(name: str, value: Any) -> Any:
    if value is None:
        return None
    kind = _TYPES.get(name, str)
    try:
        if kind is Decimal:
            return Decimal(str(value))
        return kind(value)
    except (ValueError, TypeError, InvalidOperation) as exc:
        raise ConfigError(f"invalid value for {name}: {value!r}") from exc


def load_config(
    flags: Mapping[str, Any] | None = None,
    env: Mapping[str, str] | None = None,
    config_file: str | Path | None = None,
) -> Config:
    """Resolve every field from the highest-precedence source that sets it.

    ``flags`` entries that are ``None`` count as unset. The config file is a
    flat TOML table whose keys are the field names.
    """
    env = os.environ if env is None else env
    flags = flags or {}
    path = config_file or env.get(ENV_PREFIX + "CONFIG")
    file_values: dict[str, Any] = {}
    if path:
        try:
            file_values = tomllib.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    names = {f.name for f in fields(Config)}
    unknown = sorted(set(file_values) - names)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values: dict[str, Any] = {}
    for name in names:
        env_key = ENV_PREFIX + name.upper()
        if flags.get(name) is not None:
            values[name] = _coerce(name, flags[name])
        elif env.get(env_key):
            values[name] = _coerce(name, env[env_key])
        elif name in file_values:
            values[name] = _coerce(name, file_values[name])
    if "api_key" not in values and env.get("OPENAI_API_KEY"):
        values["api_key"] = env["OPENAI_API_KEY"]
    cfg = Config(**values)
    cfg.validate()
    return cfg
