from __future__ import annotations

import io
import json
import shutil
from decimal import Decimal

import pytest

from auditkg.cli import run_cli
from auditkg.config import ConfigError, load_config
from conftest import MINICORPUS, VAULT


def cli(*argv, env=None) -> tuple[int, str]:
    out = io.StringIO()
    code = run_cli(list(argv), env or {}, out)
    return code, out.getvalue()


def test_stats_on_minicorpus_graph():
    code, out = cli("kg", "stats", str(MINICORPUS / "graph.json"))
    assert code == 0
    assert out.startswith("semantics=2 patterns=2 links=2 projects=3 findings=3")


def test_build_reproduces_shipped_graph(tmp_path):
    for name in ("a.json", "b.json"):
        code, out = cli("kg", "build", "--manifest", str(MINICORPUS / "manifest.json"), "--out",
                        str(tmp_path / name), "--mock-script", str(MINICORPUS / "mock_script.json"), "--seed", "1")
        assert code == 0, out
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert (tmp_path / "a.json").read_bytes() == (MINICORPUS / "graph.json").read_bytes()


def test_missing_manifest_is_user_error(tmp_path, capsys):
    code, _ = cli("kg", "build", "--manifest", str(tmp_path / "nope.json"), "--out", str(tmp_path / "g.json"))
    assert code == 1
    err = capsys.readouterr().err
    assert "usage:" in err and "manifest not found" in err


def test_unknown_flag_is_user_error(capsys):
    code, _ = cli("kg", "stats", "--frobnicate", "g.json")
    assert code == 1
    assert "usage:" in capsys.readouterr().err


def test_missing_graph(tmp_path):
    assert cli("kg", "stats", str(tmp_path / "none.json"))[0] == 1


def test_query_by_business():
    code, out = cli("kg", "query", str(MINICORPUS / "graph.json"), "--business", "Lending")
    assert code == 0
    assert out.splitlines()[0].startswith("sem-000002\t")
    assert "-> pat-000002" in out
    assert cli("kg", "query", str(MINICORPUS / "graph.json"), "--business", "Casino")[0] == 1


def audit_args(tmp_path, ws="ws", *extra):
    graph = tmp_path / "graph.json"
    if not graph.exists():
        shutil.copy(MINICORPUS / "graph.json", graph)
    return ["audit", "run", "--project", str(VAULT / "lendvault"), "--kg", str(graph),
            "--mock-script", str(VAULT / "mock_script.json"), "--mock-executor", str(VAULT / "recorded"),
            "--workspace", str(tmp_path / ws), "--seed", "0", *extra]


def test_audit_budget_zero_is_user_error(tmp_path, capsys):
    code, _ = cli(*audit_args(tmp_path, "ws", "--budget", "0"))
    assert code == 1
    assert "budget" in capsys.readouterr().err


def test_audit_run_and_report(tmp_path):
    code, out = cli(*audit_args(tmp_path, "ws", "--budget", "5"))
    assert code == 0, out
    assert out.startswith("findings=1 calls=6 ")
    code, stats = cli("kg", "stats", str(tmp_path / "graph.json"))
    assert "projects=4 findings=4" in stats
    code, report = cli("audit", "report", str(tmp_path / "ws"))
    assert code == 0
    assert "First depositor can inflate the share price" in report
    assert "attackerDonate(1000000)" in report


def test_audit_no_update_kg(tmp_path):
    before = (MINICORPUS / "graph.json").read_bytes()
    assert cli(*audit_args(tmp_path, "ws", "--no-update-kg"))[0] == 0
    assert (tmp_path / "graph.json").read_bytes() == before


def test_audit_outputs_are_byte_reproducible(tmp_path):
    assert cli(*audit_args(tmp_path, "a", "--no-update-kg"))[0] == 0
    assert cli(*audit_args(tmp_path, "b", "--no-update-kg"))[0] == 0
    for name in ("report.json", "report.md", "memory.log", "specs/sem-000002__pat-000002-v0.json",
                 "runs/sem-000002__pat-000002-v0.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_audit_without_forge_or_mock(tmp_path, capsys, monkeypatch):
    monkeypatch.setattr("auditkg.cli.ForgeExecutor.available", staticmethod(lambda forge="forge": False))
    args = [a for a in audit_args(tmp_path) if a not in ("--mock-executor", str(VAULT / "recorded"))]
    assert cli(*args)[0] == 1
    assert "forge" in capsys.readouterr().err


def test_no_provider_configured(tmp_path, capsys):
    code, _ = cli("kg", "build", "--manifest", str(MINICORPUS / "manifest.json"), "--out", str(tmp_path / "g.json"))
    assert code == 1
    assert "no provider configured" in capsys.readouterr().err


def test_report_of_missing_workspace(tmp_path):
    assert cli("audit", "report", str(tmp_path))[0] == 1


def test_internal_error_exits_2(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("boom")

    monkeypatch.setattr("auditkg.cli.kg.load", boom)
    assert cli("kg", "stats", "g.json")[0] == 2


# ----------------------------------------------------------------------------- configuration


def test_precedence_flags_env_file_defaults(tmp_path):
    cfg_file = tmp_path / "c.toml"
    cfg_file.write_text('chunk_size = 1000\nbudget = 7\nworkspace = "from-file"\nmax_attempts = 4\n')
    env = {"AUDITKG_CHUNK_SIZE": "2000", "AUDITKG_BUDGET": "8"}
    cfg = load_config({"chunk_size": 3000, "budget": None}, env, cfg_file)
    assert cfg.chunk_size == 3000  # flag
    assert cfg.budget == Decimal(8)  # env
    assert cfg.workspace == "from-file"  # file
    assert cfg.max_attempts == 4
    assert cfg.regeneration_cap == 2  # default


def test_config_file_from_env(tmp_path):
    cfg_file = tmp_path / "c.toml"
    cfg_file.write_text("regeneration_cap = 0\n")
    assert load_config({}, {"AUDITKG_CONFIG": str(cfg_file)}).regeneration_cap == 0


def test_api_key_fallback():
    assert load_config({}, {"OPENAI_API_KEY": "k1"}).api_key == "k1"
    assert load_config({}, {"OPENAI_API_KEY": "k1", "AUDITKG_API_KEY": "k2"}).api_key == "k2"


@pytest.mark.parametrize("text", ["bogus = 1\n", "chunk_size = 0\n", "budget = -1\n", "max_attempts = 'x'\n",
                                  "not toml ["])
def test_bad_config(tmp_path, text):
    cfg_file = tmp_path / "c.toml"
    cfg_file.write_text(text)
    with pytest.raises(ConfigError):
        load_config({}, {}, cfg_file)


def test_model_roles_from_config():
    cfg = load_config({}, {"AUDITKG_SYNTHESIS_MODEL": "coder", "AUDITKG_REASONING_INPUT_COST": "0.000002"})
    roles = cfg.roles()
    assert roles[next(r for r in roles if r.value == "Synthesis")].model_name == "coder"
    assert roles[next(r for r in roles if r.value == "Reasoning")].input_cost == Decimal("0.000002")
