from __future__ import annotations

import hashlib
import json
import subprocess
import sys

import pytest
from conftest import DEMO, FIXTURES

from syscut._jsonio import dumps
from syscut.cli import main
from syscut.enforce import simulate, parse_events
from syscut.pipeline import ARTIFACTS
from syscut.policy import load_policy
from syscut.syscalls import data_path

CONFIG = DEMO / "config.json"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipeline")
    assert main(["pipeline", "--config", str(CONFIG), "-o", str(out)]) == 0
    return out


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# -- exit codes ----------------------------------------------------------------


def test_unknown_flag_exits_two_with_usage(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["metrics", "--bogus"])
    assert exc.value.code == 2
    assert "usage:" in capsys.readouterr().err


def test_missing_input_exits_two(capsys, tmp_path):
    code, _, err = run(capsys, "metrics", "--whitelist", tmp_path / "absent.json")
    assert code == 2 and "not found" in err


def test_analysis_error_exits_one(capsys, tmp_path):
    # exec is reachable but nothing profiles the extracted command
    code, _, err = run(capsys, "pipeline", "--config", CONFIG, "--profile", FIXTURES / "lockfile" / "profile.json",
                       "-o", tmp_path)
    assert code == 1
    assert "stage whitelist" in err and "notify-send" in err
    # completed stages keep their artifacts
    assert (tmp_path / ARTIFACTS["mapping"]).exists()
    assert not (tmp_path / ARTIFACTS["whitelist"]).exists()


def test_permissive_turns_the_error_into_a_warning(capsys, tmp_path):
    code, out, _ = run(capsys, "pipeline", "--config", CONFIG, "--permissive",
                       "--profile", FIXTURES / "lockfile" / "profile.json", "-o", tmp_path)
    assert code == 0
    assert "SR = 1.0000 (335/335)" in out
    assert "warnings: 1" in out


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert capsys.readouterr().out.startswith("syscut ")


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "syscut", "simulate", "--policy", "/nonexistent", "--events", "x"],
                          capture_output=True, text=True)
    assert proc.returncode == 2


# -- individual subcommands ----------------------------------------------------


def test_metrics_on_the_baseline_only_whitelist(capsys, tmp_path, baseline):
    wl = tmp_path / "wl.json"
    wl.write_text(json.dumps({"main": sorted(baseline.main), "pool": []}))
    code, out, _ = run(capsys, "metrics", "--whitelist", wl, "-o", tmp_path / "m.json")
    assert code == 0
    assert out.strip() == "SR = 0.0866 (29/335); critical 2, trivial 27"
    assert json.loads((tmp_path / "m.json").read_text())["sr"] == 0.0866


def test_simulate_with_an_empty_policy(capsys, tmp_path):
    policy, events = tmp_path / "p.json", tmp_path / "e.txt"
    policy.write_text(json.dumps({"main_allow": [], "mode": "pool_free"}))
    events.write_text("APP_START\nSYSCALL 0 getpid\n")
    code, out, _ = run(capsys, "simulate", "--policy", policy, "--events", events, "-o", tmp_path / "v.json")
    assert code == 0
    assert "event 1: thread 0 getpid killed (filter 0, main)" in out
    assert out.rstrip().endswith("1/1 killed")
    assert json.loads((tmp_path / "v.json").read_text())["verdicts"][0]["verdict"] == "killed"


def test_simulate_reads_the_pipeline_policy(capsys, tmp_path, pipeline_dir):
    events = tmp_path / "e.txt"
    events.write_text("APP_START\nSYSCALL 0 execve\nSYSCALL 0 setuid\nTHREAD_CREATE 0 5\nSYSCALL 5 connect\n")
    code, _, _ = run(capsys, "simulate", "--policy", pipeline_dir / ARTIFACTS["policy"], "--events", events,
                     "-o", tmp_path / "v.json")
    assert code == 0
    direct = simulate(load_policy(pipeline_dir / ARTIFACTS["policy"]), parse_events(events.read_text()))
    assert json.loads((tmp_path / "v.json").read_text())["verdicts"] == [v.to_json() for v in direct]


def test_payloads_subcommand(capsys, pipeline_dir):
    code, out, _ = run(capsys, "payloads", "--policy", pipeline_dir / ARTIFACTS["policy"])
    assert code == 0
    assert out.rstrip().endswith("5/7 blocked")


def test_emit_with_fs_advisory(capsys, tmp_path, pipeline_dir):
    code, _, _ = run(capsys, "emit", "--whitelist", pipeline_dir / ARTIFACTS["whitelist"], "--fs-root", "/srv",
                     "--fs-read-only", "-o", tmp_path / "p.json", "--rules", tmp_path / "p.rules")
    assert code == 0
    assert json.loads((tmp_path / "p.json").read_text())["fs_advisory"] == {"root_dir": "/srv", "read_only": True}
    assert (tmp_path / "p.rules").read_text() == (pipeline_dir / ARTIFACTS["rules"]).read_text()


def test_cg_js_without_the_registry(capsys):
    code, out, _ = run(capsys, "cg-js", "--corpus", FIXTURES / "lockfile" / "corpus.json", "--no-registry")
    assert code == 0
    builtins = {(c["owner"], c["method"]) for c in json.loads(out)["builtin_calls"]}
    assert ("child_process", "exec") in builtins


def test_js2ast_matches_the_shipped_ast(capsys, tmp_path):
    pytest.importorskip("esprima")
    code, _, _ = run(capsys, "js2ast", FIXTURES / "nobuiltins" / "main.js", "-o", tmp_path / "a.json")
    assert code == 0
    fresh = json.loads((tmp_path / "a.json").read_text())
    assert fresh == json.loads((FIXTURES / "nobuiltins" / "main.ast.json").read_text())


# -- pipeline ------------------------------------------------------------------


def test_pipeline_writes_every_artifact(pipeline_dir):
    for name in ARTIFACTS.values():
        assert (pipeline_dir / name).exists(), name
    policy = json.loads((pipeline_dir / ARTIFACTS["policy"]).read_text())
    assert "execve" in policy["main_allow"]


def test_refinement_off_copies_the_base_graph(capsys, tmp_path):
    code, _, _ = run(capsys, "pipeline", "--config", CONFIG, "--no-refine", "-o", tmp_path)
    assert code == 0
    assert (tmp_path / ARTIFACTS["native_refined"]).read_bytes() == (tmp_path / ARTIFACTS["native_base"]).read_bytes()
    assert json.loads((tmp_path / ARTIFACTS["clones"]).read_text())["clones"] == []


def test_two_runs_are_byte_identical(capsys, tmp_path, pipeline_dir):
    assert run(capsys, "pipeline", "--config", CONFIG, "-o", tmp_path)[0] == 0
    for name in ARTIFACTS.values():
        assert digest(tmp_path / name) == digest(pipeline_dir / name), name


def test_stages_compose_to_the_pipeline(capsys, tmp_path, pipeline_dir):
    t = tmp_path
    table = data_path("syscalls_x86_64.tsv")
    steps = [
        ("cg-js", "--corpus", DEMO / "app" / "corpus.json", "--trace", DEMO / "trace.txt", "-o", t / ARTIFACTS["app_cg"]),
        ("cg-js", "--corpus", DEMO / "builtin" / "corpus.json", "-o", t / ARTIFACTS["builtin_cg"]),
        ("cg-native", "--nir", DEMO / "native.nir.json", "-o", t),
        ("map", "--builtin-cg", t / ARTIFACTS["builtin_cg"], "--nir", t / ARTIFACTS["nir_refined"],
         "--native-cg", t / ARTIFACTS["native_refined"], "--resolution-output", t / ARTIFACTS["native_syscalls"],
         "-o", t / ARTIFACTS["mapping"]),
        ("whitelist", "--corpus", DEMO / "app" / "corpus.json", "--app-cg", t / ARTIFACTS["app_cg"],
         "--mapping", t / ARTIFACTS["mapping"], "--trace", DEMO / "trace.txt", "--profile", DEMO / "profile.json",
         "-o", t / ARTIFACTS["whitelist"]),
        ("metrics", "--whitelist", t / ARTIFACTS["whitelist"], "-o", t / ARTIFACTS["metrics"]),
        ("emit", "--whitelist", t / ARTIFACTS["whitelist"], "-o", t / ARTIFACTS["policy"], "--rules", t / ARTIFACTS["rules"]),
        ("payloads", "--policy", t / ARTIFACTS["policy"], "--table", table, "-o", t / ARTIFACTS["payloads"]),
    ]
    for argv in steps:
        assert run(capsys, *argv)[0] == 0, argv[0]
    for name in ARTIFACTS.values():
        assert (t / name).read_bytes() == (pipeline_dir / name).read_bytes(), name


def test_config_rejects_unknown_keys(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"corpus": "x", "colour": "blue"}))
    code, _, err = run(capsys, "pipeline", "--config", cfg)
    assert code == 2 and "colour" in err


def test_config_requires_inputs(capsys, tmp_path):
    code, _, err = run(capsys, "pipeline", "-o", tmp_path)
    assert code == 2 and "corpus" in err


def test_command_line_wins_over_config(capsys, tmp_path):
    cfg = json.loads(CONFIG.read_text())
    cfg = {k: (str(DEMO / v) if k != "output_dir" else str(tmp_path / "from-config")) for k, v in cfg.items()}
    cfg["refine"] = True
    path = tmp_path / "c.json"
    path.write_text(dumps(cfg))
    assert run(capsys, "pipeline", "--config", path, "--no-refine", "-o", tmp_path / "cli")[0] == 0
    assert not (tmp_path / "from-config").exists()
    refined = (tmp_path / "cli" / ARTIFACTS["native_refined"]).read_bytes()
    assert refined == (tmp_path / "cli" / ARTIFACTS["native_base"]).read_bytes()
