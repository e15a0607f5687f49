"""End-to-end acceptance checks, one test per criterion.

Each test records PASS or FAIL; the summary is printed at the end of the run.
"""

from __future__ import annotations

import copy
import hashlib
import json
import random
import time
from fractions import Fraction

from conftest import DEMO, FIXTURES, GOLDEN, criterion
from hypothesis import given, settings
from hypothesis import strategies as st
from nirgen import entry_args, generate
from test_policy import _generate, grow, random_inputs

from syscut._jsonio import dumps
from syscut.enforce import evaluate_payloads, load_payloads, parse_events, simulate
from syscut.native_cg import build_base_cg, refine, resolve_syscalls, specialize_fnptr, specialize_switch
from syscut.nir import interpret, parse_nir, program_from_json
from syscut.pipeline import ARTIFACTS, PipelineConfig, run_pipeline
from syscut.policy import Policy
from syscut.syscalls import data_path

ENGINE_MAIN = ["mprotect", "futex", "rt_sigaction", "munmap", "read", "fsstat", "getpid", "open", "ioctl",
               "rt_sigprocmask", "stat", "fcntl", "writev", "epoll_pwait", "pread64", "dup3", "close", "write",
               "getcwd", "getdents64", "rt_sigreturn", "brk", "shutdown", "statx", "readlink", "madvise",
               "exit_group", "epoll_ctl", "mmap"]
NOTIFY_SEND = ["access", "arch_prctl", "brk", "close", "connect", "execve", "exit_group", "fstat", "getrandom",
               "geteuid", "getuid", "mmap", "mprotect", "munmap", "openat", "poll", "read", "recvmsg", "sendmsg",
               "socket"]
CRITICAL7 = ["execve", "fork", "setgid", "setuid", "connect", "listen", "bind"]


def demo_config(out, **overrides) -> PipelineConfig:
    cfg = PipelineConfig.load(DEMO / "config.json")
    cfg.output_dir = out
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


@criterion(1)
def test_switch_specialization_prunes_branches():
    start = time.perf_counter()
    p = parse_nir(FIXTURES / "fs_switch.nir.json")
    base = build_base_cg(p)
    assert ("uv__fs_work", 3, "access") in base.edges
    assert ("uv__fs_work", 2, "uv__fs_write_all") in base.edges
    refined, _ = specialize_switch(p)
    cg = build_base_cg(refined)
    [clone] = [b for a, _, b in cg.edges if a == "uv_fs_access"]
    assert {b for a, _, b in cg.edges if a == clone} == {"access"}
    assert dumps(cg.to_json()) == (GOLDEN / "fs_switch_refined.json").read_text()
    assert time.perf_counter() - start < 1.0


@criterion(2)
def test_fnptr_specialization_separates_chains():
    start = time.perf_counter()
    p = parse_nir(FIXTURES / "fnptr_chain.nir.json")
    refined, report = specialize_fnptr(p)
    assert len([c for c in report.clones if c.original == "AsyncCall"]) == 3
    reach = build_base_cg(refined).reachable({"Read"})
    assert "uv_fs_read" in reach
    assert "uv_fs_unlink" not in reach and "uv_fs_rmdir" not in reach
    assert time.perf_counter() - start < 1.0


@criterion(3)
def test_refinement_soundness_on_random_programs(table):
    violations = []
    for seed in range(25):
        p = program_from_json(generate(seed))
        refined, report = refine(p)
        cg = build_base_cg(refined)
        res = resolve_syscalls(refined, cg, table)
        for entry in p.entries:
            live = cg.reachable({entry})
            projected = report.project_edges(e for e in cg.edges if e[0] in live)
            for args in entry_args(p, entry):
                log = interpret(p, entry, copy.deepcopy(args))
                violations += [(seed, entry, e) for e in set(log.call_edges) - projected]
                violations += [(seed, entry, n) for n in {table.name_of(n) for n in log.syscalls} - res.syscalls[entry]]
    assert violations == []


@criterion(4)
def test_refinement_precision_and_idempotence():
    programs = [parse_nir(FIXTURES / "fs_switch.nir.json"), parse_nir(FIXTURES / "fnptr_chain.nir.json"),
                parse_nir(DEMO / "native.nir.json")] + [program_from_json(generate(s)) for s in range(25)]
    for p in programs:
        refined, report = refine(p)
        assert report.project_edges(build_base_cg(refined).edges) <= build_base_cg(p).edges
        assert refine(refined)[1].clones == ()


@criterion(5)
def test_demo_end_to_end(tmp_path, table):
    start = time.perf_counter()
    run_pipeline(demo_config(tmp_path))
    elapsed = time.perf_counter() - start
    db = json.loads((tmp_path / ARTIFACTS["mapping"]).read_text())
    chains = {(tuple(w["builtin"]), w["syscall"]): w["chains"] for w in db["witnesses"]}
    assert chains[(("child_process", "exec"), "execve")] == ["child_process.exec -> process_wrap.spawn -> Spawn -> execve"]
    policy = json.loads((tmp_path / ARTIFACTS["policy"]).read_text())
    expected = {table.canonical(n) for n in ENGINE_MAIN} | {"execve"} | set(NOTIFY_SEND)
    assert set(policy["main_allow"]) == expected
    assert (tmp_path / ARTIFACTS["policy"]).read_text() == (GOLDEN / "demo.policy.json").read_text()
    assert (tmp_path / ARTIFACTS["rules"]).read_text() == (GOLDEN / "demo.rules").read_text()
    assert elapsed < 5.0


@criterion(6)
def test_builtin_free_app(tmp_path, table):
    result = run_pipeline(demo_config(tmp_path, corpus=FIXTURES / "nobuiltins" / "corpus.json", trace=None))
    policy = json.loads((tmp_path / ARTIFACTS["policy"]).read_text())
    assert policy["main_allow"] == sorted(table.canonical(n) for n in ENGINE_MAIN)
    assert policy["mode"] == "pool_free" and policy["pool_allow"] == []
    metrics = json.loads((tmp_path / ARTIFACTS["metrics"]).read_text())
    assert Fraction(metrics["s_app"], metrics["s_base"]) == Fraction(len(ENGINE_MAIN), 335)
    assert metrics["sr"] == 0.0866
    assert result.summary.startswith("SR = 0.0866 (29/335)")


@criterion(7)
def test_simulator_scenarios_and_payloads(table):
    pool_policy = Policy(("read", "write"), ("futex", "openat"), "pool_required")
    kill = simulate(Policy(()), parse_events("APP_START\nSYSCALL 0 getpid\n"))
    pool = simulate(pool_policy, parse_events("POOL_INIT 2\nAPP_START\nSYSCALL 1 futex\n"))
    child = simulate(pool_policy, parse_events("POOL_INIT 2\nAPP_START\nTHREAD_CREATE 0 9\nSYSCALL 9 setuid\n"))
    assert [v.allowed for v in kill + pool + child] == [False, True, False]
    payloads = load_payloads(data_path("payloads.json"))
    strict = Policy(tuple(sorted(table.names - set(CRITICAL7))))
    full = Policy(tuple(sorted(table.names)))
    assert sum(r.blocked for r in evaluate_payloads(strict, payloads, table=table)) == 7
    assert sum(r.blocked for r in evaluate_payloads(full, payloads, table=table)) == 0


@criterion(8)
def test_builtin_patterns_are_needed(tmp_path):
    lockfile = FIXTURES / "lockfile"

    def main_allow(use_registry: bool, out):
        run_pipeline(demo_config(out, corpus=lockfile / "corpus.json", trace=None,
                                 profile=lockfile / "profile.json", use_registry=use_registry))
        return json.loads((out / ARTIFACTS["policy"]).read_text())["main_allow"]

    assert "execve" in main_allow(True, tmp_path / "on")
    assert "execve" not in main_allow(False, tmp_path / "off")


@criterion(9)
def test_pipeline_is_deterministic(tmp_path):
    def hashes(out):
        run_pipeline(demo_config(out))
        return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(out.iterdir())}

    first, second = hashes(tmp_path / "a"), hashes(tmp_path / "b")
    assert first == second and len(first) == len(ARTIFACTS)


@criterion(10)
@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**9))
def test_whitelist_monotonicity(seed):
    rng = random.Random(seed)
    before = random_inputs(rng)
    after = grow(rng, *before)
    a, b = _generate(*before), _generate(*after)
    assert a.main <= b.main and a.pool <= b.pool
