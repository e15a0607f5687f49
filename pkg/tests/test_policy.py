from __future__ import annotations

import json
import random

import pytest
from conftest import GOLDEN
from hypothesis import given, settings
from hypothesis import strategies as st

from syscut._jsonio import dumps
from syscut.errors import AnalysisError, InputError
from syscut.mapping import ComposedMapping
from syscut.policy import (
    BASELINE_SOURCE,
    Whitelist,
    compute_metrics,
    emit_policy,
    generate_whitelist,
    parse_rules,
    policy_from_json,
)
from syscut.syscalls import EngineBaseline, SyscallRow, SyscallTable

EXEC = ("child_process", "exec")
READ_FILE = ("fs", "readFile")

COMPOSED = ComposedMapping(
    entries={
        EXEC: (frozenset({"execve", "pipe2", "clone"}), frozenset()),
        READ_FILE: (frozenset({"futex"}), frozenset({"openat", "read", "fstat", "close"})),
        ("fs", "existsSync"): (frozenset({"access"}), frozenset()),
    },
    pool_builtins=frozenset({READ_FILE}),
)


def canonical_baseline(baseline, table):
    return {table.canonical(n) for n in baseline.main}


# -- generation ----------------------------------------------------------------


def test_builtin_free_app_gets_only_the_baseline(baseline, table):
    wl = generate_whitelist([], COMPOSED, baseline, table=table)
    assert wl.main == canonical_baseline(baseline, table)
    assert len(wl.main) == 29
    assert wl.pool == frozenset() and wl.mode == "pool_free"
    assert all(wl.provenance[n] == (BASELINE_SOURCE,) for n in wl.main)


def test_command_profile_is_merged(baseline, table):
    profile = {"notify-send": frozenset({"socket", "connect", "execve"})}
    wl = generate_whitelist([EXEC], COMPOSED, baseline, ["notify-send"], profile, table)
    assert {"execve", "socket", "connect", "pipe2", "clone"} <= wl.main
    assert wl.provenance["execve"] == ("builtin(child_process.exec)", "command(notify-send)")
    assert wl.provenance["connect"] == ("command(notify-send)",)


def test_pool_builtin_makes_a_pool_whitelist(baseline, table):
    wl = generate_whitelist([READ_FILE], COMPOSED, baseline, table=table)
    assert wl.mode == "pool_required"
    assert wl.pool == baseline.pool | {"openat", "read", "fstat", "close"}
    assert "futex" in wl.main


def test_unmapped_method(baseline, table):
    with pytest.raises(AnalysisError, match="no mapping"):
        generate_whitelist([("net", "connect")], COMPOSED, baseline, table=table)
    wl = generate_whitelist([("net", "connect")], COMPOSED, baseline, table=table, strict=False)
    assert wl.main == table.names
    assert wl.warnings


def test_unprofiled_command(baseline, table):
    with pytest.raises(AnalysisError, match="profile"):
        generate_whitelist([EXEC], COMPOSED, baseline, ["curl"], {}, table)
    wl = generate_whitelist([EXEC], COMPOSED, baseline, ["curl"], {}, table, strict=False)
    assert wl.main == table.names
    assert "command(curl)" in wl.provenance["setuid"]


def test_permissive_fallback_needs_a_table(baseline):
    with pytest.raises(AnalysisError):
        generate_whitelist([], COMPOSED, baseline, ["curl"], {}, None, strict=False)


def test_whitelist_json_round_trip(baseline, table):
    wl = generate_whitelist([READ_FILE, EXEC], COMPOSED, baseline, table=table)
    assert Whitelist.from_json(json.loads(json.dumps(wl.to_json()))) == wl


# -- metrics -------------------------------------------------------------------


def test_full_table_gives_ratio_one(table):
    m = compute_metrics(Whitelist(table.names), table)
    assert m.sr == 1.0 and m.s_app == m.s_base == 335
    assert m.critical_allowed == 17 and m.trivial_allowed == 318


def test_baseline_only_ratio(baseline, table):
    wl = generate_whitelist([], COMPOSED, baseline, table=table)
    m = compute_metrics(wl, table)
    assert (m.s_app, m.s_base) == (29, 335)
    assert m.to_json()["sr"] == 0.0866
    assert m.summary().startswith("SR = 0.0866 (29/335)")
    # the prose count of 28 would give 0.0836, next to the quoted 0.084
    assert round(28 / 335, 3) == 0.084


def test_unknown_name_is_an_error(table):
    with pytest.raises(InputError):
        compute_metrics(Whitelist(frozenset({"not_a_syscall"})), table)


def test_empty_table_is_an_error():
    with pytest.raises(InputError):
        compute_metrics(Whitelist(frozenset()), SyscallTable(()))


def test_aliases_count_once(table):
    m = compute_metrics(Whitelist(frozenset({"fstat"}), frozenset({"fsstat"})), table)
    assert m.s_app == 1


@pytest.mark.parametrize("seed", range(30))
def test_metrics_match_a_counting_oracle(seed, table):
    rng = random.Random(seed)
    names = sorted(table.names)
    main = set(rng.sample(names, rng.randint(0, 80)))
    pool = set(rng.sample(names, rng.randint(0, 40)))
    m = compute_metrics(Whitelist(frozenset(main), frozenset(pool)), table)
    critical = {r.name for r in table.rows if r.cls == "critical"}
    union = main | pool
    assert m.s_app == len(union)
    assert m.sr == len(union) / 335
    assert m.critical_allowed == len(union & critical)
    assert m.critical_allowed + m.trivial_allowed == m.s_app


@settings(max_examples=50, deadline=None)
@given(st.randoms(use_true_random=False), st.integers(1, 60))
def test_ratio_is_invariant_under_row_order(rnd, k):
    rows = [SyscallRow(i, f"s{i}", "critical" if i % 7 == 0 else "trivial") for i in range(60)]
    names = frozenset(f"s{i}" for i in rnd.sample(range(60), k))
    shuffled = rows[:]
    rnd.shuffle(shuffled)
    a = compute_metrics(Whitelist(names), SyscallTable(tuple(rows)))
    b = compute_metrics(Whitelist(names), SyscallTable(tuple(shuffled)))
    assert a == b
    assert 0 < a.sr <= 1


# -- policy --------------------------------------------------------------------


def test_pool_free_policy_has_no_pool_section(baseline, table):
    policy = emit_policy(generate_whitelist([EXEC], COMPOSED, baseline, table=table))
    assert policy.mode == "pool_free" and policy.pool_allow == ()
    rules = policy.to_rules()
    assert "[pool]" not in rules
    assert "allow execve" in rules.splitlines()
    doc = policy.to_json()
    assert doc["default_action"] == "kill"
    assert doc["load_points"] == {"pool": "after_pool_init", "main": "before_app_load"}
    assert "fs_advisory" not in doc


def test_baseline_policy_matches_golden_files(baseline, table):
    wl = Whitelist(frozenset(table.canonical(n) for n in baseline.main), baseline.pool, mode="pool_required")
    policy = emit_policy(wl)
    assert dumps(policy.to_json()) == (GOLDEN / "engine_baseline.policy.json").read_text()
    assert policy.to_rules() == (GOLDEN / "engine_baseline.rules").read_text()


def test_rules_lines_are_sorted_per_section(baseline, table):
    rules = emit_policy(generate_whitelist([READ_FILE], COMPOSED, baseline, table=table)).to_rules()
    main, pool = rules.split("[pool]\n")
    for section in (main.split("[main]\n")[1], pool):
        names = [line[len("allow "):] for line in section.splitlines()]
        assert names == sorted(names)


def test_fs_advisory(baseline):
    wl = generate_whitelist([], COMPOSED, baseline)
    policy = emit_policy(wl, {"root_dir": "/srv/app", "read_only": True})
    assert policy.to_json()["fs_advisory"] == {"root_dir": "/srv/app", "read_only": True}
    with pytest.raises(InputError):
        emit_policy(wl, {"root_dir": "/srv/app", "read_only": "yes"})


@pytest.mark.parametrize("reachable", [[], [EXEC], [READ_FILE], [EXEC, READ_FILE]])
def test_emitted_policy_round_trips(reachable, baseline, table):
    wl = generate_whitelist(reachable, COMPOSED, baseline, table=table)
    policy = emit_policy(wl, {"root_dir": "/", "read_only": False})
    from_json = policy_from_json(json.loads(dumps(policy.to_json())))
    from_rules = parse_rules(policy.to_rules())
    for parsed in (from_json, from_rules):
        assert set(parsed.main_allow) == wl.main
        assert set(parsed.pool_allow) == wl.pool
        assert parsed.mode == wl.mode
    assert from_json == policy


@pytest.mark.parametrize("doc", [[], {"main_allow": []}, {"main_allow": [], "mode": "odd"},
                                 {"main_allow": [1], "mode": "pool_free"},
                                 {"main_allow": [], "mode": "pool_free", "default_action": "errno"}])
def test_malformed_policies(doc):
    with pytest.raises(InputError):
        policy_from_json(doc)


def test_malformed_rules():
    with pytest.raises(InputError):
        parse_rules("[main]\ndeny read\n")


# -- properties ----------------------------------------------------------------

NAMES = ["read", "write", "openat", "close", "mmap", "execve", "socket", "connect", "setuid", "bind", "fstat"]
METHODS = [("m", f"x{i}") for i in range(6)]
BINARIES = ["sh", "git", "npm"]


def random_inputs(rng: random.Random):
    entries = {}
    for m in METHODS:
        if rng.random() < 0.8:
            entries[m] = (frozenset(rng.sample(NAMES, rng.randint(0, 4))), frozenset(rng.sample(NAMES, rng.randint(0, 3))))
    pool_builtins = frozenset(m for m in entries if rng.random() < 0.4)
    composed = ComposedMapping(entries, pool_builtins)
    baseline = EngineBaseline(frozenset(rng.sample(NAMES, 3)), frozenset(rng.sample(NAMES, 2)))
    reachable = set(rng.sample(sorted(entries), rng.randint(0, len(entries))))
    profile = {b: frozenset(rng.sample(NAMES, rng.randint(0, 3))) for b in BINARIES}
    commands = set(rng.sample(BINARIES, rng.randint(0, 3)))
    return reachable, composed, baseline, commands, profile


def _generate(reachable, composed, baseline, commands, profile, table=None):
    return generate_whitelist(reachable, composed, baseline, commands, profile, table)


def grow(rng: random.Random, reachable, composed, baseline, commands, profile):
    """One random addition: a reachable method, command, mapping entry or baseline name."""
    what = rng.randrange(5)
    reachable, commands = set(reachable), set(commands)
    entries = dict(composed.entries)
    pool_builtins = set(composed.pool_builtins)
    if what == 0 and set(entries) - reachable:
        reachable.add(rng.choice(sorted(set(entries) - reachable)))
    elif what == 1:
        commands.add(rng.choice(BINARIES))
    elif what == 2:
        m = rng.choice(METHODS)
        main, pool = entries.get(m, (frozenset(), frozenset()))
        entries[m] = (main | {rng.choice(NAMES)}, pool | ({rng.choice(NAMES)} if rng.random() < 0.5 else set()))
    elif what == 3:
        pool_builtins.add(rng.choice(sorted(entries)) if entries else METHODS[0])
    else:
        baseline = EngineBaseline(baseline.main | {rng.choice(NAMES)}, baseline.pool | {rng.choice(NAMES)})
    return reachable, ComposedMapping(entries, frozenset(pool_builtins)), baseline, commands, profile


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 10**9))
def test_whitelist_is_monotone(seed):
    rng = random.Random(seed)
    before = random_inputs(rng)
    after = grow(rng, *before)
    a, b = _generate(*before), _generate(*after)
    assert a.main <= b.main and a.pool <= b.pool


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**9))
def test_baseline_containment_and_provenance(seed):
    reachable, composed, baseline, commands, profile = random_inputs(random.Random(seed))
    wl = _generate(reachable, composed, baseline, commands, profile)
    assert baseline.main <= wl.main
    if wl.mode == "pool_required":
        assert baseline.pool <= wl.pool
    else:
        assert wl.pool == frozenset()
    for name in wl.main | wl.pool:
        assert wl.provenance[name]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**9))
def test_removing_all_sources_removes_the_syscall(seed):
    rng = random.Random(seed)
    reachable, composed, baseline, commands, profile = random_inputs(rng)
    wl = _generate(reachable, composed, baseline, commands, profile)
    if not wl.main:
        return
    name = rng.choice(sorted(wl.main))
    sources = wl.provenance[name]
    reachable = {m for m in reachable if f"builtin({m[0]}.{m[1]})" not in sources}
    commands = {c for c in commands if f"command({c})" not in sources}
    if BASELINE_SOURCE in sources:
        baseline = EngineBaseline(baseline.main - {name}, baseline.pool)
    again = _generate(reachable, composed, baseline, commands, profile)
    assert name not in again.main
