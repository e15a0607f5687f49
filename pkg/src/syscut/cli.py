"""Command-line entry point (``syscut``)."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from syscut import __version__
from syscut._jsonio import dumps, read_json, write_json
from syscut.corpus import BuiltinRegistry, load_corpus, load_registry
from syscut.enforce import DEFAULT_POOL_SIZE, evaluate_payloads, load_events, load_payloads, payload_table, simulate
from syscut.errors import SyscutError
from syscut.jscg import CallGraph, load_trace
from syscut.mapping import load_mapping_db
from syscut.native_cg import NativeCallGraph
from syscut.nir import parse_nir
from syscut.pipeline import (
    ARTIFACTS,
    PipelineConfig,
    run_pipeline,
    stage_app_cg,
    stage_map,
    stage_native,
    stage_usage,
    stage_whitelist,
)
from syscut.policy import Whitelist, compute_metrics, emit_policy, load_policy
from syscut.syscalls import data_path, load_baseline, load_profile, load_table

logger = logging.getLogger("syscut")


def _table(args: argparse.Namespace):
    return load_table(args.table or data_path("syscalls_x86_64.tsv"))


def _emit(payload, output: str | None) -> None:
    if output:
        write_json(output, payload)
    else:
        sys.stdout.write(dumps(payload))


def cmd_cg_js(args: argparse.Namespace) -> int:
    graph = load_corpus(args.corpus)
    registry = BuiltinRegistry() if args.no_registry else load_registry(args.registry or data_path("registry.json"))
    trace = load_trace(args.trace, graph.module_ids) if args.trace else None
    cg = stage_app_cg(graph, registry, trace)
    _emit(cg.to_json(), args.output)
    return 0


def cmd_cg_native(args: argparse.Namespace) -> int:
    native = stage_native(parse_nir(args.nir), not args.no_refine)
    out = Path(args.output_dir)
    write_json(out / ARTIFACTS["native_base"], native.base.to_json())
    write_json(out / ARTIFACTS["native_refined"], native.refined.to_json())
    write_json(out / ARTIFACTS["clones"], native.report.to_json())
    write_json(out / ARTIFACTS["nir_refined"], native.refined_program.to_json())
    print(f"{len(native.report.clones)} clones, {len(native.report.indeterminate)} context-insensitive sites")
    return 0


def cmd_map(args: argparse.Namespace) -> int:
    builtin_cg = CallGraph.from_json(read_json(args.builtin_cg, "builtin call graph"))
    program = parse_nir(args.nir)
    refined = NativeCallGraph.from_json(read_json(args.native_cg, "native call graph"))
    db, _, resolution = stage_map(builtin_cg, program, refined, _table(args), args.strict)
    if args.resolution_output:
        write_json(args.resolution_output, resolution)
    _emit(db, args.output)
    return 0


def cmd_whitelist(args: argparse.Namespace) -> int:
    table = _table(args)
    graph = load_corpus(args.corpus)
    app_cg = CallGraph.from_json(read_json(args.app_cg, "application call graph"))
    composed = load_mapping_db(args.mapping)
    trace = load_trace(args.trace, graph.module_ids) if args.trace else None
    baseline = load_baseline(args.baseline or data_path("engine_baseline.json"), table)
    profile = load_profile(args.profile, table) if args.profile else {}
    usage = stage_usage(graph, app_cg, composed, trace)
    wl = stage_whitelist(usage, composed, baseline, profile, table, args.strict)
    _emit(wl.to_json(), args.output)
    return 0


def cmd_metrics(args: argparse.Namespace) -> int:
    wl = Whitelist.from_json(read_json(args.whitelist, "whitelist"))
    metrics = compute_metrics(wl, _table(args))
    if args.output:
        write_json(args.output, metrics.to_json())
    print(metrics.summary())
    return 0


def cmd_emit(args: argparse.Namespace) -> int:
    wl = Whitelist.from_json(read_json(args.whitelist, "whitelist"))
    advisory = None
    if args.fs_root:
        advisory = {"root_dir": args.fs_root, "read_only": args.fs_read_only}
    policy = emit_policy(wl, advisory)
    _emit(policy.to_json(), args.output)
    if args.rules:
        Path(args.rules).parent.mkdir(parents=True, exist_ok=True)
        Path(args.rules).write_text(policy.to_rules(), encoding="utf-8")
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    policy = load_policy(args.policy)
    table = load_table(args.table) if args.table else None
    verdicts = simulate(policy, load_events(args.events), table)
    if args.output:
        write_json(args.output, {"verdicts": [v.to_json() for v in verdicts]})
    for v in verdicts:
        status = "allowed" if v.allowed else f"killed (filter {v.denied_by}, {v.filter_label})"
        print(f"event {v.event}: thread {v.thread} {v.name} {status}")
    killed = sum(not v.allowed for v in verdicts)
    print(f"{killed}/{len(verdicts)} killed")
    return 0


def cmd_payloads(args: argparse.Namespace) -> int:
    policy = load_policy(args.policy)
    payloads = load_payloads(args.payloads or data_path("payloads.json"))
    table = load_table(args.table) if args.table else None
    results = evaluate_payloads(policy, payloads, args.thread, table, args.pool_size)
    if args.output:
        write_json(args.output, {"results": [r.to_json() for r in results]})
    sys.stdout.write(payload_table(results))
    return 0


def cmd_pipeline(args: argparse.Namespace) -> int:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    for key in ("corpus", "builtin_corpus", "nir", "registry", "table", "baseline", "trace", "profile", "payloads"):
        value = getattr(args, key)
        if value is not None:
            setattr(cfg, key, Path(value))
    if args.output_dir:
        cfg.output_dir = Path(args.output_dir)
    if args.strict is not None:
        cfg.strict = args.strict
    if args.no_refine:
        cfg.refine = False
    if args.no_registry:
        cfg.use_registry = False
    if args.pool_size is not None:
        cfg.pool_size = args.pool_size
    result = run_pipeline(cfg)
    for key, path in result.artifacts.items():
        logger.info("wrote %s: %s", key, path)
    sys.stdout.write(result.summary)
    return 0


def cmd_js2ast(args: argparse.Namespace) -> int:
    from syscut.jsparse import parse_js

    source = Path(args.input).read_text(encoding="utf-8")
    _emit(parse_js(source, args.input), args.output)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="syscut", description="Syscall whitelists for Node.js applications.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    mode = argparse.ArgumentParser(add_help=False)
    group = mode.add_mutually_exclusive_group()
    group.add_argument("--strict", dest="strict", action="store_true", default=None,
                       help="treat unresolved or unmapped items as errors (default)")
    group.add_argument("--permissive", dest="strict", action="store_false",
                       help="over-approximate unresolved items instead of failing")

    table = argparse.ArgumentParser(add_help=False)
    table.add_argument("--table", help="syscall table TSV (default: shipped x86_64 table)")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cg-js", help="build a JavaScript call graph")
    p.add_argument("--corpus", required=True, help="corpus manifest JSON")
    p.add_argument("--registry", help="builtin execution-pattern registry")
    p.add_argument("--no-registry", action="store_true", help="skip builtin-pattern edges")
    p.add_argument("--trace", help="dynamic trace to merge")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_cg_js)

    p = sub.add_parser("cg-native", help="build baseline and refined native call graphs")
    p.add_argument("--nir", required=True)
    p.add_argument("--no-refine", action="store_true", help="skip clone-based refinement")
    p.add_argument("-o", "--output-dir", required=True)
    p.set_defaults(func=cmd_cg_native)

    p = sub.add_parser("map", parents=[mode, table], help="build the mapping database")
    p.add_argument("--builtin-cg", required=True)
    p.add_argument("--nir", required=True, help="refined NIR program")
    p.add_argument("--native-cg", required=True, help="refined native call graph")
    p.add_argument("--resolution-output", help="also write per-function syscall sets")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("whitelist", parents=[mode, table], help="generate per-thread whitelists")
    p.add_argument("--corpus", required=True)
    p.add_argument("--app-cg", required=True)
    p.add_argument("--mapping", required=True)
    p.add_argument("--baseline")
    p.add_argument("--trace")
    p.add_argument("--profile")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_whitelist)

    p = sub.add_parser("metrics", parents=[table], help="attack-surface metrics for a whitelist")
    p.add_argument("--whitelist", required=True)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("emit", help="emit the policy document and rules export")
    p.add_argument("--whitelist", required=True)
    p.add_argument("--fs-root", help="root directory for the filesystem advisory block")
    p.add_argument("--fs-read-only", action="store_true")
    p.add_argument("-o", "--output")
    p.add_argument("--rules", help="write the textual rules export here")
    p.set_defaults(func=cmd_emit)

    p = sub.add_parser("simulate", help="simulate filters over an event trace")
    p.add_argument("--policy", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--table", help="canonicalize names through this table")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("payloads", help="evaluate attack payloads against a policy")
    p.add_argument("--policy", required=True)
    p.add_argument("--payloads", help="payload set JSON (default: shipped categories)")
    p.add_argument("--thread", type=int, default=0, help="injection thread id")
    p.add_argument("--pool-size", type=int, default=DEFAULT_POOL_SIZE)
    p.add_argument("--table")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_payloads)

    p = sub.add_parser("pipeline", parents=[mode, table], help="run every stage")
    p.add_argument("--config", help="pipeline config JSON; paths are relative to it")
    for flag in ("corpus", "builtin-corpus", "nir", "registry", "baseline", "trace", "profile", "payloads"):
        p.add_argument(f"--{flag}")
    p.add_argument("-o", "--output-dir")
    p.add_argument("--no-refine", action="store_true")
    p.add_argument("--no-registry", action="store_true")
    p.add_argument("--pool-size", type=int)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("js2ast", help="parse JavaScript into ESTree JSON (needs esprima)")
    p.add_argument("input")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_js2ast)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    if getattr(args, "strict", None) is None and args.func is not cmd_pipeline:
        args.strict = True
    try:
        return args.func(args)
    except SyscutError as exc:
        print(f"syscut: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"syscut: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
