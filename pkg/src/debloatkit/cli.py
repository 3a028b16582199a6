"""Command-line pipeline.

Stages mirror the library: ``facts`` extracts the static relations,
``profile`` generates workload traces, ``analyze`` builds scopes and
predicted sets from those traces, ``train`` fits the per-scope trees,
``simulate`` runs one trace under the page-permission runtime, ``report``
aggregates suites, and ``fuzz`` runs the differential campaigns.

Artifacts (facts text, trace files, analysis/model/metrics JSON) are byte
deterministic for a given seed; timing lines go to stderr only.

Exit codes: 0 success/clean, 1 invalid input, 2 missing earlier stage
output (the message names the stage to run), 3 attack verdict, 4 fault
verdict, 5 malformed trace, 6 fuzz campaign found counterexamples,
7 usage error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

from . import fixtures as fixtures_mod
from .ensue import db_from_pairs, derive, parse_ensue, serialize_ensue
from .facts import extract_factbase, serialize_facts
from .ir import (
    MalformedTraceError,
    Program,
    ProgramError,
    load_program,
    parse_trace,
    program_to_json,
    serialize_trace,
)
from .predictor import fit_all, parse_model, serialize_model
from .scopes import analysis_from_json, analysis_to_json, analyze_program
from .simulator import (
    EXIT_CODES,
    PREDICT_MODEL,
    PREDICT_ORACLE,
    SimConfig,
    VERDICT_CLEAN,
    format_report,
    run,
    simulate_suite,
)
from .fuzzing import CAMPAIGNS, run_campaign
from .workload import AttackInjectionError, generate_workload, inject_attack

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_STAGE = 2
EXIT_FUZZ = 6
EXIT_USAGE = 7


class _UsageError(Exception):
    pass


class _StageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse default exits with 2
        raise _UsageError(message)


@contextmanager
def _timed(label: str):
    t0 = time.perf_counter()
    yield
    ms = (time.perf_counter() - t0) * 1000.0
    print(f"[time] {label}: {ms:.1f} ms", file=sys.stderr)


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _load_program(path: str, page_size: int | None) -> Program:
    fp = Path(path)
    if not fp.exists() and fp.suffix != ".json":
        fp = fp.with_suffix(".json")
    if not fp.exists():
        raise ProgramError(f"no program document at '{path}'")
    doc = json.loads(fp.read_text())
    if page_size is not None:
        if not isinstance(doc, dict) or "program" not in doc:
            raise ProgramError("document must contain a top-level 'program' object")
        doc["program"]["page_size"] = page_size
    return load_program(doc)


def _stage(path: str | None, what: str, produced_by: str) -> Path:
    if path is None:
        raise _StageError(
            f"missing {what}; run 'debloatkit {produced_by}' first and pass its output"
        )
    fp = Path(path)
    if not fp.exists():
        raise _StageError(
            f"{what} '{path}' does not exist; run 'debloatkit {produced_by}' first"
        )
    return fp


def _read_traces(dir_path: str, pattern: str = "*.txt", allow_empty: bool = False) -> list:
    root = _stage(dir_path, "trace directory", "profile")
    files = sorted(root.glob(pattern))
    if not files and not allow_empty:
        raise _StageError(
            f"no {pattern} trace files in '{dir_path}'; run 'debloatkit profile' first"
        )
    return [parse_trace(fp.read_text()) for fp in files]


def _cmd_facts(args: argparse.Namespace) -> int:
    p = _load_program(args.program, args.page_size)
    with _timed("extract facts"):
        fb = extract_factbase(p)
    text = serialize_facts(fb)
    _emit(text, args.out)
    if args.ensue_out is not None:
        with _timed("derive ensue"):
            db = derive(fb)
        Path(args.ensue_out).write_text(serialize_ensue(db))
        print(
            f"facts: {fb.count()} base, ensue: {db.n_ensue} pairs", file=sys.stderr
        )
    else:
        print(f"facts: {fb.count()} base relations", file=sys.stderr)
    return EXIT_OK


def _cmd_profile(args: argparse.Namespace) -> int:
    p = _load_program(args.program, args.page_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with _timed(f"generate {args.traces} traces"):
        traces = generate_workload(p, args.seed, args.traces)
    for n, t in enumerate(traces):
        (out / f"trace-{n:04d}.txt").write_text(serialize_trace(t))
    if args.attacks:
        db = derive(extract_factbase(p))
        prefer = p.workload.never_call if p.workload else frozenset()
        made = 0
        for n, t in enumerate(traces):
            if made >= args.attacks:
                break
            try:
                mutated, info = inject_attack(
                    t, p, args.seed + n, db=db, prefer_callees=prefer or None
                )
            except AttackInjectionError:
                continue
            (out / f"attack-{made:04d}.txt").write_text(serialize_trace(mutated))
            made += 1
        if made < args.attacks:
            print(
                f"warning: only {made} of {args.attacks} attack traces were "
                f"injectable",
                file=sys.stderr,
            )
        print(f"wrote {len(traces)} traces, {made} attacks to {out}", file=sys.stderr)
    else:
        print(f"wrote {len(traces)} traces to {out}", file=sys.stderr)
    return EXIT_OK


def _cmd_analyze(args: argparse.Namespace) -> int:
    p = _load_program(args.program, args.page_size)
    traces = _read_traces(args.traces, "trace-*.txt")
    with _timed("analyze scopes"):
        analysis = analyze_program(p, traces)
    _emit(json.dumps(analysis_to_json(analysis), indent=2, sort_keys=True) + "\n", args.out)
    print(analysis.report(p), file=sys.stderr, end="")
    return EXIT_OK


def _cmd_train(args: argparse.Namespace) -> int:
    p = _load_program(args.program, args.page_size)
    analysis = None
    if args.analysis is not None:
        analysis_fp = _stage(args.analysis, "analysis file", "analyze")
        analysis = analysis_from_json(json.loads(analysis_fp.read_text()))
    traces = _read_traces(args.traces, "trace-*.txt", allow_empty=True)
    if not traces:
        print(
            "warning: no trace-*.txt files to learn from; every scope gets "
            "the full-membership fallback",
            file=sys.stderr,
        )
    with _timed("train predictors"):
        model = fit_all(p, traces, seed=args.seed, analysis=analysis)
    _emit(serialize_model(model), args.out)
    trained = sum(1 for t in model.trees.values() if t is not None)
    print(
        f"trained {trained} trees, {len(model.trees) - trained} fallbacks",
        file=sys.stderr,
    )
    return EXIT_OK


def _sim_config(args: argparse.Namespace) -> SimConfig:
    return SimConfig(
        predictor=args.predictor,
        layout=args.layout,
        history=args.history,
        rp_mode=args.rp_mode,
    ).validated()


def _load_model_if_needed(args: argparse.Namespace):
    if args.predictor != PREDICT_MODEL:
        return None
    model_fp = _stage(args.model, "model file", "train")
    return parse_model(model_fp.read_text())


def _cmd_simulate(args: argparse.Namespace) -> int:
    p = _load_program(args.program, args.page_size)
    analysis_fp = _stage(args.analysis, "analysis file", "analyze")
    analysis = analysis_from_json(json.loads(analysis_fp.read_text()))
    model = _load_model_if_needed(args)
    trace = parse_trace(Path(args.trace).read_text())
    reference = None
    if args.reference is not None:
        reference = parse_trace(Path(args.reference).read_text())
    if args.ensue is not None:
        db = db_from_pairs(parse_ensue(Path(args.ensue).read_text()))
    else:
        db = derive(extract_factbase(p))
    if args.attack:
        if reference is None:
            reference = trace  # pre-injection trace doubles as the clean one
        prefer = p.workload.never_call if p.workload else frozenset()
        trace, info = inject_attack(
            trace, p, args.seed, db=db, prefer_callees=prefer or None
        )
        print(
            f"injected: callsite {info.callsite} -> '{info.callee}' "
            f"(after callsite {info.prev_callsite}, event {info.index})",
            file=sys.stderr,
        )
    elif reference is None and args.predictor == PREDICT_ORACLE:
        print(
            "note: oracle mode without --reference treats the input trace as "
            "its own clean reference",
            file=sys.stderr,
        )
    with _timed("simulate"):
        m = run(
            p,
            trace,
            analysis,
            db,
            model=model,
            config=_sim_config(args),
            reference=reference,
        )
    doc = {
        "verdict": m.verdict,
        "detail": m.detail,
        "events": m.n_events,
        "calls": m.n_calls,
        "predicts": m.predicts,
        "fallbacks": m.fallbacks,
        "rectifies": m.rectifies,
        "pct_rectifies": round(m.pct_rectifies, 4),
        "ensue_checks": m.ensue_checks,
        "surface_reduction": {
            "min": round(m.surface_min, 4),
            "avg": round(m.surface_avg, 4),
            "max": round(m.surface_max, 4),
        },
    }
    if args.out is not None:
        Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"verdict: {m.verdict} ({m.detail})")
    print(
        f"predicts={m.predicts} fallbacks={m.fallbacks} rectifies={m.rectifies} "
        f"({m.pct_rectifies:.1f}%) ensue_checks={m.ensue_checks}"
    )
    print(
        f"surface reduction: min={m.surface_min:.1f}% avg={m.surface_avg:.1f}% "
        f"max={m.surface_max:.1f}%"
    )
    return EXIT_CODES[m.verdict]


def _cmd_report(args: argparse.Namespace) -> int:
    p = _load_program(args.program, args.page_size)
    analysis_fp = _stage(args.analysis, "analysis file", "analyze")
    analysis = analysis_from_json(json.loads(analysis_fp.read_text()))
    model = _load_model_if_needed(args)
    db = derive(extract_factbase(p))
    config = _sim_config(args)
    reports = []
    clean = _read_traces(args.traces, "trace-*.txt")
    with _timed(f"simulate {len(clean)} clean traces"):
        reports.append(
            simulate_suite(
                p, clean, analysis, db, model=model, config=config, label="clean"
            )
        )
    attack_dir = args.attacks
    if attack_dir is not None:
        root = Path(attack_dir)
        files = sorted(root.glob("attack-*.txt")) if root.exists() else []
        if files:
            attacks = [parse_trace(fp.read_text()) for fp in files]
            with _timed(f"simulate {len(attacks)} attack traces"):
                reports.append(
                    simulate_suite(
                        p,
                        attacks,
                        analysis,
                        db,
                        model=model,
                        config=config,
                        label="attacks",
                    )
                )
        else:
            print(f"warning: no attack-*.txt files in '{attack_dir}'", file=sys.stderr)
    table = format_report(reports)
    _emit(table, args.out)
    if args.out is not None:
        sys.stdout.write(table)
    return EXIT_OK


def _cmd_fuzz(args: argparse.Namespace) -> int:
    jobs = args.jobs if args.jobs > 0 else min(4, os.cpu_count() or 1)
    result = run_campaign(
        args.campaign,
        n_cases=args.cases,
        seed=args.seed,
        out_dir=args.out,
        jobs=jobs,
    )
    print(result.summary())
    for ce in result.failures:
        print(f"  seed {ce.seed}: {ce.failure}")
    if result.failures and args.out:
        print(f"  reproducers written to {args.out}")
    return EXIT_FUZZ if result.failures else EXIT_OK


def _cmd_fixtures(args: argparse.Namespace) -> int:
    paths = fixtures_mod.write_fixture_files(args.out)
    for fp in paths:
        print(fp)
    return EXIT_OK


def _cmd_show(args: argparse.Namespace) -> int:
    p = _load_program(args.program, args.page_size)
    _emit(program_to_json(p), args.out)
    return EXIT_OK


def build_parser() -> _Parser:
    top = _Parser(
        prog="debloatkit",
        description="Predictive debloating pipeline: static call-pair "
        "derivation, scope analysis, callee-set prediction, and a "
        "page-permission runtime simulator.",
        epilog="exit codes: 0 success or clean verdict; 1 invalid input; "
        "2 missing earlier stage output; 3 attack verdict; 4 fault verdict; "
        "5 malformed trace; 6 fuzz counterexamples; 7 usage error",
    )
    top.add_argument("--page-size", type=int, default=None, help="override the program's page size")
    top.add_argument("--seed", type=int, default=0, help="seed for anything randomized")
    sub = top.add_subparsers(dest="command", required=True)

    # Same flags on the subcommands so they work in either position; argparse
    # only fills a default for a namespace attribute that is still missing,
    # so a value given before the subcommand survives.
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--page-size", type=int, default=None, help=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, default=0, help="seed for anything randomized")

    def add(name: str, help_: str):
        sp = sub.add_parser(name, help=help_, parents=[common])
        return sp

    sp = add("facts", "extract base relations and optionally the derived pair relation")
    sp.add_argument("program")
    sp.add_argument("--out", default=None, help="facts file (default stdout)")
    sp.add_argument("--ensue-out", default=None, help="also derive and write the pair relation")
    sp.set_defaults(fn=_cmd_facts)

    sp = add("profile", "generate seeded workload traces (and optional attack mutations)")
    sp.add_argument("program")
    sp.add_argument("--traces", type=int, default=20, help="number of traces")
    sp.add_argument("--attacks", type=int, default=0, help="also inject this many attack traces")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(fn=_cmd_profile)

    sp = add("analyze", "build prediction scopes, observed sets, and rectification points")
    sp.add_argument("program")
    sp.add_argument("--traces", required=True, help="directory of trace-*.txt files")
    sp.add_argument("--out", default=None, help="analysis JSON (default stdout)")
    sp.set_defaults(fn=_cmd_analyze)

    sp = add("train", "fit per-scope decision trees from profiling traces")
    sp.add_argument("program")
    sp.add_argument("--traces", required=True, help="directory of trace-*.txt files")
    sp.add_argument("--analysis", required=False, default=None, help="analysis JSON from 'analyze'")
    sp.add_argument("--out", default=None, help="model JSON (default stdout)")
    sp.set_defaults(fn=_cmd_train)

    def sim_flags(sp):
        sp.add_argument("--analysis", default=None, help="analysis JSON from 'analyze'")
        sp.add_argument("--model", default=None, help="model JSON from 'train'")
        sp.add_argument(
            "--predictor",
            choices=["model", "fallback", "adversarial", "oracle"],
            default="model",
        )
        sp.add_argument("--layout", choices=["declaration", "colocate"], default="declaration")
        sp.add_argument("--history", type=int, default=2, help="history buffer length (2..16)")
        sp.add_argument("--rp-mode", choices=["eager", "lazy"], default="eager")

    sp = add("simulate", "run one trace under the page-permission runtime")
    sp.add_argument("program")
    sp.add_argument("--trace", required=True, help="trace file")
    sp.add_argument("--reference", default=None, help="clean reference trace for oracle mode")
    sp.add_argument("--ensue", default=None, help="precomputed pair relation (default: derive)")
    sp.add_argument(
        "--attack",
        action="store_true",
        help="inject a seeded out-of-sequence call into the trace first",
    )
    sim_flags(sp)
    sp.add_argument("--out", default=None, help="metrics JSON file")
    sp.set_defaults(fn=_cmd_simulate)

    sp = add("report", "aggregate suite outcomes into a fixed-width table")
    sp.add_argument("program")
    sp.add_argument("--traces", required=True, help="directory of trace-*.txt files")
    sp.add_argument("--attacks", default=None, help="directory of attack-*.txt files")
    sim_flags(sp)
    sp.add_argument("--out", default=None, help="write the table here too")
    sp.set_defaults(fn=_cmd_report)

    sp = add("fuzz", "run a differential fuzzing campaign over generated programs")
    sp.add_argument("--campaign", choices=list(CAMPAIGNS), default="all")
    sp.add_argument(
        "--n", "--cases", dest="cases", type=int, default=30, help="number of cases"
    )
    sp.add_argument("--jobs", type=int, default=0, help="worker processes (0 = auto)")
    sp.add_argument("--out", default=None, help="directory for counterexample reproducers")
    sp.set_defaults(fn=_cmd_fuzz)

    sp = add("fixtures", "write the built-in example programs as JSON documents")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(fn=_cmd_fixtures)

    sp = add("show", "parse, validate, and reprint a program document")
    sp.add_argument("program")
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=_cmd_show)

    return top


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.fn(args)
    except _StageError as e:
        print(f"stage error: {e}", file=sys.stderr)
        return EXIT_STAGE
    except MalformedTraceError as e:
        print(f"malformed trace: {e}", file=sys.stderr)
        return EXIT_CODES["malformed"]
    except (ProgramError, ValueError, NotImplementedError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
