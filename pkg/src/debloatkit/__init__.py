"""Predictive program debloating toolkit.

Pipeline, end to end: load a program document (:mod:`debloatkit.ir`),
extract the static call-order relations and derive which callsite pairs can
ever be adjacent (:mod:`debloatkit.facts`, :mod:`debloatkit.ensue`), find
prediction scopes and rectification points from profiling traces
(:mod:`debloatkit.scopes`), train per-scope decision trees
(:mod:`debloatkit.predictor`), and replay traces under a page-permission
runtime that separates tolerable mispredictions from attacks
(:mod:`debloatkit.simulator`).  Trace generation, attack injection, random
program generation, and fuzzing campaigns support testing and evaluation.
"""
from .ensue import (
    EnsueDb,
    OracleBudgetError,
    check_pair,
    db_from_pairs,
    derive,
    estimate_sequences,
    oracle_ensue,
    parse_ensue,
    serialize_ensue,
)
from .facts import FactBase, extract_factbase, parse_facts, serialize_facts, solve_flow
from .fixtures import chooser, fixture_names, hotcold, load_fixture
from .ir import (
    MalformedTraceError,
    Program,
    ProgramError,
    Trace,
    load_program,
    parse_trace,
    program_to_json,
    read_program,
    serialize_program,
    serialize_trace,
)
from .loops import compute_loops
from .predictor import (
    DecisionTree,
    PredictorModel,
    Sample,
    fit_all,
    parse_model,
    serialize_model,
    train,
)
from .randprog import GenSpec, generate_program
from .scopes import (
    AnalysisResult,
    Pscg,
    RectificationPoint,
    Scg,
    analysis_from_json,
    analysis_to_json,
    analyze_program,
    enumerate_pscgs,
    find_scg_entries,
    instrument_at_rps,
    iter_activations,
)
from .simulator import (
    Layout,
    Metrics,
    PageMap,
    SimConfig,
    SuiteReport,
    format_report,
    layout_functions,
    run,
    simulate_suite,
)
from .workload import (
    AttackInfo,
    AttackInjectionError,
    generate_workload,
    inject_attack,
    validate_trace,
)

__version__ = "0.1.0"

__all__ = [
    "AnalysisResult",
    "AttackInfo",
    "AttackInjectionError",
    "DecisionTree",
    "EnsueDb",
    "FactBase",
    "GenSpec",
    "Layout",
    "MalformedTraceError",
    "Metrics",
    "OracleBudgetError",
    "PageMap",
    "PredictorModel",
    "Program",
    "ProgramError",
    "Pscg",
    "RectificationPoint",
    "Sample",
    "Scg",
    "SimConfig",
    "SuiteReport",
    "Trace",
    "analysis_from_json",
    "analysis_to_json",
    "analyze_program",
    "check_pair",
    "chooser",
    "compute_loops",
    "db_from_pairs",
    "derive",
    "enumerate_pscgs",
    "estimate_sequences",
    "extract_factbase",
    "find_scg_entries",
    "fit_all",
    "fixture_names",
    "format_report",
    "generate_program",
    "generate_workload",
    "hotcold",
    "inject_attack",
    "instrument_at_rps",
    "iter_activations",
    "layout_functions",
    "load_fixture",
    "load_program",
    "oracle_ensue",
    "parse_ensue",
    "parse_facts",
    "parse_model",
    "parse_trace",
    "program_to_json",
    "read_program",
    "run",
    "serialize_ensue",
    "serialize_facts",
    "serialize_model",
    "serialize_program",
    "serialize_trace",
    "simulate_suite",
    "solve_flow",
    "train",
    "validate_trace",
]
