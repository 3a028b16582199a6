"""Differential fuzzing campaigns over generated programs.

Four campaigns, each seeded and reproducible:

* ``equality``: on generated programs whose non-leaf functions call on every
  path, the derived call-pair relation must equal the exhaustively
  enumerated one exactly (both directions).
* ``soundness``: on messier programs (loops, recursion, indirect calls),
  every adjacent callsite pair of every generated trace must be derived,
  and enumeration within a small budget must never find an underived pair.
* ``attack``: end-to-end pipeline check; valid traces must simulate clean
  and traces with an injected invalid call targeting a dormant function
  must end in an attack or fault verdict, never clean.
* ``all`` (the default): equality where enumeration fits the budget, trace
  soundness, and replay of valid traces under the fallback and the
  always-wrong predictor, which must stay clean and leave page refcounts
  balanced.

Failures are shrunk greedily (dropping functions, emptying bodies, and
trimming indirect callee lists while the failure reproduces) and written
out as standalone reproducer documents.
"""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import Callable

from .ensue import OracleBudgetError, check_pair, derive, oracle_ensue
from .facts import extract_factbase
from .ir import Program, ProgramError, load_program, serialize_program
from .predictor import fit_all
from .randprog import MODE_ACYCLIC, MODE_CYCLIC, GenSpec, generate_program
from .scopes import analyze_program
from .simulator import (
    SimConfig,
    VERDICT_ATTACK,
    VERDICT_CLEAN,
    VERDICT_FAULT,
)
from .simulator import run as simulate
from .workload import AttackInjectionError, generate_workload, inject_attack

CAMPAIGNS = ("all", "equality", "soundness", "attack")


class SkipCase(Exception):
    """The generated case cannot exercise the property (not a failure)."""


@dataclass(frozen=True)
class Counterexample:
    campaign: str
    seed: int
    failure: str
    program: dict


@dataclass
class CampaignResult:
    campaign: str
    cases: int
    skipped: int
    failures: list[Counterexample]

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        state = "PASS" if self.passed else "FAIL"
        return (
            f"{state} {self.campaign}: {self.cases} cases, "
            f"{self.skipped} skipped, {len(self.failures)} failures"
        )


def check_equality(
    p: Program, loop_bound: int = 2, rec_bound: int = 2, budget: int = 400_000
) -> str | None:
    derived = set(derive(extract_factbase(p)).pairs())
    try:
        oracle = set(
            oracle_ensue(p, loop_bound=loop_bound, rec_bound=rec_bound, budget=budget)
        )
    except OracleBudgetError as e:
        raise SkipCase(str(e)) from e
    missing = sorted(oracle - derived)
    if missing:
        return f"unsound: realizable pairs missing from derived: {missing[:8]}"
    extra = sorted(derived - oracle)
    if extra:
        return f"imprecise: derived pairs not realizable: {extra[:8]}"
    return None


def check_soundness(p: Program, seed: int, n_traces: int = 25) -> str | None:
    db = derive(extract_factbase(p))
    for tn, t in enumerate(generate_workload(p, seed, n_traces)):
        seq = t.call_sequence()
        for a, b in zip(seq, seq[1:]):
            if not check_pair(db, a, b):
                return f"trace {tn}: executed pair ({a}, {b}) is not derived"
    try:
        oracle = set(oracle_ensue(p, loop_bound=1, rec_bound=1, budget=60_000))
    except OracleBudgetError:
        oracle = set()
    missing = sorted(oracle - set(db.pairs()))
    if missing:
        return f"enumerated pairs missing from derived: {missing[:8]}"
    return None


def check_attack(p: Program, seed: int) -> str | None:
    """Clean traces stay clean; rogue-targeted injections never do."""
    traces = generate_workload(p, seed, 40)
    analysis = analyze_program(p, traces)
    model = fit_all(p, traces, analysis=analysis)
    db = derive(extract_factbase(p))
    rogues = p.workload.never_call if p.workload else frozenset()
    config = SimConfig()
    injected_any = False
    for tn, t in enumerate(traces[:10]):
        m = simulate(p, t, analysis, db, model=model, config=config)
        if m.verdict != VERDICT_CLEAN:
            return f"false positive: valid trace {tn} got {m.verdict} ({m.detail})"
        mutated = None
        for sub in range(12):
            try:
                cand, info = inject_attack(
                    t, p, seed * 331 + sub, db=db, prefer_callees=rogues or None
                )
            except AttackInjectionError:
                break
            if not rogues or info.callee in rogues:
                mutated = (cand, info)
                break
        if mutated is None:
            continue
        injected_any = True
        cand, info = mutated
        m2 = simulate(p, cand, analysis, db, model=model, config=config)
        if m2.verdict not in (VERDICT_ATTACK, VERDICT_FAULT):
            return (
                f"undetected attack: trace {tn}, injected callsite "
                f"{info.callsite} -> '{info.callee}' got {m2.verdict} ({m2.detail})"
            )
    if not injected_any:
        raise SkipCase("no dormant-target injection possible for this program")
    return None


def check_replay(p: Program, seed: int, n_traces: int = 6) -> str | None:
    """Valid traces stay clean under every predictor, refcounts balance."""
    traces = generate_workload(p, seed, n_traces)
    analysis = analyze_program(p, traces)
    db = derive(extract_factbase(p))
    for mode in ("fallback", "adversarial"):
        config = SimConfig(predictor=mode)
        for tn, t in enumerate(traces):
            m = simulate(p, t, analysis, db, config=config)
            if m.verdict != VERDICT_CLEAN:
                return f"{mode}: valid trace {tn} got {m.verdict} ({m.detail})"
            if not m.refcount_neutral:
                return f"{mode}: trace {tn} left page refcounts unbalanced"
    return None


def check_all(p: Program, seed: int) -> str | None:
    try:
        failure = check_equality(p)
    except SkipCase:
        failure = None  # enumeration over budget; the other checks still run
    if failure is None:
        failure = check_soundness(p, seed, n_traces=10)
    if failure is None:
        failure = check_replay(p, seed)
    return failure


def _gen_for(campaign: str, seed: int) -> Program:
    if campaign in ("equality", "all"):
        mode = MODE_ACYCLIC if seed % 2 == 0 else MODE_CYCLIC
        return generate_program(seed, GenSpec(mode=mode), max_paths=20_000)
    if campaign == "soundness":
        return generate_program(
            seed, GenSpec(mode=MODE_CYCLIC, allow_recursion=True)
        )
    if campaign == "attack":
        return generate_program(
            seed, GenSpec(mode=MODE_ACYCLIC, page_isolated=True, rogue=2)
        )
    raise ValueError(f"unknown campaign '{campaign}'; have {', '.join(CAMPAIGNS)}")


def _checker_for(campaign: str, seed: int) -> Callable[[Program], str | None]:
    if campaign == "equality":
        return check_equality
    if campaign == "soundness":
        return partial(check_soundness, seed=seed)
    if campaign == "all":
        return partial(check_all, seed=seed)
    return partial(check_attack, seed=seed)


def run_case(campaign: str, seed: int) -> tuple[str, str, dict | None]:
    """One fuzz case: returns (status, detail, failing program document)."""
    try:
        p = _gen_for(campaign, seed)
    except ValueError as e:
        return ("skip", f"generation rejected: {e}", None)
    try:
        failure = _checker_for(campaign, seed)(p)
    except SkipCase as e:
        return ("skip", str(e), None)
    if failure is not None:
        return ("fail", failure, serialize_program(p))
    return ("pass", "", None)


def shrink(
    doc: dict, checker: Callable[[Program], str | None], max_trials: int = 150
) -> dict:
    """Greedy structural reduction keeping the failure alive."""
    trials = 0

    def still_fails(candidate: dict) -> bool:
        nonlocal trials
        if trials >= max_trials:
            return False
        trials += 1
        try:
            p = load_program(json.loads(json.dumps(candidate)))
        except ProgramError:
            return False
        try:
            return checker(p) is not None
        except SkipCase:
            return False

    def drop_function(d: dict, idx: int) -> dict:
        trial = json.loads(json.dumps(d))
        fns = trial["program"]["functions"]
        name = fns[idx]["name"]
        del fns[idx]
        wl = trial["program"].get("workload", {})
        if name in wl.get("args", {}):
            del wl["args"][name]
        if name in wl.get("never_call", []):
            wl["never_call"].remove(name)
        wl["branches"] = [b for b in wl.get("branches", []) if b.get("function") != name]
        return trial

    def empty_body(d: dict, idx: int) -> dict:
        trial = json.loads(json.dumps(d))
        f = trial["program"]["functions"][idx]
        stub = f"{f['name']}_b0"
        f["blocks"] = [{"id": stub, "succ": []}]
        f["entry_block"] = stub
        f["exit_blocks"] = [stub]
        wl = trial["program"].get("workload", {})
        wl["branches"] = [
            b for b in wl.get("branches", []) if b.get("function") != f["name"]
        ]
        return trial

    changed = True
    while changed and trials < max_trials:
        changed = False
        fns = doc["program"]["functions"]
        for i in range(len(fns) - 1, 0, -1):
            trial = drop_function(doc, i)
            if still_fails(trial):
                doc = trial
                changed = True
                break
        if changed:
            continue
        for i in range(len(fns) - 1, -1, -1):
            if len(fns[i]["blocks"]) <= 1:
                continue
            trial = empty_body(doc, i)
            if still_fails(trial):
                doc = trial
                changed = True
                break
        if changed:
            continue
        for i, f in enumerate(fns):
            for bn, b in enumerate(f["blocks"]):
                site = b.get("callsite")
                if not site or len(site.get("callees", [])) < 2:
                    continue
                for cn in range(len(site["callees"]) - 1, -1, -1):
                    trial = json.loads(json.dumps(doc))
                    tsite = trial["program"]["functions"][i]["blocks"][bn]["callsite"]
                    del tsite["callees"][cn]
                    if len(tsite["callees"]) == 1:
                        tsite["kind"] = "direct"
                    if still_fails(trial):
                        doc = trial
                        changed = True
                        break
                if changed:
                    break
            if changed:
                break
    return doc


def run_campaign(
    campaign: str,
    n_cases: int = 30,
    seed: int = 0,
    out_dir: str | Path | None = None,
    jobs: int = 1,
    shrink_failures: bool = True,
) -> CampaignResult:
    if campaign not in CAMPAIGNS:
        raise ValueError(f"unknown campaign '{campaign}'; have {', '.join(CAMPAIGNS)}")
    seeds = [seed + i for i in range(n_cases)]
    worker = partial(run_case, campaign)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(worker, seeds))
    else:
        outcomes = [worker(s) for s in seeds]

    result = CampaignResult(campaign=campaign, cases=n_cases, skipped=0, failures=[])
    for case_seed, (status, detail, pdoc) in zip(seeds, outcomes):
        if status == "skip":
            result.skipped += 1
            continue
        if status == "pass":
            continue
        doc = {"program": pdoc["program"]} if pdoc and "program" in pdoc else pdoc
        if doc and shrink_failures:
            doc = shrink(doc, _checker_for(campaign, case_seed))
        ce = Counterexample(
            campaign=campaign, seed=case_seed, failure=detail, program=doc or {}
        )
        result.failures.append(ce)
        if out_dir is not None:
            root = Path(out_dir)
            root.mkdir(parents=True, exist_ok=True)
            fp = root / f"counterexample-{campaign}-{case_seed}.json"
            fp.write_text(
                json.dumps(
                    {
                        "campaign": campaign,
                        "seed": case_seed,
                        "failure": detail,
                        "program": doc.get("program", {}),
                    },
                    indent=2,
                )
                + "\n"
            )
    return result
