"""Trace generation and attack injection.

``generate_workload`` walks a program's CFGs with a seeded policy and records
the events a profiling build would log: prediction-scope entries with their
feature vectors, calls, and returns.  Branch and callee choices default to a
pure function of the current argument vector (salted per block), so feature
to behavior correlations exist for training; fixture documents can pin exact
rules through their workload section.

``inject_attack`` mutates a valid trace by inserting a call whose adjacent
callsite pair violates the derived ensue relation, modeling a control-flow
hijack that the runtime's history check must catch.
"""
from __future__ import annotations

import random
import zlib
from dataclasses import dataclass

from .ensue import EnsueDb, check_pair, derive
from .facts import extract_factbase
from .ir import (
    Call,
    Callsite,
    EnterScg,
    Function,
    MalformedTraceError,
    Program,
    Return,
    Trace,
    TraceEvent,
)
from .loops import FunctionLoops, compute_loops
from .scopes import (
    ATTACH_FRAME,
    FUNCTION_ENTRY,
    LOOP_PREHEADER,
    Scg,
    find_scg_entries,
)

MAX_LOOP_ITERS = 3
MAX_CALL_DEPTH = 16
# Loop iterations multiply across call depth, so unchecked generation can
# produce traces in the gigabytes; past this many events the walker clamps
# loop budgets and call depth (choices stay legal, traces stay well formed).
EVENT_SOFT_CAP = 50_000


def _salt(fn_id: str, block_id: str) -> int:
    return zlib.crc32(f"{fn_id}/{block_id}".encode())


@dataclass
class _Ctx:
    p: Program
    rng: random.Random
    forests: dict[str, FunctionLoops]
    fn_entry_scgs: dict[str, Scg]
    loop_scgs: dict[tuple[str, str], Scg]
    site_scgs: dict[int, Scg]
    events: list[TraceEvent]
    depth: dict[str, int]
    dists: dict[str, dict[str, int]]

    def sample_args(self, fn_id: str, caller_args: tuple[int, ...]) -> tuple[int, ...]:
        spec = self.p.workload
        if spec and fn_id in spec.arg_choices:
            choices = spec.arg_choices[fn_id]
            weights = [w for _, w in choices]
            return self.rng.choices([c for c, _ in choices], weights=weights, k=1)[0]
        params = self.p.function(fn_id).params
        if not params:
            return (0,)
        if len(caller_args) == len(params):
            return caller_args
        return tuple(self.rng.randint(0, 9) for _ in params)

    def choose_callee(
        self, fn_id: str, cs: Callsite, args: tuple[int, ...]
    ) -> str:
        options = list(cs.callees)
        spec = self.p.workload
        if spec and spec.never_call:
            trimmed = [c for c in options if c not in spec.never_call]
            if trimmed:
                options = trimmed
        cap = MAX_CALL_DEPTH if len(self.events) < EVENT_SOFT_CAP else 1
        in_budget = [c for c in options if self.depth.get(c, 0) < cap]
        if in_budget:
            options = in_budget
        else:
            options = [min(options, key=lambda c: self.depth.get(c, 0))]
        salt = _salt(fn_id, f"cs{cs.id}")
        return options[(args[salt % len(args)] + salt) % len(options)]


def _distances_to_exit(f: Function) -> dict[str, int]:
    dist = {b: len(f.blocks) + 1 for b in f.block_map}
    work = [(x, 0) for x in f.exit_blocks]
    for x in f.exit_blocks:
        dist[x] = 0
    while work:
        block, d = work.pop(0)
        for pred in f.block(block).predecessors:
            if dist[pred] > d + 1:
                dist[pred] = d + 1
                work.append((pred, d + 1))
    return dist


def _pick_successor(
    ctx: _Ctx,
    f: Function,
    block_id: str,
    args: tuple[int, ...],
    allowed: list[str],
) -> str:
    if len(allowed) == 1:
        return allowed[0]
    spec = ctx.p.workload
    rule = spec.branch_rules.get((f.id, block_id)) if spec else None
    if rule is not None:
        if rule.kind == "goto" and rule.then_block in allowed:
            return rule.then_block
        if rule.kind == "threshold":
            want = (
                rule.then_block
                if args[rule.feature % len(args)] < rule.less_than
                else rule.else_block
            )
            if want in allowed:
                return want
    salt = _salt(f.id, block_id)
    return allowed[(args[salt % len(args)] + salt) % len(allowed)]


def _emit_call(ctx: _Ctx, fn_id: str, cs: Callsite, args: tuple[int, ...]) -> None:
    callee = ctx.choose_callee(fn_id, cs, args)
    callee_args = ctx.sample_args(callee, args)
    site_scg = ctx.site_scgs.get(cs.id)
    if site_scg is not None and site_scg.attach != ATTACH_FRAME:
        ctx.events.append(EnterScg(entry=site_scg.id, features=callee_args))
    fe = ctx.fn_entry_scgs.get(callee)
    if fe is not None:
        ctx.events.append(EnterScg(entry=fe.id, features=callee_args))
    ctx.events.append(Call(callsite=cs.id, callee=callee))
    _run_function(ctx, callee, callee_args)
    ctx.events.append(Return(function=callee))


def _run_function(ctx: _Ctx, fn_id: str, args: tuple[int, ...]) -> None:
    f = ctx.p.function(fn_id)
    forest = ctx.forests[fn_id]
    dist = ctx.dists.get(fn_id)
    if dist is None:
        dist = ctx.dists[fn_id] = _distances_to_exit(f)
    ctx.depth[fn_id] = ctx.depth.get(fn_id, 0) + 1
    try:
        serial = 0
        active: dict[str, int] = {}  # loop header -> activation serial
        budgets: dict[str, int] = {}  # loop header -> iterations left
        fired: set[tuple[int, int]] = set()  # (scg id, serial): in-loop cache
        block_id = f.entry_block
        entered_from: str | None = None
        steps = 0
        limit = 40 * len(f.blocks) * MAX_LOOP_ITERS + 100
        while True:
            steps += 1
            loop = forest.by_header.get(block_id)
            if loop is not None:
                came_from_inside = entered_from is not None and entered_from in loop.body
                if not came_from_inside:
                    serial += 1
                    active[block_id] = serial
                    salt = _salt(f.id, f"iters:{block_id}")
                    budgets[block_id] = 1 + (args[salt % len(args)] + salt) % MAX_LOOP_ITERS
                    if len(ctx.events) >= EVENT_SOFT_CAP:
                        budgets[block_id] = 1
                    scg = ctx.loop_scgs.get((f.id, block_id))
                    if scg is not None:
                        ctx.events.append(EnterScg(entry=scg.id, features=args))
                else:
                    budgets[block_id] -= 1
            block = f.block(block_id)
            if block.callsite is not None:
                cs = block.callsite
                site_scg = ctx.site_scgs.get(cs.id)
                if site_scg is not None and site_scg.attach == ATTACH_FRAME:
                    # Cached inside its innermost loop: one prediction per
                    # loop activation, pages stay active for the frame.
                    loops_here = forest.block_to_loops.get(block_id, ())
                    key_serial = active.get(loops_here[0].header, 0) if loops_here else 0
                    callee_args = args
                    if (site_scg.id, key_serial) not in fired:
                        fired.add((site_scg.id, key_serial))
                        ctx.events.append(
                            EnterScg(entry=site_scg.id, features=args)
                        )
                _emit_call(ctx, fn_id, cs, args)
            if not block.successors:
                return
            allowed = list(block.successors)
            discouraged: set[str] = set()
            for s in allowed:
                # Back edge into a loop whose iteration budget ran out.
                back_loop = forest.by_header.get(s)
                if (
                    back_loop is not None
                    and block_id in back_loop.body
                    and budgets.get(s, 0) <= 1
                ):
                    discouraged.add(s)
                # At an exhausted header, steer toward the loop exit.
                here = forest.by_header.get(block_id)
                if (
                    here is not None
                    and budgets.get(block_id, 0) <= 0
                    and s in here.body
                ):
                    discouraged.add(s)
            trimmed = [s for s in allowed if s not in discouraged]
            if trimmed:
                allowed = trimmed
            if steps > limit:
                allowed = [min(allowed, key=lambda s: dist[s])]
            entered_from = block_id
            block_id = _pick_successor(ctx, f, block_id, args, allowed)
    finally:
        ctx.depth[fn_id] -= 1


def generate_workload(p: Program, seed: int, n: int) -> list[Trace]:
    """Generate ``n`` valid traces, deterministic in ``seed``.

    Every trace starts with the entry scope's instrumentation hit and the
    root call, and its flattened callsite sequence respects the program's
    derived ensue relation.
    """
    forests = compute_loops(p)
    scgs = find_scg_entries(p, forests)
    fn_entry_scgs = {s.function: s for s in scgs if s.kind == FUNCTION_ENTRY}
    loop_scgs = {
        (s.function, s.location): s for s in scgs if s.kind == LOOP_PREHEADER
    }
    site_scgs = {
        int(s.location): s
        for s in scgs
        if s.kind not in (FUNCTION_ENTRY, LOOP_PREHEADER)
    }
    traces: list[Trace] = []
    for i in range(n):
        ctx = _Ctx(
            p=p,
            rng=random.Random(seed * 1_000_003 + i),
            forests=forests,
            fn_entry_scgs=fn_entry_scgs,
            loop_scgs=loop_scgs,
            site_scgs=site_scgs,
            events=[],
            depth={},
            dists={},
        )
        entry_args = ctx.sample_args(p.entry, ())
        root = fn_entry_scgs[p.entry]
        ctx.events.append(EnterScg(entry=root.id, features=entry_args))
        ctx.events.append(Call(callsite=p.root_callsite, callee=p.entry))
        _run_function(ctx, p.entry, entry_args)
        ctx.events.append(Return(function=p.entry))
        traces.append(Trace(events=tuple(ctx.events)))
    return traces


def validate_trace(p: Program, t: Trace) -> None:
    """Raise MalformedTraceError on nesting or callsite-binding violations."""
    stack: list[str] = []
    for n, ev in enumerate(t.events):
        if isinstance(ev, Call):
            if ev.callsite == p.root_callsite:
                if ev.callee != p.entry:
                    raise MalformedTraceError(
                        f"event {n}: root call must target '{p.entry}'"
                    )
            else:
                site = p.callsite_map.get(ev.callsite)
                if site is None:
                    raise MalformedTraceError(f"event {n}: unknown callsite {ev.callsite}")
                host, _, cs = site
                if ev.callee not in cs.callees:
                    raise MalformedTraceError(
                        f"event {n}: callsite {ev.callsite} cannot call '{ev.callee}'"
                    )
                if not stack or stack[-1] != host:
                    raise MalformedTraceError(
                        f"event {n}: callsite {ev.callsite} lives in '{host}' "
                        f"but the open frame is '{stack[-1] if stack else None}'"
                    )
            stack.append(ev.callee)
        elif isinstance(ev, Return):
            if not stack or stack[-1] != ev.function:
                raise MalformedTraceError(
                    f"event {n}: return from '{ev.function}' does not match "
                    f"the open frame"
                )
            stack.pop()
    if stack:
        raise MalformedTraceError(f"trace ends with {len(stack)} unclosed frames")


class AttackInjectionError(ValueError):
    """The program admits no ensue-violating pair to inject."""


@dataclass(frozen=True)
class AttackInfo:
    index: int  # position of the injected event in the mutated trace
    prev_callsite: int
    callsite: int
    callee: str


def inject_attack(
    t: Trace,
    p: Program,
    seed: int,
    db: EnsueDb | None = None,
    prefer_callees: frozenset[str] | None = None,
) -> tuple[Trace, AttackInfo]:
    """Insert one call event breaking the ensue relation.

    The injected event goes right after an existing call, so the adjacent
    (previous callsite, injected callsite) pair is invalid by construction;
    the callsite/callee binding itself stays legal.  ``prefer_callees``
    biases target selection (e.g. toward dynamically dormant functions).
    """
    if db is None:
        db = derive(extract_factbase(p))
    rng = random.Random(seed)
    positions = [
        (n, ev.callsite) for n, ev in enumerate(t.events) if isinstance(ev, Call)
    ]
    sites = list(p.iter_callsites())
    candidates: list[tuple[int, int, int, str]] = []
    preferred: list[tuple[int, int, int, str]] = []
    for n, prev in positions:
        for _, _, cs in sites:
            if check_pair(db, prev, cs.id):
                continue
            for callee in cs.callees:
                row = (n, prev, cs.id, callee)
                candidates.append(row)
                if prefer_callees and callee in prefer_callees:
                    preferred.append(row)
    pool = preferred or candidates
    if not pool:
        raise AttackInjectionError(
            "program admits no ensue-violating callsite pair to inject"
        )
    n, prev, cs_id, callee = pool[rng.randrange(len(pool))]
    events = list(t.events)
    events.insert(n + 1, Call(callsite=cs_id, callee=callee))
    return (
        Trace(events=tuple(events)),
        AttackInfo(index=n + 1, prev_callsite=prev, callsite=cs_id, callee=callee),
    )
