"""Prediction scopes, observed callee sets, and rectification points.

A sub-callgraph (SCG) is the statically reachable function set gated by one
prediction point.  Prediction points are placed where dynamic behavior makes
static reachability too coarse:

* ``function-entry``: the program entry always gets one (baseline coverage),
  and any function with an irreducible CFG gets one as the documented
  fallback for undetectable loops.
* ``loop-preheader``: one per interprocedurally outermost natural loop, over
  the closure of everything callable from the loop body.
* ``loop-enclosed-callsite``: a callsite entering a recursion cycle from
  outside (recursion has no preheader to instrument).
* ``indirect-callsite``: every indirect callsite; the static callgraph
  cannot resolve these, so they are always instrumented, and inside loops
  their activations are cached for the whole enclosing frame.

A predicted sub-callgraph (PSCG) is a function set actually observed within
one dynamic activation of an SCG, with dense integer ids ordered by
descending support.  A rectification point (RP) is a callsite inside the
PSCG whose possible callees leave it; hitting one at runtime activates the
rest of the SCG after the call-history check passes.  Callsites on the SCG
boundary (loop-body callsites, the gated callsite itself, callers of a
function-entry scope) act as the same kind of gate when the prediction does
not cover their callee; they are tracked separately from RPs because their
caller sits outside the predicted set.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .ir import Call, EnterScg, Program, Return, Trace
from .loops import FunctionLoops, compute_loops

FUNCTION_ENTRY = "function-entry"
LOOP_PREHEADER = "loop-preheader"
LOOP_ENCLOSED_CALLSITE = "loop-enclosed-callsite"
INDIRECT_CALLSITE = "indirect-callsite"

ATTACH_FRAME = "frame"  # activation lives until the current frame returns
ATTACH_NEXT_CALL = "next_call"  # activation lives until the gated call returns


@dataclass(frozen=True)
class Scg:
    """One prediction scope: entry point plus its static reachable set."""

    id: int
    kind: str
    function: str  # host function (or target function for function-entry)
    location: str  # block id, callsite id as text, or "entry"
    functions: frozenset[str]
    entry_callsites: frozenset[int]
    attach: str
    feature_function: str  # whose arguments form the feature vector

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.kind, self.function, self.location)


@dataclass(frozen=True)
class Pscg:
    scg: int
    id: int
    functions: frozenset[str]
    support: int


@dataclass(frozen=True)
class RectificationPoint:
    scg: int
    pscg: int
    callsite: int
    caller: str
    outside: frozenset[str]  # callees not covered by the prediction
    rectify: frozenset[str]  # SCG minus PSCG, activated on a hit


def _tarjan_sccs(graph: dict[str, frozenset[str]], nodes: Iterable[str]) -> list[set[str]]:
    index: dict[str, int] = {}
    low: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    out: list[set[str]] = []
    counter = [0]

    def strongconnect(v: str) -> None:
        work = [(v, iter(sorted(graph.get(v, ()))))]
        index[v] = low[v] = counter[0]
        counter[0] += 1
        stack.append(v)
        on_stack.add(v)
        while work:
            node, it = work[-1]
            advanced = False
            for w in it:
                if w not in graph:
                    continue
                if w not in index:
                    index[w] = low[w] = counter[0]
                    counter[0] += 1
                    stack.append(w)
                    on_stack.add(w)
                    work.append((w, iter(sorted(graph.get(w, ())))))
                    advanced = True
                    break
                if w in on_stack:
                    low[node] = min(low[node], index[w])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[node])
            if low[node] == index[node]:
                scc: set[str] = set()
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    scc.add(w)
                    if w == node:
                        break
                out.append(scc)

    for v in sorted(nodes):
        if v not in index:
            strongconnect(v)
    return out


def _recursive_functions(p: Program, reachable: frozenset[str]) -> frozenset[str]:
    graph = {f: p.callgraph[f] & reachable for f in reachable}
    rec: set[str] = set()
    for scc in _tarjan_sccs(graph, reachable):
        if len(scc) > 1:
            rec |= scc
    for f in reachable:
        if f in p.callgraph[f]:
            rec.add(f)
    return frozenset(rec)


def _open_functions(
    p: Program, reachable: frozenset[str], forests: dict[str, FunctionLoops]
) -> frozenset[str]:
    """Functions reachable from the entry without crossing a loop-resident
    callsite.  Loops in any other function are already gated by an ancestor
    loop scope, making them interprocedurally non-outermost."""
    open_fns: set[str] = set()
    work = [p.entry]
    while work:
        fn = work.pop()
        if fn in open_fns or fn not in reachable:
            continue
        open_fns.add(fn)
        forest = forests[fn]
        for b in p.function(fn).blocks:
            if b.callsite is None or forest.in_loop(b.id):
                continue
            work.extend(c for c in b.callsite.callees if c not in open_fns)
    return frozenset(open_fns)


def find_scg_entries(
    p: Program, forests: dict[str, FunctionLoops] | None = None
) -> tuple[Scg, ...]:
    """All prediction scopes of a program, deterministically ordered.

    The entry function's scope always comes first with id 0.
    """
    forests = forests if forests is not None else compute_loops(p)
    reachable = p.reachable_closure({p.entry})
    recursive = _recursive_functions(p, reachable)
    open_fns = _open_functions(p, reachable, forests)
    fn_order = {f.id: n for n, f in enumerate(p.functions)}

    raw: list[tuple[tuple[int, int, int], dict]] = []

    def fentry(fn: str, rank: int) -> None:
        callers = {
            cs.id
            for _, _, cs in p.iter_callsites()
            if fn in cs.callees
        }
        if fn == p.entry:
            callers.add(p.root_callsite)
        raw.append(
            (
                (rank, fn_order[fn], -1),
                dict(
                    kind=FUNCTION_ENTRY,
                    function=fn,
                    location="entry",
                    functions=p.reachable_closure({fn}),
                    entry_callsites=frozenset(callers),
                    attach=ATTACH_NEXT_CALL,
                    feature_function=fn,
                ),
            )
        )

    fentry(p.entry, 0)
    for f in p.functions:
        if f.id in reachable and forests[f.id].irreducible and f.id != p.entry:
            fentry(f.id, 1)

    for f in p.functions:
        if f.id not in reachable or f.id not in open_fns:
            continue
        forest = forests[f.id]
        block_order = {b.id: n for n, b in enumerate(f.blocks)}
        for loop in sorted(forest.outermost, key=lambda l: block_order[l.header]):
            body_sites = [
                b.callsite
                for b in f.blocks
                if b.id in loop.body and b.callsite is not None
            ]
            roots = {c for cs in body_sites for c in cs.callees}
            if not roots:
                continue
            raw.append(
                (
                    (2, fn_order[f.id], block_order[loop.header]),
                    dict(
                        kind=LOOP_PREHEADER,
                        function=f.id,
                        location=loop.header,
                        functions=p.reachable_closure(roots),
                        entry_callsites=frozenset(cs.id for cs in body_sites),
                        attach=ATTACH_FRAME,
                        feature_function=f.id,
                    ),
                )
            )

    claimed: set[int] = set()
    for fn_id, block_id, cs in p.iter_callsites():
        if fn_id not in reachable:
            continue
        forest = forests[fn_id]
        in_loop = forest.in_loop(block_id)
        entry_fn = cs.callees[0]
        if cs.is_indirect:
            kind = INDIRECT_CALLSITE
            attach = ATTACH_FRAME if in_loop else ATTACH_NEXT_CALL
        else:
            enters_recursion = any(
                c in recursive and fn_id not in recursive for c in cs.callees
            )
            if not enters_recursion or in_loop:
                continue
            kind = LOOP_ENCLOSED_CALLSITE
            attach = ATTACH_NEXT_CALL
        if cs.id in claimed:
            continue
        claimed.add(cs.id)
        raw.append(
            (
                (3 if kind == LOOP_ENCLOSED_CALLSITE else 4, fn_order[fn_id], cs.id),
                dict(
                    kind=kind,
                    function=fn_id,
                    location=str(cs.id),
                    functions=p.reachable_closure(set(cs.callees)),
                    entry_callsites=frozenset({cs.id}),
                    attach=attach,
                    feature_function=entry_fn,
                ),
            )
        )

    raw.sort(key=lambda item: item[0])
    return tuple(Scg(id=n, **spec) for n, (_, spec) in enumerate(raw))


@dataclass(frozen=True)
class ActivationSample:
    """One dynamic activation window reconstructed from a trace."""

    scg: int
    features: tuple[int, ...]
    executed: frozenset[str]  # intersected with the scope's function set
    start: int
    end: int


def iter_activations(
    p: Program, scgs: Sequence[Scg], trace: Trace
) -> list[ActivationSample]:
    """Reconstruct activation windows via call-stack nesting.

    Frame-attached activations close when the frame that was current at the
    entry event returns; call-attached ones close when the immediately
    following call returns.  Tolerates truncated traces by closing leftover
    windows at the end, so it is safe on mutated and attack traces.
    """
    by_id = {s.id: s for s in scgs}
    records: list[dict] = []
    frames: list[list[int]] = [[]]
    pending: list[int] = []
    samples: list[ActivationSample] = []

    def close(rec_idx: int, end: int) -> None:
        rec = records[rec_idx]
        if rec["open"]:
            rec["open"] = False
            scg = rec["scg"]
            samples.append(
                ActivationSample(
                    scg=scg.id,
                    features=rec["features"],
                    executed=frozenset(rec["executed"]) & scg.functions,
                    start=rec["start"],
                    end=end,
                )
            )

    for idx, ev in enumerate(trace.events):
        if isinstance(ev, EnterScg):
            scg = by_id.get(ev.entry)
            if scg is None:
                continue
            records.append(
                {"scg": scg, "features": ev.features, "executed": set(), "start": idx, "open": True}
            )
            if scg.attach == ATTACH_FRAME:
                frames[-1].append(len(records) - 1)
            else:
                pending.append(len(records) - 1)
        elif isinstance(ev, Call):
            frames.append(pending)
            pending = []
            for rec in records:
                if rec["open"]:
                    rec["executed"].add(ev.callee)
        elif isinstance(ev, Return):
            if pending:
                frames[-1].extend(pending)
                pending = []
            if len(frames) > 1:
                for rec_idx in frames.pop():
                    close(rec_idx, idx)
    end = len(trace.events)
    for rec_idx in range(len(records)):
        close(rec_idx, end)
    return samples


def enumerate_pscgs(
    p: Program, scgs: Sequence[Scg], traces: Iterable[Trace]
) -> dict[int, tuple[Pscg, ...]]:
    """Observed function sets per scope, ids dense by descending support.

    Ties between equally supported sets break on the sorted set contents.
    Scopes never entered by any trace map to an empty tuple; the predictor
    falls back to the full SCG for those.
    """
    counts: dict[int, Counter] = {s.id: Counter() for s in scgs}
    for t in traces:
        for sample in iter_activations(p, scgs, t):
            counts[sample.scg][sample.executed] += 1
    out: dict[int, tuple[Pscg, ...]] = {}
    for scg_id, counter in counts.items():
        ordered = sorted(
            counter.items(), key=lambda kv: (-kv[1], tuple(sorted(kv[0])))
        )
        out[scg_id] = tuple(
            Pscg(scg=scg_id, id=n, functions=fns, support=support)
            for n, (fns, support) in enumerate(ordered)
        )
    return out


def instrument_at_rps(p: Program, scg: Scg, pscg: Pscg) -> tuple[RectificationPoint, ...]:
    """Place rectification points for one predicted set.

    Depth-first over the PSCG's member functions, every callsite with some
    possible callee outside the predicted set becomes an RP; indirect
    callsites count if any single target escapes.  The rectify set is the
    whole SCG remainder, activated at the first hit, after which the
    activation's other RPs are disabled.
    """
    rectify = scg.functions - pscg.functions
    points: list[RectificationPoint] = []
    seen: set[str] = set()
    stack = sorted(pscg.functions, reverse=True)
    while stack:
        fn_id = stack.pop()
        if fn_id in seen or fn_id not in pscg.functions:
            continue
        seen.add(fn_id)
        f = p.function(fn_id)
        for b in f.blocks:
            if b.callsite is None:
                continue
            outside = frozenset(b.callsite.callees) - pscg.functions
            if outside:
                points.append(
                    RectificationPoint(
                        scg=scg.id,
                        pscg=pscg.id,
                        callsite=b.callsite.id,
                        caller=fn_id,
                        outside=outside,
                        rectify=rectify,
                    )
                )
            for callee in b.callsite.callees:
                if callee in pscg.functions and callee not in seen:
                    stack.append(callee)
    points.sort(key=lambda rp: rp.callsite)
    return tuple(points)


def boundary_gate_callsites(
    p: Program, scg: Scg, predicted: frozenset[str]
) -> frozenset[int]:
    """Entry-boundary callsites that must gate a given predicted set.

    These sit outside the predicted set (their caller is not a member), so
    they are not rectification points in the reported sense, but the runtime
    treats them identically: a call through one to an unpredicted member of
    the SCG triggers the history check and, on success, rectification.
    """
    gates: set[int] = set()
    for cs_id in scg.entry_callsites:
        if cs_id == p.root_callsite:
            continue
        _, _, cs = p.callsite_map[cs_id]
        if any(c in scg.functions and c not in predicted for c in cs.callees):
            gates.add(cs_id)
    return frozenset(gates)


def runtime_gates(
    p: Program, scg: Scg, predicted: frozenset[str]
) -> frozenset[int]:
    """All callsites that may rectify an activation predicted as ``predicted``:
    the rectification points proper plus the entry-boundary gates."""
    sites: set[int] = set()
    for fn_id in predicted:
        if fn_id not in scg.functions:
            continue
        for b in p.function(fn_id).blocks:
            if b.callsite is None:
                continue
            if any(c in scg.functions and c not in predicted for c in b.callsite.callees):
                sites.add(b.callsite.id)
    return frozenset(sites) | boundary_gate_callsites(p, scg, predicted)


@dataclass
class AnalysisResult:
    """Static scopes plus trace-derived predicted sets and their RPs."""

    program: str
    scgs: tuple[Scg, ...]
    pscgs: dict[int, tuple[Pscg, ...]]
    rps: dict[tuple[int, int], tuple[RectificationPoint, ...]]

    def scg(self, scg_id: int) -> Scg:
        return self.scgs[scg_id]

    def rp_edge_fraction(self, p: Program) -> float:
        """Share of callgraph edges carrying at least one RP, in percent."""
        edges = {
            (cs.id, callee)
            for _, _, cs in p.iter_callsites()
            for callee in cs.callees
        }
        if not edges:
            return 0.0
        rp_edges = {
            (rp.callsite, callee)
            for rps in self.rps.values()
            for rp in rps
            for callee in rp.outside
        }
        return 100.0 * len(rp_edges & edges) / len(edges)

    def report(self, p: Program) -> str:
        lines = [f"analysis of {self.program}"]
        for s in self.scgs:
            lines.append(
                f"  scg {s.id}: kind={s.kind} at {s.function}/{s.location} "
                f"|functions|={len(s.functions)}"
            )
            for ps in self.pscgs.get(s.id, ()):
                n_rps = len(self.rps.get((s.id, ps.id), ()))
                members = ",".join(sorted(ps.functions))
                lines.append(
                    f"    pscg {ps.id}: support={ps.support} rps={n_rps} {{{members}}}"
                )
            if not self.pscgs.get(s.id):
                lines.append("    (never entered; full-set fallback)")
        lines.append(f"  rp edge coverage: {self.rp_edge_fraction(p):.1f}% of callgraph edges")
        return "\n".join(lines) + "\n"


def analyze_program(p: Program, traces: Sequence[Trace]) -> AnalysisResult:
    scgs = find_scg_entries(p)
    pscgs = enumerate_pscgs(p, scgs, traces)
    rps: dict[tuple[int, int], tuple[RectificationPoint, ...]] = {}
    for s in scgs:
        for ps in pscgs[s.id]:
            rps[(s.id, ps.id)] = instrument_at_rps(p, s, ps)
    return AnalysisResult(program=p.name, scgs=scgs, pscgs=pscgs, rps=rps)


def analysis_to_json(a: AnalysisResult) -> dict:
    return {
        "program": a.program,
        "scgs": [
            {
                "id": s.id,
                "kind": s.kind,
                "function": s.function,
                "location": s.location,
                "functions": sorted(s.functions),
                "entry_callsites": sorted(s.entry_callsites),
                "attach": s.attach,
                "feature_function": s.feature_function,
            }
            for s in a.scgs
        ],
        "pscgs": {
            str(scg_id): [
                {"id": ps.id, "functions": sorted(ps.functions), "support": ps.support}
                for ps in pscgs
            ]
            for scg_id, pscgs in a.pscgs.items()
        },
        "rps": {
            f"{scg_id}/{pscg_id}": [
                {
                    "callsite": rp.callsite,
                    "caller": rp.caller,
                    "outside": sorted(rp.outside),
                    "rectify": sorted(rp.rectify),
                }
                for rp in rps
            ]
            for (scg_id, pscg_id), rps in a.rps.items()
        },
    }


def analysis_from_json(doc: dict) -> AnalysisResult:
    scgs = tuple(
        Scg(
            id=sd["id"],
            kind=sd["kind"],
            function=sd["function"],
            location=sd["location"],
            functions=frozenset(sd["functions"]),
            entry_callsites=frozenset(sd["entry_callsites"]),
            attach=sd["attach"],
            feature_function=sd["feature_function"],
        )
        for sd in doc["scgs"]
    )
    pscgs = {
        int(scg_id): tuple(
            Pscg(
                scg=int(scg_id),
                id=pd["id"],
                functions=frozenset(pd["functions"]),
                support=pd["support"],
            )
            for pd in plist
        )
        for scg_id, plist in doc["pscgs"].items()
    }
    rps: dict[tuple[int, int], tuple[RectificationPoint, ...]] = {}
    for key, rplist in doc["rps"].items():
        scg_id, pscg_id = (int(x) for x in key.split("/"))
        scg = next(s for s in scgs if s.id == scg_id)
        rps[(scg_id, pscg_id)] = tuple(
            RectificationPoint(
                scg=scg_id,
                pscg=pscg_id,
                callsite=rd["callsite"],
                caller=rd["caller"],
                outside=frozenset(rd["outside"]),
                rectify=frozenset(rd["rectify"]),
            )
            for rd in rplist
        )
    return AnalysisResult(program=doc["program"], scgs=scgs, pscgs=pscgs, rps=rps)
