"""Derivation of the ensue relation: which callsite may directly follow which.

Two callsites i, j stand in ``ensue(i, j)`` when some valid execution runs j
immediately after i (no other callsite in between), flattened across function
boundaries.  The derivation works bottom-up over the base facts with one
auxiliary recursive relation:

* ``last(f, i)``: i can be the final callsite pushed before an invocation of
  f finishes, looking through nested calls.

  - last(f, i)  <=  tail(f, i), belong(i, g), leaf(g)
  - last(f, i)  <=  tail(f, j), belong(j, g), last(g, i)

* ``ensue(i, j)``:

  - ensue(i, j) <=  head(f, j),    belong(i, f)
  - ensue(i, j) <=  next(g, i, j), belong(i, f), leaf(f)
  - ensue(i, j) <=  next(g, k, j), belong(k, f), last(f, i)

``last`` is evaluated semi-naively (only freshly derived tuples re-fire the
recursive rule); ``ensue`` does not feed back into anything and is computed
in a single pass over specialized indexes afterwards.  No general Datalog
interpreter is involved.

``oracle_ensue`` is the independent ground truth used by the test suite: it
exhaustively enumerates whole-program call sequences under explicit loop and
recursion bounds and reports every adjacent pair it ever observes.
"""
from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable

from .facts import FactBase
from .ir import Function, Program, ROOT_CALLSITE


@dataclass
class EnsueDb:
    """Derived relations plus bookkeeping for reports.

    ``ensue`` is a map from callsite id to the frozen set of callsites that
    may immediately follow it, which makes the runtime pair check a single
    hash probe.
    """

    ensue: dict[int, frozenset[int]]
    last: frozenset[tuple[str, int]]
    n_facts: int
    derive_seconds: float = 0.0

    @property
    def n_ensue(self) -> int:
        return sum(len(s) for s in self.ensue.values())

    def pairs(self) -> set[tuple[int, int]]:
        return {(i, j) for i, js in self.ensue.items() for j in js}


def check_pair(db: EnsueDb, i: int, j: int) -> bool:
    """True when ensue(i, j) was derived; unknown ids fail closed."""
    return j in db.ensue.get(i, ())


def db_from_pairs(pairs: Iterable[tuple[int, int]]) -> EnsueDb:
    """EnsueDb over an explicit pair set (e.g. a parsed relation file)."""
    out: dict[int, set[int]] = {}
    for i, j in pairs:
        out.setdefault(i, set()).add(j)
    return EnsueDb(
        ensue={i: frozenset(js) for i, js in out.items()},
        last=frozenset(),
        n_facts=0,
    )


def derive(fb: FactBase) -> EnsueDb:
    """Bottom-up evaluation of ``last`` and ``ensue`` from the base facts."""
    t0 = time.perf_counter()
    callees_of: dict[int, set[str]] = {}
    sites_into: dict[str, set[int]] = {}
    for i, f in fb.belong:
        callees_of.setdefault(i, set()).add(f)
        sites_into.setdefault(f, set()).add(i)
    tail_by_site: dict[int, set[str]] = {}
    for f, j in fb.tail:
        tail_by_site.setdefault(j, set()).add(f)

    last: set[tuple[str, int]] = set()
    delta: list[tuple[str, int]] = []
    for f, i in fb.tail:
        if any(g in fb.leaf for g in callees_of.get(i, ())):
            if (f, i) not in last:
                last.add((f, i))
                delta.append((f, i))
    while delta:
        g, i = delta.pop()
        for j in sites_into.get(g, ()):
            for f in tail_by_site.get(j, ()):
                if (f, i) not in last:
                    last.add((f, i))
                    delta.append((f, i))

    last_by_fn: dict[str, set[int]] = {}
    for f, i in last:
        last_by_fn.setdefault(f, set()).add(i)

    out: dict[int, set[int]] = {}
    for f, j in fb.head:
        for i in sites_into.get(f, ()):
            out.setdefault(i, set()).add(j)
    for _, i, j in fb.next:
        if any(g in fb.leaf for g in callees_of.get(i, ())):
            out.setdefault(i, set()).add(j)
    for _, k, j in fb.next:
        for g in callees_of.get(k, ()):
            for i in last_by_fn.get(g, ()):
                out.setdefault(i, set()).add(j)

    return EnsueDb(
        ensue={i: frozenset(js) for i, js in out.items()},
        last=frozenset(last),
        n_facts=fb.count(),
        derive_seconds=time.perf_counter() - t0,
    )


def serialize_ensue(db: EnsueDb) -> str:
    lines = [f"ensue({i}, {j})." for i, j in sorted(db.pairs())]
    return "\n".join(lines) + "\n"


def parse_ensue(text: str) -> set[tuple[int, int]]:
    pairs: set[tuple[int, int]] = set()
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if not (line.startswith("ensue(") and line.endswith(").")):
            raise ValueError(f"not an ensue line: {line!r}")
        i, j = line[len("ensue(") : -2].split(",")
        pairs.add((int(i), int(j)))
    return pairs


class OracleBudgetError(RuntimeError):
    """The exhaustive enumeration exceeded its step budget."""


class _Budget:
    __slots__ = ("left",)

    def __init__(self, steps: int):
        self.left = steps

    def spend(self, n: int = 1) -> None:
        self.left -= n
        if self.left < 0:
            raise OracleBudgetError("call-sequence enumeration exceeded its budget")


def _cfg_paths(f: Function, loop_bound: int, budget: _Budget) -> list[tuple[int, ...]]:
    """All entry-to-exit callsite sequences of one function.

    Every CFG edge may be traversed at most max(1, loop_bound) times per
    path, which bounds each loop to ``loop_bound`` iterations without
    needing any loop analysis.
    """
    cap = max(1, loop_bound)
    results: list[tuple[int, ...]] = []
    seen: set[tuple[int, ...]] = set()

    def walk(block_id: str, edge_counts: Counter, acc: list[int]) -> None:
        budget.spend()
        block = f.block(block_id)
        if block.callsite is not None:
            acc = acc + [block.callsite.id]
        if not block.successors:
            t = tuple(acc)
            if t not in seen:
                seen.add(t)
                results.append(t)
            return
        for s in block.successors:
            edge = (block_id, s)
            if edge_counts[edge] >= cap:
                continue
            edge_counts[edge] += 1
            walk(s, edge_counts, acc)
            edge_counts[edge] -= 1

    walk(f.entry_block, Counter(), [])
    return results


def oracle_ensue(
    p: Program,
    loop_bound: int = 2,
    rec_bound: int = 2,
    budget: int = 1_000_000,
) -> set[tuple[int, int]]:
    """Ground-truth adjacent pairs from exhaustive sequence enumeration.

    Enumerates every whole-program call sequence reachable with each loop
    taken at most ``loop_bound`` times and each function appearing at most
    ``rec_bound`` times on the call stack, then returns all adjacent
    (callsite, callsite) pairs.  Raises OracleBudgetError past ``budget``
    enumeration steps.
    """
    b = _Budget(budget)
    path_cache: dict[str, list[tuple[int, ...]]] = {}

    def paths(fn_id: str) -> list[tuple[int, ...]]:
        if fn_id not in path_cache:
            path_cache[fn_id] = _cfg_paths(p.function(fn_id), loop_bound, b)
        return path_cache[fn_id]

    # Sequences must be materialized before the caller's remaining path is
    # expanded: the recursion bound has to count call-chain ancestors only,
    # never sibling invocations that already returned.  Results are memoized
    # on the visible stack context (counts clamp at rec_bound, beyond which
    # they are indistinguishable).
    memo: dict[tuple, list[tuple[int, ...]]] = {}

    def sequences(fn_id: str, stack: Counter) -> list[tuple[int, ...]]:
        key = (
            fn_id,
            frozenset((g, min(c, rec_bound)) for g, c in stack.items() if c > 0),
        )
        hit = memo.get(key)
        if hit is not None:
            return hit
        stack[fn_id] += 1
        try:
            out: list[tuple[int, ...]] = []
            for path in paths(fn_id):
                out.extend(_expand(path, 0, (), stack))
        finally:
            stack[fn_id] -= 1
        memo[key] = out
        return out

    def _expand(
        path: tuple[int, ...], idx: int, acc: tuple[int, ...], stack: Counter
    ) -> list[tuple[int, ...]]:
        b.spend()
        if idx == len(path):
            return [acc]
        site = path[idx]
        _, _, cs = p.callsite_map[site]
        out: list[tuple[int, ...]] = []
        for callee in cs.callees:
            if stack[callee] >= rec_bound:
                continue
            for sub in sequences(callee, stack):
                out.extend(_expand(path, idx + 1, acc + (site,) + sub, stack))
        return out

    pairs: set[tuple[int, int]] = set()
    for seq in sequences(p.entry, Counter()):
        full = (ROOT_CALLSITE,) + seq
        for a, z in zip(full, full[1:]):
            pairs.add((a, z))
    return pairs


def estimate_sequences(p: Program, loop_bound: int = 2) -> int:
    """Upper-bound estimate of the oracle's sequence count (cheap arithmetic).

    Used by the random-program generator to reject instances whose exhaustive
    enumeration would blow the budget.  Saturates at 10**12.
    """
    cap = 10**12

    @lru_cache(maxsize=None)
    def per_fn(fn_id: str) -> int:
        f = p.function(fn_id)
        try:
            fn_paths = _cfg_paths(f, loop_bound, _Budget(200_000))
        except OracleBudgetError:
            return cap
        total = 0
        for path in fn_paths:
            combo = 1
            for site in path:
                _, _, cs = p.callsite_map[site]
                options = 0
                for callee in cs.callees:
                    options += per_fn(callee) if callee != fn_id else 1
                combo = min(cap, combo * max(1, options))
            total = min(cap, total + combo)
        return max(total, 1)

    # Break recursion cycles crudely: treat self-recursive expansion as 1.
    try:
        return per_fn(p.entry)
    except RecursionError:
        return cap
