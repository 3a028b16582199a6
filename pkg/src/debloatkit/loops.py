"""Natural-loop detection over function CFGs.

Loops are discovered from back edges under a dominator analysis: an edge
u -> h is a back edge when h dominates u, and the natural loop of h is the
set of blocks that reach u without passing through h.  Retreating edges whose
target does not dominate their source mark the CFG as irreducible; such
functions get no loop forest and are instead treated as a single prediction
scope at their own entry by the scope builder.

Headers that lack a dedicated preheader block (a unique out-of-loop
predecessor whose only successor is the header) get a virtual preheader
descriptor instead of a synthesized block, keeping programs immutable; every
consumer only needs to know where "entering the loop from outside" happens.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

from .ir import Function, Program


@dataclass(frozen=True)
class Preheader:
    """Where a loop is entered from outside: a real block or a virtual one."""

    block: str
    virtual: bool

    def describe(self) -> str:
        return f"virtual({self.block})" if self.virtual else self.block


@dataclass(frozen=True)
class Loop:
    header: str
    body: frozenset[str]  # includes the header
    preheader: Preheader
    parent: str | None = None  # header of the innermost enclosing loop

    @property
    def is_outermost(self) -> bool:
        return self.parent is None


@dataclass(frozen=True)
class FunctionLoops:
    function: str
    loops: tuple[Loop, ...]
    irreducible: bool = False

    @cached_property
    def by_header(self) -> dict[str, Loop]:
        return {l.header: l for l in self.loops}

    @cached_property
    def outermost(self) -> tuple[Loop, ...]:
        return tuple(l for l in self.loops if l.is_outermost)

    @cached_property
    def block_to_loops(self) -> dict[str, tuple[Loop, ...]]:
        """Block id -> loops containing it, innermost first."""
        out: dict[str, list[Loop]] = {}
        for l in sorted(self.loops, key=lambda l: len(l.body)):
            for b in l.body:
                out.setdefault(b, []).append(l)
        return {k: tuple(v) for k, v in out.items()}

    def in_loop(self, block: str) -> bool:
        return block in self.block_to_loops


def _postorder(f: Function) -> list[str]:
    order: list[str] = []
    seen: set[str] = set()
    stack: list[tuple[str, int]] = [(f.entry_block, 0)]
    seen.add(f.entry_block)
    while stack:
        block, i = stack[-1]
        succ = f.block(block).successors
        if i < len(succ):
            stack[-1] = (block, i + 1)
            nxt = succ[i]
            if nxt not in seen:
                seen.add(nxt)
                stack.append((nxt, 0))
        else:
            order.append(block)
            stack.pop()
    return order


def dominators(f: Function) -> dict[str, set[str]]:
    """Full dominator sets per block, by round-robin intersection to fixpoint."""
    rpo = list(reversed(_postorder(f)))
    all_blocks = set(rpo)
    dom: dict[str, set[str]] = {b: set(all_blocks) for b in rpo}
    dom[f.entry_block] = {f.entry_block}
    changed = True
    while changed:
        changed = False
        for b in rpo:
            if b == f.entry_block:
                continue
            preds = [p for p in f.block(b).predecessors if p in all_blocks]
            new = set.intersection(*(dom[p] for p in preds)) if preds else set()
            new.add(b)
            if new != dom[b]:
                dom[b] = new
                changed = True
    return dom


def _natural_loop(f: Function, header: str, latches: list[str]) -> frozenset[str]:
    body = {header}
    work = [l for l in latches]
    while work:
        b = work.pop()
        if b in body:
            continue
        body.add(b)
        work.extend(f.block(b).predecessors)
    return frozenset(body)


def _find_preheader(f: Function, header: str, body: frozenset[str]) -> Preheader:
    outside = [p for p in f.block(header).predecessors if p not in body]
    if len(outside) == 1 and f.block(outside[0]).successors == (header,):
        return Preheader(block=outside[0], virtual=False)
    return Preheader(block=f"{header}.pre", virtual=True)


def compute_loops_for(f: Function) -> FunctionLoops:
    dom = dominators(f)
    back_edges: dict[str, list[str]] = {}
    irreducible = False
    # Retreating edges via DFS ancestry: u -> h with h still on the DFS stack.
    on_stack: set[str] = set()
    seen: set[str] = set()
    stack: list[tuple[str, int]] = [(f.entry_block, 0)]
    seen.add(f.entry_block)
    on_stack.add(f.entry_block)
    while stack:
        block, i = stack[-1]
        succ = f.block(block).successors
        if i < len(succ):
            stack[-1] = (block, i + 1)
            nxt = succ[i]
            if nxt in on_stack:
                if nxt in dom[block]:
                    back_edges.setdefault(nxt, []).append(block)
                else:
                    irreducible = True
            elif nxt not in seen:
                seen.add(nxt)
                on_stack.add(nxt)
                stack.append((nxt, 0))
            elif nxt in dom[block]:
                # Cross edge to a dominator is still a back edge.
                back_edges.setdefault(nxt, []).append(block)
        else:
            on_stack.discard(block)
            stack.pop()
    if irreducible:
        return FunctionLoops(function=f.id, loops=(), irreducible=True)

    loops: list[tuple[str, frozenset[str]]] = []
    for header in sorted(back_edges):
        body = _natural_loop(f, header, back_edges[header])
        loops.append((header, body))

    result: list[Loop] = []
    for header, body in loops:
        parent: str | None = None
        best = None
        for oh, obody in loops:
            if oh != header and header in obody and body <= obody:
                if best is None or len(obody) < best:
                    best, parent = len(obody), oh
        result.append(
            Loop(
                header=header,
                body=body,
                preheader=_find_preheader(f, header, body),
                parent=parent,
            )
        )
    return FunctionLoops(function=f.id, loops=tuple(result))


def compute_loops(p: Program) -> dict[str, FunctionLoops]:
    """Loop forests for every function in the program, keyed by function id."""
    return {f.id: compute_loops_for(f) for f in p.functions}
