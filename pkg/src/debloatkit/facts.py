"""Callsite dataflow and base-fact extraction.

Two intraprocedural analyses summarize where calls sit on CFG paths:

* AHEAD (backward): which callsite can be the next one executed at or after a
  block.  ``out_ahead[B]`` is the union of the successors' ``in_ahead``;
  ``in_ahead[B]`` is B's own callsite when it has one, otherwise what flows
  through from below.
* BEHIND (forward): which callsite can be the latest one already executed.
  Mirror image over predecessors.

A block's own callsite shadows propagated information in both directions
(override-else-pass-through).  From the solved sets we read off five base
relations over the whole program:

* ``head(f, i)``  - callsite i can be the first call executed in f
* ``tail(f, i)``  - callsite i can be the last call executed in f
* ``next(f, i, j)`` - j can be the next callsite executed after i inside f
* ``leaf(f)``     - f contains no callsites
* ``belong(i, f)``- callsite i may transfer control to f

plus the synthetic ``belong(0, entry)`` for the root call into the program.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterable

from .ir import Function, Program, ROOT_CALLSITE


@dataclass(frozen=True)
class FlowSets:
    """Per-block solutions of the AHEAD and BEHIND analyses for one function."""

    in_ahead: dict[str, frozenset[int]]
    out_ahead: dict[str, frozenset[int]]
    in_behind: dict[str, frozenset[int]]
    out_behind: dict[str, frozenset[int]]


def solve_flow(f: Function) -> FlowSets:
    """Solve both analyses to fixpoint by round-robin iteration.

    Blocks are visited in postorder for AHEAD (successors first) and reverse
    postorder for BEHIND, which converges in one pass plus a verification
    sweep on reducible CFGs.
    """
    order: list[str] = []
    seen = {f.entry_block}
    stack: list[tuple[str, int]] = [(f.entry_block, 0)]
    while stack:
        block, i = stack[-1]
        succ = f.block(block).successors
        if i < len(succ):
            stack[-1] = (block, i + 1)
            if succ[i] not in seen:
                seen.add(succ[i])
                stack.append((succ[i], 0))
        else:
            order.append(block)
            stack.pop()

    own: dict[str, int | None] = {
        b.id: (b.callsite.id if b.callsite else None) for b in f.blocks
    }
    in_ahead: dict[str, frozenset[int]] = {b: frozenset() for b in own}
    out_ahead: dict[str, frozenset[int]] = {b: frozenset() for b in own}
    changed = True
    while changed:
        changed = False
        for b in order:  # postorder: successors stabilize first
            out = frozenset().union(
                *(in_ahead[s] for s in f.block(b).successors)
            ) if f.block(b).successors else frozenset()
            inn = frozenset((own[b],)) if own[b] is not None else out
            if out != out_ahead[b] or inn != in_ahead[b]:
                out_ahead[b], in_ahead[b] = out, inn
                changed = True

    in_behind: dict[str, frozenset[int]] = {b: frozenset() for b in own}
    out_behind: dict[str, frozenset[int]] = {b: frozenset() for b in own}
    changed = True
    while changed:
        changed = False
        for b in reversed(order):  # reverse postorder: predecessors first
            inn = frozenset().union(
                *(out_behind[pr] for pr in f.block(b).predecessors)
            ) if f.block(b).predecessors else frozenset()
            out = frozenset((own[b],)) if own[b] is not None else inn
            if inn != in_behind[b] or out != out_behind[b]:
                in_behind[b], out_behind[b] = inn, out
                changed = True

    return FlowSets(
        in_ahead=in_ahead,
        out_ahead=out_ahead,
        in_behind=in_behind,
        out_behind=out_behind,
    )


@dataclass
class FactBase:
    """The five base relations for a whole program, stored sorted-on-demand."""

    head: set[tuple[str, int]] = field(default_factory=set)
    tail: set[tuple[str, int]] = field(default_factory=set)
    next: set[tuple[str, int, int]] = field(default_factory=set)
    leaf: set[str] = field(default_factory=set)
    belong: set[tuple[int, str]] = field(default_factory=set)

    def count(self) -> int:
        return (
            len(self.head)
            + len(self.tail)
            + len(self.next)
            + len(self.leaf)
            + len(self.belong)
        )


def build_dl_facts(f: Function, flow: FlowSets) -> FactBase:
    """Read one function's head/tail/next facts off its solved flow sets.

    Each block is visited exactly once, in a DFS from the entry with visited
    marking; ``next`` pairs a block's own callsite with everything that can
    run right after it.
    """
    fb = FactBase()
    if f.is_leaf:
        fb.leaf.add(f.id)
        return fb
    for i in flow.in_ahead[f.entry_block]:
        fb.head.add((f.id, i))
    for x in f.exit_blocks:
        for i in flow.out_behind[x]:
            fb.tail.add((f.id, i))
    visited: set[str] = set()
    stack = [f.entry_block]
    while stack:
        b = stack.pop()
        if b in visited:
            continue
        visited.add(b)
        block = f.block(b)
        if block.callsite is not None:
            for k in flow.out_ahead[b]:
                fb.next.add((f.id, block.callsite.id, k))
        stack.extend(s for s in block.successors if s not in visited)
    return fb


def extract_factbase(p: Program) -> FactBase:
    """All base facts for a program, including the synthetic root belong fact."""
    fb = FactBase()
    for f in p.functions:
        part = build_dl_facts(f, solve_flow(f))
        fb.head |= part.head
        fb.tail |= part.tail
        fb.next |= part.next
        fb.leaf |= part.leaf
    for _, _, cs in p.iter_callsites():
        for callee in cs.callees:
            fb.belong.add((cs.id, callee))
    fb.belong.add((ROOT_CALLSITE, p.entry))
    return fb


def serialize_facts(fb: FactBase) -> str:
    """Datalog-style text, one fact per line, in a fixed sorted order."""
    lines: list[str] = []
    for f, i in sorted(fb.head):
        lines.append(f"head({f}, {i}).")
    for f, i in sorted(fb.tail):
        lines.append(f"tail({f}, {i}).")
    for f, i, j in sorted(fb.next):
        lines.append(f"next({f}, {i}, {j}).")
    for f in sorted(fb.leaf):
        lines.append(f"leaf({f}).")
    for i, f in sorted(fb.belong):
        lines.append(f"belong({i}, {f}).")
    return "\n".join(lines) + "\n"


def parse_facts(text: str) -> FactBase:
    """Inverse of ``serialize_facts``; tolerant of blank lines and comments."""
    fb = FactBase()
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("%") or line.startswith("#"):
            continue
        if not line.endswith(")."):
            raise ValueError(f"not a fact line: {line!r}")
        rel, _, args = line[:-2].partition("(")
        parts = [a.strip() for a in args.split(",")]
        if rel == "head":
            fb.head.add((parts[0], int(parts[1])))
        elif rel == "tail":
            fb.tail.add((parts[0], int(parts[1])))
        elif rel == "next":
            fb.next.add((parts[0], int(parts[1]), int(parts[2])))
        elif rel == "leaf":
            fb.leaf.add(parts[0])
        elif rel == "belong":
            fb.belong.add((int(parts[0]), parts[1]))
        else:
            raise ValueError(f"unknown relation {rel!r}")
    return fb
