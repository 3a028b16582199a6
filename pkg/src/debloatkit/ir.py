"""Self-contained program representation.

A ``Program`` is a set of functions, each with a control-flow graph of basic
blocks.  Blocks carry at most one callsite after normalization; a callsite
names the set of functions it may transfer to (a singleton for direct calls).
Callsite ids are small integers, unique program-wide, with id 0 reserved for
the synthetic root call into the entry function.

Programs are immutable once constructed.  The loader normalizes documents
(splitting blocks that declare several callsites, assigning missing callsite
ids in document order), derives predecessor edges, and validates the whole
structure before freezing it.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Iterator

DIRECT = "direct"
INDIRECT = "indirect"
ROOT_CALLSITE = 0


class ProgramError(ValueError):
    """Schema violation, dangling reference, or duplicate id in a document."""

    def __init__(self, message: str, location: str | None = None):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


@dataclass(frozen=True)
class Callsite:
    id: int
    callees: tuple[str, ...]
    kind: str = DIRECT

    @property
    def is_indirect(self) -> bool:
        return self.kind == INDIRECT


@dataclass(frozen=True)
class BasicBlock:
    id: str
    callsite: Callsite | None
    successors: tuple[str, ...]
    predecessors: tuple[str, ...] = ()


@dataclass(frozen=True)
class BranchRule:
    """Declarative successor choice for one branch block.

    ``threshold`` rules pick ``then_block`` when ``features[feature] <
    less_than`` and ``else_block`` otherwise; ``goto`` rules always take
    ``then_block``.  These live in the optional workload section so fixture
    behavior can be a pure function of entry features.
    """

    kind: str  # "threshold" | "goto"
    then_block: str
    else_block: str | None = None
    feature: int = 0
    less_than: int = 0


@dataclass(frozen=True)
class WorkloadSpec:
    """Optional hints steering trace generation for a program.

    ``arg_choices`` maps a function to weighted argument tuples sampled when
    the function is invoked; functions without an entry inherit the caller's
    arguments.  ``branch_rules`` maps (function, block) to a BranchRule.
    ``never_call`` lists functions the generator must not choose at indirect
    callsites when an alternative exists (they stay statically reachable but
    dynamically dormant).
    """

    arg_choices: dict[str, tuple[tuple[tuple[int, ...], float], ...]] = field(
        default_factory=dict
    )
    branch_rules: dict[tuple[str, str], BranchRule] = field(default_factory=dict)
    never_call: frozenset[str] = frozenset()


@dataclass(frozen=True)
class Function:
    id: str
    blocks: tuple[BasicBlock, ...]
    entry_block: str
    exit_blocks: frozenset[str]
    size_bytes: int
    gadget_count: int
    params: tuple[str, ...] = ()

    @cached_property
    def block_map(self) -> dict[str, BasicBlock]:
        return {b.id: b for b in self.blocks}

    def block(self, block_id: str) -> BasicBlock:
        return self.block_map[block_id]

    @cached_property
    def callsites(self) -> tuple[Callsite, ...]:
        return tuple(b.callsite for b in self.blocks if b.callsite is not None)

    @property
    def is_leaf(self) -> bool:
        return not self.callsites


@dataclass(frozen=True)
class Program:
    name: str
    entry: str
    page_size: int
    functions: tuple[Function, ...]
    workload: WorkloadSpec | None = None

    root_callsite: int = ROOT_CALLSITE

    @cached_property
    def function_map(self) -> dict[str, Function]:
        return {f.id: f for f in self.functions}

    def function(self, fn_id: str) -> Function:
        return self.function_map[fn_id]

    @cached_property
    def callsite_map(self) -> dict[int, tuple[str, str, Callsite]]:
        """Callsite id -> (function id, block id, callsite)."""
        out: dict[int, tuple[str, str, Callsite]] = {}
        for f in self.functions:
            for b in f.blocks:
                if b.callsite is not None:
                    out[b.callsite.id] = (f.id, b.id, b.callsite)
        return out

    def iter_callsites(self) -> Iterator[tuple[str, str, Callsite]]:
        for f in self.functions:
            for b in f.blocks:
                if b.callsite is not None:
                    yield f.id, b.id, b.callsite

    @cached_property
    def total_gadgets(self) -> int:
        return sum(f.gadget_count for f in self.functions)

    @cached_property
    def callgraph(self) -> dict[str, frozenset[str]]:
        """Function id -> set of possible callee ids (over all callsites)."""
        edges: dict[str, set[str]] = {f.id: set() for f in self.functions}
        for fn_id, _, cs in self.iter_callsites():
            edges[fn_id].update(cs.callees)
        return {k: frozenset(v) for k, v in edges.items()}

    def reachable_closure(self, roots: set[str] | frozenset[str]) -> frozenset[str]:
        """All functions reachable from ``roots`` (inclusive) over the callgraph."""
        seen: set[str] = set()
        work = sorted(roots)
        while work:
            fn = work.pop()
            if fn in seen:
                continue
            seen.add(fn)
            work.extend(self.callgraph[fn] - seen)
        return frozenset(seen)


@dataclass(frozen=True)
class EnterScg:
    """Instrumentation hit at a prediction scope entry, before the gated call."""

    entry: int
    features: tuple[int, ...]


@dataclass(frozen=True)
class Call:
    callsite: int
    callee: str


@dataclass(frozen=True)
class Return:
    function: str


TraceEvent = EnterScg | Call | Return


@dataclass(frozen=True)
class Trace:
    events: tuple[TraceEvent, ...]

    def call_sequence(self) -> tuple[int, ...]:
        """Flattened callsite ids in execution order."""
        return tuple(e.callsite for e in self.events if isinstance(e, Call))

    def __len__(self) -> int:
        return len(self.events)


class TraceError(ValueError):
    """A trace document line could not be parsed."""


class MalformedTraceError(ValueError):
    """Structural trace violation: unbalanced call/return nesting, a return
    not matching the open frame, or a call event naming an impossible
    callsite/callee binding.  Distinct from attack and fault verdicts."""


def serialize_trace(t: Trace) -> str:
    lines: list[str] = []
    for e in t.events:
        if isinstance(e, EnterScg):
            lines.append(f"E {e.entry} {','.join(str(v) for v in e.features)}")
        elif isinstance(e, Call):
            lines.append(f"C {e.callsite} {e.callee}")
        else:
            lines.append(f"R {e.function}")
    return "\n".join(lines) + "\n"


def parse_trace(text: str) -> Trace:
    events: list[TraceEvent] = []
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if parts[0] == "E" and len(parts) == 3:
                feats = tuple(int(v) for v in parts[2].split(","))
                events.append(EnterScg(entry=int(parts[1]), features=feats))
            elif parts[0] == "C" and len(parts) == 3:
                events.append(Call(callsite=int(parts[1]), callee=parts[2]))
            elif parts[0] == "R" and len(parts) == 2:
                events.append(Return(function=parts[1]))
            else:
                raise ValueError("unrecognized event")
        except ValueError as e:
            raise TraceError(f"line {n}: cannot parse {line!r}") from e
    return Trace(events=tuple(events))


def default_gadget_count(size_bytes: int) -> int:
    """Gadget proxy used when a function declares none: one per 10 bytes."""
    return size_bytes // 10


def _require(doc: dict, key: str, kind: type, loc: str) -> Any:
    if key not in doc:
        raise ProgramError(f"missing required field '{key}'", loc)
    value = doc[key]
    if not isinstance(value, kind):
        raise ProgramError(
            f"field '{key}' must be {kind.__name__}, got {type(value).__name__}", loc
        )
    return value


def _parse_callsite(doc: Any, loc: str) -> tuple[int | None, tuple[str, ...], str]:
    if not isinstance(doc, dict):
        raise ProgramError("callsite must be an object", loc)
    callees = _require(doc, "callees", list, loc)
    if not callees or not all(isinstance(c, str) for c in callees):
        raise ProgramError("callsite needs a non-empty list of callee names", loc)
    kind = doc.get("kind", DIRECT)
    if kind not in (DIRECT, INDIRECT):
        raise ProgramError(f"unknown callsite kind '{kind}'", loc)
    if kind == DIRECT and len(callees) != 1:
        raise ProgramError("direct callsite must list exactly one callee", loc)
    cs_id = doc.get("id")
    if cs_id is not None and (not isinstance(cs_id, int) or cs_id < 1):
        raise ProgramError("explicit callsite id must be an integer >= 1 (0 is the root)", loc)
    return cs_id, tuple(callees), kind


def _parse_branch_rules(doc: Any, fn_ids: set[str], loc: str) -> dict[tuple[str, str], BranchRule]:
    rules: dict[tuple[str, str], BranchRule] = {}
    if not isinstance(doc, list):
        raise ProgramError("workload.branches must be a list", loc)
    for i, rd in enumerate(doc):
        rloc = f"{loc}[{i}]"
        fn = _require(rd, "function", str, rloc)
        block = _require(rd, "block", str, rloc)
        if fn not in fn_ids:
            raise ProgramError(f"branch rule names unknown function '{fn}'", rloc)
        if "goto" in rd:
            rules[(fn, block)] = BranchRule(kind="goto", then_block=rd["goto"])
        else:
            rules[(fn, block)] = BranchRule(
                kind="threshold",
                feature=_require(rd, "feature", int, rloc),
                less_than=_require(rd, "less_than", int, rloc),
                then_block=_require(rd, "then", str, rloc),
                else_block=_require(rd, "else", str, rloc),
            )
    return rules


def _parse_workload(doc: Any, fn_ids: set[str], loc: str) -> WorkloadSpec:
    if not isinstance(doc, dict):
        raise ProgramError("workload section must be an object", loc)
    arg_choices: dict[str, tuple[tuple[tuple[int, ...], float], ...]] = {}
    for fn, spec in doc.get("args", {}).items():
        floc = f"{loc}.args[{fn}]"
        if fn not in fn_ids:
            raise ProgramError(f"workload args name unknown function '{fn}'", floc)
        choices = _require(spec, "choices", list, floc)
        weights = spec.get("weights", [1.0] * len(choices))
        if len(weights) != len(choices):
            raise ProgramError("weights must match choices in length", floc)
        parsed = []
        for ch, w in zip(choices, weights):
            if not isinstance(ch, list) or not all(isinstance(v, int) for v in ch):
                raise ProgramError("each argument choice must be a list of integers", floc)
            parsed.append((tuple(ch), float(w)))
        arg_choices[fn] = tuple(parsed)
    branch_rules = _parse_branch_rules(doc.get("branches", []), fn_ids, f"{loc}.branches")
    never_call = frozenset(doc.get("never_call", []))
    for fn in never_call:
        if fn not in fn_ids:
            raise ProgramError(f"never_call names unknown function '{fn}'", loc)
    return WorkloadSpec(
        arg_choices=arg_choices, branch_rules=branch_rules, never_call=never_call
    )


def _split_multi_callsite_blocks(
    blocks: list[dict], exit_blocks: list[str], loc: str
) -> tuple[list[dict], list[str]]:
    """Normalize so every block carries at most one callsite.

    A block declaring n callsites becomes a chain of n blocks; the first keeps
    the original id (so external references stay valid) and the tail inherits
    the successor list.  Exit status moves to the last block of the chain.
    """
    out: list[dict] = []
    exits = list(exit_blocks)
    for bd in blocks:
        sites = list(bd.get("callsites", []))
        if "callsite" in bd and bd["callsite"] is not None:
            sites.insert(0, bd["callsite"])
        if len(sites) <= 1:
            nb = dict(bd)
            nb["callsite"] = sites[0] if sites else None
            nb.pop("callsites", None)
            out.append(nb)
            continue
        base_id = bd["id"]
        chain_ids = [base_id] + [f"{base_id}__s{i}" for i in range(1, len(sites))]
        for i, (cid, site) in enumerate(zip(chain_ids, sites)):
            last = i == len(sites) - 1
            out.append(
                {
                    "id": cid,
                    "callsite": site,
                    "succ": list(bd.get("succ", [])) if last else [chain_ids[i + 1]],
                }
            )
        if base_id in exits:
            exits[exits.index(base_id)] = chain_ids[-1]
    return out, exits


def _build_function(fdoc: dict, loc: str, next_id: Iterator[int], used_ids: set[int]) -> Function:
    name = _require(fdoc, "name", str, loc)
    floc = f"{loc}('{name}')"
    size = _require(fdoc, "size_bytes", int, floc)
    if size < 1:
        raise ProgramError("size_bytes must be >= 1", floc)
    gadgets = fdoc.get("gadget_count", default_gadget_count(size))
    if not isinstance(gadgets, int) or gadgets < 0:
        raise ProgramError("gadget_count must be a non-negative integer", floc)
    params = tuple(fdoc.get("params", []))
    if not all(isinstance(x, str) for x in params):
        raise ProgramError("params must be a list of names", floc)
    raw_blocks = _require(fdoc, "blocks", list, floc)
    if not raw_blocks:
        raise ProgramError("function needs at least one block", floc)
    entry_block = _require(fdoc, "entry_block", str, floc)
    exit_blocks = _require(fdoc, "exit_blocks", list, floc)
    raw_blocks, exit_blocks = _split_multi_callsite_blocks(raw_blocks, exit_blocks, floc)

    blocks: list[BasicBlock] = []
    seen: set[str] = set()
    for bd in raw_blocks:
        bid = _require(bd, "id", str, f"{floc}.blocks")
        bloc = f"{floc}.blocks('{bid}')"
        if bid in seen:
            raise ProgramError(f"duplicate block id '{bid}'", bloc)
        seen.add(bid)
        cs = None
        if bd.get("callsite") is not None:
            cs_id, callees, kind = _parse_callsite(bd["callsite"], bloc)
            if cs_id is None:
                cs_id = next(next_id)
                while cs_id in used_ids:
                    cs_id = next(next_id)
            if cs_id in used_ids:
                raise ProgramError(f"duplicate callsite id {cs_id}", bloc)
            used_ids.add(cs_id)
            cs = Callsite(id=cs_id, callees=callees, kind=kind)
        succ = bd.get("succ", [])
        if not isinstance(succ, list) or not all(isinstance(s, str) for s in succ):
            raise ProgramError("succ must be a list of block ids", bloc)
        blocks.append(BasicBlock(id=bid, callsite=cs, successors=tuple(succ)))

    preds: dict[str, list[str]] = {b.id: [] for b in blocks}
    for b in blocks:
        for s in b.successors:
            if s not in preds:
                raise ProgramError(
                    f"block '{b.id}' lists unknown successor '{s}'", floc
                )
            preds[s].append(b.id)
    blocks = [
        BasicBlock(b.id, b.callsite, b.successors, tuple(preds[b.id])) for b in blocks
    ]
    return Function(
        id=name,
        blocks=tuple(blocks),
        entry_block=entry_block,
        exit_blocks=frozenset(exit_blocks),
        size_bytes=size,
        gadget_count=gadgets,
        params=params,
    )


def _validate(p: Program) -> None:
    names = [f.id for f in p.functions]
    for name in names:
        if names.count(name) > 1:
            raise ProgramError(f"duplicate function name '{name}'", f"functions('{name}')")
    if p.entry not in p.function_map:
        raise ProgramError(f"entry function '{p.entry}' is not defined", "program.entry")
    if p.page_size < 1:
        raise ProgramError("page_size must be >= 1", "program.page_size")
    for f in p.functions:
        loc = f"functions('{f.id}')"
        if f.entry_block not in f.block_map:
            raise ProgramError(f"entry block '{f.entry_block}' does not exist", loc)
        for x in f.exit_blocks:
            if x not in f.block_map:
                raise ProgramError(f"exit block '{x}' does not exist", loc)
        for b in f.blocks:
            no_succ = not b.successors
            if no_succ and b.id not in f.exit_blocks:
                raise ProgramError(
                    f"block '{b.id}' has no successors but is not an exit block", loc
                )
            if not no_succ and b.id in f.exit_blocks:
                raise ProgramError(
                    f"exit block '{b.id}' must not have successors", loc
                )
            if b.callsite is not None:
                for callee in b.callsite.callees:
                    if callee not in p.function_map:
                        raise ProgramError(
                            f"callsite {b.callsite.id} targets unknown function '{callee}'",
                            f"{loc}.blocks('{b.id}')",
                        )
        reached, work = {f.entry_block}, [f.entry_block]
        while work:
            for s in f.block(work.pop()).successors:
                if s not in reached:
                    reached.add(s)
                    work.append(s)
        dead = sorted(set(f.block_map) - reached)
        if dead:
            raise ProgramError(f"unreachable blocks: {', '.join(dead)}", loc)
    if p.workload:
        for (fn, block), rule in p.workload.branch_rules.items():
            targets = [rule.then_block] + ([rule.else_block] if rule.else_block else [])
            fb = p.function(fn).block_map
            if block not in fb or any(t not in fb for t in targets):
                raise ProgramError(
                    f"branch rule for '{fn}/{block}' references unknown blocks",
                    "workload.branches",
                )


def load_program(source: str | dict) -> Program:
    """Parse and validate a program document (JSON text or parsed object)."""
    if isinstance(source, str):
        try:
            doc = json.loads(source)
        except json.JSONDecodeError as e:
            raise ProgramError(f"document is not valid JSON: {e}") from e
    else:
        doc = source
    if not isinstance(doc, dict) or "program" not in doc:
        raise ProgramError("document must contain a top-level 'program' object")
    pdoc = doc["program"]
    name = _require(pdoc, "name", str, "program")
    entry = _require(pdoc, "entry", str, "program")
    page_size = _require(pdoc, "page_size", int, "program")
    fdocs = _require(pdoc, "functions", list, "program")

    counter = iter(range(1, 1 << 30))
    used_ids: set[int] = set()
    functions = tuple(
        _build_function(fd, "functions", counter, used_ids) for fd in fdocs
    )
    workload = None
    if "workload" in pdoc:
        workload = _parse_workload(
            pdoc["workload"], {f.id for f in functions}, "workload"
        )
    p = Program(
        name=name,
        entry=entry,
        page_size=page_size,
        functions=functions,
        workload=workload,
    )
    _validate(p)
    return p


def read_program(path: str | Path) -> Program:
    """Load a program from a file; a bare path may omit the .json suffix."""
    fp = Path(path)
    if not fp.exists() and fp.suffix != ".json":
        fp = fp.with_suffix(".json")
    if not fp.exists():
        raise ProgramError(f"no program document at '{path}'")
    return load_program(fp.read_text())


def serialize_program(p: Program) -> dict:
    """Document form of a program; ``load_program`` round-trips it exactly."""
    functions = []
    for f in p.functions:
        blocks = []
        for b in f.blocks:
            bd: dict[str, Any] = {"id": b.id, "succ": list(b.successors)}
            if b.callsite is not None:
                bd["callsite"] = {
                    "id": b.callsite.id,
                    "callees": list(b.callsite.callees),
                    "kind": b.callsite.kind,
                }
            blocks.append(bd)
        functions.append(
            {
                "name": f.id,
                "size_bytes": f.size_bytes,
                "gadget_count": f.gadget_count,
                "params": list(f.params),
                "entry_block": f.entry_block,
                "exit_blocks": sorted(f.exit_blocks),
                "blocks": blocks,
            }
        )
    pdoc: dict[str, Any] = {
        "name": p.name,
        "entry": p.entry,
        "page_size": p.page_size,
        "functions": functions,
    }
    if p.workload:
        args = {
            fn: {
                "choices": [list(c) for c, _ in choices],
                "weights": [w for _, w in choices],
            }
            for fn, choices in p.workload.arg_choices.items()
        }
        branches = []
        for (fn, block), rule in sorted(p.workload.branch_rules.items()):
            if rule.kind == "goto":
                branches.append({"function": fn, "block": block, "goto": rule.then_block})
            else:
                branches.append(
                    {
                        "function": fn,
                        "block": block,
                        "feature": rule.feature,
                        "less_than": rule.less_than,
                        "then": rule.then_block,
                        "else": rule.else_block,
                    }
                )
        pdoc["workload"] = {"args": args, "branches": branches}
        if p.workload.never_call:
            pdoc["workload"]["never_call"] = sorted(p.workload.never_call)
    return {"program": pdoc}


def program_to_json(p: Program) -> str:
    return json.dumps(serialize_program(p), indent=2, sort_keys=False) + "\n"
