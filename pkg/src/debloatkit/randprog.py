"""Seeded random program generation for differential testing.

The generator builds whole program documents and runs them through the
normal loader, so everything it emits is valid by construction.  Its key
structural guarantee is that every function with callsites executes at
least one callsite on every entry-to-exit path: the derived call-pair
relation is exact for such programs (no path through a non-leaf function
can silently skip all of its calls), which makes them suitable both for
oracle-equality fuzzing and as clean baselines for attack-detection runs.

Optional extras: CFG loops (``cyclic``), indirect callsites, a bounded
self-recursive callsite with a non-recursive escape target, one-function-
per-page sizing, and dormant "rogue" functions that are statically
reachable through an indirect callsite but excluded from every generated
workload; those make guaranteed attack targets.
"""
from __future__ import annotations

import random
from dataclasses import dataclass

from .ensue import estimate_sequences
from .ir import Program, load_program

MODE_ACYCLIC = "acyclic"
MODE_CYCLIC = "cyclic"


@dataclass(frozen=True)
class GenSpec:
    """Shape knobs for one generated program."""

    mode: str = MODE_ACYCLIC
    n_functions: tuple[int, int] = (3, 7)
    n_units: tuple[int, int] = (2, 5)  # body segments before the return block
    max_diamonds: int | None = None  # cap on branch segments per function
    allow_indirect: bool = True
    allow_recursion: bool = False
    page_isolated: bool = False
    rogue: int = 0  # count of dormant attack-target functions
    arity: int | None = None  # uniform parameter count; None picks 1 or 2


class _Builder:
    def __init__(self, rng: random.Random, spec: GenSpec):
        self.rng = rng
        self.spec = spec
        self.arity = spec.arity if spec.arity is not None else rng.randint(1, 2)
        self.unreferenced: set[str] = set()
        self.rogues: list[str] = []
        self.rogue_wired = False
        self.recursion_used = False

    def _size(self, page_size: int) -> int:
        if self.spec.page_isolated:
            return page_size
        return self.rng.randint(20, 3 * page_size)

    def _leaf_doc(self, name: str, page_size: int) -> dict:
        return {
            "name": name,
            "size_bytes": self._size(page_size),
            "params": [f"x{i}" for i in range(self.arity)],
            "entry_block": f"{name}_b0",
            "exit_blocks": [f"{name}_b0"],
            "blocks": [{"id": f"{name}_b0", "succ": []}],
        }

    def _pick_callees(self, pool: list[str], n: int) -> list[str]:
        """Prefer functions nothing references yet, so all stay reachable."""
        chosen: list[str] = []
        fresh = [f for f in pool if f in self.unreferenced]
        self.rng.shuffle(fresh)
        chosen.extend(fresh[:n])
        rest = [f for f in pool if f not in chosen]
        while len(chosen) < n and rest:
            pick = rest.pop(self.rng.randrange(len(rest)))
            chosen.append(pick)
        for c in chosen:
            self.unreferenced.discard(c)
        return chosen

    def _callsite(self, name: str, pool: list[str]) -> dict:
        indirect = (
            self.spec.allow_indirect and len(pool) >= 2 and self.rng.random() < 0.35
        )
        if indirect:
            callees = self._pick_callees(pool, self.rng.randint(2, min(3, len(pool))))
            if (
                self.spec.allow_recursion
                and not self.recursion_used
                and self.rng.random() < 0.5
            ):
                # Recursive target with an escape alternative; the walker's
                # depth budget steers to the alternative near the cap.
                self.recursion_used = True
                callees = [name] + callees[:1]
            if self.rogues and (not self.rogue_wired or self.rng.random() < 0.25):
                rogue = self.rng.choice(self.rogues)
                if rogue not in callees:
                    callees.append(rogue)
                self.rogue_wired = True
                self.unreferenced.discard(rogue)
            return {"kind": "indirect", "callees": callees}
        return {"kind": "direct", "callees": self._pick_callees(pool, 1)}

    def _function_doc(
        self, name: str, pool: list[str], page_size: int, must_cover: list[str]
    ) -> dict:
        """One function as a chain of units; at least one callsite sits on
        the mandatory chain (outside diamonds and loops)."""
        rng = self.rng
        blocks: list[dict] = []
        units: list[tuple[str, str]] = []  # (entry block, exit block)
        unit_kinds: list[str] = []
        counter = 0

        def bid() -> str:
            nonlocal counter
            counter += 1
            return f"{name}_b{counter - 1}"

        n_units = rng.randint(*self.spec.n_units)
        kinds = []
        for _ in range(n_units):
            r = rng.random()
            kinds.append("call" if r < 0.5 else "diamond" if r < 0.75 else "plain")
        if "call" not in kinds:
            kinds[rng.randrange(len(kinds))] = "call"
        while kinds.count("call") < len(must_cover):
            kinds.append("call")
        if self.spec.max_diamonds is not None:
            excess = kinds.count("diamond") - self.spec.max_diamonds
            for i in range(len(kinds) - 1, -1, -1):
                if excess <= 0:
                    break
                if kinds[i] == "diamond":
                    kinds[i] = "plain"
                    excess -= 1
        cover = list(must_cover)

        for kind in kinds:
            if kind == "call" and pool:
                b = bid()
                if cover:
                    site = {"kind": "direct", "callees": [cover.pop()]}
                else:
                    site = self._callsite(name, pool)
                blocks.append({"id": b, "succ": [], "callsite": site})
                units.append((b, b))
                unit_kinds.append("call")
            elif kind == "diamond":
                d, dt, df, dj = bid(), bid(), bid(), bid()
                arm: dict = {"id": dt, "succ": [dj]}
                if pool and rng.random() < 0.3:
                    arm["callsite"] = self._callsite(name, pool)
                blocks.extend(
                    [
                        {"id": d, "succ": [dt, df]},
                        arm,
                        {"id": df, "succ": [dj]},
                        {"id": dj, "succ": []},
                    ]
                )
                units.append((d, dj))
                unit_kinds.append("diamond")
            else:
                b = bid()
                blocks.append({"id": b, "succ": []})
                units.append((b, b))
                unit_kinds.append("plain")
        tail = bid()
        blocks.append({"id": tail, "succ": []})
        units.append((tail, tail))
        unit_kinds.append("plain")

        if self.spec.mode == MODE_CYCLIC and len(units) >= 3 and rng.random() < 0.6:
            # Wrap one interior unit in a zero-trip loop.  The mandatory
            # callsite chain stays outside so every path still calls.
            mandatory = unit_kinds.index("call") if "call" in unit_kinds else -1
            options = [
                i
                for i in range(1, len(units) - 1)
                if i != mandatory or unit_kinds.count("call") > 1
            ]
            if options:
                i = rng.choice(options)
                header = bid()
                blocks.append({"id": header, "succ": [units[i][0], units[i + 1][0]]})
                by_id = {b["id"]: b for b in blocks}
                by_id[units[i][1]]["succ"] = [header]
                units[i] = (header, header)

        by_id = {b["id"]: b for b in blocks}
        for (_, prev_exit), (next_entry, _) in zip(units, units[1:]):
            if not by_id[prev_exit]["succ"]:
                by_id[prev_exit]["succ"] = [next_entry]
        return {
            "name": name,
            "size_bytes": self._size(page_size),
            "params": [f"x{i}" for i in range(self.arity)],
            "entry_block": units[0][0],
            "exit_blocks": [units[-1][1]],
            "blocks": blocks,
        }

    def build(self, name: str) -> dict:
        rng = self.rng
        spec = self.spec
        page_size = 64 if spec.page_isolated else rng.choice([64, 128])
        n = rng.randint(*spec.n_functions)
        names = [f"f{i}" for i in range(n)]
        self.rogues = [f"rogue{i}" for i in range(spec.rogue)]
        self.unreferenced = set(names[1:]) | set(self.rogues)

        docs: dict[str, dict] = {}
        for rogue in self.rogues:
            docs[rogue] = self._leaf_doc(rogue, page_size)
        # Leaves first: each function can only call later-declared ones.
        for i in range(n - 1, -1, -1):
            fn = names[i]
            pool = names[i + 1 :]
            is_leaf = not pool or (i > 0 and rng.random() < 0.15)
            if is_leaf:
                docs[fn] = self._leaf_doc(fn, page_size)
                continue
            must = sorted(self.unreferenced - set(self.rogues)) if i == 0 else []
            docs[fn] = self._function_doc(fn, pool, page_size, must)
        if self.rogues and not self.rogue_wired:
            # Force static reachability of the rogues through the entry.
            entry_doc = docs[names[0]]
            for b in entry_doc["blocks"]:
                site = b.get("callsite")
                if site is not None:
                    site["kind"] = "indirect"
                    site["callees"] = list(
                        dict.fromkeys(site["callees"] + [self.rogues[0]])
                    )
                    self.rogue_wired = True
                    break

        n_choices = rng.randint(3, 5)
        seen: set[tuple[int, ...]] = set()
        while len(seen) < n_choices:
            seen.add(tuple(rng.randint(-9, 9) for _ in range(self.arity)))
        workload: dict = {
            "args": {
                names[0]: {
                    "choices": [list(c) for c in sorted(seen)],
                    "weights": [rng.randint(1, 5) for _ in range(len(seen))],
                }
            }
        }
        if self.rogues:
            workload["never_call"] = self.rogues
        return {
            "program": {
                "name": name,
                "entry": names[0],
                "page_size": page_size,
                "functions": [docs[fn] for fn in names + self.rogues],
                "workload": workload,
            }
        }


def generate_program(
    seed: int,
    spec: GenSpec | None = None,
    max_paths: int | None = None,
    name: str | None = None,
) -> Program:
    """One valid random program, deterministic in ``seed``.

    ``max_paths`` rejects programs whose estimated distinct call-sequence
    count exceeds the bound (retrying with perturbed sub-seeds), keeping
    exhaustive oracle enumeration affordable.
    """
    spec = spec or GenSpec()
    if spec.mode not in (MODE_ACYCLIC, MODE_CYCLIC):
        raise ValueError(f"unknown generation mode: {spec.mode!r}")
    attempts = 40
    for attempt in range(attempts):
        rng = random.Random(seed * 1_000_003 + attempt)
        builder = _Builder(rng, spec)
        doc = builder.build(name or f"gen-{spec.mode}-{seed}")
        p = load_program(doc)
        if max_paths is None or estimate_sequences(p) <= max_paths:
            return p
    raise ValueError(
        f"seed {seed}: no program within {max_paths} estimated sequences "
        f"after {attempts} attempts"
    )
