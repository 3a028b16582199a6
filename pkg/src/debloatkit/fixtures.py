"""Built-in example programs with hand-verified expectations.

``chooser`` is the fact-extraction showcase: a branch picks one of two
helpers, one helper calls deeper, then two tail calls always run.  Its
base facts and full call-pair relation are small enough to check by hand.

``hotcold`` is the prediction showcase: an entry function whose argument
sign selects between a hot path (parse + transform) and a cold path
(transform + finalize), plus a dormant debug helper that is statically
reachable but never called by any workload.  It exercises predicted-set
enumeration, rectification-point placement, history checks, and attack
verdicts.
"""
from __future__ import annotations

import json
from pathlib import Path

from .ir import Program, load_program

CHOOSER_DOC: dict = {
    "program": {
        "name": "chooser",
        "entry": "main",
        "page_size": 64,
        "functions": [
            {
                "name": "main",
                "size_bytes": 48,
                "params": ["x"],
                "entry_block": "b0",
                "exit_blocks": ["b4"],
                "blocks": [
                    {"id": "b0", "succ": ["b1", "b2"]},
                    {"id": "b1", "succ": ["b3"], "callsite": {"callees": ["A"]}},
                    {"id": "b2", "succ": ["b3"], "callsite": {"callees": ["B"]}},
                    {"id": "b3", "succ": ["b4"], "callsite": {"callees": ["D"]}},
                    {"id": "b4", "succ": [], "callsite": {"callees": ["E"]}},
                ],
            },
            {
                "name": "A",
                "size_bytes": 48,
                "params": ["x"],
                "entry_block": "a0",
                "exit_blocks": ["a0"],
                "blocks": [
                    {"id": "a0", "succ": [], "callsite": {"callees": ["C"]}}
                ],
            },
            {
                "name": "B",
                "size_bytes": 48,
                "params": ["x"],
                "entry_block": "b0",
                "exit_blocks": ["b0"],
                "blocks": [{"id": "b0", "succ": []}],
            },
            {
                "name": "C",
                "size_bytes": 48,
                "params": ["x"],
                "entry_block": "c0",
                "exit_blocks": ["c0"],
                "blocks": [{"id": "c0", "succ": []}],
            },
            {
                "name": "D",
                "size_bytes": 48,
                "params": ["x"],
                "entry_block": "d0",
                "exit_blocks": ["d0"],
                "blocks": [{"id": "d0", "succ": []}],
            },
            {
                "name": "E",
                "size_bytes": 48,
                "params": ["x"],
                "entry_block": "e0",
                "exit_blocks": ["e0"],
                "blocks": [{"id": "e0", "succ": []}],
            },
        ],
        "workload": {
            "args": {
                "main": {
                    "choices": [[-5], [-2], [3], [7]],
                    "weights": [2, 1, 2, 1],
                }
            },
            "branches": [
                {
                    "function": "main",
                    "block": "b0",
                    "feature": 0,
                    "less_than": 0,
                    "then": "b1",
                    "else": "b2",
                }
            ],
        },
    }
}

HOTCOLD_DOC: dict = {
    "program": {
        "name": "hotcold",
        "entry": "dispatch",
        "page_size": 64,
        "functions": [
            {
                "name": "dispatch",
                "size_bytes": 48,
                "gadget_count": 10,
                "params": ["x"],
                "entry_block": "b0",
                "exit_blocks": ["b2"],
                "blocks": [
                    {"id": "b0", "succ": ["b1", "b2"]},
                    {"id": "b1", "succ": ["b2"], "callsite": {"callees": ["parse"]}},
                    {"id": "b2", "succ": [], "callsite": {"callees": ["transform"]}},
                ],
            },
            {
                "name": "parse",
                "size_bytes": 48,
                "gadget_count": 10,
                "params": ["x"],
                "entry_block": "p0",
                "exit_blocks": ["p0"],
                "blocks": [{"id": "p0", "succ": []}],
            },
            {
                "name": "transform",
                "size_bytes": 48,
                "gadget_count": 10,
                "params": ["x"],
                "entry_block": "t0",
                "exit_blocks": ["t2"],
                "blocks": [
                    {"id": "t0", "succ": ["t1", "t2"]},
                    {
                        "id": "t1",
                        "succ": ["t2"],
                        "callsite": {"callees": ["finalize"]},
                    },
                    {"id": "t2", "succ": []},
                ],
            },
            {
                "name": "finalize",
                "size_bytes": 48,
                "gadget_count": 10,
                "params": ["x"],
                "entry_block": "z0",
                "exit_blocks": ["z2"],
                "blocks": [
                    {"id": "z0", "succ": ["z1", "z2"]},
                    {
                        "id": "z1",
                        "succ": ["z2"],
                        "callsite": {"callees": ["debugdump"]},
                    },
                    {"id": "z2", "succ": []},
                ],
            },
            {
                "name": "debugdump",
                "size_bytes": 48,
                "gadget_count": 10,
                "params": ["x"],
                "entry_block": "g0",
                "exit_blocks": ["g0"],
                "blocks": [{"id": "g0", "succ": []}],
            },
        ],
        "workload": {
            "args": {
                "dispatch": {
                    "choices": [[-5], [-3], [-1], [2], [6]],
                    "weights": [3, 2, 2, 1, 1],
                }
            },
            "branches": [
                {
                    "function": "dispatch",
                    "block": "b0",
                    "feature": 0,
                    "less_than": 0,
                    "then": "b1",
                    "else": "b2",
                },
                {
                    "function": "transform",
                    "block": "t0",
                    "feature": 0,
                    "less_than": 0,
                    "then": "t2",
                    "else": "t1",
                },
                {"function": "finalize", "block": "z0", "goto": "z2"},
            ],
            "never_call": ["debugdump"],
        },
    }
}

EMPTY_MAIN_DOC: dict = {
    "program": {
        "name": "empty-main",
        "entry": "main",
        "page_size": 64,
        "functions": [
            {
                "name": "main",
                "size_bytes": 16,
                "params": [],
                "entry_block": "b0",
                "exit_blocks": ["b0"],
                "blocks": [{"id": "b0", "succ": []}],
            }
        ],
    }
}

_DOCS = {
    "chooser": CHOOSER_DOC,
    "hotcold": HOTCOLD_DOC,
    "empty-main": EMPTY_MAIN_DOC,
}

# Alternate document names kept for compatibility with shipped example
# invocations; they are the same programs.
_ALIASES = {"listing3": "chooser", "fig3": "hotcold"}


def fixture_names() -> tuple[str, ...]:
    return tuple(sorted(_DOCS))


def load_fixture(name: str) -> Program:
    name = _ALIASES.get(name, name)
    if name not in _DOCS:
        raise KeyError(f"unknown fixture '{name}'; have {', '.join(fixture_names())}")
    return load_program(json.loads(json.dumps(_DOCS[name])))


def chooser() -> Program:
    return load_fixture("chooser")


def hotcold() -> Program:
    return load_fixture("hotcold")


def empty_main() -> Program:
    return load_fixture("empty-main")


def write_fixture_files(directory: str | Path) -> list[Path]:
    """Materialize every fixture (aliases included) as JSON for CLI use."""
    out: list[Path] = []
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    named = dict(_DOCS)
    named.update({alias: _DOCS[target] for alias, target in _ALIASES.items()})
    for name, doc in sorted(named.items()):
        fp = root / f"{name}.json"
        fp.write_text(json.dumps(doc, indent=2) + "\n")
        out.append(fp)
    return out
