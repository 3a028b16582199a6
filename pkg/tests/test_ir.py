"""Program loading, normalization, validation, and trace round-trips."""
import json

import pytest

from debloatkit import (
    Program,
    ProgramError,
    load_program,
    parse_trace,
    program_to_json,
    read_program,
    serialize_program,
    serialize_trace,
)
from debloatkit.facts import extract_factbase, serialize_facts
from debloatkit.ir import Call, EnterScg, Return, Trace, TraceError


def minimal_doc(**overrides) -> dict:
    doc = {
        "program": {
            "name": "tiny",
            "entry": "main",
            "page_size": 64,
            "functions": [
                {
                    "name": "main",
                    "size_bytes": 16,
                    "entry_block": "b0",
                    "exit_blocks": ["b0"],
                    "blocks": [{"id": "b0", "succ": []}],
                }
            ],
        }
    }
    doc["program"].update(overrides)
    return doc


def test_minimal_program_loads():
    p = load_program(minimal_doc())
    assert isinstance(p, Program)
    assert p.entry == "main"
    assert p.function("main").is_leaf
    assert p.callsite_map == {}
    assert p.root_callsite == 0


def test_load_from_json_text():
    p = load_program(json.dumps(minimal_doc()))
    assert p.name == "tiny"


def test_callsite_ids_assigned_in_document_order(chooser_program):
    # main's four sites then A's one, starting at 1; 0 is the root.
    expected = {1: "A", 2: "B", 3: "D", 4: "E", 5: "C"}
    for cs_id, callee in expected.items():
        _, _, cs = chooser_program.callsite_map[cs_id]
        assert cs.callees == (callee,)
    assert set(chooser_program.callsite_map) == set(expected)


def test_chooser_has_six_functions_and_six_callsites(chooser_program):
    assert len(chooser_program.functions) == 6
    # five in-program sites plus the synthetic root
    assert len(chooser_program.callsite_map) + 1 == 6


def test_multi_callsite_block_is_split():
    doc = minimal_doc(
        functions=[
            {
                "name": "main",
                "size_bytes": 16,
                "entry_block": "b0",
                "exit_blocks": ["b0"],
                "blocks": [
                    {
                        "id": "b0",
                        "succ": [],
                        "callsites": [
                            {"callees": ["x"]},
                            {"callees": ["y"]},
                        ],
                    }
                ],
            },
            {
                "name": "x",
                "size_bytes": 16,
                "entry_block": "x0",
                "exit_blocks": ["x0"],
                "blocks": [{"id": "x0", "succ": []}],
            },
            {
                "name": "y",
                "size_bytes": 16,
                "entry_block": "y0",
                "exit_blocks": ["y0"],
                "blocks": [{"id": "y0", "succ": []}],
            },
        ]
    )
    p = load_program(doc)
    main = p.function("main")
    assert len(main.blocks) == 2
    assert [b.callsite.callees for b in main.blocks] == [("x",), ("y",)]
    # first block keeps the id, exit status moved to the chain tail
    assert main.blocks[0].id == "b0"
    assert main.exit_blocks == {main.blocks[1].id}


def test_split_preserves_extracted_facts():
    """Normalization must not change the base relations."""
    joined = minimal_doc(
        functions=[
            {
                "name": "main",
                "size_bytes": 16,
                "entry_block": "b0",
                "exit_blocks": ["b0"],
                "blocks": [
                    {
                        "id": "b0",
                        "succ": [],
                        "callsites": [
                            {"id": 1, "callees": ["x"]},
                            {"id": 2, "callees": ["y"]},
                        ],
                    }
                ],
            },
            {
                "name": "x",
                "size_bytes": 16,
                "entry_block": "x0",
                "exit_blocks": ["x0"],
                "blocks": [{"id": "x0", "succ": []}],
            },
            {
                "name": "y",
                "size_bytes": 16,
                "entry_block": "y0",
                "exit_blocks": ["y0"],
                "blocks": [{"id": "y0", "succ": []}],
            },
        ]
    )
    by_hand = json.loads(json.dumps(joined))
    by_hand["program"]["functions"][0]["blocks"] = [
        {"id": "b0", "succ": ["b0b"], "callsite": {"id": 1, "callees": ["x"]}},
        {"id": "b0b", "succ": [], "callsite": {"id": 2, "callees": ["y"]}},
    ]
    by_hand["program"]["functions"][0]["exit_blocks"] = ["b0b"]
    fa = serialize_facts(extract_factbase(load_program(joined)))
    fb = serialize_facts(extract_factbase(load_program(by_hand)))
    assert fa == fb


@pytest.mark.parametrize(
    "mutate, fragment",
    [
        (lambda d: d["program"].pop("entry"), "missing required field 'entry'"),
        (lambda d: d["program"].update(entry="nope"), "not defined"),
        (lambda d: d["program"].update(page_size=0), "page_size"),
        (
            lambda d: d["program"]["functions"][0].update(entry_block="zz"),
            "does not exist",
        ),
        (
            lambda d: d["program"]["functions"][0]["blocks"][0].update(succ=["zz"]),
            "unknown successor",
        ),
        (
            lambda d: d["program"]["functions"].append(
                dict(d["program"]["functions"][0])
            ),
            "duplicate function name",
        ),
    ],
)
def test_loader_rejects_bad_documents(mutate, fragment):
    doc = minimal_doc()
    mutate(doc)
    with pytest.raises(ProgramError, match=fragment):
        load_program(doc)


def test_dangling_callee_is_rejected():
    doc = minimal_doc()
    doc["program"]["functions"][0]["blocks"] = [
        {"id": "b0", "succ": [], "callsite": {"callees": ["ghost"]}}
    ]
    with pytest.raises(ProgramError, match="unknown function 'ghost'"):
        load_program(doc)


def test_duplicate_callsite_id_is_rejected():
    doc = minimal_doc(
        functions=[
            {
                "name": "main",
                "size_bytes": 16,
                "entry_block": "b0",
                "exit_blocks": ["b1"],
                "blocks": [
                    {"id": "b0", "succ": ["b1"], "callsite": {"id": 3, "callees": ["main"]}},
                    {"id": "b1", "succ": [], "callsite": {"id": 3, "callees": ["main"]}},
                ],
            }
        ]
    )
    with pytest.raises(ProgramError, match="duplicate callsite id 3"):
        load_program(doc)


def test_explicit_zero_callsite_id_is_rejected():
    doc = minimal_doc()
    doc["program"]["functions"][0]["blocks"] = [
        {"id": "b0", "succ": [], "callsite": {"id": 0, "callees": ["main"]}}
    ]
    with pytest.raises(ProgramError, match=">= 1"):
        load_program(doc)


def test_unreachable_block_is_rejected():
    doc = minimal_doc()
    doc["program"]["functions"][0]["blocks"].append({"id": "dead", "succ": []})
    doc["program"]["functions"][0]["exit_blocks"].append("dead")
    with pytest.raises(ProgramError, match="unreachable blocks: dead"):
        load_program(doc)


def test_direct_callsite_with_two_callees_is_rejected():
    doc = minimal_doc()
    doc["program"]["functions"][0]["blocks"] = [
        {"id": "b0", "succ": [], "callsite": {"callees": ["main", "main"], "kind": "direct"}}
    ]
    with pytest.raises(ProgramError, match="exactly one callee"):
        load_program(doc)


def test_program_round_trip(chooser_program, hotcold_program):
    for p in (chooser_program, hotcold_program):
        again = load_program(serialize_program(p))
        assert serialize_program(again) == serialize_program(p)
        assert program_to_json(again) == program_to_json(p)


def test_read_program_appends_suffix(tmp_path, chooser_program):
    fp = tmp_path / "prog.json"
    fp.write_text(program_to_json(chooser_program))
    assert read_program(tmp_path / "prog").name == "chooser"
    with pytest.raises(ProgramError, match="no program document"):
        read_program(tmp_path / "missing")


def test_gadget_count_defaults_to_tenth_of_size():
    doc = minimal_doc()
    doc["program"]["functions"][0]["size_bytes"] = 57
    p = load_program(doc)
    assert p.function("main").gadget_count == 5


def test_callgraph_and_reachability(hotcold_program):
    cg = hotcold_program.callgraph
    assert cg["dispatch"] == frozenset({"parse", "transform"})
    assert cg["transform"] == frozenset({"finalize"})
    assert cg["parse"] == frozenset()
    closure = hotcold_program.reachable_closure({"transform"})
    assert closure == frozenset({"transform", "finalize", "debugdump"})


def test_trace_round_trip():
    t = Trace(
        events=(
            EnterScg(entry=0, features=(4, -2)),
            Call(callsite=0, callee="main"),
            Return(function="main"),
        )
    )
    text = serialize_trace(t)
    assert parse_trace(text) == t
    assert "E 0 4,-2" in text


def test_trace_parser_skips_comments_and_blanks():
    t = parse_trace("# header\n\nC 0 main\nR main\n")
    assert len(t) == 2
    assert t.call_sequence() == (0,)


def test_trace_parser_rejects_garbage():
    with pytest.raises(TraceError, match="line 1"):
        parse_trace("X what is this\n")
    with pytest.raises(TraceError):
        parse_trace("C zero main\n")


def test_workload_section_validation():
    doc = minimal_doc()
    doc["program"]["workload"] = {"never_call": ["ghost"]}
    with pytest.raises(ProgramError, match="never_call"):
        load_program(doc)
    doc = minimal_doc()
    doc["program"]["workload"] = {
        "args": {"main": {"choices": [[1]], "weights": [1.0, 2.0]}}
    }
    with pytest.raises(ProgramError, match="weights must match"):
        load_program(doc)
