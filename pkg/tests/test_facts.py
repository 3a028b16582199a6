"""Base relation extraction from the two dataflow analyses."""
from debloatkit import extract_factbase, load_program, parse_facts, serialize_facts, solve_flow
from debloatkit.facts import FactBase
from debloatkit.fixtures import empty_main


def test_chooser_base_facts_exactly(chooser_program):
    fb = extract_factbase(chooser_program)
    assert fb.head == {("main", 1), ("main", 2), ("A", 5)}
    assert fb.tail == {("main", 4), ("A", 5)}
    assert fb.next == {("main", 1, 3), ("main", 2, 3), ("main", 3, 4)}
    assert fb.leaf == {"B", "C", "D", "E"}
    assert fb.belong == {
        (0, "main"),
        (1, "A"),
        (2, "B"),
        (3, "D"),
        (4, "E"),
        (5, "C"),
    }
    assert fb.count() == 18


def test_empty_main_facts():
    fb = extract_factbase(empty_main())
    assert fb.count() == 2
    assert fb.leaf == {"main"}
    assert fb.belong == {(0, "main")}


def test_hotcold_base_facts(hotcold_program):
    fb = extract_factbase(hotcold_program)
    assert fb.head == {("dispatch", 1), ("dispatch", 2), ("transform", 3), ("finalize", 4)}
    assert fb.tail == {("dispatch", 2), ("transform", 3), ("finalize", 4)}
    assert fb.next == {("dispatch", 1, 2)}
    assert fb.leaf == {"parse", "debugdump"}
    assert len(fb.belong) == 5


def test_flow_sets_on_chooser_main(chooser_program):
    flow = solve_flow(chooser_program.function("main"))
    # next callsite at the entry is either arm of the branch
    assert flow.in_ahead["b0"] == frozenset({1, 2})
    # a block with its own callsite shadows what flows through
    assert flow.in_ahead["b1"] == frozenset({1})
    assert flow.out_ahead["b1"] == frozenset({3})
    assert flow.in_behind["b3"] == frozenset({1, 2})
    assert flow.out_behind["b4"] == frozenset({4})


def test_flow_sets_reach_fixpoint_through_a_loop():
    p = load_program(
        {
            "program": {
                "name": "loopy",
                "entry": "main",
                "page_size": 64,
                "functions": [
                    {
                        "name": "main",
                        "size_bytes": 32,
                        "entry_block": "e",
                        "exit_blocks": ["x"],
                        "blocks": [
                            {"id": "e", "succ": ["h"]},
                            {"id": "h", "succ": ["b", "x"]},
                            {"id": "b", "succ": ["h"], "callsite": {"callees": ["w"]}},
                            {"id": "x", "succ": []},
                        ],
                    },
                    {
                        "name": "w",
                        "size_bytes": 16,
                        "entry_block": "w0",
                        "exit_blocks": ["w0"],
                        "blocks": [{"id": "w0", "succ": []}],
                    },
                ],
            }
        }
    )
    main = p.function("main")
    cs = main.block("b").callsite.id
    flow = solve_flow(main)
    # around the back edge the loop call can both precede and follow itself
    assert cs in flow.in_ahead["h"]
    assert cs in flow.in_behind["h"]
    fb = extract_factbase(p)
    assert ("main", cs, cs) in fb.next
    assert ("main", cs) in fb.head
    assert ("main", cs) in fb.tail


def test_serialize_parse_round_trip(chooser_program, hotcold_program):
    for p in (chooser_program, hotcold_program):
        fb = extract_factbase(p)
        again = parse_facts(serialize_facts(fb))
        assert again.head == fb.head
        assert again.tail == fb.tail
        assert again.next == fb.next
        assert again.leaf == fb.leaf
        assert again.belong == fb.belong


def test_parse_facts_tolerates_comments():
    fb = parse_facts("% comment\n# also\n\nleaf(z).\nbelong(0, z).\n")
    assert fb.leaf == {"z"}
    assert fb.belong == {(0, "z")}


def test_serialized_facts_are_sorted_and_stable(chooser_program):
    fb = extract_factbase(chooser_program)
    text = serialize_facts(fb)
    assert text == serialize_facts(parse_facts(text))
    lines = text.strip().splitlines()
    assert lines[0] == "head(A, 5)."
    assert lines[-1] == "belong(5, C)."


def test_count_empty():
    assert FactBase().count() == 0
