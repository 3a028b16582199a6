"""Loop detection: dominators, natural loops, preheaders, irreducibility."""
from debloatkit import compute_loops, load_program
from debloatkit.loops import compute_loops_for, dominators


def fn(blocks, entry, exits, name="main"):
    return load_program(
        {
            "program": {
                "name": "t",
                "entry": name,
                "page_size": 64,
                "functions": [
                    {
                        "name": name,
                        "size_bytes": 16,
                        "entry_block": entry,
                        "exit_blocks": exits,
                        "blocks": blocks,
                    }
                ],
            }
        }
    ).function(name)


def test_straight_line_has_no_loops(chooser_program):
    forests = compute_loops(chooser_program)
    assert all(not fl.loops and not fl.irreducible for fl in forests.values())


def test_single_loop_with_real_preheader():
    f = fn(
        [
            {"id": "e", "succ": ["h"]},
            {"id": "h", "succ": ["b", "x"]},
            {"id": "b", "succ": ["h"]},
            {"id": "x", "succ": []},
        ],
        "e",
        ["x"],
    )
    fl = compute_loops_for(f)
    assert not fl.irreducible
    assert len(fl.loops) == 1
    loop = fl.loops[0]
    assert loop.header == "h"
    assert loop.body == frozenset({"h", "b"})
    assert loop.preheader.block == "e"
    assert not loop.preheader.virtual
    assert fl.in_loop("b") and not fl.in_loop("x")


def test_header_without_dedicated_predecessor_gets_virtual_preheader():
    # two ways into the header, so no block qualifies as its preheader
    f = fn(
        [
            {"id": "e", "succ": ["h", "h2"]},
            {"id": "h2", "succ": ["h"]},
            {"id": "h", "succ": ["b", "x"]},
            {"id": "b", "succ": ["h"]},
            {"id": "x", "succ": []},
        ],
        "e",
        ["x"],
    )
    loop = compute_loops_for(f).loops[0]
    assert loop.preheader.virtual
    assert loop.preheader.describe() == "virtual(h.pre)"


def test_nested_loops_report_parents():
    f = fn(
        [
            {"id": "e", "succ": ["o"]},
            {"id": "o", "succ": ["i", "x"]},
            {"id": "i", "succ": ["b"]},
            {"id": "b", "succ": ["i", "o"]},
            {"id": "x", "succ": []},
        ],
        "e",
        ["x"],
    )
    fl = compute_loops_for(f)
    by_header = fl.by_header
    assert set(by_header) == {"o", "i"}
    outer, inner = by_header["o"], by_header["i"]
    assert inner.body == frozenset({"i", "b"})
    assert inner.body < outer.body
    assert inner.parent == "o"
    assert outer.parent is None
    assert fl.outermost == (outer,)
    # innermost first for shared blocks
    assert [l.header for l in fl.block_to_loops["b"]] == ["i", "o"]


def test_irreducible_cfg_is_flagged_not_analyzed():
    f = fn(
        [
            {"id": "e", "succ": ["a", "b"]},
            {"id": "a", "succ": ["b"]},
            {"id": "b", "succ": ["a", "x"]},
            {"id": "x", "succ": []},
        ],
        "e",
        ["x"],
    )
    fl = compute_loops_for(f)
    assert fl.irreducible
    assert fl.loops == ()


def test_dominator_sets_on_a_diamond():
    f = fn(
        [
            {"id": "e", "succ": ["l", "r"]},
            {"id": "l", "succ": ["j"]},
            {"id": "r", "succ": ["j"]},
            {"id": "j", "succ": []},
        ],
        "e",
        ["j"],
    )
    dom = dominators(f)
    assert dom["e"] == {"e"}
    assert dom["l"] == {"e", "l"}
    assert dom["r"] == {"e", "r"}
    assert dom["j"] == {"e", "j"}


def test_self_loop_block():
    f = fn(
        [
            {"id": "e", "succ": ["s"]},
            {"id": "s", "succ": ["s", "x"]},
            {"id": "x", "succ": []},
        ],
        "e",
        ["x"],
    )
    fl = compute_loops_for(f)
    assert len(fl.loops) == 1
    assert fl.loops[0].body == frozenset({"s"})
