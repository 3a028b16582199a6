"""Derived callsite-pair relation vs exhaustive enumeration."""
import pytest

from debloatkit import (
    OracleBudgetError,
    check_pair,
    db_from_pairs,
    derive,
    estimate_sequences,
    extract_factbase,
    load_program,
    oracle_ensue,
    parse_ensue,
    serialize_ensue,
)

CHOOSER_PAIRS = {(0, 1), (0, 2), (1, 5), (2, 3), (3, 4), (5, 3)}


def test_chooser_derived_pairs_exactly(chooser_program):
    db = derive(extract_factbase(chooser_program))
    assert db.pairs() == CHOOSER_PAIRS
    assert db.n_ensue == 6
    assert db.n_facts == 18
    assert db.derive_seconds >= 0.0


def test_chooser_last_relation(chooser_program):
    db = derive(extract_factbase(chooser_program))
    assert db.last == frozenset({("main", 4), ("A", 5)})


def test_hotcold_derived_pairs(hotcold_program, hotcold_db):
    assert hotcold_db.pairs() == {(0, 1), (0, 2), (1, 2), (2, 3), (3, 4)}


def test_oracle_matches_derived_on_fixtures(chooser_program, hotcold_program):
    for p in (chooser_program, hotcold_program):
        derived = derive(extract_factbase(p)).pairs()
        assert oracle_ensue(p) == derived


def test_check_pair_fails_closed(hotcold_db):
    assert check_pair(hotcold_db, 0, 1)
    assert not check_pair(hotcold_db, 2, 4)
    assert not check_pair(hotcold_db, 999, 1)
    assert not check_pair(hotcold_db, 3, 999)


def test_serialize_golden_and_round_trip(chooser_program):
    db = derive(extract_factbase(chooser_program))
    text = serialize_ensue(db)
    assert text == (
        "ensue(0, 1).\nensue(0, 2).\nensue(1, 5).\n"
        "ensue(2, 3).\nensue(3, 4).\nensue(5, 3).\n"
    )
    assert parse_ensue(text) == CHOOSER_PAIRS
    rebuilt = db_from_pairs(parse_ensue(text))
    assert rebuilt.pairs() == CHOOSER_PAIRS
    assert check_pair(rebuilt, 3, 4)


def test_parse_ensue_rejects_garbage():
    with pytest.raises(ValueError, match="not an ensue line"):
        parse_ensue("ensue(1, 2)\n")


def leaf(name):
    return {
        "name": name,
        "size_bytes": 16,
        "entry_block": f"{name}0",
        "exit_blocks": [f"{name}0"],
        "blocks": [{"id": f"{name}0", "succ": []}],
    }


def test_repeated_callee_on_one_path():
    """Three consecutive calls to the same function must all enumerate.

    The bound on recursion counts call-chain ancestors, not invocations
    that already returned; even rec_bound=1 admits this program.
    """
    p = load_program(
        {
            "program": {
                "name": "thrice",
                "entry": "main",
                "page_size": 64,
                "functions": [
                    {
                        "name": "main",
                        "size_bytes": 16,
                        "entry_block": "b0",
                        "exit_blocks": ["b2"],
                        "blocks": [
                            {"id": "b0", "succ": ["b1"], "callsite": {"callees": ["f"]}},
                            {"id": "b1", "succ": ["b2"], "callsite": {"callees": ["f"]}},
                            {"id": "b2", "succ": [], "callsite": {"callees": ["f"]}},
                        ],
                    },
                    leaf("f"),
                ],
            }
        }
    )
    derived = derive(extract_factbase(p)).pairs()
    assert derived == {(0, 1), (1, 2), (2, 3)}
    assert oracle_ensue(p, rec_bound=1) == derived


def test_recursion_bound_widens_the_oracle():
    """One extra stack level admits the self-adjacent recursive pair."""
    p = load_program(
        {
            "program": {
                "name": "rec",
                "entry": "main",
                "page_size": 64,
                "functions": [
                    {
                        "name": "main",
                        "size_bytes": 16,
                        "entry_block": "m0",
                        "exit_blocks": ["m0"],
                        "blocks": [
                            {"id": "m0", "succ": [], "callsite": {"callees": ["r"]}}
                        ],
                    },
                    {
                        "name": "r",
                        "size_bytes": 16,
                        "entry_block": "r0",
                        "exit_blocks": ["r3"],
                        "blocks": [
                            {"id": "r0", "succ": ["r1", "r2"]},
                            {
                                "id": "r1",
                                "succ": ["r3"],
                                "callsite": {"kind": "indirect", "callees": ["r", "w"]},
                            },
                            {"id": "r2", "succ": ["r3"], "callsite": {"callees": ["w"]}},
                            {"id": "r3", "succ": []},
                        ],
                    },
                    leaf("w"),
                ],
            }
        }
    )
    derived = derive(extract_factbase(p)).pairs()
    shallow = oracle_ensue(p, rec_bound=1)
    deeper = oracle_ensue(p, rec_bound=3)
    assert shallow < deeper
    assert (2, 2) in deeper and (2, 2) not in shallow
    # derivation is depth-independent and must cover any bounded enumeration
    assert deeper <= derived


def test_budget_error(chooser_program):
    with pytest.raises(OracleBudgetError):
        oracle_ensue(chooser_program, budget=1)


def test_estimate_sequences(chooser_program, hotcold_program):
    assert estimate_sequences(chooser_program) == 2
    assert estimate_sequences(hotcold_program) == 6
