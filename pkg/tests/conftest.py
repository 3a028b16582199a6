import pytest

from debloatkit import (
    analyze_program,
    chooser,
    derive,
    extract_factbase,
    generate_workload,
    hotcold,
)


@pytest.fixture(scope="session")
def chooser_program():
    return chooser()


@pytest.fixture(scope="session")
def hotcold_program():
    return hotcold()


@pytest.fixture(scope="session")
def hotcold_db(hotcold_program):
    return derive(extract_factbase(hotcold_program))


@pytest.fixture(scope="session")
def hotcold_traces(hotcold_program):
    return generate_workload(hotcold_program, 11, 30)


@pytest.fixture(scope="session")
def hotcold_analysis(hotcold_program, hotcold_traces):
    return analyze_program(hotcold_program, hotcold_traces)
