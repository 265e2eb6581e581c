import numpy as np
import pytest

from kgicl.kg import KnowledgeGraph, TripleFile, build_kg

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def random_triples(rng, n_entities, n_relations, n_facts):
    rows = []
    for _ in range(n_facts):
        h, t = rng.integers(n_entities, size=2)
        rows.append((f"e{h}", f"r{rng.integers(n_relations)}", f"e{t}"))
    return TripleFile("<memory>", rows)


def random_kg(rng, n_entities=12, n_relations=3, n_facts=30) -> KnowledgeGraph:
    kg, _ = build_kg(random_triples(rng, n_entities, n_relations, n_facts))
    return kg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def acceptance():
    def record(criterion: str, passed: bool, detail: str = ""):
        ACCEPTANCE_RESULTS.append((criterion, passed, detail))
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
