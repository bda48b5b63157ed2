import numpy as np
import pytest

from kgadapter.harness import PretrainConfig, build_lm
from kgadapter.kg import KnowledgeGraph
from kgadapter.synth import gen_synthetic

# the standard benchmark: seed 0, 50 entities, 10 relations, 100 train / 20 test, up to 2 hops
STANDARD = dict(seed=0, n_entities=50, n_relations=10, n_questions=120, max_hops=2)


@pytest.fixture(scope="session")
def standard_bench():
    return gen_synthetic(**STANDARD)


@pytest.fixture(scope="session")
def standard(standard_bench):
    kg = standard_bench.graph()
    train, test = standard_bench.questions(kg)
    return kg, train, test


@pytest.fixture(scope="session")
def standard_lm(standard):
    kg, train, test = standard
    lm, tokenizer, losses = build_lm(kg, train, train + test, PretrainConfig())
    return lm, tokenizer, losses


@pytest.fixture
def tiny_kg():
    return KnowledgeGraph.from_labeled([
        ("alice", "people.person.sibling", "bob"),
        ("bob", "people.person.place_of_birth", "paris"),
        ("alice", "people.person.place_of_birth", "rome"),
        ("paris", "location.city.capital_of", "france"),
        ("rome", "location.city.capital_of", "italy"),
        ("bob", "people.person.sibling", "alice"),
    ])


def random_kg(rng: np.random.Generator, max_entities=10, max_relations=3) -> KnowledgeGraph:
    n_e = int(rng.integers(2, max_entities + 1))
    n_r = int(rng.integers(1, max_relations + 1))
    n_t = int(rng.integers(1, 3 * n_e + 1))
    triples = {(int(rng.integers(n_e)), int(rng.integers(n_r)), int(rng.integers(n_e))) for _ in range(n_t)}
    return KnowledgeGraph([f"e{i}" for i in range(n_e)], [f"r{i}" for i in range(n_r)], sorted(triples))


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
