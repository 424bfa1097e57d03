import json

import numpy as np
import pytest

from reform.dataset import Review, graph_from_pairs


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write((row if isinstance(row, str) else json.dumps(row)) + "\n")
    return path


def review(u, i, text="good food", ts=None, rid=-1, rating=None):
    return Review(str(u), str(i), text, rating, ts, rid)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_graph():
    # 3 users, 4 items, every node has at least one edge
    pairs = [(0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (2, 3), (0, 3)]
    return graph_from_pairs(3, 4, pairs)


def random_graph(rng, num_users, num_items, p=0.5):
    pairs = [(u, i) for u in range(num_users) for i in range(num_items) if rng.random() < p]
    for u in range(num_users):
        pairs.append((u, u % num_items))
    for i in range(num_items):
        pairs.append((i % num_users, i))
    return graph_from_pairs(num_users, num_items, pairs)


# criterion -> (passed, detail), filled by test_acceptance and printed at the end
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")
