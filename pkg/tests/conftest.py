from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fos.core import AttributeVector, ForegroundInstance, QueryInput, Rectangle, load_schema  # noqa: E402
from fos.dataset import SyntheticConfig, generate_synthetic_corpus  # noqa: E402


@pytest.fixture(scope="session")
def schema():
    return load_schema()


@pytest.fixture(scope="session")
def small_corpus():
    """4 patterns x 6 instances; cheap enough for unit tests."""
    return generate_synthetic_corpus(SyntheticConfig(patterns=4, per_pattern=6, n_shapes=2), seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def make_instance(iid: str, orientation="front", truncation="full-body", size=8, value=0.5, split="train"):
    img = np.full((size, size, 3), value, dtype=np.float32)
    return ForegroundInstance(iid, img, AttributeVector(orientation, truncation), split=split)


def make_query(qid: str, w=20, h=10, rect=(0.5, 0.5, 0.2, 0.4), value=0.3):
    return QueryInput(qid, np.full((h, w, 3), value, dtype=np.float32), Rectangle(*rect))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
