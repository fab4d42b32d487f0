import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from codesign.design_space import build_schema, sample_sequences, validate  # noqa: E402


@pytest.fixture(scope="session")
def schema():
    return build_schema()


@pytest.fixture(scope="session")
def points(schema):
    seqs = sample_sequences(schema, 40, np.random.default_rng(1234))
    return [validate(s.tolist(), schema) for s in seqs]


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
