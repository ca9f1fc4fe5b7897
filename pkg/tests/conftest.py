import numpy as np
import pytest

from hbert.fixtures import fixture_trees
from hbert.ontology import SystemId, parse_hierarchy

GOLDEN = """\
root\t*
I00-I99\troot
I21\tI00-I99
I21.0\tI21
I21.02\tI21.0
"""


@pytest.fixture
def golden_tree():
    return parse_hierarchy(GOLDEN, SystemId.DIAGNOSIS, max_depth=3)


@pytest.fixture(scope="session")
def trees():
    return fixture_trees()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
