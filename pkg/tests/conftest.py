import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dtrkit import sim_single_stage, sim_two_stage


@pytest.fixture(scope="session")
def single_small():
    """500-subject single-stage benchmark data (PolicyData, raw table)."""
    return sim_single_stage(500, seed=1)


@pytest.fixture(scope="session")
def two_small():
    """200-subject two-stage benchmark data (PolicyData, raw table)."""
    return sim_two_stage(200, seed=7)
