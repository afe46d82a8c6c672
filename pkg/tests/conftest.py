import os
import tempfile

import numpy as np
import pytest

# services/ledger.py reads GRIT_LEDGER_PATH whenever a run starts - point it at
# an ephemeral file so a test run never writes a ledger next to real results,
# and clear GRIT_SEED so a developer's .env can't shift the plan seeds tests
# assert on.
_tmp_dir = tempfile.mkdtemp(prefix="grit_test_ledger_")
os.environ["GRIT_LEDGER_PATH"] = os.path.join(_tmp_dir, "test_ledger.sqlite3")
os.environ.pop("GRIT_SEED", None)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)
