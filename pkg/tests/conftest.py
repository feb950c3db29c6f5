import sys
from pathlib import Path

import pytest

from echogen import tensor as T

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(autouse=True)
def debug_checks():
    """Every op output is NaN/Inf-guarded during tests."""
    T.set_debug_checks(True)
    yield
    T.set_debug_checks(False)
