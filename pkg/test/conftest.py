"""pytest wiring for the plugin suite: one scratch workdir per session."""

import sys
from pathlib import Path

import pytest

TEST_DIR = Path(__file__).resolve().parent
if str(TEST_DIR) not in sys.path:
    sys.path.insert(0, str(TEST_DIR))

from plugins import shared_test_state  # noqa: E402


@pytest.fixture(scope="session", autouse=True)
def plugin_workdir(tmp_path_factory):
    path = tmp_path_factory.mktemp("adafilter")
    shared_test_state["workdir"] = str(path)
    yield path
    shared_test_state["workdir"] = None
