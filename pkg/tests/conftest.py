from __future__ import annotations

import pytest


def pytest_addoption(parser) -> None:
    parser.addoption("--runslow", action="store_true", default=False, help="run the long acceptance tests")


def pytest_collection_modifyitems(config, items) -> None:
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
