"""pytest 共通設定"""
import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))


def pytest_collection_modifyitems(config, items):
    if os.getenv("SPDE_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="SPDE_RUN_SLOW=1 で実行")
    for item in items:
        if "slow" in item.keywords or "perf" in item.keywords:
            item.add_marker(skip)
