"""
测试公共设置
"""

import os
import sys

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 运行时间较长的蒙特卡罗或端到端测试")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
