"""
Pytest configuration for s2wmamba tests.
"""

import os
import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to Python path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

# Set test environment variables BEFORE importing the package
os.environ["S2W_LOG_FILE"] = ""
os.environ["S2W_SEED"] = "7"
os.environ["S2W_DTYPE"] = "float64"
os.environ["S2W_SCAN_CHUNK"] = "64"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Smallest network that still has two pyramid levels in each branch"""
    from s2wmamba.models import NetworkConfig

    return NetworkConfig(ratio=2, bands=4, width=4, d_state=2, expand=2, conv_width=2, seed=3)


@pytest.fixture
def wv3_config():
    from s2wmamba.models import NetworkConfig

    return NetworkConfig(ratio=4, bands=8, width=32, seed=7)
