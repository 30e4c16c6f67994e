import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pivotfield.hydraulics import SoilHydraulics


#: Sandy clay loam reference parameter set used throughout the tests.
SANDY_CLAY_LOAM = dict(theta_s=0.410, theta_r=0.090, k_s=7.222e-7, alpha=1.90, n=1.31, s_r=1e-4)


@pytest.fixture
def scl():
    return SoilHydraulics(**SANDY_CLAY_LOAM)


@pytest.fixture
def rng():
    return np.random.default_rng(20210603)
