import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from genbranch import umspace as U

settings.register_profile(
    "repo", derandomize=True, deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")


@st.composite
def ums_strategy(draw, max_leaves=12, min_leaves=1, height=2.0, grid=None):
    """Random finite ultrametric measure spaces (optionally with heights on a grid)."""
    L = draw(st.integers(min_leaves, max_leaves))
    masses = draw(st.lists(st.floats(0.01, 3.0), min_size=L, max_size=L))
    if grid is None:
        gaps = draw(st.lists(st.floats(0.0, height), min_size=L - 1, max_size=L - 1))
    else:
        k = int(round(height / grid))
        gaps = [grid * g for g in draw(st.lists(st.integers(0, k), min_size=L - 1, max_size=L - 1))]
    extra = draw(st.floats(0.0, 1.0))
    ceiling = (max(gaps) if gaps else 0.0) + extra
    return U.Ums(masses, gaps, ceiling)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
