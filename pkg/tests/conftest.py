import numpy as np
import pytest

from grpoagg.aggregate import ClipConfig
from grpoagg.groups import Response, RolloutGroup


@pytest.fixture
def clip():
    return ClipConfig(0.2, 0.28)


def make_response(length, reward, ratio=1.0, tokens=None):
    """Response of given length with a constant ratio (or explicit ratios)."""
    if tokens is None:
        tokens = (1,) * length
    if np.isscalar(ratio):
        ratios = (float(ratio),) * length
    else:
        ratios = tuple(float(r) for r in ratio)
    return Response(tuple(tokens), float(reward), ratios)


def make_group(specs, eps_var=0.0, prompt_id="p0"):
    """Group from (length, reward) or (length, reward, ratio) tuples."""
    responses = tuple(make_response(*s) for s in specs)
    return RolloutGroup(prompt_id, responses, eps_var)
