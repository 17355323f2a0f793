import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stereoslam.geometry import Intrinsics, Pose, se3_exp

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def K():
    return Intrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, baseline=0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_pose(rng, rot_scale=0.5, trans_scale=1.0) -> Pose:
    xi = np.concatenate([rng.normal(size=3) * rot_scale, rng.normal(size=3) * trans_scale])
    return se3_exp(xi)
