import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from splatcams.core import CameraView, Pinhole, Pose, Splats

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def random_splats(seed: int, n: int = 40, sh_degree: int = 2) -> Splats:
    """Surfels scattered around the origin with random orientation and materials."""
    rng = np.random.default_rng(seed)
    means = rng.uniform(-0.5, 0.5, (n, 3))
    means[:, 2] = rng.uniform(-0.3, 0.3, n)
    k = (sh_degree + 1) ** 2
    return Splats.create(means, rng.normal(size=(n, 4)), rng.uniform(0.03, 0.15, (n, 2)), rng.uniform(0.1, 0.7, n),
                         rng.uniform(0.1, 0.9, (n, 3)), rng.uniform(0.1, 0.9, n), sh=rng.normal(0, 0.3, (n, k, 3)))


def small_view(size: int = 32, eye=(0.3, -0.4, 2.0)) -> CameraView:
    return CameraView(Pinhole.from_fov(50, size, size), Pose.look_at(list(eye), [0, 0, 0]), "cam")


@pytest.fixture
def scene():
    return random_splats(0), small_view()


TINY_SCENE = dict(surface="wave", grid=10, n_views=3, n_eval_views=1, image_size=24, projector_size=24,
                  n_patterns=2, n_eval_patterns=1, seed=3)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small synthetic capture set written to disk once per session."""
    from splatcams.scene_io import SyntheticSceneSpec, synth_dataset
    root = tmp_path_factory.mktemp("tiny")
    ds, gt = synth_dataset(SyntheticSceneSpec(**TINY_SCENE), root)
    return ds, gt, root


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
