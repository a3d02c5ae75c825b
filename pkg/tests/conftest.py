import os

import pytest
import torch
from hypothesis import HealthCheck, settings

from lidar_nsm import toy_world as tw

torch.set_num_threads(int(os.environ.get("NSM_THREADS", "1")))

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """24 sim / 16 real / 8 test desk frames; shared read-only across tests."""
    out = tmp_path_factory.mktemp("tiny_corpus")
    return tw.gen_corpus(tw.SceneSpec(), tw.CorruptionModel(), 24, 16, 8, seed=3, out_dir=out,
                         frames_per_drive=4)
