from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

import fedpull as fp

settings.register_profile(
    "ci",
    derandomize=True,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ci")


@pytest.fixture(scope="session")
def copy_corpus():
    return fp.generate_domain(fp.DomainSpec(kind="copy", size=2000, seed=11))


@pytest.fixture(scope="session")
def trained_copy(copy_corpus):
    """A model trained to high accuracy on the copy task, plus its loss trace."""
    model = fp.init_model(fp.ModelConfig(seed=1))
    opt = fp.make_optimizer("adam", 1e-3)
    model, opt, losses = fp.train_steps(model, opt, copy_corpus, 800, 16, 42)
    return model, losses


@pytest.fixture(scope="session")
def default_model():
    return fp.init_model(fp.ModelConfig(seed=1))
