# conftest.py
# Shared fixtures; lives at the repository root so the flat modules import from tests/

import os
import json

import numpy as np
import pytest

from config_manager import ENV_PREFIX, FusionConfig
from synth_data import SceneObject, SceneSpec, generate


GOLDEN_FILE = os.path.join(os.path.dirname(os.path.abspath(__file__)), "tests", "golden_digests.json")


def pytest_addoption(parser):
    parser.addoption("--record-golden", action="store_true",
                     help="store the current output digests as the golden values")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-second checks (estimator accuracy, timing)")


@pytest.fixture(autouse=True)
def clean_fusion_env(monkeypatch):
    """Keep FUSION_* variables from the developer shell out of every test"""
    for key in list(os.environ):
        if key.startswith(ENV_PREFIX):
            monkeypatch.delenv(key)


@pytest.fixture
def golden(request):
    """Check a digest against tests/golden_digests.json, or record it with --record-golden"""
    record = request.config.getoption("--record-golden")

    def check(name, digest):
        store = {}
        if os.path.exists(GOLDEN_FILE):
            with open(GOLDEN_FILE) as f:
                store = json.load(f)
        if record:
            store[name] = digest
            with open(GOLDEN_FILE, "w") as f:
                json.dump(store, f, indent=2, sort_keys=True)
            return
        if name not in store:
            pytest.skip(f"no golden digest for {name}; record one with pytest --record-golden")
        assert digest == store[name], f"{name} drifted from its recorded digest"
    return check


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return FusionConfig(channels=4, patch=4, crop=32, iters=3, batch=1)


@pytest.fixture
def tiny_spec():
    return SceneSpec(height=32, width=32, frames=3,
                     objects=(SceneObject("rect", 8, 4, 8, 2, 0, 0.9, 0.3),))


@pytest.fixture
def tiny_scene(tiny_spec):
    return generate(tiny_spec)
