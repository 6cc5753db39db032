import math

import numpy as np
import pytest

from sonarnet.pipeline import PipelineConfig, Workspace
from sonarnet.synth import Reflector, Scene, synthesize_measurement

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def cfg():
    return PipelineConfig()


@pytest.fixture(scope="session")
def ws(cfg):
    return Workspace(cfg)


@pytest.fixture(scope="session")
def boresight_measurement(cfg):
    scene = Scene((Reflector(1.0, 0.0, 0.0, 0.2),), noise_rms=0.01, seed=1)
    return synthesize_measurement(cfg, scene, serial=3, timestamp_us=1234, seq=5)


@pytest.fixture(scope="session")
def offaxis_measurement(cfg):
    scene = Scene((Reflector(2.2, math.radians(25), 0.0, 0.2),), noise_rms=0.01, seed=2)
    return synthesize_measurement(cfg, scene, serial=3, timestamp_us=99, seq=6)


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)
