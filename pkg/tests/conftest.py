import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from woodgeom import fixture_path, load_calibration
from woodgeom.fisheye_models import IntrinsicCalibration, RadialModel

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def cal190() -> IntrinsicCalibration:
    return load_calibration(fixture_path())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def ftheta_cal() -> IntrinsicCalibration:
    """Ideal f-theta lens, 190 deg, 1280x960 with centre (640, 480)."""
    model = RadialModel("poly4", (500.0, 0.0, 0.0, 0.0), math.radians(95))
    return IntrinsicCalibration(model, 640.0, 480.0, 1280, 960, 190.0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acceptance_log():
    """Record one PASS/FAIL line per criterion; the lines print at the end of the run."""

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n} {'PASS' if ok else 'FAIL'}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record
