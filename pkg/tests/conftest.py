import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tactilekit.calibration import CalibrationSettings, calibrate, save_bundle
from tactilekit.geometry import FingertipSurface

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")


@pytest.fixture(scope="session")
def surface():
    return FingertipSurface()


@pytest.fixture(scope="session")
def calibrated():
    """Default calibration run once per session: (bundle, report)."""
    return calibrate(CalibrationSettings())


@pytest.fixture(scope="session")
def bundle(calibrated):
    return calibrated[0]


@pytest.fixture(scope="session")
def bundle_file(bundle, tmp_path_factory):
    path = tmp_path_factory.mktemp("bundle") / "bundle.tkb"
    save_bundle(bundle, path)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def cli_calibration(tmp_path_factory):
    """One ``tactilekit calibrate`` run with defaults, timed: dict(rc, path, seconds, stdout)."""
    import contextlib
    import io
    import time

    from tactilekit.cli import main

    out = tmp_path_factory.mktemp("cli_cal") / "cal.tkb"
    buf = io.StringIO()
    t0 = time.perf_counter()
    with contextlib.redirect_stdout(buf):
        rc = main(["calibrate", "--out", str(out)])
    return {"rc": rc, "path": out, "seconds": time.perf_counter() - t0, "stdout": buf.getvalue()}


@pytest.fixture(scope="session")
def cli_roll_all(bundle_file, tmp_path_factory):
    """``tactilekit roll --object all --trials 10 --seed 7``, timed."""
    import contextlib
    import io
    import time

    from tactilekit.cli import main

    out = tmp_path_factory.mktemp("cli_roll") / "results.csv"
    buf = io.StringIO()
    t0 = time.perf_counter()
    with contextlib.redirect_stdout(buf):
        rc = main(["roll", "--bundle", str(bundle_file), "--object", "all", "--trials", "10",
                   "--seed", "7", "--out", str(out)])
    return {"rc": rc, "path": out, "seconds": time.perf_counter() - t0, "stdout": buf.getvalue()}


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
