import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk():
    """Default-size data splits and warmed-up encoders, built once per session (~80 s)."""
    from bmfl.harness import RunConfig, make_splits, pretrain_encoders

    cfg = RunConfig()
    splits = make_splits(cfg)
    encoders = pretrain_encoders(cfg, splits["train"], splits["clean_val"])
    return cfg, splits, encoders


# one line per acceptance criterion, printed after the run ----------------------------------
ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])


def pytest_collection_modifyitems(items):
    # anything that needs the trained encoders is slow
    for item in items:
        if "desk" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.slow)
