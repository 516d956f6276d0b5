import os
import pathlib

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    max_examples=50,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.register_profile("thorough", max_examples=300, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_ARTIFACTS = pathlib.Path(__file__).parent / "_artifacts"
_BUNDLE = _ARTIFACTS / "benchmark_bundle.json"

#: PASS/FAIL lines collected by the acceptance tests, echoed after the
#: run so they are visible without -s.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def benchmark_bundle():
    """The trained ensembles behind the end-to-end acceptance tests.

    Training takes a few minutes on one core, so the result is cached
    under tests/_artifacts/ and reloaded on later runs. Delete the file
    after changing models or the training recipe.
    """
    from coloc.scenarios import train_benchmark_bundle
    from coloc.stgl import load_bundle, save_bundle

    if _BUNDLE.exists():
        return load_bundle(str(_BUNDLE))
    predictor, compensator = train_benchmark_bundle()
    _ARTIFACTS.mkdir(exist_ok=True)
    save_bundle(str(_BUNDLE), predictor, compensator)
    return predictor, compensator
