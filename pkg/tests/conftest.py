import os

import pytest
from hypothesis import HealthCheck, settings

from edgetune.model_cost import ModelSpec, reference_spec
from edgetune.profile import LinkProfile, synthesize_profiles, tensor_sizes

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=100, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def small_spec():
    return ModelSpec("small", num_layers=4, hidden_size=64, num_heads=4, vocab_size=100)


@pytest.fixture
def small_profiles(small_spec):
    return synthesize_profiles(small_spec, 4, 0.0, 1, seq_len=16,
                               link=LinkProfile(1e8, 0.05), batch_sizes=range(1, 13))


@pytest.fixture
def small_sizes(small_spec):
    return tensor_sizes(small_spec, 16)


@pytest.fixture
def toy_spec():
    return reference_spec("toy")


_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        figure = dict(report.user_properties).get("figure", "")
        _ACCEPTANCE[report.nodeid] = (report.outcome, figure)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, (outcome, figure) in sorted(_ACCEPTANCE.items()):
        name = nodeid.split("::")[-1]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{verdict}  {name}: {figure}")
