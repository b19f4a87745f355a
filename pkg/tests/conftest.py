import pytest
import torch
from hypothesis import HealthCheck, settings

from sovstg.config import RunConfig
from sovstg.data import SceneSpec, generate_dataset

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    generate_dataset(SceneSpec(num_train=24, num_test=8, seed=3), root)
    return root


@pytest.fixture
def tiny_cfg():
    return RunConfig.from_dict(dict(preset="tiny", epochs=2, batch_size=8, checkpoint_every=1))


_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    report = (yield).get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.failed or (report.when == "call" and number not in _CRITERIA):
        verdict = "FAIL" if report.failed else ("SKIP" if report.skipped else "PASS")
        if _CRITERIA.get(number, ("", "PASS"))[1] != "FAIL":
            _CRITERIA[number] = (title, verdict)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, verdict = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {title}")
