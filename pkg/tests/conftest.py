import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

MODES = {"full": (True, True), "mem": (True, False), "plain": (False, False)}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    if report.when == "setup" and report.passed:
        return
    detail = dict(item.user_properties).get("detail", "")
    item.config._criteria[number] = (title, "PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    criteria = getattr(config, "_criteria", {})
    if not criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(criteria):
        title, status, detail = criteria[number]
        line = f"criterion {number} {status}: {title}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))


class TrainedRuns:
    """Lazily trains the desk-scale profile once per (mode, seed) per session."""

    def __init__(self):
        self._cache = {}
        self._data = None

    @property
    def data(self):
        if self._data is None:
            from memmc_mae.config import SyntheticSpec
            from memmc_mae.data import generate_synthetic

            self._data = generate_synthetic(SyntheticSpec())
        return self._data

    def get(self, mode: str, seed: int):
        key = (mode, seed)
        if key not in self._cache:
            from memmc_mae.config import tiny_model_config, tiny_train_config, tiny_scoring_config
            from memmc_mae.scoring import score_images
            from memmc_mae.training import train

            mem_enc, mc_dec = MODES[mode]
            normal, test = self.data
            ckpt = train(normal, tiny_model_config(mem_enc=mem_enc, mc_dec=mc_dec),
                         tiny_train_config(seed=seed))
            model = ckpt.build_model()
            results = score_images(model, test.images, tiny_scoring_config(), ids=test.ids)
            self._cache[key] = (ckpt, model, results)
        return self._cache[key]


@pytest.fixture(scope="session")
def trained_runs():
    return TrainedRuns()
