import warnings

import pytest

from koopman_rendezvous import pipeline as P
from koopman_rendezvous.config import load_config


@pytest.fixture(scope="session")
def far_fit(tmp_path_factory):
    """Bundled far-field scenario: config, output dir and fitted model."""
    cfg = load_config("far_field")
    out = tmp_path_factory.mktemp("far_fit")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        P.gen_data(cfg, out)
        model = P.fit_model(cfg, out)
    return cfg, out, model


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
