import numpy as np
import pytest

from pm2score.model import train_model
from pm2score.synth import designed_corpus, random_piece

ACCEPTANCE_PREFIX = "tests/test_acceptance.py::"


@pytest.fixture(scope="session")
def designed_model():
    """Model trained on designed 4/4 and 3/4 pieces (shared, read-only)."""
    return train_model(designed_corpus(3, 40, ("4/4", "3/4")))


@pytest.fixture(scope="session")
def random_model():
    rng = np.random.default_rng(11)
    return train_model([random_piece(rng) for _ in range(60)])


_acceptance: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if not report.nodeid.startswith(ACCEPTANCE_PREFIX):
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        _acceptance[report.nodeid] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, (outcome, detail) in sorted(_acceptance.items(), key=lambda kv: _criterion_key(kv[0])):
        name = nodeid[len(ACCEPTANCE_PREFIX):]
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  {name}  {detail}")


def _criterion_key(nodeid: str) -> int:
    digits = "".join(c for c in nodeid.split("criterion_")[-1].split("_")[0] if c.isdigit())
    return int(digits) if digits else 99
