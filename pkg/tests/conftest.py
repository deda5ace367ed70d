import re

import pytest

ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


@pytest.fixture(scope="session")
def acceptance_log(pytestconfig):
    return pytestconfig.stash[ACCEPTANCE_KEY]


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=_criterion_order):
            terminalreporter.write_line(line)


def _criterion_order(line):
    label = line.partition("criterion")[2].split(":")[0].strip()
    number = re.match(r"\d+", label)
    return int(number.group()) if number else 0, label
