import os
import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from flowcheck.dta import parse_dta  # noqa: E402
from flowcheck.model import parse_population_model  # noqa: E402
from flowcheck.product import build_product  # noqa: E402

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"

settings.register_profile("default", max_examples=100, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def fixture_text(name: str) -> str:
    return (FIXTURES / name).read_text()


@pytest.fixture(scope="session")
def sis():
    return parse_population_model(fixture_text("sis.json"))


@pytest.fixture(scope="session")
def sis_dta(sis):
    return parse_dta(fixture_text("sis_property.json"), sis.agent_class.labels)


@pytest.fixture(scope="session")
def sis_product(sis, sis_dta):
    return build_product(sis.agent_class, sis_dta, "S")


@pytest.fixture(scope="session")
def expo():
    return parse_population_model(fixture_text("expo.json"))


@pytest.fixture(scope="session")
def expo_dta(expo):
    return parse_dta(fixture_text("expo_property.json"), expo.agent_class.labels)


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


CRITERIA: list[str] = []


def record_criterion(line: str) -> None:
    print(line)
    CRITERIA.append(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
