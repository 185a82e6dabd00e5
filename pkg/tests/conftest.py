from __future__ import annotations

import pytest

from progfc.datasets import ClaimRecord
from progfc.engine import VeracityLabel
from progfc.handlers import MockHandler

FIG2_CLAIM = "Both James Cameron and the director of the film Interstellar were born in Canada."
FIG2_PROGRAM = """\
fact_1 = Verify("James Cameron was born in Canada.")
Answer_1 = Question("Who is the director of the film Interstellar?")
fact_2 = Verify("{Answer_1} was born in Canada.")
label = Predict(fact_1 and fact_2)"""

# Three facts: two claim judgements and one question answer.
FIG2_FIXTURE = {
    "James Cameron was born in Canada.": True,
    "Who is the director of the film Interstellar?": "Christopher Nolan",
    "Christopher Nolan was born in Canada.": False,
}


@pytest.fixture
def fig2_claim() -> ClaimRecord:
    return ClaimRecord("fig2", FIG2_CLAIM, VeracityLabel.REFUTED, 2)


@pytest.fixture
def fig2_handler() -> MockHandler:
    return MockHandler(FIG2_FIXTURE)


# One line per acceptance criterion, echoed at the end of the session.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
