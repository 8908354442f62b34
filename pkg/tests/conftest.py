import datetime as dt

import numpy as np
import pytest

from dayshift import synthgen
from dayshift.dataset import Feature, FeatureSchema, TransactionTable


def small_calendar(n_days, start=dt.date(2015, 3, 1)):
    return synthgen.CalendarModel(start, n_days)


def shifted_pair_table(n_per_day, shift_sd=3.0, seed=0):
    """Two days from one distribution, except day 1's log-amount moves by shift_sd sigmas."""
    table = synthgen.generate(small_calendar(2),
                              synthgen.GenParams(separation=0.0, tx_per_day=n_per_day, seed=seed))
    values = table.values.copy()
    on_day1 = table.day_index == 1
    values[on_day1, 0] = values[on_day1, 0] * np.exp(shift_sd * synthgen.AMOUNT_SCALE)
    return TransactionTable(table.schema, table.day_index, values, table.label, table.day_dates)


@pytest.fixture
def tiny_schema():
    return FeatureSchema((
        Feature("x", "continuous"),
        Feature("c", "categorical", 5),
        Feature("b", "binary"),
    ))


@pytest.fixture
def tiny_table(tiny_schema):
    return TransactionTable(
        schema=tiny_schema,
        day_index=np.array([0, 0, 1]),
        values=np.array([[1.5, 0, 1], [-2.25, 4, 0], [0.1, 2, 1]]),
        label=np.array([0, 1, 0]),
        day_dates=(dt.date(2015, 3, 1), dt.date(2015, 3, 2)),
    )


# acceptance criteria append "PASS ..." / "FAIL ..." lines here; echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
