import numpy as np
import pandas as pd
import pytest

from fairaudit.data import FeatureSpec, RawTable, TableSchema


def toy_schema(withheld=()) -> TableSchema:
    feats = (
        FeatureSpec("Sex", "categorical", ("Male", "Female"), protected=True, model_input="Sex" not in withheld),
        FeatureSpec("Age", "numeric", integer=True),
        FeatureSpec("Color", "categorical", ("red", "green", "blue")),
        FeatureSpec("Score", "numeric"),
    )
    return TableSchema(feats, positive_label="yes", label_column="label")


def toy_table(n=400, seed=0, withheld=()) -> RawTable:
    """Label depends on Sex and Score, so a classifier has something to find."""
    rng = np.random.default_rng(seed)
    sex = rng.choice(["Male", "Female"], size=n, p=[0.6, 0.4])
    rows = pd.DataFrame({
        "Sex": sex,
        "Age": rng.integers(18, 70, size=n).astype(float),
        "Color": rng.choice(["red", "green", "blue"], size=n),
        "Score": np.where(rng.random(n) < 0.5, rng.normal(-3, 0.5, n), rng.normal(3, 0.5, n)),
    })
    logit = 2.0 * (sex == "Male") - 1.0 + 0.8 * rows["Score"].to_numpy()
    y = rng.random(n) < 1 / (1 + np.exp(-logit))
    return RawTable(toy_schema(withheld), rows, pd.Series(np.where(y, "yes", "no")))


@pytest.fixture
def schema():
    return toy_schema()


@pytest.fixture
def table():
    return toy_table()


# verdict lines from test_acceptance.py, printed at the end of the session
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
