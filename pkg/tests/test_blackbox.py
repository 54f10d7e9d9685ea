import sys

import numpy as np
import pandas as pd
import pytest
import torch

from fairaudit.blackbox import (ConstantModel, InputEncoder, MLPClassifier, ScoredTable, SubprocessModel,
                                load_scored_csv, score_table, train_mlp, write_scored_csv)
from fairaudit.data import DataError, RawTable

from conftest import toy_schema, toy_table


def test_constant_model_scores(table):
    s = score_table(ConstantModel(0.3), table)
    assert np.all(s.predictions == 0.3)
    assert len(s) == len(table)


def test_scored_table_validation(table):
    p = np.full(len(table), 0.5)
    p[7] = 1.5
    with pytest.raises(DataError, match="row 7"):
        ScoredTable(table, p)
    with pytest.raises(DataError):
        ScoredTable(table, np.zeros(3))


class InputSpy:
    def __init__(self):
        self.columns = None

    def predict(self, rows):
        self.columns = list(rows.columns)
        return np.full(len(rows), 0.5)


def test_score_uses_model_inputs_only():
    t = toy_table(50, withheld=("Sex",))
    spy = InputSpy()
    score_table(spy, t)
    assert spy.columns == ["Age", "Color", "Score"]


def test_scored_csv_roundtrip(tmp_path, table):
    rng = np.random.default_rng(0)
    s = ScoredTable(table, rng.random(len(table)))
    write_scored_csv(s, tmp_path / "s.csv")
    back = load_scored_csv(tmp_path / "s.csv", table.schema)
    assert np.array_equal(back.predictions, s.predictions)
    assert back.table.rows.equals(table.rows)
    assert (back.table.labels == table.labels).all()


def test_scored_csv_bad_prediction(tmp_path, table):
    s = ScoredTable(table, np.full(len(table), 0.5))
    write_scored_csv(s, tmp_path / "s.csv")
    df = pd.read_csv(tmp_path / "s.csv")
    df.loc[4, "__prediction__"] = -0.1
    df.to_csv(tmp_path / "s.csv", index=False)
    with pytest.raises(DataError, match="row 4"):
        load_scored_csv(tmp_path / "s.csv", table.schema)


def test_subprocess_model(table):
    script = "import sys; rows = sys.stdin.read().splitlines()[1:]; print('p'); [print(0.25) for _ in rows]"
    m = SubprocessModel([sys.executable, "-c", script])
    p = score_table(m, table).predictions
    assert np.all(p == 0.25)


def test_subprocess_model_failure(table):
    m = SubprocessModel([sys.executable, "-c", "import sys; sys.exit(3)"])
    with pytest.raises(DataError, match="status 3"):
        score_table(m, table)


def test_subprocess_model_count_mismatch(table):
    m = SubprocessModel([sys.executable, "-c", "print(0.5)"])
    with pytest.raises(DataError, match="1 predictions"):
        score_table(m, table)


def test_input_encoder_roundtrip(table):
    enc = InputEncoder.fit(table)
    x = enc.transform(table.rows)
    assert x.min() >= 0 and x.max() <= 1
    back = enc.inverse_transform(x)
    assert (back["Sex"] == table.rows["Sex"]).all()
    assert np.allclose(back["Age"], table.rows["Age"])
    assert np.allclose(back["Score"], table.rows["Score"], atol=1e-5)


def test_input_encoder_skips_withheld():
    t = toy_table(50, withheld=("Sex",))
    enc = InputEncoder.fit(t)
    assert [b[0] for b in enc.blocks] == ["Age", "Color", "Score"]
    assert enc.width == 5


def test_input_gradient_matches_finite_differences(table):
    enc = InputEncoder.fit(table)
    torch.manual_seed(0)
    model = MLPClassifier(enc, [8])
    model.net.double()
    x = enc.transform(table.rows[:3]).astype(float)
    g = model.input_gradient(x, 1)
    h = 1e-6
    for i in range(3):
        for j in range(enc.width):
            xp, xm = x.copy(), x.copy()
            xp[i, j] += h
            xm[i, j] -= h
            fd = (model.loss(xp, 1).sum() - model.loss(xm, 1).sum()) / (2 * h)
            assert g[i, j] == pytest.approx(fd, rel=1e-4, abs=1e-7)


def test_train_mlp_learns_signal(table):
    model = train_mlp(table, search_space=[[16]], epochs=60, seed=0)
    acc = ((model.predict(table.rows) >= 0.5) == table.y).mean()
    assert acc > 0.8
    assert 0.0 <= model.validation_accuracy <= 1.0


def test_train_mlp_requires_binary_labels(table):
    t = RawTable(table.schema, table.rows, pd.Series(["yes"] * len(table)))
    with pytest.raises(DataError, match="binary"):
        train_mlp(t)
    with pytest.raises(DataError):
        train_mlp(RawTable(table.schema, table.rows))


def test_mlp_save_load(tmp_path, table):
    model = train_mlp(table, search_space=[[8]], epochs=2)
    model.save(tmp_path / "m.pt")
    back = MLPClassifier.load(tmp_path / "m.pt", table.schema)
    assert np.array_equal(back.predict(table.rows), model.predict(table.rows))
    assert back.validation_accuracy == model.validation_accuracy
    with pytest.raises(DataError, match="schema"):
        MLPClassifier.load(tmp_path / "m.pt", toy_schema(withheld=("Sex",)))
