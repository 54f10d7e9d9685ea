import json
import sys

import numpy as np
import pandas as pd
import pytest
import yaml

from fairaudit import cli
from fairaudit import lucidgan as lg
from fairaudit.cli import RunConfig, main, sha256
from fairaudit.data import save_schema
from fairaudit.lucidgan import CanonicalSet
from fairaudit.report import render

from conftest import toy_schema, toy_table


@pytest.fixture
def csv_config(tmp_path):
    t = toy_table(400, seed=3)
    df = t.rows.copy()
    df["label"] = t.labels
    df.to_csv(tmp_path / "train.csv", index=False)
    save_schema(toy_schema(), tmp_path / "schema.yaml")
    cfg = {
        "dataset": "csv",
        "train_csv": str(tmp_path / "train.csv"),
        "schema": str(tmp_path / "schema.yaml"),
        "mlp": {"search_space": [[8]], "epochs": 3},
        "gan": {"batch_size": 50},
        "lucid": {"max_iter": 10},
        "intersectional": {"axis": "Color", "fixed": [{"Sex": "Male"}, {"Sex": "Female"}]},
        "out": str(tmp_path / "out"),
    }
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path, tmp_path / "out"


def run(*args):
    return main([str(a) for a in args])


def test_no_modes_is_config_error(tmp_path, capsys):
    code = run("audit", "--dataset", "adult", "--mode", "", "--out", tmp_path / "o")
    assert code == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["exit_code"] == 2 and err["error"] == "ConfigError"
    assert not (tmp_path / "o").exists()


def test_unknown_mode_and_key(tmp_path):
    assert run("audit", "--mode", "sideways", "--out", tmp_path / "o") == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("colour: blue\n")
    assert run("prepare", "--config", bad, "--out", tmp_path / "o") == 2
    assert run("prepare", "--config", tmp_path / "missing.yaml") == 2


def test_config_validation_rules():
    with pytest.raises(cli.ConfigError):
        RunConfig(modes=["lucid"], model_source="scored_csv", scored_csv={"direct": "x"}).validate()
    with pytest.raises(cli.ConfigError):
        RunConfig(model_source="external_scorer").validate()
    with pytest.raises(cli.ConfigError):
        RunConfig(dataset="csv").validate()
    with pytest.raises(cli.ConfigError):
        RunConfig(gan={"epochz": 3}).validate()
    cfg = RunConfig(modes=["proxy"], withheld=["Age"])
    with pytest.raises(cli.ConfigError, match="protected"):
        cfg.validate_schema(toy_schema())
    cfg = RunConfig(modes=["intersectional"], intersectional={"axis": "Color", "fixed": [{"Sex": "Other"}]})
    with pytest.raises(cli.ConfigError):
        cfg.validate_schema(toy_schema())


def test_flags_override_config(csv_config):
    path, _ = csv_config
    args = cli.build_parser().parse_args(["audit", "--config", str(path), "--seed", "7", "--samples", "12",
                                          "--mode", "direct,lucid"])
    cfg = cli.load_config(args)
    assert cfg.seed == 7 and cfg.samples == 12 and cfg.modes == ["direct", "lucid"]
    assert cfg.train_config().seed == 7
    assert cfg.lucid_config().n_samples == 12


def test_missing_artifact(tmp_path, csv_config):
    path, out = csv_config
    assert run("score", "--config", path) == 5
    assert json.loads((out / "error.json").read_text())["exit_code"] == 5
    assert run("report", "--out", tmp_path / "empty") == 5


def test_data_error(tmp_path, csv_config):
    path, _ = csv_config
    df = pd.read_csv(tmp_path / "train.csv")
    df.loc[0, "Color"] = "purple"
    df.to_csv(tmp_path / "train.csv", index=False)
    assert run("prepare", "--config", path) == 3


def test_divergence_exit_code(monkeypatch, csv_config):
    path, _ = csv_config
    assert run("prepare", "--config", path) == 0
    assert run("train-model", "--config", path) == 0
    assert run("score", "--config", path) == 0
    monkeypatch.setattr(lg, "conditional_cross_entropy", lambda raw, b, e: raw.sum() * float("nan"))
    assert run("train-gan", "--config", path, "--epochs", 1) == 4


def test_full_audit_and_report(csv_config):
    path, out = csv_config
    code = run("audit", "--config", path, "--mode", "direct,proxy,intersectional,lucid",
               "--epochs", 2, "--samples", 40, "--seed", 1)
    assert code == 0
    for mode in ("direct", "proxy", "lucid"):
        pos = CanonicalSet.from_csv(out / "canonical" / mode / "positive.csv")
        neg = CanonicalSet.from_csv(out / "canonical" / mode / "negative.csv")
        assert len(pos) == len(neg) == 40
    assert pos.provenance["method"] == "lucid"
    metrics = json.loads((out / "metrics.json").read_text())
    assert set(metrics["modes"]) == {"direct", "proxy", "intersectional", "lucid"}
    assert "Sex" in metrics["groups"]
    pct = pd.read_csv(out / "tables" / "intersectional_color.csv", index_col=0)
    assert np.allclose(pct.sum(axis=1), 100)

    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 1
    for rel, digest in manifest["artifacts"].items():
        assert sha256(out / rel) == digest
    assert "gan/direct.pt" in manifest["artifacts"]

    assert run("report", "--config", path) == 0
    rep = out / "report"
    assert (rep / "direct_sex.png").exists() and (rep / "direct_sex.csv").exists()
    assert (rep / "proxy_sex.png").exists()
    assert (rep / "intersectional_color.png").exists()
    assert (rep / "table1.csv").exists()
    summary = (rep / "summary.txt").read_text()
    assert "direct" in summary


def test_rerun_same_seed_is_stable(csv_config, tmp_path):
    path, out = csv_config
    freqs = []
    for i in range(2):
        target = tmp_path / f"run{i}"
        assert run("audit", "--config", path, "--out", target, "--epochs", 2, "--samples", 200) == 0
        s = CanonicalSet.from_csv(target / "canonical" / "direct" / "positive.csv")
        freqs.append(s.rows["Color"].value_counts(normalize=True).sort_index())
    assert (freqs[0] - freqs[1]).abs().max() < 0.01


def test_report_notes_empty_set(tmp_path):
    out = tmp_path / "art"
    (out / "data").mkdir(parents=True)
    (out / "canonical" / "direct").mkdir(parents=True)
    schema = toy_schema()
    save_schema(schema, out / "data" / "schema.yaml")
    (out / "metrics.json").write_text(json.dumps({"groups": {}, "disparity": {}}))
    empty = CanonicalSet(pd.DataFrame(columns=schema.names), 1.0)
    full = CanonicalSet(toy_table(20).rows, 0.0)
    empty.to_csv(out / "canonical" / "direct" / "positive.csv")
    full.to_csv(out / "canonical" / "direct" / "negative.csv")
    rep = render(out)
    assert "empty" in (rep / "summary.txt").read_text()
    assert not list(rep.glob("direct_*.png"))


def test_external_scorer(csv_config, tmp_path):
    path, out = csv_config
    script = tmp_path / "scorer.py"
    script.write_text("import sys\nrows = sys.stdin.read().splitlines()[1:]\nfor r in rows: print(0.5 if 'Male' in r else 0.2)\n")
    cfg = yaml.safe_load(path.read_text())
    cfg.update(model_source="external_scorer", scorer=f"{sys.executable} {script}")
    path.write_text(yaml.safe_dump(cfg))
    assert run("prepare", "--config", path) == 0
    assert run("score", "--config", path) == 0
    scored = pd.read_csv(out / "scored" / "direct.csv")
    assert set(scored["__prediction__"]) <= {0.5, 0.2}
