import json

import pytest

from tabtree import cli
from tabtree.dataset import load_csv, split, write_csv

from conftest import make_toy


@pytest.fixture(scope="module")
def csvs(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    train, test = split(make_toy(250, seed=1), 0.8, 0)
    write_csv(train, d / "train.csv")
    write_csv(test, d / "test.csv")
    return d


@pytest.fixture(scope="module")
def fitted(csvs):
    cfg = csvs / "run.json"
    cfg.write_text(json.dumps({"train": {"batch_size": 32}}))
    rc = cli.main(["fit", "--data", str(csvs / "train.csv"), "--target", "c", "--config", str(cfg),
                   "--max-steps", "12", "--k", "4", "--q", "40", "--out", str(csvs / "m.ttf")])
    assert rc == 0
    return csvs / "m.ttf"


def test_fit_generate_evaluate(csvs, fitted, capsys):
    out = csvs / "synth.csv"
    assert cli.main(["generate", "--model", str(fitted), "--rows", "60", "--seed", "3", "--out", str(out)]) == 0
    synth = load_csv(out)
    assert synth.n_rows == 60
    assert synth.schema.names == ["a", "b", "c", "d", "e"]
    meta = json.loads((csvs / "synth.csv.json").read_text())
    assert meta["rows"] == 60 and meta["generation"]["temperature_categorical"] == 2.0

    rep = csvs / "report.json"
    assert cli.main(["evaluate", "--train", str(csvs / "train.csv"), "--test", str(csvs / "test.csv"),
                     "--synth", str(out), "--target", "c", "--out", str(rep)]) == 0
    d = json.loads(rep.read_text())
    assert 0 <= d["shape"] <= 1 and 0 <= d["dcr_p"] <= 1 and "mle" in d
    assert "shape=" in capsys.readouterr().out


def test_generate_is_reproducible(csvs, fitted):
    a, b = csvs / "g1.csv", csvs / "g2.csv"
    for p in (a, b):
        assert cli.main(["generate", "--model", str(fitted), "--rows", "20", "--seed", "1",
                         "--temperature-numeric", "0.5", "--out", str(p)]) == 0
    assert a.read_text() == b.read_text()


def test_usage_errors(csvs, fitted):
    with pytest.raises(SystemExit) as e:
        cli.main(["fit"])
    assert e.value.code == 1
    assert cli.main(["generate", "--model", str(fitted), "--rows", "0", "--out", str(csvs / "x.csv")]) == 1
    assert cli.main(["generate", "--model", str(fitted), "--rows", "5", "--temperature-numeric", "-1",
                     "--out", str(csvs / "x.csv")]) == 1


def test_data_errors(csvs, tmp_path):
    assert cli.main(["fit", "--data", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "m")]) == 2
    assert cli.main(["fit", "--data", str(csvs / "train.csv"), "--target", "zz",
                     "--out", str(tmp_path / "m")]) == 2
    bad = tmp_path / "bad.ttf"
    bad.write_bytes(b"not a checkpoint")
    assert cli.main(["generate", "--model", str(bad), "--rows", "3", "--out", str(tmp_path / "o.csv")]) == 2
    assert not (tmp_path / "o.csv").exists()


def test_bad_config_key(csvs, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"nope": 1}}))
    assert cli.main(["fit", "--data", str(csvs / "train.csv"), "--config", str(cfg),
                     "--out", str(tmp_path / "m")]) == 1
