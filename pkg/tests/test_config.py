import pytest

from tabtree.config import ARCHITECTURES, RunConfig


def test_presets():
    assert RunConfig(preset="s").architecture()["dim"] == 256
    assert ARCHITECTURES["L"] == (768, 3072, 12, 6)


def test_nm_overrides():
    rc = RunConfig(preset="NM")
    tc, gc = rc.train_config(), rc.generation_config()
    assert tc.tree_mask == (0.0, 0.0) and tc.value_mask == (0.0, 0.0) and tc.patience == 100
    assert (gc.temperature_categorical, gc.temperature_numeric) == (0.2, 0.1)
    assert gc.tree_mask == (0.0, 0.0)


def test_generation_inherits_train_tree_mask():
    rc = RunConfig(train={"tree_mask": [0.1, 0.2]})
    assert rc.generation_config().tree_mask == (0.1, 0.2)


def test_user_overrides_win():
    rc = RunConfig(preset="NM", train={"patience": 4}, generation={"temperature_numeric": 0.7})
    assert rc.train_config().patience == 4
    assert rc.generation_config(seed=5).temperature_numeric == 0.7
    assert rc.generation_config(seed=5).seed == 5


def test_validation():
    with pytest.raises(ValueError):
        RunConfig(preset="XL")
    with pytest.raises(ValueError):
        RunConfig(train={"lr": 1})
    with pytest.raises(ValueError):
        RunConfig(q=0)


def test_resolved_is_complete():
    r = RunConfig().resolved()
    assert r["train"]["batch_size"] == 128 and r["train"]["learning_rate"] == 5e-4
    assert r["generation"]["temperature_categorical"] == 2.0
