import json
from pathlib import Path

import numpy as np
import pytest

from stemil.data import Bag, MILDataset, load_mil_csv, standardize, synth_generate
from stemil.model import PARAM_ORDER
from stemil.training import (TrainConfig, TrainingError, cross_validate, initialize,
                             make_trainer, train)

DATA = Path(__file__).resolve().parents[1] / "data"


@pytest.fixture(scope="module")
def synth():
    ds, _ = standardize(synth_generate(60, (3, 8), 10, 0.5, seed=0))
    return ds


def small(**kw):
    base = dict(T=3, h=2, E=4, epochs=5, batch_size=10, seed=1)
    base.update(kw)
    return TrainConfig(**base)


def test_config_defaults_follow_published_setup():
    c = TrainConfig()
    assert (c.T, c.h, c.E, c.epochs, c.batch_size, c.lr) == (20, 5, 4, 2000, 20, 0.01)
    assert c.optimizer == "sgd" and c.folds == 5 and c.init_temperature == 0.1


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ValueError, match="unknown config keys"):
        TrainConfig.from_dict({"T": 3, "depth": 2})
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"T": 3, "h": 2, "epochs": 1}))
    cfg = TrainConfig.from_json(p)
    assert (cfg.T, cfg.h, cfg.epochs, cfg.E) == (3, 2, 1, 4)


@pytest.mark.parametrize("bad", [dict(T=0), dict(lr=0.0), dict(optimizer="rmsprop"),
                                 dict(aggregator="sum"), dict(epochs=-1)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_zero_epochs_returns_compiled_initialization(synth):
    cfg = small(epochs=0)
    model, history = train(synth, cfg)
    init = initialize(synth, cfg)
    assert history == []
    for name in PARAM_ORDER:
        np.testing.assert_array_equal(model.params[name], init.params[name])
    for t, tree in enumerate(init.forest.trees):
        np.testing.assert_array_equal(model.params["b"][t], -tree.node_thresholds)


def test_training_is_deterministic(synth):
    _, h1 = train(synth, small(seed=42))
    _, h2 = train(synth, small(seed=42))
    assert h1 == h2


def test_loss_trend_decreases(synth):
    _, history = train(synth, TrainConfig(T=5, h=3, E=4, epochs=200, seed=0))
    smooth = np.convolve(history, np.ones(20) / 20, mode="valid")
    assert smooth[-1] < smooth[0]
    assert history[-1] < history[0]
    assert np.all(np.isfinite(history))


def test_adam_option_trains(synth):
    _, history = train(synth, small(optimizer="adam", epochs=30))
    assert history[-1] < history[0]


def test_fixed_query_template(synth):
    model, _ = train(synth, small(train_query=False, epochs=3))
    np.testing.assert_array_equal(model.params["g"], np.ones(4))


def test_non_finite_loss_aborts_with_location(synth):
    trainer = make_trainer(synth, small())
    trainer.model.params["V"] = trainer.model.params["V"].copy()
    trainer.model.params["V"][0, 0, 0] = np.inf
    with pytest.raises(TrainingError, match=r"epoch 1, batch 0"):
        trainer.fit(synth, 1)


def test_batch_larger_than_dataset(synth):
    trainer = make_trainer(synth, small(batch_size=100))
    with pytest.raises(ValueError):
        trainer.fit(synth, 1)


def test_cv_no_leakage_and_consistent_stats(synth):
    result = cross_validate(synth, small(folds=3, epochs=3))
    assert len(result.folds) == 3
    all_ids = {b.id for b in synth.bags}
    tested = []
    for f in result.folds:
        assert not set(f.train_bags) & set(f.test_bags)
        assert set(f.train_bags) | set(f.test_bags) == all_ids
        tested += f.test_bags
    assert sorted(tested) == sorted(all_ids)
    assert result.std == pytest.approx(float(np.std(result.accuracies)), abs=0)
    assert result.mean == pytest.approx(sum(result.accuracies) / 3)
    report = result.to_dict()
    assert set(report) >= {"folds", "mean", "std", "config", "seed", "runtime_seconds"}


def test_cv_single_class_dataset_is_trivially_accurate():
    rng = np.random.default_rng(0)
    bags = tuple(Bag(f"b{i}", rng.normal(size=(3, 2)), 1) for i in range(10))
    ds = MILDataset(bags, 2)
    with pytest.warns(RuntimeWarning, match="single class"):
        result = cross_validate(ds, small(folds=5, epochs=20, optimizer="adam", lr=0.1))
    assert result.accuracies == [1.0] * 5


@pytest.mark.parametrize("name", ["musk1", "elephant"])
def test_default_config_loss_is_finite_on_bundled_data(name):
    ds, _ = standardize(load_mil_csv(DATA / f"{name}.csv"))
    _, history = train(ds, TrainConfig(epochs=3))
    assert len(history) == 3 and np.all(np.isfinite(history))
