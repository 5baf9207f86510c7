import json

import pytest

from causalpix.config import SEED_ENV, RunConfig
from causalpix.network import ConfigError


def write(tmp_path, doc):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(doc))
    return p


def test_defaults_validate():
    RunConfig().validate()


def test_json_round_trip(tmp_path):
    cfg = RunConfig.from_dict({"steps": 7, "model": {"n_filters": 12, "K": 3}, "optimizer": {"lr": 5e-4}})
    again = RunConfig.load(write(tmp_path, json.loads(cfg.to_json())))
    assert again == cfg
    assert again.model.n_filters == 12 and again.optimizer.lr == 5e-4


@pytest.mark.parametrize(
    "doc, field",
    [
        ({"stpes": 3}, "stpes"),
        ({"model": {"filters": 3}}, "model.filters"),
        ({"optimizer": {"momentum": 0.9}}, "optimizer.momentum"),
        ({"data": {"path": "x"}}, "data.path"),
    ],
)
def test_unknown_keys_named(doc, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        RunConfig.from_dict(doc)


@pytest.mark.parametrize(
    "doc, field",
    [
        ({"optimizer": {"lr": -1}}, "optimizer.lr"),
        ({"optimizer": {"ema_decay": 2}}, "optimizer.ema_decay"),
        ({"data": {"n_eval": 500}}, "data.n_eval"),
        ({"data": {"downscale": 3}}, "data.downscale"),
        ({"data": {"cifar_path": "/no/such/file"}}, "data.cifar_path"),
        ({"batch_size": 0}, "batch_size"),
        ({"ablation": "nope"}, "ablation"),
        ({"seed": -2}, "seed"),
        ({"model": {"dropout_rate": 1.5}}, "dropout_rate"),
    ],
)
def test_invalid_values_named(doc, field):
    with pytest.raises(ConfigError, match=field):
        RunConfig.from_dict(doc)


def test_invalid_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        RunConfig.load(p)


def test_top_level_must_be_object(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(write(tmp_path, [1, 2]))


def test_env_seed_override(monkeypatch):
    monkeypatch.setenv(SEED_ENV, "41")
    assert RunConfig(seed=3).resolved().seed == 41


def test_env_seed_must_be_integer(monkeypatch):
    monkeypatch.setenv(SEED_ENV, "abc")
    with pytest.raises(ConfigError, match=SEED_ENV):
        RunConfig().resolved()


def test_resolved_paths_absolute(monkeypatch, tmp_path):
    monkeypatch.delenv(SEED_ENV, raising=False)
    monkeypatch.chdir(tmp_path)
    out = RunConfig(out_dir="runs/x").resolved()
    assert out.out_dir == str(tmp_path / "runs" / "x")
