import json

import pytest

from uattr.config import ConfigError, apply_overrides, from_dict, load_config, resolve_root


def test_defaults():
    cfg = from_dict({})
    assert cfg.dataset.n == 2000
    assert len([g for g in cfg.dataset.planted_groups if g["jitter_std"] == 0]) == 20
    assert cfg.queries.groups == list(range(20))
    assert cfg.train_config().learning_rate == 0.1
    assert cfg.diffusion_config().T == 200


def test_alpha_scaling():
    cfg = from_dict({})
    assert cfg.unlearn_config(2000).alpha == pytest.approx(0.01 / 2000)
    raw = from_dict({"unlearn": {"scale_by_n": False, "alpha": 0.3}})
    assert raw.unlearn_config(2000).alpha == 0.3
    assert cfg.unlearn_config(10).seed == cfg.seeds.unlearn


@pytest.mark.parametrize("data", [
    {"bogus": 1},
    {"train": {"epochz": 3}},
    {"train": {"epochs": 0}},
    {"attribution": {"methods": ["unlearning", "magic"]}},
    {"eval": {"k_grid": [50, 10]}},
    {"eval": {"k_grid": [0, 10]}},
    {"dataset": {"n": 3}},
    {"train": 5},
])
def test_invalid(data):
    with pytest.raises(ConfigError):
        from_dict(data)


def test_overrides(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"train": {"epochs": 7}}))
    cfg = load_config(tmp_path / "c.json", ["train.epochs=9", "eval.k_grid=[5, 6]", "unlearn.mask=[\"cond_key\"]"], tmp_path)
    assert cfg.train.epochs == 9 and cfg.eval.k_grid == [5, 6] and list(cfg.unlearn.mask) == ["cond_key"]
    assert cfg.path("data") == tmp_path / "data"
    data = {"a": {"b": 1}}
    assert apply_overrides(data, ["a.c=hello"]) == {"a": {"b": 1, "c": "hello"}}
    assert data == {"a": {"b": 1}}
    with pytest.raises(ConfigError):
        apply_overrides(data, ["a.b"])
    with pytest.raises(ConfigError):
        apply_overrides(data, ["a.b.c=1"])
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


def test_roundtrip_through_dict():
    cfg = from_dict({"train": {"epochs": 4}})
    assert from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


def test_workspace_root(tmp_path, monkeypatch):
    monkeypatch.setenv("UATTR_WORKSPACE", str(tmp_path))
    assert resolve_root(None) == tmp_path.resolve()
    assert resolve_root(str(tmp_path / "x")) == (tmp_path / "x").resolve()
    monkeypatch.delenv("UATTR_WORKSPACE")
    with pytest.raises(ConfigError):
        resolve_root(None)
