import json

import pytest

from asgampq.config import ExperimentConfig, load_config
from asgampq.errors import ConfigError
from conftest import small_config_dict


def test_benchmark_config_loads(benchmark_path):
    cfg = load_config(benchmark_path)
    assert cfg.model == [16, 64, 64, 4]
    assert cfg.asga.lam == 0.0 and cfg.asga.epsilon == 0.1 and cfg.asga.rho0 == 0.1
    assert cfg.target.transform.rotation_deg == 15.0
    assert cfg.run_seeds == [0, 1, 2, 3, 4]


def test_roundtrip():
    cfg = ExperimentConfig.from_dict(small_config_dict())
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg


@pytest.mark.parametrize("mutate", [
    lambda d: d.update(epochs=3),
    lambda d: d["asga"].update(lamda=0.1),
    lambda d: d["proxy"].update(colour="red"),
    lambda d: d["target"]["transform"].update(skew=1),
])
def test_unknown_keys_rejected(mutate):
    d = small_config_dict()
    mutate(d)
    with pytest.raises(ConfigError, match="unknown keys"):
        ExperimentConfig.from_dict(d)


@pytest.mark.parametrize("over", [
    dict(epochs_search=0),
    dict(model=[8]),
    dict(model=[9, 16, 3]),
    dict(model=[8, 16, 4]),
    dict(budget=-1.0),
    dict(val_fraction=1.0),
    dict(batch_size=0),
])
def test_invalid_values(over):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(small_config_dict(**over))


def test_invalid_nested_values():
    d = small_config_dict()
    d["asga"] = {"rho0": 0.5, "rho_max": 0.3}
    with pytest.raises(ConfigError, match="asga"):
        ExperimentConfig.from_dict(d)
    d = small_config_dict()
    d["proxy"]["transform"] = {"rotation_deg": 5.0}
    with pytest.raises(ConfigError, match="target"):
        ExperimentConfig.from_dict(d)
    d = small_config_dict()
    del d["target"]
    with pytest.raises(ConfigError, match="target"):
        ExperimentConfig.from_dict(d)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(bad)


def test_lambda_key_spelling():
    d = small_config_dict()
    d["asga"] = {"lambda": 0.5}
    assert ExperimentConfig.from_dict(d).asga.lam == 0.5
    d["asga"] = {"lam": 0.5}
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(d)
