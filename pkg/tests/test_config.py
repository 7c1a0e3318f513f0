import math

import pytest

from fedlab.config import (
    AnalysisConfig,
    AttackConfig,
    DatasetConfig,
    DefenseConfig,
    ExperimentConfig,
    FederationConfig,
    ModelConfig,
    parse_alpha,
    read_yaml,
)
from fedlab.errors import ConfigError
from fedlab.nn import TrainingConfig


def test_defaults():
    cfg = ExperimentConfig()
    assert cfg.defense.name == "fedavg"
    assert cfg.federation.per_round == 15
    assert cfg.federation.malicious_count == 6
    assert math.isinf(cfg.dataset.alpha)
    assert cfg.analysis.lam == 0.8 and cfg.analysis.tau == 0.85
    assert cfg.to_dict()["schema"] == 1


def test_federation_config():
    fed = FederationConfig(clients=100, fraction=0.1, mcr=0.3)
    assert fed.per_round == 10
    assert fed.malicious_count == 30
    assert FederationConfig(clients=100, sampled=7).per_round == 7
    with pytest.raises(ConfigError) as excinfo:
        FederationConfig(mcr=1.0)
    assert excinfo.value.field == "federation.mcr"
    with pytest.raises(ConfigError):
        FederationConfig(clients=5, sampled=6)


def test_section_validation():
    with pytest.raises(ConfigError):
        DatasetConfig(kind="cifar")
    with pytest.raises(ConfigError):
        DatasetConfig(kind="idx")
    with pytest.raises(ConfigError):
        DatasetConfig(dim=60)
    with pytest.raises(ConfigError):
        ModelConfig(kind="transformer")
    with pytest.raises(ConfigError):
        AttackConfig(victim=2, target=2)
    with pytest.raises(ConfigError):
        AttackConfig(trigger="square")
    with pytest.raises(ConfigError):
        DefenseConfig(name="flame")
    with pytest.raises(ConfigError):
        DefenseConfig(K=0)
    with pytest.raises(ConfigError):
        AnalysisConfig(grid_lr=())
    with pytest.raises(ConfigError):
        ExperimentConfig(attack=AttackConfig(victim=12))


def test_parse_alpha():
    assert math.isinf(parse_alpha("iid"))
    assert math.isinf(parse_alpha("inf"))
    assert math.isinf(parse_alpha(None))
    assert math.isinf(parse_alpha(float("inf")))
    assert parse_alpha(0.5) == 0.5
    assert parse_alpha("2") == 2.0
    with pytest.raises(ConfigError):
        parse_alpha(0)
    with pytest.raises(ConfigError):
        parse_alpha("lots")


def test_attack_trigger():
    corner = AttackConfig(patch=2).poison_spec((4, 4))
    assert sorted(corner.trigger) == [0, 1, 4, 5]
    explicit = AttackConfig(trigger=[[3, 0.5], [7, 1.0]])
    assert explicit.trigger == ((3, 0.5), (7, 1.0))
    assert explicit.poison_spec((4, 4)).trigger == {3: 0.5, 7: 1.0}
    assert explicit.to_dict()["trigger"] == [[3, 0.5], [7, 1.0]]


def test_grid_order():
    grid = AnalysisConfig(grid_lr=(0.1, 0.2), grid_batch_size=(8, 16), grid_epochs=(1,)).grid()
    assert [(g.lr, g.batch_size) for g in grid] == [(0.1, 8), (0.1, 16), (0.2, 8), (0.2, 16)]


def test_with_helpers():
    cfg = ExperimentConfig()
    assert cfg.with_seed(9).federation.seed == 9
    assert cfg.with_training(TrainingConfig(lr=0.3)).federation.training.lr == 0.3
    assert cfg.with_defense("drop").defense.name == "drop"
    assert cfg.with_defense("drop").comparison_key() == cfg.comparison_key()
    assert cfg.with_seed(9).comparison_key() != cfg.comparison_key()


def test_read_yaml(tiny, write_config):
    cfg = read_yaml(write_config(tiny))
    assert cfg.name == "tiny"
    assert cfg.seed == 3 and cfg.federation.seed == 3
    assert cfg.federation.training == TrainingConfig(lr=0.1, batch_size=8, epochs=1)
    assert cfg.dataset.image_shape == (4, 4)
    assert cfg.model.hidden == (8,)
    assert cfg.analysis.grid_lr == (0.05, 0.1)
    assert read_yaml(write_config(tiny), seed=11).federation.seed == 11


def test_yaml_roundtrip(tmp_path, tiny, write_config):
    cfg = read_yaml(write_config(tiny))
    echo = str(tmp_path / "echo.yaml")
    cfg.to_yaml(echo)
    assert read_yaml(echo) == cfg
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(TypeError):
        cfg.to_yaml(tmp_path / "echo.yaml")
    with pytest.raises(TypeError):
        read_yaml(tmp_path / "echo.yaml")


def test_error_names_field_and_line(write_config):
    path = write_config(
        {"schema": 1, "name": "bad", "federation": {"clients": 10, "mcr": 1.2}}
    )
    with pytest.raises(ConfigError) as excinfo:
        read_yaml(path)
    error = excinfo.value
    assert error.field == "federation.mcr"
    assert error.line == 5
    assert str(error).startswith("{}:5: federation.mcr:".format(path))


def test_error_cases(tiny, write_config):
    del tiny["schema"]
    with pytest.raises(ConfigError):
        read_yaml(write_config(tiny))

    tiny["schema"] = 1
    tiny["federation"]["colour"] = "red"
    with pytest.raises(ConfigError) as excinfo:
        read_yaml(write_config(tiny))
    assert excinfo.value.field == "federation.colour"

    del tiny["federation"]["colour"]
    tiny["federation"]["clients"] = 6.5
    with pytest.raises(ConfigError):
        read_yaml(write_config(tiny))

    tiny["federation"]["clients"] = 6.0
    assert read_yaml(write_config(tiny)).federation.clients == 6

    tiny["federation"]["training"]["batch_size"] = 0
    with pytest.raises(ConfigError) as excinfo:
        read_yaml(write_config(tiny))
    assert excinfo.value.field == "federation.training"


def test_malformed_yaml(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("schema: 1\nfederation: [clients\n")
    with pytest.raises(ConfigError) as excinfo:
        read_yaml(str(path))
    assert excinfo.value.source == str(path)
