import pytest

from snl.config import TrainConfig, config_from_mapping, dump_config, env_overrides, load_config
from snl.errors import ConfigError


def test_recipe_defaults():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.batch_size, cfg.num_centers) == (0.005, 8, 50)
    assert (cfg.lambda1, cfg.lambda2, cfg.lambda3) == (1.0, 1.0, 1.0)
    assert (cfg.adam_beta1, cfg.adam_beta2) == (0.9, 0.999)
    assert cfg.epochs == 200 and cfg.image_size == 256
    assert cfg.loss_terms == ("cd", "sd", "intra", "inter")


def test_toy_preset():
    cfg = TrainConfig.toy()
    assert (cfg.backbone, cfg.image_size, cfg.epochs, cfg.layout) == ("toy", 64, 5, "synthetic")
    assert cfg.validate() is cfg


@pytest.mark.parametrize(
    "changes",
    [
        dict(loss_cd=False, loss_sd=False, loss_intra=False, loss_inter=False),
        dict(lambda2=-0.1),
        dict(batch_size=1),
        dict(topology="sideways"),
        dict(affinity_mode="cubic"),
        dict(layout="mvtec", data_root=""),
        dict(lr=0.0),
    ],
)
def test_invalid_configs(changes):
    with pytest.raises(ConfigError):
        TrainConfig.toy(**changes).validate()


def test_batch_of_one_allowed_without_inter():
    TrainConfig.toy(batch_size=1, loss_inter=False).validate()


def test_yaml_then_env(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("lr: 0.001\nloss_sd: false\nepochs: 3\n")
    cfg = load_config(path, environ={"SNL_EPOCHS": "7", "SNL_LOSS_INTER": "off", "OTHER": "x"})
    assert cfg.lr == 0.001 and cfg.loss_sd is False
    assert cfg.epochs == 7 and cfg.loss_inter is False


def test_env_ignores_unknown_names():
    assert env_overrides({"SNL_NOPE": "1", "SNL_SEED": "4"}) == {"seed": "4"}


@pytest.mark.parametrize("text", ["bogus_key: 1\n", "epochs: 2.5\n", "loss_sd: maybe\n", "lr: {a: 1}\n", "- 1\n"])
def test_bad_files(tmp_path, text):
    path = tmp_path / "c.yaml"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_config(path, environ={})


def test_dump_round_trip(tmp_path):
    cfg = TrainConfig.toy(seed=3, affinity_normalize=True)
    dump_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml", environ={}) == cfg


def test_hash_binds_results_not_paths():
    a = TrainConfig.toy()
    assert a.hash() == a.replace(output_dir="elsewhere", num_workers=2).hash()
    assert a.hash() != a.replace(seed=1).hash()
    assert config_from_mapping({"seed": "1"}, a) == a.replace(seed=1)
