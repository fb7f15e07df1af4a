import pytest

from conftest import SHIPPED_ENV, make_experiment, write_env_file
from core.config_handler import ConfigHandler, ConfigPrefix, DataConfig, LossWeights
from core.exceptions import ConfigError
from misc.variants_enum import Scenario, Variant


def test_shipped_configuration_matches_the_defaults():
    handler = ConfigHandler(SHIPPED_ENV)
    experiment = handler.experiment()
    assert experiment.data == DataConfig()
    assert experiment.loss == LossWeights()
    assert experiment.train.variant == Variant.LFDA_FULL
    assert experiment.data.scenario == Scenario.SYNTHETIC_TO_REAL


def test_fractions_and_tuples_are_parsed():
    weights = ConfigHandler(overrides={"LOSS_W_RECON": "1/2, 1/4,0,0,1"}).get_config(ConfigPrefix.LOSS)
    assert weights.w_recon == (0.5, 0.25, 0.0, 0.0, 1.0)


def test_overrides_take_precedence_over_the_file(tmp_path):
    path = write_env_file(tmp_path / "run.env", TRAIN_TOTAL_STEPS="7")
    handler = ConfigHandler(path, overrides={"train_total_steps": "9"})
    assert handler.get_config(ConfigPrefix.TRAIN).total_steps == 9


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigError, match="DATA_COLOUR"):
        ConfigHandler(overrides={"DATA_COLOUR": "red"})


def test_missing_file_is_rejected(tmp_path):
    with pytest.raises(ConfigError):
        ConfigHandler(tmp_path / "missing.env")


@pytest.mark.parametrize(
    "key, value",
    [
        ("DATA_HEIGHT", "30"),
        ("DATA_D_MIN", "0"),
        ("DATA_SCENARIO", "underwater"),
        ("MODEL_STYLE_CHANNELS", "4,8,8,8"),
        ("MODEL_DECODER_CHANNELS", "16,8"),
        ("LOSS_ETA", "-0.1"),
        ("LOSS_W_TRANS_STY", "1,1,1"),
        ("LOSS_ALIGN_SOURCE_LABEL", "0.5"),
        ("TRAIN_BATCH_SIZE", "1"),
        ("TRAIN_VARIANT", "tgt_everything"),
        ("TRAIN_DETACH_TRANSLATED", "maybe"),
        ("TRAIN_TOTAL_STEPS", "ten"),
    ],
)
def test_invalid_values_are_config_errors(key, value):
    with pytest.raises(ConfigError):
        make_experiment(**{key: value})


def test_parse_override():
    assert ConfigHandler.parse_override(" train_seed = 3") == ("TRAIN_SEED", "3")
    with pytest.raises(ConfigError):
        ConfigHandler.parse_override("TRAIN_SEED")


def test_hashes_follow_the_configuration():
    base = make_experiment()
    assert base.config_hash() == make_experiment().config_hash()
    trained_longer = make_experiment(TRAIN_TOTAL_STEPS="10")
    assert trained_longer.config_hash() != base.config_hash()
    assert trained_longer.data_hash() == base.data_hash()
    assert make_experiment(DATA_SEED="1").data_hash() != base.data_hash()


def test_to_dict_is_plain():
    record = make_experiment().to_dict()
    assert set(record) == {prefix.value for prefix in ConfigPrefix}
    assert record["TRAIN"]["variant"] == "lfda_full"
    assert record["MODEL"]["content_channels"] == [8, 8, 16, 16]
