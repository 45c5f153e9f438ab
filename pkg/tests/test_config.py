import pytest
from hypothesis import given, settings, strategies as st

from cracknex.config import ConfigError, TrainConfig, dump_config, load_config, parse_config


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.iterations, cfg.batch_episodes, cfg.lr0, cfg.momentum) == (6000, 4, 1e-3, 0.9)
    assert (cfg.decay_every, cfg.decay_factor) == (2000, 0.1)
    assert (cfg.lambda1, cfg.lambda2) == (1.0, 0.2)
    assert cfg.use_reflectance and cfg.use_pfm and cfg.use_aspp


def test_dump_parse_round_trip():
    cfg = TrainConfig(iterations=7, image_size=(32, 64), use_pfm=False, smoothing_sigma=2.5,
                      padding_mode="circular", dtype="float64")
    assert parse_config(dump_config(cfg)) == cfg
    assert parse_config(dump_config(TrainConfig())) == TrainConfig()


def test_absent_keys_take_defaults_and_section_optional():
    cfg = parse_config("iterations = 10\nimage_size = 32x32\n")
    assert cfg.iterations == 10 and cfg.image_size == (32, 32)
    assert cfg.lr0 == TrainConfig().lr0


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="learning_rate"):
        parse_config("[cracknex]\nlearning_rate = 0.1\n")


@pytest.mark.parametrize("text", [
    "iterations = many", "use_pfm = maybe", "image_size = 30,32", "decay_factor = 1.5",
    "lr0 = -1", "batch_episodes = 0", "padding_mode = mirror", "[a]\nx=1\n[b]\ny=2",
])
def test_invalid_values_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.ini")


@settings(max_examples=40, deadline=None)
@given(iterations=st.integers(0, 10**5), lr0=st.floats(1e-6, 1.0), shots=st.integers(1, 10),
       lambda2=st.floats(0, 10), reflect=st.booleans())
def test_round_trip_property(iterations, lr0, shots, lambda2, reflect):
    cfg = TrainConfig(iterations=iterations, lr0=lr0, shots=shots, lambda2=lambda2,
                      use_reflectance=reflect)
    assert parse_config(dump_config(cfg)) == cfg
