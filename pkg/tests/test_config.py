import pytest

from curionav.config import (PRESET_NAMES, ConfigError, RunConfig, format_config, load_config, load_preset,
                             parse_config)


def test_presets_match_exploration_variants():
    expected = {"a3c_minus": (0.0, False), "entropy": (0.01, False), "icm": (0.0, True), "icm_entropy": (0.01, True)}
    for name in PRESET_NAMES:
        cfg = load_preset(name)
        assert (cfg.trainer.beta_entropy, cfg.trainer.use_icm) == expected[name]
        assert cfg.trainer.learning_rate == 1e-4 and cfg.trainer.rollout_K == 50 and cfg.trainer.gamma == 0.99
        assert cfg.reward.lambda_i == 1.0 and cfg.icm.lambda_f == 0.2


def test_roundtrip():
    cfg = load_preset("icm").replace(trainer={"seed": 9}, network={"use_lstm": False})
    assert parse_config(format_config(cfg)) == cfg


def test_unknown_key_and_section():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("[trainer]\nlearning_rat = 0.1\n")
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config("[optimizer]\nlr = 1\n")


def test_type_errors():
    with pytest.raises(ConfigError):
        parse_config("[trainer]\nworkers = many\n")
    with pytest.raises(ConfigError):
        parse_config("[trainer]\nuse_icm = 1\n")
    with pytest.raises(ConfigError):
        parse_config("[trainer]\ngamma = 1.5\n")


def test_load_config_file(tmp_path):
    p = tmp_path / "x.cfg"
    p.write_text("[run]\nname = mine\n[trainer]\ntotal_iterations = 123\n")
    cfg = load_config(p)
    assert cfg.name == "mine" and cfg.trainer.total_iterations == 123
    assert cfg.trainer.workers == RunConfig().trainer.workers


def test_unknown_preset():
    with pytest.raises(ConfigError):
        load_preset("nope")
