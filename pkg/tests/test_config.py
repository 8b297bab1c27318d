import pytest

from cuffsim.config import Config, ConfigError, load_config, parse_config
from cuffsim.mapping import MappingConfig


def test_defaults():
    cfg = load_config()
    assert cfg.load.slack == 150
    assert cfg.psychophysics.tangential_jnd == 2.91
    with pytest.raises(ConfigError, match="rc_SHmax"):
        cfg.mapping()
    assert cfg.mapping(rc_SHmax=1500.0) == MappingConfig(rc_SHmax=1500.0)


def test_round_trip():
    cfg = parse_config("[mapping]\nrc_SHmax = 1400\n[calibration]\nreps = 4\nvary_pretension = yes\n"
                       "[teleop]\nforce_map = logarithmic\n")
    assert cfg.calibration.reps == 4 and cfg.calibration.vary_pretension is True
    assert cfg.mapping().rc_SHmax == 1400.0
    back = parse_config(cfg.to_ini())
    assert back.calibration == cfg.calibration
    assert back.teleop == cfg.teleop
    assert back.mapping() == cfg.mapping()
    assert back.plant == cfg.plant and back.softhand == cfg.softhand


def test_keys_case_insensitive():
    assert parse_config("[mapping]\nRC_SHMAX = 900\n").mapping().rc_SHmax == 900.0


def test_override_wins():
    cfg = parse_config("[mapping]\nrc_SHmax = 1400\n")
    assert cfg.mapping(rc_SHmax=1000.0).rc_SHmax == 1000.0
    assert cfg.mapping(rc_SHmax=None).rc_SHmax == 1400.0


@pytest.mark.parametrize("text, match", [
    ("[nope]\na = 1\n", "unknown section"),
    ("[plant]\nslak = 1\n", "unknown key"),
    ("[calibration]\nreps = many\n", "cannot parse"),
    ("[calibration]\nvary_pretension = maybe\n", "cannot parse"),
    ("not an ini", "header"),
])
def test_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_invalid_mapping_value():
    with pytest.raises(ConfigError, match="mapping"):
        parse_config("[mapping]\nrc_SHmax = -1\n").mapping()


def test_load_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_config(tmp_path / "missing.ini")


def test_file_source(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text(Config().to_ini())
    assert load_config(p).source == str(p)
