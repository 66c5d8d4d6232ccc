import configparser
from pathlib import Path

import pytest

from opwalk.utils.config import build_config, cache_directory, read_config, write_config
from opwalk.utils.errors import ConfigurationError

PRESETS = Path(__file__).resolve().parents[1] / "presets"


def test_defaults_and_list_parsing():
    config = build_config({"experiment": "qlclt", "n_list": "25, 50,100"})
    assert config.n_values == [25, 50, 100]
    assert build_config({"experiment": "propagate", "n": 7}).n_values == [7]
    assert config.boundary == "open"
    assert config.mode == "mc"


@pytest.mark.parametrize("values", [
    {"p": 1.5},
    {"d": 4},
    {"seeds": 0},
    {"unknown_key": 1},
    {"eps": 0.24, "delta": 0.15},
    {"n_list": "4,-1"},
    {"boundary": "reflecting"},
])
def test_invalid_values_raise(values):
    with pytest.raises(ConfigurationError):
        build_config({"experiment": "lclt", **values})


def test_run_id_ignores_threads_and_output():
    base = build_config({"experiment": "lclt", "p": 0.7})
    assert base.run_id == base.with_overrides({"threads": 4, "out_dir": "elsewhere"}).run_id
    assert base.run_id != base.with_overrides({"p": 0.71}).run_id
    assert base.with_overrides({"p": None}).p == 0.7


def test_config_echo_round_trip(tmp_path):
    config = build_config({"experiment": "hybrid", "p": 0.65, "n_list": [64, 128], "C": 2.5,
                           "hard_checks": True, "horizon_margin": 12})
    echoed = read_config(write_config(config, tmp_path / "config.ini"))
    assert echoed == config
    assert echoed.run_id == config.run_id


def test_sections_and_overrides(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[common]\nd = 2\np = 0.7\nn = 40\n\n[ladder]\nN = 1024\nM = 3\np = 0.75\n")
    ladder = read_config(path, "ladder")
    assert (ladder.d, ladder.p, ladder.N, ladder.M) == (2, 0.75, 1024, 3)
    other = read_config(path, "lclt")
    assert (other.p, other.N) == (0.7, 256)
    flagged = read_config(path, "ladder", {"p": 0.9, "seeds": None})
    assert flagged.p == 0.9
    assert flagged.seeds == 30


def test_missing_file_or_experiment(tmp_path):
    with pytest.raises(ConfigurationError):
        read_config(tmp_path / "absent.ini", "lclt")
    path = tmp_path / "bare.ini"
    path.write_text("[common]\np = 0.7\n")
    with pytest.raises(ConfigurationError):
        read_config(path)


@pytest.mark.parametrize("preset", ["d1.ini", "d2.ini", "d3.ini"])
def test_presets_load_for_every_section(preset):
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read(PRESETS / preset)
    for section in parser.sections():
        if section == "common":
            continue
        config = read_config(PRESETS / preset, section)
        assert config.experiment == section


def test_d1_preset_values():
    ladder = read_config(PRESETS / "d1.ini", "ladder")
    assert (ladder.N, ladder.theta, ladder.M, ladder.seeds) == (4096, 0.4, 5, 30)
    assert read_config(PRESETS / "d1.ini", "socialboxes").n_values == [2, 4, 8]


def test_cache_directory_override(tmp_path, monkeypatch):
    monkeypatch.setenv("OPWALK_CACHE", str(tmp_path / "c"))
    assert cache_directory() == tmp_path / "c"
    monkeypatch.delenv("OPWALK_CACHE")
    assert cache_directory().name == "opwalk"
