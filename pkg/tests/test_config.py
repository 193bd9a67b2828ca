"""Tests for INI run configuration."""

import pytest

from dmhe.config import ConfigError, RunConfig, load_config


def write(tmp_path, text):
    p = tmp_path / "run.ini"
    p.write_text(text)
    return p


def test_defaults():
    cfg = load_config()
    assert cfg.model == "cstr4" and cfg.horizon == 10 and cfg.rank_tol is None


def test_sections_are_read(tmp_path):
    p = write(tmp_path, "[run]\nseed = 7\nsteps = 40\n[analysis]\nhorizon = 6\nrank_tol = 1e-9\n"
                        "[estimation]\nq_std = 0.2\n")
    cfg = load_config(p)
    assert (cfg.seed, cfg.steps, cfg.horizon, cfg.rank_tol, cfg.q_std) == (7, 40, 6, 1e-9, 0.2)


def test_flags_override_file(tmp_path):
    p = write(tmp_path, "[run]\nseed = 7\n")
    assert load_config(p, seed=3).seed == 3
    assert load_config(p, seed=None).seed == 7


@pytest.mark.parametrize("text, match", [
    ("[bogus]\nx = 1\n", "unknown section"),
    ("[run]\nhorizon = 4\n", "unknown key"),
    ("[run]\nsteps = many\n", "invalid value"),
    ("[run]\nsteps = 0\n", "steps"),
    ("[run]\ncase = 9\n", "case"),
    ("[analysis]\nrank_tol = -1\n", "rank_tol"),
    ("[estimation]\nr_std = 0\n", "positive"),
    ("not an ini file", "cannot read"),
])
def test_invalid_files(tmp_path, text, match):
    with pytest.raises(ConfigError, match=match):
        load_config(write(tmp_path, text))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.ini")


def test_unknown_override():
    with pytest.raises(ConfigError, match="unknown setting"):
        RunConfig().update(colour="blue")


def test_round_trip(tmp_path):
    cfg = load_config(seed=11, steps=25, horizon=4, case="all")
    cfg.rank_tol = 1e-8
    again = load_config(cfg.to_ini(tmp_path / "snap.ini"))
    assert again == cfg
    assert load_config(RunConfig().to_ini(tmp_path / "d.ini")) == RunConfig()
