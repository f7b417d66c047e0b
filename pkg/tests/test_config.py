import re

import pytest

from diffseg.config import PipelineConfig, load_config, parse_timesteps
from diffseg.errors import ConfigError


def test_parse_timesteps():
    assert parse_timesteps("60:150:10") == tuple(range(60, 151, 10))
    assert parse_timesteps("5:7") == (5, 6, 7)
    assert parse_timesteps("80, 90") == (80, 90)
    for bad in ("a:b", "1:2:0", "1:2:3:4"):
        with pytest.raises(ConfigError):
            parse_timesteps(bad)


def test_defaults_validate():
    cfg = load_config()
    assert cfg.segment.timesteps == tuple(range(60, 151, 10))
    assert (cfg.refine.K, cfg.refine.m) == (3, 4)
    assert cfg.train.epochs >= 30
    assert (cfg.data.train_count, cfg.data.test_count) == (200, 50)


def test_ini_round_trip():
    cfg = load_config(text="[run]\nseed = 9\n[refine]\nK = 5\n[crf]\nw1 = 2.5\n")
    assert cfg.seed == 9 and cfg.refine.K == 5 and cfg.crf.w1 == 2.5
    # the master seed reaches every seeded stage
    assert cfg.train.seed == cfg.refine.seed == cfg.data.spec.seed == 9
    again = load_config(text=cfg.to_ini())
    assert again.digest() == cfg.digest()


def test_digest_tracks_changes():
    a = PipelineConfig()
    assert a.digest() == PipelineConfig().digest()
    assert a.with_seed(1).digest() != a.digest()


@pytest.mark.parametrize(
    "text,needle",
    [
        ("[crf]\nw3 = 1\n", "unknown key crf.w3"),
        ("[bogus]\nx = 1\n", "unknown section"),
        ("[train]\nseed = 3\n", "set seed under [run]"),
        ("[crf]\nw1 = lots\n", "crf.w1"),
        ("[crf]\nw1 = -1\n", "crf.w1"),
        ("[segment]\ntimesteps = 60:200:10\n", "train.T"),
        ("[refine]\nm = 11\n", "ensemble size"),
        ("[synth]\nsize = 32\nradius = 4, 8\n", "image_size"),
        ("not an ini", "malformed"),
    ],
)
def test_config_errors(text, needle):
    with pytest.raises(ConfigError, match=re.escape(needle)):
        load_config(text=text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "none.ini")
