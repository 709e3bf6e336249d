import pytest

from qualia.config import RunConfig, load_config, parse_config_text
from qualia.errors import ConfigError


class TestParsing:
    def test_file_comments_and_blanks(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(
            "# a comment\n"
            "seed = 99\n"
            "\n"
            "sfe.grid = 2x3   # trailing comment\n",
            encoding="utf-8",
        )
        cfg = load_config(path)
        assert cfg.get("seed") == 99
        assert cfg.grid_mn() == (2, 3)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            load_config(overrides={"sfe.gridd": "3x3"})

    def test_duplicate_key_in_file(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_text("seed = 1\nseed = 2\n")

    def test_line_without_equals(self):
        with pytest.raises(ConfigError, match="expected 'key = value'"):
            parse_config_text("seed 1\n")

    def test_bad_typed_values(self):
        with pytest.raises(ConfigError, match="cannot parse"):
            load_config(overrides={"seed": "abc"})
        with pytest.raises(ConfigError, match="cannot parse"):
            load_config(overrides={"sfe.enabled": "maybe"})

    def test_bool_spellings(self):
        cfg = load_config(overrides={"sfe.enabled": "off", "spatial.enabled": "YES"})
        assert cfg.get("sfe.enabled") is False
        assert cfg.get("spatial.enabled") is True

    def test_overrides_win_over_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed = 5\n", encoding="utf-8")
        cfg = load_config(path, overrides={"seed": "6"})
        assert cfg.get("seed") == 6

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "none.cfg")


class TestEffectiveConfig:
    def test_all_defaults_materialized(self):
        cfg = RunConfig()
        lines = cfg.lines()
        keys = [line.split(" = ")[0] for line in lines]
        assert keys == sorted(keys)
        assert "encoder.backend = mock" in lines
        assert "train.batch = 12" in lines
        assert "spatial.grid_f = 7" in lines
        assert "train.lr_backbone = 7.5e-05" in lines

    def test_round_trips_through_parser(self):
        cfg = load_config(overrides={"seed": "3", "sfe.grid": "5x5"})
        text = "\n".join(cfg.lines())
        again = load_config(overrides=parse_config_text(text))
        assert again.as_dict() == cfg.as_dict()


class TestValidation:
    def test_enum_keys(self):
        with pytest.raises(ConfigError, match="encoder.backend"):
            load_config(overrides={"encoder.backend": "resnet"})

    def test_loss_weights_sum(self):
        with pytest.raises(ConfigError, match="alpha"):
            load_config(overrides={"train.alpha": "0", "train.beta": "0"})

    def test_both_branches_disabled(self):
        with pytest.raises(ConfigError, match="at least one"):
            load_config(overrides={"sfe.enabled": "false", "spatial.enabled": "false"})

    def test_grid_spec(self):
        with pytest.raises(ConfigError, match="MxN"):
            load_config(overrides={"sfe.grid": "3by3"})
        with pytest.raises(ConfigError, match=">= 1"):
            load_config(overrides={"sfe.grid": "0x3"})

    def test_frame_mode(self):
        assert load_config(overrides={"sfe.frames": "all"}).frame_mode() == "all"
        assert load_config(overrides={"sfe.frames": "16"}).frame_mode() == 16
        with pytest.raises(ConfigError):
            load_config(overrides={"sfe.frames": "some"})

    def test_probe_levels(self):
        cfg = load_config(overrides={"probe.levels": "-1, 0, 1"})
        assert cfg.probe_levels() == [-1.0, 0.0, 1.0]
        with pytest.raises(ConfigError):
            load_config(overrides={"probe.levels": "a,b"})

    def test_train_frac_bounds(self):
        with pytest.raises(ConfigError, match="train_frac"):
            load_config(overrides={"eval.train_frac": "1.5"})
