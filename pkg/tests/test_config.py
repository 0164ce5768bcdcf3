"""Config parsing: key=value files, typed overrides, and hashing."""

import pytest

from fewvid.config import RunConfig, apply_overrides, config_hash, load_config, save_config


class TestOverrides:
    def test_typed_parsing(self):
        cfg = apply_overrides(RunConfig(), ["way=7", "lr=0.5", "sampler_on=false",
                                            "split=10,5,5"])
        assert cfg.way == 7
        assert cfg.lr == 0.5
        assert cfg.sampler_on is False
        assert cfg.split == (10, 5, 5)

    def test_unknown_key_rejected(self):
        with pytest.raises(KeyError):
            apply_overrides(RunConfig(), ["not_a_key=1"])

    def test_bad_value_rejected(self):
        with pytest.raises(ValueError):
            apply_overrides(RunConfig(), ["way=banana"])
        with pytest.raises(ValueError):
            apply_overrides(RunConfig(), ["sampler_on=maybe"])
        with pytest.raises(ValueError):
            apply_overrides(RunConfig(), ["split=1,2"])

    def test_missing_equals_rejected(self):
        with pytest.raises(ValueError):
            apply_overrides(RunConfig(), ["way"])

    def test_every_field_round_trips(self):
        """Each config field can be set through the override syntax."""
        import dataclasses

        cfg = RunConfig()
        for f in dataclasses.fields(RunConfig):
            value = getattr(cfg, f.name)
            if isinstance(value, tuple):
                text = ",".join(str(v) for v in value)
            else:
                text = str(value)
            out = apply_overrides(cfg, [f"{f.name}={text}"])
            assert getattr(out, f.name) == value


class TestConfigFile:
    def test_save_load_round_trip(self, tmp_path):
        cfg = apply_overrides(RunConfig(), ["way=4", "mu1=0.25", "ada_on=false"])
        path = tmp_path / "run.cfg"
        save_config(cfg, path)
        assert load_config(path) == cfg

    def test_comments_and_blanks_ignored(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("# a comment\n\nway = 4  # trailing\nshot=2\n")
        cfg = load_config(path)
        assert cfg.way == 4 and cfg.shot == 2

    def test_unknown_key_in_file(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("bogus = 1\n")
        with pytest.raises(KeyError):
            load_config(path)

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("way 4\n")
        with pytest.raises(ValueError):
            load_config(path)


class TestHash:
    def test_stable_and_sensitive(self):
        a = config_hash(RunConfig())
        b = config_hash(RunConfig())
        c = config_hash(apply_overrides(RunConfig(), ["seed=1"]))
        assert a == b
        assert a != c
