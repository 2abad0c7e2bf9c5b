"""TOML config: defaults, strictness, path resolution, failure modes."""

import dataclasses

import pytest

from motiondesk.config import (
    AppConfig,
    ConfigError,
    DecodingSpec,
    load_config,
    require_dirs,
    write_default_config,
)
from motiondesk.tokenizer import TokenizerConfig


class TestDefaults:
    def test_default_file_round_trips_to_default_config(self, tmp_path):
        path = write_default_config(tmp_path / "motiondesk.toml")
        loaded = load_config(path)
        base = AppConfig()
        for f in dataclasses.fields(AppConfig):
            if f.name.endswith("_dir"):
                assert getattr(loaded, f.name) == tmp_path / getattr(base, f.name)
            else:
                assert getattr(loaded, f.name) == getattr(base, f.name)

    def test_missing_sections_take_defaults(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text('[run]\nseed = 7\n')
        loaded = load_config(path)
        assert loaded.seed == 7
        assert loaded.tokenizer == TokenizerConfig()
        assert loaded.decoding == DecodingSpec()

    def test_empty_file_is_valid(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("")
        assert load_config(path).port == AppConfig().port

    def test_write_default_refuses_overwrite(self, tmp_path):
        path = write_default_config(tmp_path / "c.toml")
        with pytest.raises(ConfigError):
            write_default_config(path)


class TestStrictness:
    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("[tokeniser]\nhidden = 4\n")
        with pytest.raises(ConfigError, match="tokeniser"):
            load_config(path)

    def test_unknown_key_in_known_section_rejected(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("[tokenizer]\nhiden = 4\n")
        with pytest.raises(ConfigError, match="hiden"):
            load_config(path)

    def test_unknown_top_level_key_rejected(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("[service]\nportt = 9\n")
        with pytest.raises(ConfigError, match="portt"):
            load_config(path)

    def test_wrong_format_version_rejected(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("format_version = 2\n")
        with pytest.raises(ConfigError, match="format_version"):
            load_config(path)

    def test_invalid_toml_reported_with_path(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("[run\nseed = 1\n")
        with pytest.raises(ConfigError, match="c.toml"):
            load_config(path)

    def test_missing_file_reported(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.toml")


class TestValues:
    def test_sections_reach_typed_configs(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text(
            "[tokenizer]\ncodebook_size = 32\nhidden = 48\n"
            "[lm]\nd_model = 64\nn_heads = 2\n"
            "[decoding]\nmode = \"topk\"\nk = 5\n"
        )
        loaded = load_config(path)
        assert loaded.tokenizer.codebook_size == 32
        assert loaded.tokenizer.hidden == 48
        assert loaded.tokenizer.downsample == TokenizerConfig().downsample
        assert loaded.lm.d_model == 64
        assert loaded.decoding.mode == "topk"
        assert loaded.decoding.k == 5

    def test_relative_paths_resolve_against_config_dir(self, tmp_path):
        sub = tmp_path / "conf"
        sub.mkdir()
        path = sub / "c.toml"
        path.write_text('[paths]\ncorpus_dir = "../data/corpus"\n')
        assert load_config(path).corpus_dir == sub / "../data/corpus"

    def test_absolute_paths_kept(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text(f'[paths]\ncorpus_dir = "{tmp_path}/abs"\n')
        assert load_config(path).corpus_dir == tmp_path / "abs"

    def test_defaulted_paths_resolve_against_config_dir(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("[run]\nseed = 3\n")
        loaded = load_config(path)
        assert loaded.corpus_dir == tmp_path / "artifacts/corpus"
        assert loaded.checkpoint_dir == tmp_path / "artifacts/checkpoints"
        assert loaded.dataset_dir == tmp_path / "artifacts/datasets"

    def test_unknown_skeleton_rejected(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text('[run]\nskeleton = "hands"\n')
        with pytest.raises(ConfigError, match="hands"):
            load_config(path)

    def test_bad_decoding_mode_rejected(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text('[decoding]\nmode = "beam"\n')
        with pytest.raises(ConfigError):
            load_config(path)

    def test_port_range_enforced(self):
        with pytest.raises(ConfigError):
            AppConfig(port=0)

    def test_rig_comes_from_registry(self):
        rig = AppConfig().rig()
        assert rig.n_joints == 5


class TestRequireDirs:
    def test_present_dirs_pass(self, tmp_path):
        (tmp_path / "corpus").mkdir()
        cfg = AppConfig(corpus_dir=tmp_path / "corpus")
        require_dirs(cfg, "corpus_dir")

    def test_missing_dir_names_the_role(self, tmp_path):
        cfg = AppConfig(corpus_dir=tmp_path / "nope")
        with pytest.raises(ConfigError, match="corpus_dir"):
            require_dirs(cfg, "corpus_dir")
