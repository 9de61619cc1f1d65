"""
Tests for the experiment configuration

These tests verify parsing of the key=value format, parameter-map aliases,
per-level broadcasting, validation failures and the config hash.
"""

import pytest

from lmreg.config import ExperimentConfig, config_hash, dump_config, load_config, parse_config_text
from lmreg.errors import ConfigError


class TestDefaults:
    """Test default values"""

    def test_registration_defaults(self):
        """Registration defaults should follow the published parameter map"""
        reg = ExperimentConfig().reg
        assert reg.metric0_weight == 1.0
        assert reg.metric1_weight == 1.0
        assert reg.metric2_weight == 0.01
        assert reg.resolutions == 4
        assert reg.iterations == (300, 600, 900, 1200)
        assert reg.spatial_samples == 5000
        assert reg.histogram_bins == (32, 32, 32, 32)
        assert reg.final_grid_spacing == 8.0
        assert reg.gain_a == (35000.0, 30000.0, 25000.0, 20000.0)
        assert reg.gain_A == (100.0, 200.0, 300.0, 400.0)
        assert reg.gain_alpha == 0.602

    def test_network_defaults(self):
        """Default patch is 24 x 48 x 48 voxels in (d, h, w)"""
        net = ExperimentConfig().net
        assert net.patch_dims == (24, 48, 48)
        assert net.K == 64
        assert net.inference_threshold == 0.5

    def test_descriptor_length_is_two_deepest_levels(self):
        """Descriptor concatenates the channels of the two deepest encoder levels"""
        net = ExperimentConfig().net
        assert net.descriptor_length == 16 + 32


class TestParsing:
    """Test the key=value parser"""

    def test_sections_comments_and_lists(self):
        """Comments are ignored and whitespace-separated values become tuples"""
        cfg = parse_config_text(
            """
            # experiment
            seed = 7
            sim.translation_range = 6   # mm
            net.patch_dims = 16 32 32
            train.variant = "hinge-ce"
            train.decoupled_weight_decay = false
            """
        )
        assert cfg.seed == 7
        assert cfg.sim.translation_range == 6.0
        assert cfg.net.patch_dims == (16, 32, 32)
        assert cfg.train.variant == "hinge-ce"
        assert cfg.train.decoupled_weight_decay is False

    def test_parameter_map_aliases(self):
        """Registration keys accept the parameter-map vocabulary"""
        cfg = parse_config_text(
            "reg.NumberOfResolutions = 2\n"
            "reg.MaximumNumberOfIterations = 10 20\n"
            "reg.SP_a = 100 50\n"
            "reg.SP_A = 10 20\n"
            "reg.Metric2Weight = 0\n"
        )
        assert cfg.reg.resolutions == 2
        assert cfg.reg.iterations == (10, 20)
        assert cfg.reg.gain_a == (100.0, 50.0)
        assert cfg.reg.metric2_weight == 0.0

    def test_single_value_broadcasts_to_every_level(self):
        """A per-level key given once fills every resolution"""
        cfg = parse_config_text("reg.NumberOfHistogramBins = 16\nreg.SP_A = 50")
        assert cfg.reg.histogram_bins == (16, 16, 16, 16)
        assert cfg.reg.gain_A == (50.0, 50.0, 50.0, 50.0)

    def test_overrides_win_over_file(self):
        """Overrides replace values read from the text"""
        cfg = parse_config_text("seed = 1\nreg.Metric2Weight = 0.01", {"seed": 3, "reg.Metric2Weight": 0.0})
        assert cfg.seed == 3
        assert cfg.reg.metric2_weight == 0.0

    def test_load_config_from_file(self, tmp_path):
        """load_config reads a file from disk"""
        path = tmp_path / "exp.cfg"
        path.write_text("seed = 11\neval.error_threshold = 3\n")
        cfg = load_config(path)
        assert cfg.seed == 11
        assert cfg.eval.error_threshold == 3.0


class TestValidation:
    """Test rejection of invalid configurations"""

    def test_unknown_section(self):
        """Unknown section prefixes are configuration errors"""
        with pytest.raises(ConfigError):
            parse_config_text("nope.value = 1")

    def test_unknown_key(self):
        """Unknown keys inside a section are rejected"""
        with pytest.raises(ConfigError):
            parse_config_text("reg.not_a_key = 1")

    def test_line_without_equals(self):
        """Lines must be key = value"""
        with pytest.raises(ConfigError):
            parse_config_text("seed 7")

    def test_negative_weight(self):
        """Metric weights must be non-negative"""
        with pytest.raises(ConfigError):
            parse_config_text("reg.Metric2Weight = -1")

    def test_level_count_mismatch(self):
        """Per-level lists must match the number of resolutions"""
        with pytest.raises(ConfigError):
            parse_config_text("reg.MaximumNumberOfIterations = 10 20 30")

    def test_patch_not_divisible_by_pooling(self):
        """Patch dims must be divisible by 2 ** levels"""
        with pytest.raises(ConfigError):
            parse_config_text("net.levels = 3\nnet.patch_dims = 20 48 48")

    def test_unknown_variant(self):
        """Only the five loss variants are accepted"""
        with pytest.raises(ConfigError):
            parse_config_text("train.variant = triplet")

    def test_missing_file(self, tmp_path):
        """A missing config file is a configuration error"""
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.cfg")


class TestDumpAndHash:
    """Test the config echo and hash"""

    def test_dump_round_trips(self):
        """Dumped text parses back to an equal configuration"""
        cfg = parse_config_text("seed = 5\nreg.Metric2Weight = 0\nnet.patch_dims = 16 32 32")
        again = parse_config_text(dump_config(cfg))
        assert again == cfg
        assert config_hash(again) == config_hash(cfg)

    def test_hash_changes_with_values(self):
        """Different settings give different hashes"""
        assert config_hash(parse_config_text("seed = 1")) != config_hash(parse_config_text("seed = 2"))

    def test_hash_is_hex_sha256(self):
        """Hash is 64 hex characters"""
        h = config_hash(ExperimentConfig())
        assert len(h) == 64
        int(h, 16)
