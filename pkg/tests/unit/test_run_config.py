"""
Unit tests for TOML run configuration.
"""

import pytest

from dxs_core.run_config import RunConfig, load_run_config, parse_run_config
from dxs_graph.errors import ConfigError


@pytest.mark.unit
class TestDefaults:
    """Tests for the default configuration."""

    def test_published_protocol(self):
        """Defaults: 16 epochs, lr 0.001 decaying by 0.8727, five folds, all five echoes."""
        cfg = RunConfig()
        assert cfg.training.epochs == 16
        assert cfg.training.lr0 == 0.001
        assert cfg.training.decay == 0.8727
        assert cfg.training.k_folds == 5
        assert cfg.network_spec().in_channels == 10

    def test_no_path_means_defaults(self):
        """load_run_config(None) needs no file."""
        assert load_run_config(None) == RunConfig()

    def test_network_spec_follows_echoes(self):
        """in_channels is twice the number of selected echoes."""
        assert RunConfig().network_spec("odd:3").in_channels == 6

    def test_phantom_gets_acquisition(self):
        """The phantom inherits the run's acquisition and spectrum."""
        cfg = parse_run_config({"acquisition": {"n_echoes": 3}, "spectrum": {"preset": "three_peak"}})
        phantom = cfg.phantom_config()
        assert phantom.acquisition.n_echoes == 3
        assert phantom.spectrum.n_peaks == 3


@pytest.mark.unit
class TestValidation:
    """Tests for rejected configurations."""

    def test_unknown_key_is_named(self):
        """Unknown keys produce a ConfigError naming the key."""
        with pytest.raises(ConfigError) as exc:
            parse_run_config({"training": {"epochz": 3}})
        assert "epochz" in str(exc.value)

    def test_unknown_section(self):
        """Unknown top-level sections are rejected."""
        with pytest.raises(ConfigError):
            parse_run_config({"optimizer": {}})

    def test_unknown_phantom_key(self):
        """Phantom keys are validated too."""
        with pytest.raises(ConfigError) as exc:
            parse_run_config({"phantom": {"radius": 3}})
        assert "phantom.radius" in str(exc.value)

    def test_phantom_acquisition_is_refused(self):
        """Acquisition belongs to its own section."""
        with pytest.raises(ConfigError):
            parse_run_config({"phantom": {"acquisition": {"n_echoes": 3}}})

    def test_bad_preset(self):
        """Unknown spectrum presets are usage errors."""
        with pytest.raises(ConfigError):
            parse_run_config({"spectrum": {"preset": "nine_peak"}})

    def test_half_explicit_spectrum(self):
        """Amplitudes without shifts are refused."""
        with pytest.raises(ConfigError):
            parse_run_config({"spectrum": {"preset": None, "amplitudes": [1.0]}})

    def test_out_of_range_value(self):
        """Range violations are reported as ConfigError."""
        with pytest.raises(ConfigError):
            parse_run_config({"training": {"k_folds": 1}})


@pytest.mark.unit
class TestLoading:
    """Tests for reading TOML files."""

    def test_load_file(self, tmp_path):
        """Sections map onto the nested models."""
        path = tmp_path / "run.toml"
        path.write_text(
            "[training]\nepochs = 4\nechoes = \"odd:3\"\n\n"
            "[network]\ndepth = 2\nbase_features = 4\n\n"
            "[phantom]\nheight = 32\nwidth = 32\nsnr = 30.0\n"
        )
        cfg = load_run_config(path)
        assert cfg.training.epochs == 4
        assert cfg.network_spec().in_channels == 6
        assert cfg.phantom_config().height == 32

    def test_missing_file(self, tmp_path):
        """A missing file is a usage error."""
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "nope.toml")

    def test_invalid_toml(self, tmp_path):
        """Syntax errors are reported as ConfigError with the path."""
        path = tmp_path / "broken.toml"
        path.write_text("[training\nepochs = 3\n")
        with pytest.raises(ConfigError) as exc:
            load_run_config(path)
        assert "broken.toml" in str(exc.value)
