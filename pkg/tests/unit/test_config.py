"""
Unit tests for the config module.

Tests path resolution, validation and the config class mapping without
touching the process environment.
"""

import os

import pytest

from config import (
    Config,
    DevelopmentConfig,
    ProductionConfig,
    TestingConfig,
    config_map,
    get_config
)
from tests.conftest import CONFIG_DIR as REPO_CONFIG_DIR, NETWORKS_DIR as REPO_NETWORKS_DIR


@pytest.mark.unit
class TestBaseConfig:
    """Test the base Config class."""

    def test_numeric_settings_are_parsed(self):
        """Integer settings come out of the environment as ints."""
        assert isinstance(Config.SEARCH_JOBS, int)
        assert isinstance(Config.CA_WINDOW_CYCLES, int)
        assert Config.CA_WINDOW_CYCLES > 0

    def test_profile_path_resolves_names(self):
        """A bare profile name maps into CONFIG_DIR."""
        class Probe(Config):
            CONFIG_DIR = 'profiles'
            HARDWARE_PROFILE = 'wide'

        assert Probe.profile_path() == os.path.join('profiles', 'wide.json')
        assert Probe.profile_path('narrow') == os.path.join('profiles', 'narrow.json')

    def test_profile_path_keeps_paths(self):
        """Explicit files are used as given."""
        assert Config.profile_path('custom.json') == 'custom.json'
        nested = os.path.join('some', 'dir', 'profile')
        assert Config.profile_path(nested) == nested

    def test_validate_required_config_passes(self):
        """Existing locations validate cleanly."""
        class Probe(Config):
            CONFIG_DIR = REPO_CONFIG_DIR
            NETWORKS_DIR = REPO_NETWORKS_DIR
            HARDWARE_PROFILE = 'paper-baseline'
            SEARCH_JOBS = 1

        assert Probe.validate_required_config() == []

    def test_validate_required_config_reports_problems(self, tmp_path):
        """Missing directories, profiles and bad job counts are reported."""
        class Probe(Config):
            CONFIG_DIR = str(tmp_path)
            NETWORKS_DIR = str(tmp_path / 'missing')
            HARDWARE_PROFILE = 'paper-baseline'
            SEARCH_JOBS = 0

        problems = Probe.validate_required_config()
        assert 'NETWORKS_DIR' in problems
        assert 'HARDWARE_PROFILE' in problems
        assert 'SEARCH_JOBS (must be >= 1)' in problems

    def test_config_summary(self):
        """The summary exposes the run settings."""
        summary = TestingConfig.get_config_summary()
        assert summary['app_env'] == 'testing'
        assert summary['search_jobs'] == 1
        assert summary['reproducible_timestamps'] is True
        assert 'ca_window_cycles' in summary


@pytest.mark.unit
class TestEnvironmentConfigs:
    """Test the environment-specific classes."""

    def test_development_config(self):
        assert DevelopmentConfig.DEBUG is True
        assert DevelopmentConfig.APP_ENV == 'development'

    def test_production_requires_output_dir(self, tmp_path):
        """Batch runs also need an existing OUTPUT_DIR."""
        class Probe(ProductionConfig):
            CONFIG_DIR = REPO_CONFIG_DIR
            NETWORKS_DIR = REPO_NETWORKS_DIR
            HARDWARE_PROFILE = 'paper-baseline'
            SEARCH_JOBS = 1
            OUTPUT_DIR = str(tmp_path / 'nowhere')

        assert Probe.validate_required_config() == ['OUTPUT_DIR']
        Probe.OUTPUT_DIR = str(tmp_path)
        assert Probe.validate_required_config() == []

    def test_testing_config(self):
        assert TestingConfig.TESTING is True
        assert TestingConfig.SEARCH_JOBS == 1
        assert TestingConfig.validate_required_config() == []


@pytest.mark.unit
class TestGetConfig:
    """Test configuration selection."""

    @pytest.mark.parametrize('name, expected', [
        ('development', DevelopmentConfig),
        ('production', ProductionConfig),
        ('testing', TestingConfig),
        ('staging', DevelopmentConfig),
    ])
    def test_named_config(self, name, expected):
        assert get_config(name) is expected

    def test_config_from_app_env(self, monkeypatch):
        monkeypatch.setenv('APP_ENV', 'production')
        assert get_config() is ProductionConfig

    def test_default_mapping(self):
        assert config_map['default'] is DevelopmentConfig
