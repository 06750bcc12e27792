"""
Configuration management for the SMC ConvNet simulator.

This module handles loading configuration from environment variables
and provides default values for the command-line tools. Architectural
constants (cluster sizes, bandwidths, power figures) are not environment
settings: they live in JSON hardware profiles loaded by hardware.py.
"""

import os
import logging
from dotenv import load_dotenv

logger = logging.getLogger(__name__)

# Load environment variables from .env file
load_dotenv()
logger.info("Environment variables loaded.")


class Config:
    """Base configuration class with common settings."""

    APP_ENV = os.getenv('APP_ENV', 'development')
    DEBUG = os.getenv('DEBUG', 'False').lower() in ['true', '1', 'yes']

    # Data locations
    CONFIG_DIR = os.getenv('CONFIG_DIR', 'configs')
    NETWORKS_DIR = os.getenv('NETWORKS_DIR', 'networks')
    OUTPUT_DIR = os.getenv('OUTPUT_DIR', 'output')
    HARDWARE_PROFILE = os.getenv('HARDWARE_PROFILE', 'paper-baseline')

    # Simulation settings
    SEARCH_JOBS = int(os.getenv('SEARCH_JOBS', '1'))
    CA_WINDOW_CYCLES = int(os.getenv('CA_WINDOW_CYCLES', '6000'))

    # Pins manifest timestamps for reproducible report files
    SOURCE_DATE_EPOCH = os.getenv('SOURCE_DATE_EPOCH')

    # Logging Configuration
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'DEBUG')
    LOG_FILE = os.getenv('LOG_FILE', 'smc_simulator.log')
    ERROR_LOG_FILE = os.getenv('ERROR_LOG_FILE', 'smc_errors.jsonl')

    @classmethod
    def profile_path(cls, name=None):
        """
        Resolve a hardware profile name to a JSON file path.

        Args:
            name (str, optional): Profile name or path. Defaults to HARDWARE_PROFILE.

        Returns:
            str: Path to the profile file
        """
        name = name or cls.HARDWARE_PROFILE
        if name.endswith('.json') or os.sep in name:
            return name
        return os.path.join(cls.CONFIG_DIR, f"{name}.json")

    @classmethod
    def validate_required_config(cls):
        """
        Validate that the configured data locations exist.

        Returns:
            list: List of configuration problems
        """
        missing_vars = []

        if not os.path.isdir(cls.NETWORKS_DIR):
            missing_vars.append('NETWORKS_DIR')
            logger.warning(f"NETWORKS_DIR does not exist: {cls.NETWORKS_DIR}")

        if not os.path.isfile(cls.profile_path()):
            missing_vars.append('HARDWARE_PROFILE')
            logger.warning(f"Hardware profile not found: {cls.profile_path()}")

        if cls.SEARCH_JOBS < 1:
            missing_vars.append('SEARCH_JOBS (must be >= 1)')

        return missing_vars

    @classmethod
    def get_config_summary(cls):
        """
        Get a summary of current configuration.

        Returns:
            dict: Configuration summary
        """
        return {
            'app_env': cls.APP_ENV,
            'debug': cls.DEBUG,
            'config_dir': cls.CONFIG_DIR,
            'networks_dir': cls.NETWORKS_DIR,
            'output_dir': cls.OUTPUT_DIR,
            'hardware_profile': cls.HARDWARE_PROFILE,
            'search_jobs': cls.SEARCH_JOBS,
            'ca_window_cycles': cls.CA_WINDOW_CYCLES,
            'log_level': cls.LOG_LEVEL,
            'log_file': cls.LOG_FILE,
            'reproducible_timestamps': cls.SOURCE_DATE_EPOCH is not None,
        }


class DevelopmentConfig(Config):
    """Development configuration."""
    DEBUG = True
    APP_ENV = 'development'


class ProductionConfig(Config):
    """Production configuration (batch runs on a workstation)."""
    DEBUG = False
    APP_ENV = 'production'
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')

    @classmethod
    def validate_required_config(cls):
        """Additional validation for batch runs."""
        missing_vars = super().validate_required_config()

        if not os.path.isdir(cls.OUTPUT_DIR):
            missing_vars.append('OUTPUT_DIR')

        return missing_vars


class TestingConfig(Config):
    """Testing configuration."""
    TESTING = True
    DEBUG = False
    APP_ENV = 'testing'
    LOG_LEVEL = 'DEBUG'
    LOG_FILE = os.getenv('TEST_LOG_FILE', 'test_smc_simulator.log')
    ERROR_LOG_FILE = os.getenv('TEST_ERROR_LOG_FILE', 'test_smc_errors.jsonl')
    SEARCH_JOBS = 1
    SOURCE_DATE_EPOCH = '0'

    @classmethod
    def validate_required_config(cls):
        """Override validation for testing - fixtures provide every path."""
        return []


# Configuration mapping
config_map = {
    'development': DevelopmentConfig,
    'production': ProductionConfig,
    'testing': TestingConfig,
    'default': DevelopmentConfig
}


def get_config(config_name=None):
    """
    Get configuration class based on environment or provided name.

    Args:
        config_name (str, optional): Configuration name. If None, uses APP_ENV.

    Returns:
        Config: Configuration class
    """
    if config_name is None:
        config_name = os.getenv('APP_ENV', 'development')

    return config_map.get(config_name, config_map['default'])
