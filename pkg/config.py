#!/usr/bin/env python3
"""
Configuration Module

This module provides centralized environment configuration for patchfit.
It handles environment variable loading and provides a single source of truth for
paths, logging and worker settings shared by every subcommand.

Key Components:
- Centralized environment variable loading (.env via python-dotenv)
- Configuration validation
- Default value management

Structured run parameters (fit, augmentation, dataset and training settings) live in
run_config.py; this module only carries process-level settings.

Usage:
    from config import config
    results_dir = config.RESULTS_DIR
"""

import os

import psutil
from dotenv import load_dotenv

# Load environment variables from the project root
# This assumes the .env file is in the project root directory
load_dotenv()

ENV_PREFIX = 'PATCHFIT_'


def _env(name, default=None):
    return os.getenv(f"{ENV_PREFIX}{name}", default)


def _default_threads():
    return psutil.cpu_count(logical=True) or 1


class Config:
    """Centralized configuration class"""

    # Output locations
    RESULTS_DIR = _env('RESULTS_DIR', 'results')

    # Logging
    LOG_FILE = _env('LOG_FILE', 'patchfit.log')
    LOG_LEVEL = _env('LOG_LEVEL', 'INFO')

    # Execution
    THREADS = int(_env('THREADS', _default_threads()))
    SEED = int(_env('SEED', 0))

    # Frozen intersection classifiers used by the fit loss (optional)
    SELF_CLASSIFIER = _env('SELF_CLASSIFIER')
    PAIR_CLASSIFIER = _env('PAIR_CLASSIFIER')

    # External pencil-texture hook, invoked as "<command> <png path>" (optional)
    TEXTURE_COMMAND = _env('TEXTURE_COMMAND')

    @classmethod
    def validate_execution_config(cls):
        """Validate worker and logging settings"""
        if cls.THREADS < 1:
            raise ValueError(f"{ENV_PREFIX}THREADS must be >= 1, got {cls.THREADS}")
        if cls.LOG_LEVEL.upper() not in ('DEBUG', 'INFO', 'WARNING', 'ERROR'):
            raise ValueError(f"Invalid {ENV_PREFIX}LOG_LEVEL: {cls.LOG_LEVEL}")

    @classmethod
    def validate_classifier_config(cls, self_path=None, pair_path=None):
        """
        Validate that both intersection classifier files are configured and exist.

        Explicit paths take precedence over the environment. Returns the resolved
        (self_path, pair_path) pair.
        """
        self_path = self_path or cls.SELF_CLASSIFIER
        pair_path = pair_path or cls.PAIR_CLASSIFIER
        missing = [name for name, path in (('self classifier', self_path), ('pair classifier', pair_path))
                   if not path]
        if missing:
            raise ValueError(
                f"Intersection losses enabled but no path configured for: {', '.join(missing)} "
                f"(set fit.self_classifier / fit.pair_classifier or {ENV_PREFIX}SELF_CLASSIFIER / "
                f"{ENV_PREFIX}PAIR_CLASSIFIER)"
            )
        absent = [path for path in (self_path, pair_path) if not os.path.exists(path)]
        if absent:
            raise FileNotFoundError(f"Intersection classifier file(s) not found: {', '.join(absent)}")
        return self_path, pair_path


# Create a global config instance
config = Config()
