#!/usr/bin/env python3
"""
Environment Variables Loader for the FedLAW simulator
محمل المتغيرات البيئية للمحاكي
"""

import logging
import os
from typing import Dict, Optional

from dotenv import load_dotenv

from utils import ConfigError

logger = logging.getLogger(__name__)

ENV_PREFIX = 'FEDLAW_'
ENV_KEYS = ('MNIST_IMAGES', 'MNIST_LABELS', 'LOG_LEVEL', 'LOG_FILE', 'THREADS')


def load_environment(env_file: str = '.env') -> bool:
    """Load FEDLAW_* variables from .env; process environment wins over the file"""
    if os.path.exists(env_file):
        load_dotenv(env_file, override=False)
        logger.debug(f"Loaded variables from {env_file}")
        return True
    logger.debug(f"{env_file} not found, using process environment only")
    return False


def get_env(key: str) -> Optional[str]:
    value = os.getenv(ENV_PREFIX + key)
    if value is None or not value.strip():
        return None
    return value.strip()


def get_env_int(key: str) -> Optional[int]:
    value = get_env(key)
    if value is None:
        return None
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{ENV_PREFIX}{key} must be an integer, got {value!r}")


def get_config_summary() -> Dict[str, str]:
    """Resolved FEDLAW_* overrides, for the run manifest"""
    return {ENV_PREFIX + key: get_env(key) for key in ENV_KEYS if get_env(key) is not None}
