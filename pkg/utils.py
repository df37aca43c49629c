"""
Utility classes and functions for the FedLAW simulator
"""

import configparser
import logging
import sys
from typing import Any, List, Optional


class SimulatorError(ValueError):
    """Base class for every error raised by the simulator"""


class ConfigError(SimulatorError):
    """Invalid or missing configuration value"""

    def __init__(self, message: str, section: Optional[str] = None,
                 key: Optional[str] = None, line: Optional[int] = None):
        location = ''
        if section is not None:
            location = f"[{section}]" + (f" {key}" if key else '')
        if line is not None:
            location = f"{location} (line {line})".strip()
        super().__init__(f"{location}: {message}" if location else message)
        self.section = section
        self.key = key
        self.line = line


class DomainError(SimulatorError):
    """Argument outside the domain of an operation"""


class InfeasibleError(SimulatorError):
    """Constraint set is empty (s·t < 1 or n·t < 1)"""


class IdxFormatError(SimulatorError):
    """Malformed IDX file"""


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


class DivergenceError(SimulatorError):
    """Training diverged; carries the traces produced before the failure"""

    def __init__(self, epoch: int, reason: str, traces: Optional[list] = None):
        super().__init__(f"Diverged at epoch {epoch}: {reason}")
        self.epoch = epoch
        self.reason = reason
        self.traces = traces if traces is not None else []


def setup_logging(level: str = 'INFO', log_file: Optional[str] = None):
    """Setup logging configuration"""
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if log_file:
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True
    )


class ConfigManager:
    """Configuration manager for handling experiment .ini files"""

    def __init__(self, config_path: str):
        self.config_path = config_path
        self.config = configparser.ConfigParser(inline_comment_prefixes=(';', '#'))
        self.logger = logging.getLogger(__name__)
        self._load_config()

    def _load_config(self):
        """Load configuration from file"""
        try:
            with open(self.config_path, 'r', encoding='utf-8') as f:
                self.config.read_file(f)
            self.logger.info(f"Configuration loaded from {self.config_path}")
        except configparser.ParsingError as e:
            # MissingSectionHeaderError carries lineno but no errors list
            errors = getattr(e, 'errors', None)
            line = errors[0][0] if errors else getattr(e, 'lineno', None)
            raise ConfigError("malformed INI syntax", line=line) from e
        except configparser.Error as e:
            raise ConfigError(str(e), line=getattr(e, 'lineno', None)) from e
        except OSError as e:
            raise ConfigError(f"cannot read {self.config_path}: {e}") from e

    def has_section(self, section: str) -> bool:
        return self.config.has_section(section)

    def _raw(self, section: str, key: str) -> Optional[str]:
        value = self.config.get(section, key, fallback=None)
        if value is None:
            return None
        value = value.strip()
        return value or None

    def get(self, section: str, key: str, fallback: Any = None) -> str:
        """Get configuration value"""
        value = self._raw(section, key)
        if value is None:
            if fallback is not None:
                return fallback
            raise ConfigError("missing required value", section, key)
        return value

    def getint(self, section: str, key: str, fallback: Any = None) -> int:
        """Get integer configuration value"""
        value = self._raw(section, key)
        if value is None:
            if fallback is not None:
                return fallback
            raise ConfigError("missing required integer", section, key)
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"expected an integer, got {value!r}", section, key)

    def getfloat(self, section: str, key: str, fallback: Any = None) -> float:
        """Get float configuration value"""
        value = self._raw(section, key)
        if value is None:
            if fallback is not None:
                return fallback
            raise ConfigError("missing required number", section, key)
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"expected a number, got {value!r}", section, key)

    def getboolean(self, section: str, key: str, fallback: Any = None) -> bool:
        """Get boolean configuration value"""
        value = self._raw(section, key)
        if value is None:
            if fallback is not None:
                return fallback
            raise ConfigError("missing required boolean", section, key)
        lowered = value.lower()
        if lowered not in configparser.ConfigParser.BOOLEAN_STATES:
            raise ConfigError(f"expected a boolean, got {value!r}", section, key)
        return configparser.ConfigParser.BOOLEAN_STATES[lowered]

    def get_optional_int(self, section: str, key: str) -> Optional[int]:
        """Integer value, or None when the key is blank or absent"""
        if self._raw(section, key) is None:
            return None
        return self.getint(section, key)

    def get_optional_float(self, section: str, key: str) -> Optional[float]:
        """Float value, or None when the key is blank or absent"""
        if self._raw(section, key) is None:
            return None
        return self.getfloat(section, key)

    def get_int_list(self, section: str, key: str) -> List[int]:
        """Comma separated integers; blank means an empty list"""
        value = self._raw(section, key)
        if value is None:
            return []
        try:
            return [int(part) for part in value.split(',') if part.strip()]
        except ValueError:
            raise ConfigError(f"expected comma separated integers, got {value!r}", section, key)

    def set(self, section: str, key: str, value: Any):
        """Override a value in memory (sweeps and CLI flags)"""
        if not self.config.has_section(section):
            self.config.add_section(section)
        self.config.set(section, key, str(value))


def format_float(value: float) -> str:
    """Round-trip exact float formatting for CSV output"""
    return format(float(value), '.17g')
