"""
Logging, error records and exit codes for the simulator tools.

Every module raises one of the SimulatorError subclasses below. The CLI
turns them into an exit code and a JSON error document; each failure is
also written to the log file and appended to the JSON-lines error store
under an ERR-XXXXXXXX id the user can quote.
"""

import json
import logging
import traceback
import uuid
from contextlib import contextmanager
from datetime import datetime, timezone
from typing import Any, Dict, Optional, Tuple

UTC = timezone.utc

from config import get_config


LOGGER_NAME = 'smc_simulator'
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_DATEFMT = '%Y-%m-%d %H:%M:%S'

EXIT_OK = 0
EXIT_USER_ERROR = 1
EXIT_INFEASIBLE = 2
EXIT_INTERNAL = 3

# OS errors on user-supplied paths count as bad input
_PATH_ERRORS = (FileNotFoundError, PermissionError, IsADirectoryError)


class SimulatorError(Exception):
    """Root of the simulator's exceptions."""
    exit_code = EXIT_INTERNAL


class UserInputError(SimulatorError):
    """Malformed descriptor, profile, scenario or argument."""
    exit_code = EXIT_USER_ERROR


class InfeasibleError(SimulatorError):
    """Valid input that no mapping can satisfy, e.g. a layer too big for the SPM."""
    exit_code = EXIT_INFEASIBLE


class InvariantViolation(SimulatorError):
    """A self-check of the simulator failed."""
    exit_code = EXIT_INTERNAL


def _default_level(exception: Exception) -> str:
    if isinstance(exception, InvariantViolation):
        return 'CRITICAL'
    if isinstance(exception, (UserInputError, InfeasibleError)):
        return 'WARNING'
    return 'ERROR'


def _with_context(message: str, context: Optional[str]) -> str:
    return f"{context}: {message}" if context else message


class ErrorHandler:
    """
    Owns the simulator logger and the error store.

    Args:
        config_class: Config class supplying LOG_LEVEL, LOG_FILE,
            ERROR_LOG_FILE and DEBUG (the active config when omitted)
    """

    def __init__(self, config_class=None):
        self.config = config_class or get_config()
        self.logger = self._setup_logging()

    def _setup_logging(self) -> logging.Logger:
        """Attach file (and in debug mode console) handlers once per process."""
        logger = logging.getLogger(LOGGER_NAME)
        if logger.handlers:
            return logger

        level = getattr(logging, self.config.LOG_LEVEL.upper(), logging.INFO)
        logger.setLevel(level)
        formatter = logging.Formatter(LOG_FORMAT, datefmt=LOG_DATEFMT)

        handlers = []
        try:
            handlers.append(logging.FileHandler(self.config.LOG_FILE, encoding='utf-8'))
        except OSError as e:
            print(f"Warning: cannot write log file {self.config.LOG_FILE}: {e}")
        if self.config.DEBUG:
            handlers.append(logging.StreamHandler())

        for handler in handlers:
            handler.setLevel(level)
            handler.setFormatter(formatter)
            logger.addHandler(handler)
        logger.propagate = False
        return logger

    def generate_error_id(self) -> str:
        """Random id of the form ERR-XXXXXXXX (upper-case hex)."""
        return f"ERR-{uuid.uuid4().hex[:8].upper()}"

    def log_and_store_error(
        self,
        exception: Exception,
        context: Optional[str] = None,
        additional_data: Optional[Dict[str, Any]] = None,
        level: Optional[str] = None,
        source: Optional[str] = None
    ) -> str:
        """
        Record a failure in the log and in the error store.

        User and infeasibility errors are logged as WARNING, invariant
        violations as CRITICAL and anything else as ERROR unless `level`
        says otherwise.

        Args:
            exception: The failure
            context: Prefix for the message, usually the operation name
            additional_data: Extra key/values appended to the message
            level: Log level name overriding the default
            source: Store field naming the component; defaults to context

        Returns:
            str: The error id
        """
        error_id = self.generate_error_id()
        stack_trace = traceback.format_exc()
        message = _with_context(str(exception), context)
        if additional_data:
            message = f"{message} | Additional data: {additional_data}"
        level = level or _default_level(exception)

        self.logger.log(getattr(logging, level, logging.ERROR),
                        f"Error {error_id}: {message}\nStack trace:\n{stack_trace}")
        try:
            self._store_error(error_id, message, stack_trace, level, source or context or 'simulator')
        except Exception as store_error:
            self.logger.critical(f"Error {error_id} was not stored ({store_error}); message was: {message}")
        return error_id

    def _store_error(self, error_id: str, message: str, stack_trace: str, level: str = 'ERROR',
                     source: str = 'simulator'):
        record = {
            'error_id': error_id,
            'timestamp': datetime.now(UTC).isoformat(),
            'level': level,
            'source': source,
            'message': message,
            'stack_trace': stack_trace,
        }
        with open(self.config.ERROR_LOG_FILE, 'a', encoding='utf-8') as handle:
            handle.write(json.dumps(record) + '\n')

    def get_user_friendly_error(self, error_id: str, exception: Optional[Exception] = None) -> Dict[str, Any]:
        """
        Error document shown to the user.

        Messages of simulator errors are written for users and shown as-is;
        other exceptions are hidden behind a generic message.
        """
        shown = str(exception) if isinstance(exception, SimulatorError) else 'An internal error occurred'
        return {
            'success': False,
            'error': shown,
            'error_id': error_id,
            'message': f'See the error log for details, error ID: {error_id}'
        }

    def log_info(self, message: str, context: Optional[str] = None):
        self.logger.info(_with_context(message, context))

    def log_warning(self, message: str, context: Optional[str] = None):
        self.logger.warning(_with_context(message, context))

    def log_debug(self, message: str, context: Optional[str] = None):
        self.logger.debug(_with_context(message, context))


_error_handler = None


def get_error_handler() -> ErrorHandler:
    """Process-wide ErrorHandler, created on first use."""
    global _error_handler
    if _error_handler is None:
        _error_handler = ErrorHandler()
    return _error_handler


@contextmanager
def error_context(context_name: str, additional_data: Optional[Dict[str, Any]] = None):
    """
    Record any exception raised in the block, then let it propagate.

    Example:
        with error_context('calibrate', {'network': net.name}):
            table = calibrate(profile, net, schedule)
    """
    try:
        yield
    except Exception as e:
        get_error_handler().log_and_store_error(e, context_name, additional_data)
        raise


def exit_code_for(exception: Exception) -> int:
    """1 for bad input, 2 for infeasible requests, 3 for everything else."""
    if isinstance(exception, SimulatorError):
        return exception.exit_code
    if isinstance(exception, _PATH_ERRORS):
        return EXIT_USER_ERROR
    return EXIT_INTERNAL


def handle_cli_error(exception: Exception, context: str = 'cli') -> Tuple[Dict[str, Any], int]:
    """
    Record a failed command.

    Returns:
        tuple: (error document for stderr, exit code)
    """
    handler = get_error_handler()
    error_id = handler.log_and_store_error(exception, context, source='cli')
    response = handler.get_user_friendly_error(error_id, exception)
    if isinstance(exception, _PATH_ERRORS):
        response['error'] = str(exception)
    return response, exit_code_for(exception)


def log_info(message: str, context: Optional[str] = None):
    get_error_handler().log_info(message, context)


def log_warning(message: str, context: Optional[str] = None):
    get_error_handler().log_warning(message, context)


def log_debug(message: str, context: Optional[str] = None):
    get_error_handler().log_debug(message, context)


def log_error(exception: Exception, context: Optional[str] = None,
              additional_data: Optional[Dict[str, Any]] = None, level: Optional[str] = None,
              source: Optional[str] = None) -> str:
    """Record an exception through the shared handler; returns its error id."""
    return get_error_handler().log_and_store_error(exception, context, additional_data, level, source)
