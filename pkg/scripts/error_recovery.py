#!/usr/bin/env python3
"""
ErrorRecovery - Error taxonomy, error log, and exit-code mapping
Every stage raises a FaserError subclass; the CLI logs it and maps it to an exit code.
"""

import json
import sys
import traceback
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional

sys.path.insert(0, str(Path(__file__).parent))
from utils import get_log_dir, log_operation, utc_now


EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class ErrorSeverity(Enum):
    """Error severity levels."""
    INFO = "info"
    WARNING = "warning"
    ERROR = "error"
    CRITICAL = "critical"


class FaserError(Exception):
    """Base class for every error the toolkit raises on purpose."""
    exit_code = EXIT_DATA


class UsageError(FaserError):
    """Bad command line or argument combination."""
    exit_code = EXIT_USAGE


class DataError(FaserError):
    """Input data or an artefact violates its contract."""
    exit_code = EXIT_DATA


class ConfigError(DataError):
    """Invalid configuration value."""


class CorpusFormatError(DataError):
    """Malformed corpus record."""

    def __init__(self, line_number: int, reason: str):
        self.line_number = line_number
        self.reason = reason
        super().__init__(f"line {line_number}: {reason}")


class RegisterTableError(DataError):
    """Missing or malformed register table."""


class VocabularyError(DataError):
    pass


class EncodingError(DataError):
    """Encoded input inconsistent with the model (e.g. id >= vocab size)."""


class SamplingError(DataError):
    """Corpus cannot satisfy the batch sampler contract."""


class MiningError(DataError):
    """Batch does not satisfy the pair-mining contract."""


class TrainingError(DataError):
    """Training diverged or produced non-finite values."""

    def __init__(self, message: str, batch_index: Optional[int] = None):
        self.batch_index = batch_index
        if batch_index is not None:
            message = f"batch {batch_index}: {message}"
        super().__init__(message)


class CheckpointError(DataError):
    pass


class StoreError(DataError):
    """Embedding store format or query mismatch."""


class EvaluationError(DataError):
    pass


class ContaminationError(EvaluationError):
    """Held-out architecture found in the training corpus."""


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit-code contract."""
    if isinstance(exc, FaserError):
        return exc.exit_code
    return EXIT_DATA


class ErrorRecovery:
    """Error log for failed commands."""

    MAX_ERRORS_PER_DAY = 500

    def __init__(self, log_dir: Optional[Path] = None):
        self.errors_dir = (log_dir or get_log_dir()) / "errors"

    @property
    def error_log_file(self) -> Path:
        return self.errors_dir / f"{datetime.now().strftime('%Y-%m-%d')}.json"

    def _load_error_log(self) -> List[Dict]:
        """Load error log for today."""
        if self.error_log_file.exists():
            try:
                with open(self.error_log_file) as f:
                    return json.load(f)
            except (OSError, json.JSONDecodeError):
                return []
        return []

    def _save_error_log(self, errors: List[Dict]):
        errors = errors[-self.MAX_ERRORS_PER_DAY:]
        self.errors_dir.mkdir(parents=True, exist_ok=True)
        with open(self.error_log_file, 'w') as f:
            json.dump(errors, f, indent=2)

    def log_error(self, module: str, operation: str, error,
                  severity: ErrorSeverity = ErrorSeverity.ERROR,
                  details: Optional[Dict] = None) -> Dict:
        """Record an error and mirror it into the operation log."""
        entry = {
            'timestamp': utc_now(),
            'module': module,
            'operation': operation,
            'error': str(error),
            'error_type': type(error).__name__ if isinstance(error, BaseException) else 'Unknown',
            'severity': severity.value,
            'details': details or {},
            'traceback': traceback.format_exc()
            if severity in (ErrorSeverity.ERROR, ErrorSeverity.CRITICAL) else None,
        }

        try:
            errors = self._load_error_log()
            errors.append(entry)
            self._save_error_log(errors)
        except OSError:
            pass

        log_operation(module, operation, 'error', {
            'error': str(error),
            'severity': severity.value,
            **(details or {})
        })
        return entry
