"""
FASER Utilities
Shared functions for config loading, JSONL I/O, digests, operation logging
"""

import hashlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Union

import yaml

TOOL_VERSION = "1.0.0"

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

PathLike = Union[str, Path]


def get_pipeline_dir() -> Path:
    """Get the repository root directory."""
    return Path(__file__).resolve().parent.parent


def _deep_merge(base: Dict, override: Dict) -> Dict:
    merged = dict(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(path: Optional[PathLike] = None) -> Dict:
    """Load configuration from config.yaml, an optional user file, and env vars."""
    config_path = get_pipeline_dir() / "config.yaml"

    config: Dict = {}
    if config_path.exists():
        with open(config_path) as f:
            config = yaml.safe_load(f) or {}

    if path is not None:
        user_path = Path(path)
        if not user_path.exists():
            from error_recovery import ConfigError
            raise ConfigError(f"config file not found: {user_path}")
        with open(user_path) as f:
            user = yaml.safe_load(f) or {}
        if not isinstance(user, dict):
            from error_recovery import ConfigError
            raise ConfigError(f"{user_path}: expected a mapping of sections")
        config = _deep_merge(config, user)

    # Env var fallbacks
    threads = os.environ.get('FASER_THREADS', '').strip()
    if threads:
        config.setdefault('runtime', {})['threads'] = int(threads)
    log_dir = os.environ.get('FASER_LOG_DIR', '').strip()
    if log_dir:
        config.setdefault('logging', {})['dir'] = log_dir

    return config


def config_section(config: Dict, name: str) -> Dict:
    """Return a config section, empty when absent."""
    section = config.get(name) or {}
    return dict(section)


def setup_logging(verbose: bool = False):
    """Install the stderr log handler used by every command."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        stream=sys.stderr,
    )


def configure_threads(threads: Optional[int]) -> int:
    """Cap torch worker parallelism. Returns the effective thread count."""
    import torch

    if threads is None:
        env = os.environ.get('FASER_THREADS', '').strip()
        threads = int(env) if env else 1
    threads = max(1, int(threads))
    torch.set_num_threads(threads)
    return threads


# --- JSONL I/O ---

def read_jsonl(path: PathLike) -> Iterator[Dict]:
    """Yield one JSON object per non-blank line."""
    with open(path, encoding='utf-8') as f:
        for line in f:
            if line.strip():
                yield json.loads(line)


def write_jsonl(path: PathLike, records: Iterable[Dict]) -> int:
    """Write records as line-delimited JSON. Returns the record count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, 'w', encoding='utf-8') as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True))
            f.write('\n')
            count += 1
    return count


def write_json(path: PathLike, data: Any):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write('\n')


def file_digest(path: PathLike) -> str:
    """sha256 of a file's contents."""
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            h.update(chunk)
    return h.hexdigest()


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat().replace("+00:00", "Z")


# --- Logging ---

def get_log_dir(config: Optional[Dict] = None) -> Path:
    """Operation log directory: FASER_LOG_DIR, then config, then <repo>/logs."""
    env = os.environ.get('FASER_LOG_DIR', '').strip()
    if env:
        return Path(env)
    if config:
        configured = config_section(config, 'logging').get('dir')
        if configured:
            return Path(configured)
    return get_pipeline_dir() / "logs"


def log_operation(module: str, action: str, status: str,
                  details: Optional[Dict] = None) -> Dict:
    """Append one structured operation record to today's log."""
    log_entry = {
        "timestamp": utc_now(),
        "module": module,
        "action": action,
        "status": status,
        "details": details or {}
    }

    date = datetime.now().strftime("%Y-%m-%d")
    log_file = get_log_dir() / f"{date}.jsonl"

    try:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        with open(log_file, 'a', encoding='utf-8') as f:
            f.write(json.dumps(log_entry, sort_keys=True, default=str))
            f.write('\n')
    except OSError as e:
        logging.getLogger('faser.utils').warning(f"operation log not written: {e}")

    return log_entry


def chunked(items: List, size: int) -> Iterator[List]:
    """Yield consecutive slices of at most `size` items."""
    for start in range(0, len(items), size):
        yield items[start:start + size]
