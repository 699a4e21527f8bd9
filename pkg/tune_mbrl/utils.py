"""Utility functions."""

import sys
import hashlib
import logging
from pathlib import Path
from typing import Optional

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

def setup_logging(verbose: bool = False, level: Optional[str] = None):
    """Setup logging configuration."""
    if verbose:
        resolved = logging.DEBUG
    elif level:
        resolved = getattr(logging, level.upper(), logging.INFO)
    else:
        resolved = logging.INFO
    logging.basicConfig(
        level=resolved,
        format=LOG_FORMAT,
        datefmt='%Y-%m-%d %H:%M:%S'
    )

def add_file_logging(log_file: Path) -> logging.Handler:
    """Mirror all log records into a file inside a run directory."""
    log_file.parent.mkdir(parents=True, exist_ok=True)
    file_handler = logging.FileHandler(log_file)
    file_handler.setLevel(logging.INFO)
    file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logging.getLogger().addHandler(file_handler)
    return file_handler

def remove_file_logging(handler: logging.Handler):
    """Detach a handler added by add_file_logging."""
    logging.getLogger().removeHandler(handler)
    handler.close()

def get_logger(name: str) -> logging.Logger:
    """Get a logger instance."""
    return logging.getLogger(name)

def print_error(message: str):
    """Print error message to stderr."""
    print(f"Error: {message}", file=sys.stderr)

def print_success(message: str):
    """Print success message."""
    print(f"✓ {message}")

def print_info(message: str, end: str = "\n", flush: bool = False):
    """Print info message."""
    print(message, end=end, flush=flush)

def format_duration(seconds: float) -> str:
    """Format duration in human-readable format."""
    if seconds < 60:
        return f"{seconds:.1f}s"
    elif seconds < 3600:
        return f"{seconds / 60:.1f}m"
    else:
        return f"{seconds / 3600:.1f}h"

def seed_tree(master_seed: int, member_id: int, trial_index: int, salt: str = "") -> int:
    """Derive an independent 63-bit seed from (master seed, member, trial).

    The derivation depends only on its own arguments, so adding members to a
    population never changes the streams of existing members, and a resumed
    run draws exactly the numbers the interrupted one would have drawn.
    """
    key = f"{salt}:{int(master_seed)}:{int(member_id)}:{int(trial_index)}".encode("utf-8")
    digest = hashlib.sha256(key).digest()
    return int.from_bytes(digest[:8], "little") >> 1
