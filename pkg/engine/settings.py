"""
Where things live on disk and how chatty the logs are.

Values come from environment variables, optionally loaded from a `.env`
file at the repo root:

    DENSITYMATCH_DATA_DIR   generated datasets + cache   (default: data/)
    DENSITYMATCH_RUNS_DIR   checkpoints, metrics, tables (default: runs/)
    DENSITYMATCH_LOG_LEVEL  logging level name           (default: INFO)
"""

import logging
import os
import sys
from pathlib import Path

from dotenv import load_dotenv

ROOT = Path(__file__).parent.parent

load_dotenv(ROOT / ".env")

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def data_dir() -> Path:
    return Path(os.getenv("DENSITYMATCH_DATA_DIR", str(ROOT / "data")))


def runs_dir() -> Path:
    return Path(os.getenv("DENSITYMATCH_RUNS_DIR", str(ROOT / "runs")))


def log_level() -> str:
    return os.getenv("DENSITYMATCH_LOG_LEVEL", "INFO").upper()


def configure_logging(verbose: bool = False):
    """Set up the root logger once (the CLI calls this; library code never does)."""
    level = logging.DEBUG if verbose else getattr(logging, log_level(), logging.INFO)
    logging.basicConfig(
        level=level,
        format=LOG_FORMAT,
        handlers=[logging.StreamHandler(sys.stderr)],
        force=True,
    )
