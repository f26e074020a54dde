"""
Process settings for the dxs pipeline.

Centralizes worker caps, default output paths, task timeouts and compute dispatch
mode. Everything here can be overridden via environment variables (a local
.env file is honored). Run parameters (acquisition, phantom, network,
training) live in the TOML run configuration instead, see
dxs_core.run_config.
"""

import os
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

# Load environment variables
load_dotenv()


def _env_flag(name: str, default: str) -> bool:
    return os.getenv(name, default).lower() in ("true", "1", "yes")


# =============================================================================
# Redis Configuration
# =============================================================================

REDIS_HOST = os.getenv("REDIS_HOST", "localhost")
REDIS_PORT = int(os.getenv("REDIS_PORT", "6379"))
REDIS_URL = f"redis://{REDIS_HOST}:{REDIS_PORT}"

# Live run logs
LIVE_LOG_DB = int(os.getenv("DXS_LIVE_LOG_DB", "2"))


# =============================================================================
# Celery Configuration
# =============================================================================

CELERY_BROKER_URL = os.getenv("CELERY_BROKER_URL", f"{REDIS_URL}/0")
CELERY_RESULT_BACKEND = os.getenv("CELERY_RESULT_BACKEND", f"{REDIS_URL}/1")


# =============================================================================
# Compute Task Timeouts (in seconds)
# =============================================================================

class TaskTimeouts:
    """Timeout settings for dispatched compute tasks."""

    TRAIN_FOLD = int(os.getenv("TIMEOUT_TRAIN_FOLD", "7200"))  # 2 hours
    SEPARATE = int(os.getenv("TIMEOUT_SEPARATE", "600"))  # 10 minutes

    POLL_INTERVAL = float(os.getenv("TASK_POLL_INTERVAL", "2"))  # seconds


# =============================================================================
# Output Directories
# =============================================================================

class OutputPaths:
    """
    Default command output layout below $DXS_OUTPUT_DIR.

    The root is read on every call so commands follow the current environment.
    """

    DATASET = "dataset"
    REFERENCE = "reference"
    TRAINING = "training"
    EVALUATION = "evaluation"

    @staticmethod
    def root() -> Path:
        return Path(os.getenv("DXS_OUTPUT_DIR", "dxs_outputs"))

    @classmethod
    def resolve(cls, out: Optional[Path], kind: Optional[str] = None) -> Path:
        """An explicit --out wins; otherwise <root>/<kind>, or the root itself."""
        if out is not None:
            return Path(out)
        return cls.root() / kind if kind else cls.root()


# =============================================================================
# Worker Settings
# =============================================================================

def get_worker_count() -> int:
    """
    Worker cap for per-subject / per-fold parallelism.

    Read on every call so tests and the CLI can change DXS_THREADS at runtime.
    1 means determinism mode (inline execution).
    """
    raw = os.getenv("DXS_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        return 1
    return max(1, value)


# =============================================================================
# Compute Dispatch
# =============================================================================

def is_local_compute() -> bool:
    """True when compute tasks run in-process instead of on Celery workers."""
    return _env_flag("DXS_LOCAL_COMPUTE", "true")


def run_slow_tests() -> bool:
    """True when the desk-scale acceptance tests are enabled."""
    return _env_flag("DXS_RUN_SLOW", "false")
