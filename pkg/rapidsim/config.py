"""Application configuration."""
import os
from pathlib import Path
from typing import Optional
from dotenv import load_dotenv

from rapidsim.errors import SpecParseError

# Load environment variables from .env file
load_dotenv()

# Base paths
BASE_DIR = Path(__file__).parent.parent
DATA_DIR = BASE_DIR / "data"
RESULTS_DIR = Path(os.getenv("RAPIDSIM_RESULTS_DIR", str(BASE_DIR / "results")))

# Logging
LOG_LEVEL = os.getenv("RAPIDSIM_LOG_LEVEL", "WARNING").upper()

# File formats
TRACE_HEADER = "rapidsim-trace v1"
CSV_SCHEMA_VERSION = 1

# Kernel tile menus (elements)
TILE_MN_SIZES = (32, 64, 128, 256)
TILE_K_SIZES = (32, 64)
MAX_TILES_PER_SM = 16
ATTENTION_BLOCK_SIZES = (32, 64, 128)

# Stochastic faults
FAULT_DERATE_CLAMP = (0.01, 0.99)

# Decode passes are grouped into geometric KV-length buckets with this ratio
DEFAULT_DECODE_BUCKET_RATIO = 1.5


def get_seed_override() -> Optional[int]:
    """RAPIDSIM_SEED, read at call time so it can change between runs."""
    raw = os.getenv("RAPIDSIM_SEED", "").strip()
    if not raw:
        return None
    try:
        return int(raw)
    except ValueError:
        raise SpecParseError("RAPIDSIM_SEED", f"expected an integer, got {raw!r}")


def get_default_jobs() -> int:
    raw = os.getenv("RAPIDSIM_JOBS", "1").strip() or "1"
    try:
        return max(1, int(raw))
    except ValueError:
        raise SpecParseError("RAPIDSIM_JOBS", f"expected an integer, got {raw!r}")


def get_decode_bucket_ratio() -> float:
    raw = os.getenv("RAPIDSIM_DECODE_BUCKET_RATIO", "").strip()
    if not raw:
        return DEFAULT_DECODE_BUCKET_RATIO
    try:
        ratio = float(raw)
    except ValueError:
        raise SpecParseError("RAPIDSIM_DECODE_BUCKET_RATIO", f"expected a number, got {raw!r}")
    if ratio <= 1.0:
        raise SpecParseError("RAPIDSIM_DECODE_BUCKET_RATIO", "must be greater than 1")
    return ratio
