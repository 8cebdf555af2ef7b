"""
Global Scanner Settings
=====================================================
Contains all constants, file paths, and settings shared by the entire application.
"""

import logging
import os
import sys

from dotenv import load_dotenv

# Load environment variables (local)
load_dotenv()

ENV_PREFIX = "PKG_SENTINEL_"


# Helper function to obtain environment variables
def get_env_var(key, default=''):
    return os.getenv(f"{ENV_PREFIX}{key}", default)


def _env_int(key, default):
    raw = get_env_var(key, "")
    try:
        return int(raw) if raw else default
    except ValueError:
        return default


def _env_float(key, default):
    raw = get_env_var(key, "")
    try:
        return float(raw) if raw else default
    except ValueError:
        return default


BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
RESOURCES_DIR = os.path.join(BASE_DIR, "config", "resources")

PERSISTED_DATA_DIR = get_env_var("DATA_DIR", "persisted_data")

# --- Resource files ---
DEFAULT_SCHEMA_FILE = os.path.join(RESOURCES_DIR, "feature_schema.json")
DEFAULT_DICTIONARY_FILE = os.path.join(RESOURCES_DIR, "sensitive_keywords.txt")
DEFAULT_SCAN_CONFIG_FILE = get_env_var("CONFIG", os.path.join(RESOURCES_DIR, "scan_config.yaml"))

# --- Output locations ---
FILES = {
    "scans": os.path.join(PERSISTED_DATA_DIR, "scans"),
    "state": os.path.join(PERSISTED_DATA_DIR, "state"),
    "downloads": os.path.join(PERSISTED_DATA_DIR, "downloads"),
    "experiments": os.path.join(PERSISTED_DATA_DIR, "experiments"),
}
CURSOR_FILE_NAME = "cursors.json"
DEDUP_FILE_NAME = "seen.tsv"

# --- Archive caps ---
MIB = 1024 * 1024
MAX_TOTAL_BYTES = _env_int("MAX_TOTAL_BYTES", 256 * MIB)
MAX_FILE_BYTES = _env_int("MAX_FILE_BYTES", 16 * MIB)
MAX_DOWNLOAD_BYTES = _env_int("MAX_DOWNLOAD_BYTES", 256 * MIB)
READ_CHUNK_BYTES = 64 * 1024

# --- Feature extraction ---
BASE64_MIN_LENGTH = 20
TOP_FEATURES = 5

# --- Models ---
MODEL_FORMAT_VERSION = 1
DEFAULT_DECISION_THRESHOLD = 0.5
DEFAULT_L2_LAMBDA = 1.0

# --- Controlled experiments ---
CV_DEFAULTS = {
    "k": 5,
    "repeats": 10,
    "seed": 0,
}
TUNING_DEFAULTS = {
    "budget": 50,
    "strategy": "smbo",
    "repeats": 1,
    "candidates": 256,
    "surrogate_trees": 25,
}

# --- Registry feeds ---
FEED_URLS = {
    "pypi": "https://pypi.org/rss/updates.xml",
    "pypi_json": "https://pypi.org/pypi/{name}/{version}/json",
    "pypi_project": "https://pypi.org/pypi/{name}/json",
    "npm": "https://replicate.npmjs.com/registry/_changes",
    "npm_registry": "https://registry.npmjs.org",
}
NPM_CHANGES_LIMIT = 100
DEFAULT_POLL_INTERVAL = 900
DEFAULT_WORKERS = 8

# --- HTTP client ---
HTTP_TIMEOUT = _env_float("HTTP_TIMEOUT", 30.0)
HTTP_RETRIES = 3
HTTP_BACKOFF_BASE = 1.0
HTTP_RETRY_STATUSES = (429, 500, 502, 503, 504)
USER_AGENT = get_env_var(
    "USER_AGENT",
    "pkg-sentinel/1.0 (malicious package scanner; +https://pypi.org/project/pkg-sentinel/)",
)

# --- CLI exit codes (sysexits) ---
EXIT_CODES = {
    "ok": 0,
    "partial": 2,
    "usage": 64,
    "no_input": 66,
    "io": 74,
}

# --- Streamlit Settings ---
PAGE_CONFIG = {
    "page_title": "Package Sentinel",
    "page_icon": "🛡️",
    "layout": "wide"
}

# --- Logging ---
LOG_LEVEL = get_env_var("LOG_LEVEL", "INFO").upper()
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level=None):
    """Install a single stderr handler on the root logger."""
    resolved = level if level is not None else LOG_LEVEL
    if isinstance(resolved, str):
        resolved = logging.getLevelName(resolved.upper())
        if not isinstance(resolved, int):
            resolved = logging.INFO

    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, "_pkg_sentinel", False):
            root.removeHandler(handler)

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    handler._pkg_sentinel = True
    root.addHandler(handler)
    root.setLevel(resolved)
