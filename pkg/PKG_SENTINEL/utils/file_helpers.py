"""
File Management Utilities
===================================
Auxiliary functions for reading, writing, and hashing files.
"""

import hashlib
import json
import logging
import os
import tempfile

import pandas as pd

from config.settings import READ_CHUNK_BYTES

logger = logging.getLogger(__name__)


def ensure_dir(path):
    """Create a directory (and parents) if missing; return the path."""
    if path:
        os.makedirs(path, exist_ok=True)
    return path


def save_to_parquet(df, filepath):
    """
    Save a DataFrame in Parquet format.
    """
    if df is None or df.empty:
        return False

    try:
        ensure_dir(os.path.dirname(filepath))
        df.to_parquet(filepath, index=False)
        return True
    except Exception as e:
        logger.error("Cannot save %s: %s", filepath, e)
        return False


def load_from_parquet(filepath):
    """
    Load a DataFrame from a Parquet file.
    """
    if not os.path.exists(filepath):
        return None

    try:
        return pd.read_parquet(filepath)
    except Exception as e:
        logger.error("Cannot load %s: %s", filepath, e)
        return None


def sha256_file(filepath):
    digest = hashlib.sha256()
    with open(filepath, "rb") as handle:
        for chunk in iter(lambda: handle.read(READ_CHUNK_BYTES), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_text_atomic(filepath, text):
    """
    Replace a file's content in one step.

    The new content goes to a temporary file in the same directory which is
    then renamed over the target.
    """
    directory = os.path.dirname(os.path.abspath(filepath))
    ensure_dir(directory)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(text)
        os.replace(tmp_path, filepath)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def write_json(filepath, document):
    write_text_atomic(filepath, json.dumps(document, indent=2, sort_keys=True) + "\n")


def read_jsonl(filepath):
    """
    Read line-delimited JSON records.

    Returns (records, bad_line_count); blank lines are ignored.
    """
    records = []
    bad_lines = 0
    with open(filepath, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except ValueError:
                bad_lines += 1
    if bad_lines:
        logger.warning("Skipped %d unreadable lines in %s", bad_lines, filepath)
    return records, bad_lines


def append_jsonl(handle, record):
    handle.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
    handle.flush()
