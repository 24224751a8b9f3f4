"""
Utility Functions Module
Helper functions for file IO, digests, seeding and report formatting
"""

import hashlib
import json
import os
import tempfile
from decimal import Decimal, ROUND_HALF_EVEN
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Tuple

import pandas as pd
from loguru import logger

from .errors import InputFormatError


def atomic_write_text(path, text: str) -> Path:
    """
    Write text to a file by writing a temporary sibling and renaming it.

    Args:
        path: Destination path
        text: File contents

    Returns:
        The destination path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, 'w', encoding='utf-8', newline='\n') as f:
            f.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def dumps_record(record: Dict) -> str:
    """Serialize one record as a single JSON line (floats keep full repr precision)."""
    return json.dumps(record, ensure_ascii=False, allow_nan=False, separators=(', ', ': '))


def save_to_json(data: Dict or List, filename) -> Path:
    """
    Save data to a JSON file atomically with sorted keys.

    Args:
        data: Data to save
        filename: Output filename

    Returns:
        The written path
    """
    text = json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False, default=str)
    return atomic_write_text(filename, text + '\n')


def load_from_json(filename) -> Dict or List:
    """
    Load data from a JSON file.

    Args:
        filename: Input filename

    Returns:
        Loaded data
    """
    try:
        with open(filename, 'r', encoding='utf-8') as f:
            return json.load(f)
    except UnicodeDecodeError:
        raise InputFormatError(f"{filename}: not valid UTF-8")
    except json.JSONDecodeError as e:
        raise InputFormatError(f"{filename}: invalid JSON ({e})")


def write_jsonl(records: Iterable[Dict], filename) -> Path:
    """Write records as line-delimited JSON, atomically."""
    lines = [dumps_record(record) for record in records]
    return atomic_write_text(filename, ''.join(line + '\n' for line in lines))


def iter_jsonl(filename) -> Iterator[Tuple[int, Dict]]:
    """
    Iterate over a line-delimited JSON file.

    Yields:
        (line_number, record) pairs, skipping blank lines

    Raises:
        InputFormatError: naming the first malformed line
    """
    with open(filename, 'rb') as f:
        for line_number, raw in enumerate(f, 1):
            try:
                line = raw.decode('utf-8').strip()
            except UnicodeDecodeError:
                raise InputFormatError(f"{filename}: line {line_number}: not valid UTF-8")
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise InputFormatError(f"{filename}: line {line_number}: malformed record ({e.msg})")
            if not isinstance(record, dict):
                raise InputFormatError(f"{filename}: line {line_number}: expected a JSON object")
            yield line_number, record


def append_jsonl(record: Dict, handle) -> None:
    """Append one record to an open file handle and flush it to disk."""
    handle.write(dumps_record(record) + '\n')
    handle.flush()
    os.fsync(handle.fileno())


def write_csv(frame: pd.DataFrame, filename) -> Path:
    """Write a DataFrame as CSV with a fixed line terminator, atomically."""
    text = frame.to_csv(index=False, lineterminator='\n')
    path = atomic_write_text(filename, text)
    logger.debug(f"Wrote {len(frame)} rows to {path}")
    return path


def file_digest(filename) -> str:
    """SHA-256 hex digest of a file's bytes."""
    digest = hashlib.sha256()
    with open(filename, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 16), b''):
            digest.update(chunk)
    return digest.hexdigest()


def derive_seed(*parts) -> int:
    """
    Mix seed components into one 63-bit integer seed.

    The mix is a SHA-256 over the parts' string forms joined by a unit separator,
    so it is stable across processes and Python versions.
    """
    material = '\x1f'.join(str(part) for part in parts)
    return int.from_bytes(hashlib.sha256(material.encode('utf-8')).digest()[:8], 'big') >> 1


def format_percent(numerator: int, denominator: int) -> str:
    """
    Format a ratio as a percentage with two decimals, rounding half to even.

    Args:
        numerator: Count of flagged items
        denominator: Count of items

    Returns:
        A string such as '72.42'
    """
    if denominator == 0:
        return '0.00'
    value = Decimal(numerator) * 100 / Decimal(denominator)
    return str(value.quantize(Decimal('0.01'), rounding=ROUND_HALF_EVEN))


def truncate_text(text: str, max_length: int) -> str:
    """
    Truncate text to at most max_length characters (Unicode scalar values).

    Args:
        text: Text to truncate
        max_length: Maximum number of characters

    Returns:
        Truncated text
    """
    if not text or len(text) <= max_length:
        return text or ''
    return text[:max_length]


def format_rate_table(rows: List[Dict]) -> str:
    """
    Format a hallucination-rate table.

    Args:
        rows: Dictionaries with model, total_tokens, hallucinated_tokens, rate keys

    Returns:
        Formatted table string
    """
    header = f"{'Model':<28}{'Total Tokens':>14}{'Scored':>10}{'Hallucinated':>15}{'% Hallucinated':>17}"
    report = ["=" * len(header), header, "-" * len(header)]
    for row in rows:
        report.append(
            f"{row['model']:<28}{row['total_tokens']:>14}{row['scored_tokens']:>10}"
            f"{row['hallucinated_tokens']:>15}{row['rate'] + '%':>17}"
        )
    report.append("=" * len(header))
    return '\n'.join(report)
