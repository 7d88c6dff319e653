"""Atomic file output for run artifacts (temp file in the target directory + rename)."""

import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any

import pandas as pd

from universaljsonencoder import UniversalJSONEncoder

logger = logging.getLogger(__name__)


def write_text_atomic(path: str | os.PathLike, text: str) -> Path:
    """Write `text` as UTF-8 to `path` so readers never observe a partial file."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(
        prefix=f".{target.name}.", suffix=".tmp", dir=target.parent
    )
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(tmp_name, target)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    logger.debug(f"Wrote {target} ({len(text)} chars)")
    return target


def dumps_json(payload: Any) -> str:
    """Deterministic JSON text: sorted keys, two-space indent, trailing newline."""
    return (
        json.dumps(payload, cls=UniversalJSONEncoder, indent=2, sort_keys=True) + "\n"
    )


def write_json(path: str | os.PathLike, payload: Any) -> Path:
    return write_text_atomic(path, dumps_json(payload))


def write_csv(path: str | os.PathLike, frame: pd.DataFrame) -> Path:
    return write_text_atomic(path, frame.to_csv(index=False, lineterminator="\n"))
