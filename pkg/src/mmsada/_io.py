"""Atomic file writes."""
from __future__ import annotations

import os
import tempfile


def atomic_write_text(path, text: str) -> None:
    """Write to a temporary sibling, then rename over ``path``."""
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
