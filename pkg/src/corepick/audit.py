"""Process-wide record of file paths touched by corepick I/O helpers.

Every reader/writer in this package reports here, so a run manifest can
prove which files a command did (and did not) open.
"""
from __future__ import annotations

import threading

_lock = threading.Lock()
_reads: list[str] = []
_writes: list[str] = []


def reset() -> None:
    with _lock:
        _reads.clear()
        _writes.clear()


def record_read(path) -> None:
    with _lock:
        _reads.append(str(path))


def record_write(path) -> None:
    with _lock:
        _writes.append(str(path))


def snapshot() -> dict:
    """Copy of the audit so far: {"files_read": [...], "files_written": [...]}."""
    with _lock:
        return {"files_read": list(_reads), "files_written": list(_writes)}
