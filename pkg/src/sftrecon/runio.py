"""Atomic file I/O for run artifacts.

Every artifact is written to a temp file in the destination directory and
renamed into place, so a crash never leaves a half-written file behind.
Writers return the sha256 of the exact bytes written; the pipeline stores
those digests in its manifest and verifies them on resume.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Iterator

from .errors import SftReconError


class ArtifactError(SftReconError):
    """An artifact file is missing or malformed."""


class LockError(SftReconError):
    """The run directory is already locked by a live process."""


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _atomic_write(path: Path, data: bytes) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    descriptor, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(descriptor, "wb") as handle:
            handle.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return hashlib.sha256(data).hexdigest()


def write_jsonl(path: Path, records: Iterable[dict]) -> str:
    """Write one JSON object per line; returns the file's sha256."""
    lines = [json.dumps(record, ensure_ascii=False) for record in records]
    data = ("\n".join(lines) + "\n").encode("utf-8") if lines else b""
    return _atomic_write(path, data)


def iter_jsonl(path: Path) -> Iterator[tuple[int, dict]]:
    """Yield (1-based line number, parsed object); blank lines are skipped."""
    try:
        handle = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise ArtifactError(f"cannot read {path}: {exc}") from exc
    with handle:
        for number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ArtifactError(f"{path}:{number}: invalid JSON: {exc.msg}") from exc
            if not isinstance(record, dict):
                raise ArtifactError(f"{path}:{number}: expected a JSON object")
            yield number, record


def read_jsonl(path: Path) -> list[dict]:
    return [record for _, record in iter_jsonl(path)]


def write_json(path: Path, obj) -> str:
    data = (json.dumps(obj, ensure_ascii=False, indent=2, sort_keys=True) + "\n").encode("utf-8")
    return _atomic_write(path, data)


def read_json(path: Path):
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return json.load(handle)
    except OSError as exc:
        raise ArtifactError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"{path}: invalid JSON: {exc.msg}") from exc


def write_text(path: Path, text: str) -> str:
    return _atomic_write(path, text.encode("utf-8"))


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


class RunLock:
    """Exclusive per-run-directory lock file holding the owner pid.

    A lock whose owning process is gone is considered stale and is claimed.
    """

    def __init__(self, run_dir: Path):
        self.path = Path(run_dir) / ".lock"
        self._held = False

    def acquire(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        for _ in range(2):
            try:
                descriptor = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                try:
                    pid = int(self.path.read_text().strip() or "0")
                except (OSError, ValueError):
                    pid = 0
                if pid and _pid_alive(pid):
                    raise LockError(
                        f"run directory is locked by live process {pid} ({self.path})"
                    ) from None
                try:
                    self.path.unlink()
                except FileNotFoundError:
                    pass
                continue
            with os.fdopen(descriptor, "w") as handle:
                handle.write(str(os.getpid()))
            self._held = True
            return
        raise LockError(f"could not claim stale lock {self.path}")

    def release(self) -> None:
        if self._held:
            try:
                self.path.unlink()
            except FileNotFoundError:
                pass
            self._held = False

    def __enter__(self):
        self.acquire()
        return self

    def __exit__(self, *exc):
        self.release()
