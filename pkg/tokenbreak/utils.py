from __future__ import annotations

import os
import tempfile

from .errors import OutputError


def ensure_parent_dir(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def atomic_write_bytes(path: str, data: bytes) -> str:
    try:
        ensure_parent_dir(path)
        fd, tmp = tempfile.mkstemp(prefix=".tmp_", dir=os.path.dirname(os.path.abspath(path)))
    except OSError as e:
        raise OutputError(f"cannot write {path}: {e}") from e
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException as e:
        if os.path.exists(tmp):
            os.unlink(tmp)
        if isinstance(e, OSError):
            raise OutputError(f"cannot write {path}: {e}") from e
        raise
    return path


def atomic_write_text(path: str, text: str) -> str:
    return atomic_write_bytes(path, text.encode("utf-8"))


def mirror_path(src: str, in_root: str, out_root: str) -> str:
    """Map a file below in_root to the same relative location below out_root."""
    rel = os.path.relpath(os.path.abspath(src), os.path.abspath(in_root))
    if rel.startswith(".."):
        rel = os.path.basename(src)
    return os.path.join(out_root, rel)


def rel_posix(path: str, root: str) -> str:
    return os.path.relpath(os.path.abspath(path), os.path.abspath(root)).replace(os.sep, "/")
