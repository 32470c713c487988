from __future__ import annotations

import logging
import os
from typing import Dict, Iterable, List, Tuple

from .episodic import DatasetIndex
from .errors import DataError
from .imagecore import SUPPORTED_EXTS
from .utils import rel_posix

log = logging.getLogger(__name__)


def _walk_files(root_dir: str) -> Iterable[str]:
    for r, dirs, files in os.walk(root_dir):
        dirs.sort()
        for fn in sorted(files):
            if fn.startswith("."):
                continue
            yield os.path.join(r, fn)


def is_supported(path: str) -> bool:
    return os.path.splitext(path)[1].lower() in SUPPORTED_EXTS


def scan_files(root_dir: str) -> List[str]:
    """Every non-hidden file below root_dir, sorted by relative posix path."""
    if not os.path.isdir(root_dir):
        raise DataError(f"not a directory: {root_dir}")
    return sorted(_walk_files(root_dir), key=lambda p: rel_posix(p, root_dir))


def scan_images(root_dir: str) -> List[str]:
    paths = [p for p in scan_files(root_dir) if is_supported(p)]
    log.debug("found %d images below %s", len(paths), root_dir)
    return paths


def class_of(path: str, root_dir: str) -> str:
    rel = rel_posix(path, root_dir)
    return rel.split("/", 1)[0] if "/" in rel else ""


def scan_labelled(root_dir: str) -> Tuple[List[str], List[int], List[str]]:
    """Images in sorted path order, their class ids, and the sorted class names.

    The class of an image is its first directory level below root_dir;
    images directly in root_dir share the class "".
    """
    paths = scan_images(root_dir)
    names = sorted({class_of(p, root_dir) for p in paths})
    ids = {name: i for i, name in enumerate(names)}
    return paths, [ids[class_of(p, root_dir)] for p in paths], names


def scan_dataset(root_dir: str) -> DatasetIndex:
    """<root>/<class_name>/<image files> as a DatasetIndex keyed by class directory."""
    groups: Dict[str, List[str]] = {}
    for path in scan_images(root_dir):
        name = class_of(path, root_dir)
        if not name:
            log.warning("ignoring %s: not inside a class directory", path)
            continue
        groups.setdefault(name, []).append(path)
    if not groups:
        raise DataError(f"no class directories with images below {root_dir}")
    return DatasetIndex({k: tuple(v) for k, v in groups.items()})
