from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, TypeVar

import numpy as np

from .disrupt import DisruptionConfig, Method, disrupt_image
from .errors import TokenBreakError
from .imagecore import load_image, save_image
from .indexer import is_supported, scan_files
from .models import DisruptionManifest, DisruptionRecord
from .rng import KEY_PARTNER, RNG_SCHEME, keyed_rng
from .utils import mirror_path, rel_posix
from .version import __version__
from .vitmini import ViTConfig, ViTWeights, extract_feature

log = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def parallel_map(fn: Callable[[T], R], items: Sequence[T], threads: int) -> List[R]:
    """Order-preserving map; results do not depend on the thread count."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class ImageJob:
    path: str
    index: int  # position among the supported images; keys the random stream
    partner: Optional[str] = None


def partner_index(cfg: DisruptionConfig, epoch: int, index: int, count: int) -> int:
    """Another image of the set, drawn from the keyed stream; itself when alone."""
    if count <= 1:
        return index
    j = int(keyed_rng(cfg.master_seed, KEY_PARTNER, epoch, index).integers(count - 1))
    return j + 1 if j >= index else j


def process_image(job: ImageJob, in_root: str, out_root: str, cfg: DisruptionConfig, epoch: int) -> DisruptionRecord:
    rel = rel_posix(job.path, in_root)
    record = DisruptionRecord(path=rel, index=job.index, method=cfg.method.value)

    if not is_supported(job.path):
        record.status = "skipped"
        record.index = -1
        record.message = f"Unsupported extension: {os.path.splitext(job.path)[1].lower()}"
        return record

    try:
        img = load_image(job.path)
        partner = load_image(job.partner) if job.partner else None
        out, trace = disrupt_image(img, cfg, epoch, job.index, partner=partner)
        dest = mirror_path(job.path, in_root, out_root)
        save_image(out, dest)

        record.status = "ok"
        record.output = rel_posix(dest, out_root)
        record.stage = trace.stage
        record.grid = trace.grid
        record.permutation = trace.permutation
        record.num_clusters = trace.num_clusters
        record.resized = trace.resized
        if job.partner:
            record.partner = rel_posix(job.partner, in_root)
        return record

    except (TokenBreakError, OSError) as e:
        log.warning("failed %s: %s", rel, e)
        record.status = "failed"
        record.message = str(e)
        return record


def run_disruption(in_root: str, out_root: str, cfg: DisruptionConfig, epoch: int, threads: int = 1) -> DisruptionManifest:
    files = scan_files(in_root)
    images = [p for p in files if is_supported(p)]
    position = {p: i for i, p in enumerate(images)}

    jobs = []
    for path in files:
        idx = position.get(path, -1)
        partner = None
        if idx >= 0 and cfg.method == Method.IMAGE_AMP:
            partner = images[partner_index(cfg, epoch, idx, len(images))]
        jobs.append(ImageJob(path, idx, partner))

    records = parallel_map(lambda j: process_image(j, in_root, out_root, cfg, epoch), jobs, threads)
    ok = sum(r.status == "ok" for r in records)
    log.info("disrupted %d/%d files with %s (epoch %d)", ok, len(records), cfg.method.value, epoch)

    return DisruptionManifest(
        version=__version__,
        rng=RNG_SCHEME,
        method=cfg.method.value,
        seed=cfg.master_seed,
        epoch=epoch,
        sim_threshold=cfg.sim_threshold,
        alpha=cfg.alpha,
        granularity=cfg.granularity,
        grid_choices=[f"{r}x{c}" for r, c in cfg.grid_choices],
        warmup_epochs=cfg.warmup_epochs,
        total_epochs=cfg.total_epochs,
        records=records,
    )


def extract_features(paths: Sequence[str], w: ViTWeights, cfg: ViTConfig, threads: int = 1) -> np.ndarray:
    def one(path: str) -> np.ndarray:
        return extract_feature(load_image(path), w, cfg)

    rows = parallel_map(one, list(paths), threads)
    if not rows:
        return np.zeros((0, cfg.embed_dim))
    log.info("extracted %d x %d features", len(rows), cfg.embed_dim)
    return np.stack(rows)
