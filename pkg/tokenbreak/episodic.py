"""k-way n-shot episodes and nearest-prototype evaluation."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Literal, Sequence, Tuple

import numpy as np

from .errors import EpisodeError, EpisodeShapeError
from .models import EvalReport
from .rng import KEY_EPISODE, keyed_rng

log = logging.getLogger(__name__)

Metric = Literal["euclidean", "cosine"]
METRICS = ("euclidean", "cosine")
METRIC_ALIASES = {"cosine-distance": "cosine"}
Z95 = 1.96


@dataclass(frozen=True)
class DatasetIndex:
    """Class name -> sample references (paths or feature-row ids)."""

    classes: Dict[str, Tuple[str, ...]]

    def __post_init__(self) -> None:
        seen = set()
        fixed = {}
        for name in sorted(self.classes):
            refs = tuple(self.classes[name])
            if not refs:
                raise EpisodeError(f"class {name!r} has no samples")
            for r in refs:
                if r in seen:
                    raise EpisodeError(f"duplicate sample reference {r!r}")
                seen.add(r)
            fixed[name] = refs
        if not fixed:
            raise EpisodeError("dataset has no classes")
        object.__setattr__(self, "classes", fixed)

    @property
    def class_names(self) -> List[str]:
        return list(self.classes)

    @classmethod
    def from_labels(cls, labels: Sequence[int]) -> "DatasetIndex":
        """Index over feature rows: refs are row numbers as strings, classes are label values."""
        groups: Dict[str, List[str]] = {}
        for row, label in enumerate(labels):
            groups.setdefault(f"{int(label):08d}", []).append(str(row))
        return cls({k: tuple(v) for k, v in groups.items()})


@dataclass(frozen=True)
class Episode:
    way: int
    shot: int
    query: int
    classes: Tuple[str, ...]
    support: Tuple[Tuple[str, int], ...]
    query_set: Tuple[Tuple[str, int], ...]


def check_shape(k: int, n: int, q: int) -> None:
    if k < 1:
        raise EpisodeShapeError(f"way k must be >= 1, got {k}")
    if n < 1:
        raise EpisodeShapeError(f"shot n must be >= 1, got {n}")
    if q < 1:
        raise EpisodeShapeError(f"query q must be >= 1, got {q}")


def sample_episode(ds: DatasetIndex, k: int, n: int, q: int, rng: np.random.Generator) -> Episode:
    check_shape(k, n, q)
    names = ds.class_names
    if len(names) < k:
        raise EpisodeError(f"way k={k} needs at least {k} classes, dataset has {len(names)}")
    short = [c for c in names if len(ds.classes[c]) < n + q]
    if short:
        raise EpisodeError(f"shot+query={n + q} needs that many samples per class; too few in {short[:5]}")

    picked = rng.choice(len(names), size=k, replace=False)
    classes = tuple(names[i] for i in picked)
    support: List[Tuple[str, int]] = []
    query: List[Tuple[str, int]] = []
    for label, name in enumerate(classes):
        refs = ds.classes[name]
        order = rng.choice(len(refs), size=n + q, replace=False)
        support.extend((refs[i], label) for i in order[:n])
        query.extend((refs[i], label) for i in order[n:])
    return Episode(k, n, q, classes, tuple(support), tuple(query))


def prototypes(support_features: np.ndarray, labels: Sequence[int], num_classes: int | None = None) -> np.ndarray:
    x = np.asarray(support_features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise EpisodeError(f"{y.size} labels for feature matrix of shape {x.shape}")
    k = int(num_classes) if num_classes is not None else int(y.max()) + 1
    protos = np.empty((k, x.shape[1]))
    for c in range(k):
        rows = x[y == c]
        if rows.shape[0] == 0:
            raise EpisodeError(f"class {c} has no support rows")
        protos[c] = rows.mean(axis=0)
    return protos


def resolve_metric(metric: str) -> str:
    metric = METRIC_ALIASES.get(metric, metric)
    if metric not in METRICS:
        raise EpisodeShapeError(f"unknown metric {metric!r}, expected one of {METRICS + tuple(METRIC_ALIASES)}")
    return metric


def _distances(queries: np.ndarray, protos: np.ndarray, metric: str) -> np.ndarray:
    metric = resolve_metric(metric)
    if metric == "euclidean":
        diff = queries[:, None, :] - protos[None, :, :]
        return np.einsum("qkd,qkd->qk", diff, diff)
    qn = np.linalg.norm(queries, axis=1, keepdims=True)
    pn = np.linalg.norm(protos, axis=1, keepdims=True)
    sim = (queries @ protos.T) / np.maximum(qn * pn.T, np.finfo(np.float64).tiny)
    return 1.0 - sim


def classify_batch(queries: np.ndarray, protos: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    """Nearest prototype per query row; ties go to the lowest class index."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    p = np.asarray(protos, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 1:
        raise EpisodeError("need at least one prototype")
    return np.argmin(_distances(q, p, metric), axis=1)


def classify(query_feature: np.ndarray, protos: np.ndarray, metric: str = "euclidean") -> int:
    return int(classify_batch(query_feature, protos, metric)[0])


def _run_episode(
    extract: Callable[[str], np.ndarray],
    ds: DatasetIndex,
    k: int,
    n: int,
    q: int,
    seed: int,
    index: int,
    metric: str,
) -> float:
    ep = sample_episode(ds, k, n, q, keyed_rng(seed, KEY_EPISODE, index))
    sx = np.stack([extract(ref) for ref, _ in ep.support])
    sy = np.array([label for _, label in ep.support])
    qx = np.stack([extract(ref) for ref, _ in ep.query_set])
    qy = np.array([label for _, label in ep.query_set])
    pred = classify_batch(qx, prototypes(sx, sy, k), metric)
    return float(np.mean(pred == qy))


def evaluate(
    extract: Callable[[str], np.ndarray],
    ds: DatasetIndex,
    k: int,
    n: int,
    q: int,
    num_episodes: int,
    seed: int,
    metric: str = "euclidean",
    threads: int = 1,
) -> EvalReport:
    """Mean query accuracy over independent episodes with a 95% normal-approximation CI.

    Episode i draws from the stream keyed by (seed, i), so the report does not
    depend on thread count or completion order.
    """
    check_shape(k, n, q)
    if num_episodes < 1:
        raise EpisodeShapeError(f"episodes must be >= 1, got {num_episodes}")
    metric = resolve_metric(metric)

    def run(i: int) -> float:
        return _run_episode(extract, ds, k, n, q, seed, i, metric)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            accs = list(pool.map(run, range(num_episodes)))
    else:
        accs = [run(i) for i in range(num_episodes)]

    mean = math.fsum(accs) / num_episodes
    std = math.sqrt(math.fsum((a - mean) ** 2 for a in accs) / num_episodes)
    report = EvalReport(
        episodes=num_episodes,
        accuracy=min(max(mean, 0.0), 1.0),
        ci95=Z95 * std / math.sqrt(num_episodes),
        std=std,
        way=k,
        shot=n,
        query=q,
        metric=metric,
        seed=seed,
    )
    log.info("%d-way %d-shot: %.4f +- %.4f over %d episodes", k, n, report.accuracy, report.ci95, num_episodes)
    return report
