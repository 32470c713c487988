"""Representation similarity: linear CKA and cosine similarity.

Feature matrices are plain (n, d) float arrays, one row per sample.
Everything is computed in float64.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .errors import SimilarityError
from .models import CkaReport
from .rng import KEY_SUBSAMPLE, keyed_rng

FeatureMatrix = np.ndarray

# centered Gram energy below this fraction of the raw Gram energy counts as zero
ZERO_GRAM_RTOL = 1e-20


def as_features(x: np.ndarray) -> FeatureMatrix:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise SimilarityError(f"feature matrix must be 2D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise SimilarityError("feature matrix has non-finite entries")
    return x


def gram(x: FeatureMatrix) -> np.ndarray:
    x = as_features(x)
    if x.shape[0] < 1:
        raise SimilarityError("gram needs at least one sample")
    return x @ x.T


def center_gram(k: np.ndarray) -> np.ndarray:
    """H K H with H = I - 11^T / n."""
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise SimilarityError(f"gram matrix must be square, got shape {k.shape}")
    n = k.shape[0]
    if n < 2:
        raise SimilarityError("centering needs n >= 2")
    h = np.eye(n) - np.full((n, n), 1.0 / n)
    return h @ k @ h


def cka(x: FeatureMatrix, y: FeatureMatrix) -> float:
    x = as_features(x)
    y = as_features(y)
    if x.shape[0] != y.shape[0]:
        raise SimilarityError(f"sample counts differ: {x.shape[0]} vs {y.shape[0]}")
    k = gram(x)
    l = gram(y)
    kd = center_gram(k)
    ld = center_gram(l)
    kk = np.sum(kd * kd)
    ll = np.sum(ld * ld)
    if kk <= ZERO_GRAM_RTOL * np.sum(k * k) or ll <= ZERO_GRAM_RTOL * np.sum(l * l):
        raise SimilarityError("zero-variance features: centered Gram is zero, similarity undefined")
    # Tr(Kd Ld) for symmetric matrices is the elementwise sum
    value = np.sum(kd * ld) / (np.sqrt(kk) * np.sqrt(ll))
    return float(np.clip(value, 0.0, 1.0))


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise SimilarityError(f"vector lengths differ: {u.size} vs {v.size}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise SimilarityError("cosine of a zero-norm vector is undefined")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def subsample_rows(x: FeatureMatrix, n: int, seed: int) -> FeatureMatrix:
    """Seeded draw of n rows without replacement, kept in original row order."""
    if n >= x.shape[0]:
        return x
    idx = np.sort(keyed_rng(seed, KEY_SUBSAMPLE, x.shape[0]).choice(x.shape[0], size=n, replace=False))
    return x[idx]


def domain_similarity(
    features_a: FeatureMatrix,
    features_b: FeatureMatrix,
    name_a: str = "a",
    name_b: str = "b",
    seed: int = 0,
    max_samples: Optional[int] = None,
    pooling: Optional[str] = None,
) -> CkaReport:
    a = as_features(features_a)
    b = as_features(features_b)
    n = min(a.shape[0], b.shape[0])
    if max_samples is not None:
        n = min(n, max_samples)
    a = subsample_rows(a, n, seed)
    b = subsample_rows(b, n, seed)
    return CkaReport(
        name_a=name_a,
        name_b=name_b,
        n=n,
        d_a=int(a.shape[1]),
        d_b=int(b.shape[1]),
        cka=cka(a, b),
        pooling=pooling,
        seed=seed,
    )
