"""Continuity disruptors for image tokens.

Spatial: shuffle patches (SP), shuffle pseudo-patch grids, warm-up random
grid shuffles. Frequency: shuffle patch amplitude (SPA) or phase (SPP),
whole-image amplitude swap, and the balanced disruption that re-samples each
patch's amplitude from a mixture of per-cluster Gaussians (one draw per
patch, or one per cluster shared by its members).

All randomness comes from the generator passed in; disrupt_image derives it
from (master_seed, epoch, image_index).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from . import spectral
from .errors import DisruptionError, GridError
from .imagecore import GridSpec, Image, PatchGrid, match_channels, patch_means, patchify, resize_bilinear, resize_to_grid, to_image, unpatchify
from .rng import keyed_rng
from .simlab import cosine

DEFAULT_GRIDS = ((1, 1), (2, 2), (4, 4), (7, 7), (8, 8), (14, 14))
PROPORTION_FLOOR = 1e-12
MAX_PROPORTION_DRAWS = 1000


class Method(str, Enum):
    SP = "SP"
    SPA = "SPA"
    SPP = "SPP"
    GRID = "GRID"
    WARMUP = "WARMUP"
    BALANCED = "BALANCED"
    PIPELINE = "PIPELINE"
    IMAGE_AMP = "IMAGE_AMP"


class DisruptionConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    method: Method = Method.PIPELINE
    sim_threshold: float = 0.3
    alpha: float = 1.0
    # balanced draws: one mixture sample per patch, or one per cluster shared by its members
    granularity: Literal["patch", "cluster"] = "patch"
    grid_choices: Tuple[Tuple[int, int], ...] = DEFAULT_GRIDS
    warmup_epochs: int = 10
    total_epochs: int = 50
    master_seed: int = 0
    # token grid of the backbone; images not divisible by it are resized to resize_to
    patch_size: int = 16
    resize_to: int = 256

    @field_validator("sim_threshold")
    @classmethod
    def _threshold_finite(cls, v: float) -> float:
        if not np.isfinite(v):
            raise ValueError("sim_threshold must be finite")
        return v

    @field_validator("alpha")
    @classmethod
    def _alpha_positive(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("alpha must be > 0")
        return v

    @field_validator("grid_choices")
    @classmethod
    def _grids(cls, v: Tuple[Tuple[int, int], ...]) -> Tuple[Tuple[int, int], ...]:
        if not v:
            raise ValueError("grid_choices must not be empty")
        for rows, cols in v:
            if rows < 1 or cols < 1:
                raise ValueError(f"grid sides must be positive, got {rows}x{cols}")
        return tuple(sorted(set(v)))

    @model_validator(mode="after")
    def _schedule(self) -> "DisruptionConfig":
        if self.warmup_epochs < 0 or self.total_epochs < 1:
            raise ValueError("epochs must be non-negative and total_epochs >= 1")
        if self.warmup_epochs > self.total_epochs:
            raise ValueError("warmup_epochs must not exceed total_epochs")
        if self.patch_size < 1 or self.resize_to < 1:
            raise ValueError("patch_size and resize_to must be positive")
        return self

    def grids(self) -> List[GridSpec]:
        return [GridSpec(r, c) for r, c in self.grid_choices]


@dataclass(frozen=True)
class ClusterAssignment:
    cluster_of: np.ndarray
    num_clusters: int

    def __post_init__(self) -> None:
        c = np.asarray(self.cluster_of, dtype=np.int64)
        if c.ndim != 1 or c.size == 0:
            raise DisruptionError("cluster_of must be a non-empty 1D array")
        if self.num_clusters < 1 or set(np.unique(c).tolist()) != set(range(self.num_clusters)):
            raise DisruptionError("cluster ids must be contiguous 0..N-1 with no empty cluster")
        object.__setattr__(self, "cluster_of", c)

    def members(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.cluster_of == i)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.cluster_of, minlength=self.num_clusters)


@dataclass(frozen=True)
class ClusterStats:
    mean: np.ndarray  # (N, ph, pw, C)
    var: np.ndarray  # (N, ph, pw, C), biased

    @property
    def num_clusters(self) -> int:
        return int(self.mean.shape[0])


@dataclass
class DisruptionTrace:
    stage: str
    grid: Optional[str] = None
    permutation: Optional[List[int]] = None
    num_clusters: Optional[int] = None
    resized: bool = False


# --- permutations ---

def draw_permutation(rng: np.random.Generator, m: int) -> np.ndarray:
    return rng.permutation(m)


def _check_perm(perm: np.ndarray, m: int) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape != (m,) or not np.array_equal(np.sort(perm), np.arange(m)):
        raise DisruptionError(f"not a permutation of {m} patches")
    return perm


def shuffle_patches(pg: PatchGrid, rng: np.random.Generator, perm: Optional[np.ndarray] = None) -> Tuple[PatchGrid, np.ndarray]:
    """Output patch k is input patch perm[k]."""
    m = pg.num_patches
    perm = draw_permutation(rng, m) if perm is None else _check_perm(perm, m)
    return pg.with_patches(pg.patches[perm]), perm


def shuffle_patch_amplitude(pg: PatchGrid, rng: np.random.Generator, perm: Optional[np.ndarray] = None) -> PatchGrid:
    """Patch k gets the amplitude of patch perm[k] and keeps its own phase."""
    m = pg.num_patches
    perm = draw_permutation(rng, m) if perm is None else _check_perm(perm, m)
    spec = spectral.patch_spectrum(pg)
    return spectral.recompose_patches(pg, spec.amplitude[perm], spec.phase)


def shuffle_patch_phase(pg: PatchGrid, rng: np.random.Generator, perm: Optional[np.ndarray] = None) -> PatchGrid:
    """Patch k keeps its amplitude and takes the phase of patch perm[k]."""
    m = pg.num_patches
    perm = draw_permutation(rng, m) if perm is None else _check_perm(perm, m)
    spec = spectral.patch_spectrum(pg)
    return spectral.recompose_patches(pg, spec.amplitude, spec.phase[perm])


# --- spatial ---

def _grid_shuffle(img: Image, grid: GridSpec, rng: np.random.Generator, resize_to: int) -> Tuple[Image, np.ndarray, bool]:
    sized = resize_to_grid(img, grid, resize_to)
    pg, perm = shuffle_patches(patchify(sized, grid), rng)
    return unpatchify(pg), perm, sized is not img


def grid_shuffle(img: Image, grid: GridSpec, rng: np.random.Generator, resize_to: int = 256) -> Image:
    return _grid_shuffle(img, grid, rng, resize_to)[0]


def _warmup(img: Image, cfg: DisruptionConfig, rng: np.random.Generator) -> Tuple[Image, GridSpec, np.ndarray, bool]:
    grids = cfg.grids()
    if not grids:
        raise DisruptionError("grid_choices is empty")
    grid = grids[int(rng.integers(len(grids)))]
    out, perm, resized = _grid_shuffle(img, grid, rng, cfg.resize_to)
    return out, grid, perm, resized


def warmup_disrupt(img: Image, cfg: DisruptionConfig, rng: np.random.Generator) -> Image:
    return _warmup(img, cfg, rng)[0]


# --- balanced frequency-domain disruption ---

def cluster_patches(pg: PatchGrid, sim_threshold: float) -> ClusterAssignment:
    """Greedy first-seed partition by cosine similarity of patch mean colors.

    Patches are scanned in index order. An unassigned patch seeds a cluster
    and absorbs every later unassigned patch whose cosine to the seed is
    >= sim_threshold. A zero-norm mean never absorbs and is never absorbed.
    """
    means = patch_means(pg)
    m = means.shape[0]
    norms = np.linalg.norm(means, axis=1)
    cluster_of = np.full(m, -1, dtype=np.int64)
    n = 0
    for i in range(m):
        if cluster_of[i] >= 0:
            continue
        cluster_of[i] = n
        if norms[i] > 0:
            for j in range(i + 1, m):
                if cluster_of[j] < 0 and norms[j] > 0 and cosine(means[i], means[j]) >= sim_threshold:
                    cluster_of[j] = n
        n += 1
    return ClusterAssignment(cluster_of, n)


def _amp_stats(amp: np.ndarray, ca: ClusterAssignment) -> ClusterStats:
    if amp.shape[0] != ca.cluster_of.size:
        raise DisruptionError(f"{amp.shape[0]} amplitudes for {ca.cluster_of.size} assignments")
    means = np.empty((ca.num_clusters,) + amp.shape[1:])
    vars_ = np.empty_like(means)
    for i in range(ca.num_clusters):
        members = amp[ca.members(i)]
        mu = members.mean(axis=0)
        means[i] = mu
        vars_[i] = ((members - mu) ** 2).mean(axis=0)
    return ClusterStats(means, vars_)


def cluster_amp_stats(pg: PatchGrid, ca: ClusterAssignment) -> ClusterStats:
    return _amp_stats(spectral.patch_spectrum(pg).amplitude, ca)


def draw_proportions(rng: np.random.Generator, n: int, alpha: float) -> np.ndarray:
    """p_i = |e_i| / sum |e_k| with e ~ Normal(0, alpha^2); redraw if all |e| are ~0."""
    for _ in range(MAX_PROPORTION_DRAWS):
        e = np.abs(rng.normal(0.0, alpha, size=n))
        if np.any(e >= PROPORTION_FLOOR):
            return e / e.sum()
    raise DisruptionError(f"proportion draws vanished {MAX_PROPORTION_DRAWS} times (alpha={alpha})")


def sample_mixture_amplitude(stats: ClusterStats, rng: np.random.Generator, alpha: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One patch's new amplitude: sum_i p_i * eps_i with eps_i ~ Normal(mu_i, var_i).

    Returns (amplitude, proportions, samples). The amplitude may have
    negative bins; balanced_disrupt clips them before recomposition.
    """
    eps = stats.mean + np.sqrt(stats.var) * rng.standard_normal(stats.mean.shape)
    p = draw_proportions(rng, stats.num_clusters, alpha)
    return np.tensordot(p, eps, axes=1), p, eps


def balanced_disrupt(pg: PatchGrid, cfg: DisruptionConfig, rng: np.random.Generator, ca: Optional[ClusterAssignment] = None) -> PatchGrid:
    spec = spectral.patch_spectrum(pg)
    amp = spec.amplitude
    if ca is None:
        ca = cluster_patches(pg, cfg.sim_threshold)
    stats = _amp_stats(amp, ca)
    new_amp = np.empty_like(amp)
    if cfg.granularity == "cluster":
        for i in range(ca.num_clusters):
            a, _p, _eps = sample_mixture_amplitude(stats, rng, cfg.alpha)
            new_amp[ca.members(i)] = np.maximum(a, 0.0)
    else:
        for j in range(pg.num_patches):
            a, _p, _eps = sample_mixture_amplitude(stats, rng, cfg.alpha)
            new_amp[j] = np.maximum(a, 0.0)
    return spectral.recompose_patches(pg, new_amp, spec.phase)


# --- whole-image amplitude swap ---

def swap_image_amplitude(img: Image, partner: Image) -> Image:
    """Keep img's phase, take partner's amplitude over the whole image."""
    partner = match_channels(resize_bilinear(partner, img.height, img.width), img.channels)
    own = spectral.dft2(img.pixels, axes=(0, 1))
    other = spectral.dft2(partner.pixels, axes=(0, 1))
    out = spectral.recompose(spectral.amplitude(other), spectral.phase(own), axes=(0, 1))
    return to_image(out)


# --- dispatch and schedule ---

def token_grid(img: Image, patch_size: int, resize_to: int) -> Tuple[Image, GridSpec]:
    """Resize if needed so the backbone's patch size tiles the image, and return its token grid."""
    if img.height % patch_size or img.width % patch_size:
        if resize_to % patch_size:
            raise GridError(f"patch size {patch_size} divides neither {img.height}x{img.width} nor {resize_to}")
        img = resize_bilinear(img, resize_to, resize_to)
    return img, GridSpec(img.height // patch_size, img.width // patch_size)


def scheduled_method(cfg: DisruptionConfig, epoch: int) -> Method:
    if not 0 <= epoch < cfg.total_epochs:
        raise DisruptionError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    return Method.WARMUP if epoch < cfg.warmup_epochs else Method.BALANCED


def disrupt_image(
    img: Image,
    cfg: DisruptionConfig,
    epoch: int,
    image_index: int,
    partner: Optional[Image] = None,
) -> Tuple[Image, DisruptionTrace]:
    if epoch < 0 or image_index < 0:
        raise DisruptionError("epoch and image_index must be non-negative")
    method = cfg.method
    if method == Method.PIPELINE:
        method = scheduled_method(cfg, epoch)
    rng = keyed_rng(cfg.master_seed, epoch, image_index)
    trace = DisruptionTrace(stage=method.value)

    if method == Method.WARMUP:
        out, grid, perm, resized = _warmup(img, cfg, rng)
        trace.grid, trace.permutation, trace.resized = str(grid), perm.tolist(), resized
        return out, trace

    if method == Method.GRID:
        grid = cfg.grids()[0]
        out, perm, resized = _grid_shuffle(img, grid, rng, cfg.resize_to)
        trace.grid, trace.permutation, trace.resized = str(grid), perm.tolist(), resized
        return out, trace

    if method == Method.IMAGE_AMP:
        if partner is None:
            raise DisruptionError("IMAGE_AMP needs a partner image")
        return swap_image_amplitude(img, partner), trace

    sized, grid = token_grid(img, cfg.patch_size, cfg.resize_to)
    trace.grid, trace.resized = str(grid), sized is not img
    pg = patchify(sized, grid)

    if method == Method.SP:
        pg, perm = shuffle_patches(pg, rng)
        trace.permutation = perm.tolist()
    elif method in (Method.SPA, Method.SPP):
        perm = draw_permutation(rng, pg.num_patches)
        shuffle = shuffle_patch_amplitude if method == Method.SPA else shuffle_patch_phase
        pg = shuffle(pg, rng, perm)
        trace.permutation = perm.tolist()
    elif method == Method.BALANCED:
        ca = cluster_patches(pg, cfg.sim_threshold)
        pg = balanced_disrupt(pg, cfg, rng, ca)
        trace.num_clusters = ca.num_clusters
    else:
        raise DisruptionError(f"unhandled method {method}")

    return unpatchify(pg), trace


def disrupt_pipeline(img: Image, cfg: DisruptionConfig, epoch: int, image_index: int) -> Image:
    """Two-step schedule: warm-up grid shuffles, then balanced amplitude disruption."""
    scheduled_method(cfg, epoch)
    out, _trace = disrupt_image(img, cfg.model_copy(update={"method": Method.PIPELINE}), epoch, image_index)
    return out
