"""
Gaussian-weighted Pearson distance between full channel-windows, the per-channel
neighbor cache and kNN neighborhood scores.
"""

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from logging import getLogger
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from TsfLab.errors import WindowError
from TsfLab.series_core import BoolArray, FloatArray, IntArray

logger = getLogger(__name__)

THREADS_VARIABLE = "TSFLAB_THREADS"
DEFAULT_SIGMA = 2.0

# weighted variance below this fraction of the weighted mean square is treated as zero
_DEGENERATE_RTOL = 1e-20


def thread_count() -> int:
    """Worker threads for cache construction, read from TSFLAB_THREADS (default 1)."""
    raw = os.environ.get(THREADS_VARIABLE, "1")
    try:
        threads = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_VARIABLE} must be a positive integer, got '{raw}'") from None
    if threads < 1:
        raise ValueError(f"{THREADS_VARIABLE} must be a positive integer, got {threads}")
    return threads


@dataclass(frozen=True)
class GaussianWeights:
    """Weights over the L_in + L_out steps of a full window, peaking at the first future step."""

    omega: FloatArray
    sigma: float
    l_in: int

    def __len__(self) -> int:
        return int(self.omega.shape[0])


def gaussian_weights(l_in: int, l_out: int, sigma: float = DEFAULT_SIGMA) -> GaussianWeights:
    """omega_tau = exp(-(tau - l_in)^2 / (2 sigma^2)); an infinite sigma gives uniform weights."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if l_in < 1 or l_out < 1:
        raise WindowError(f"l_in and l_out must be >= 1, got {l_in} and {l_out}")
    tau = np.arange(l_in + l_out, dtype=np.float64)
    if np.isinf(sigma):
        omega = np.ones_like(tau)
    else:
        omega = np.exp(-((tau - l_in) ** 2) / (2.0 * sigma**2))
    omega.setflags(write=False)
    return GaussianWeights(omega=omega, sigma=float(sigma), l_in=l_in)


def _standardize(windows: FloatArray, weights: GaussianWeights) -> Tuple[FloatArray, BoolArray]:
    """
    Rows scaled so that the dot product of two rows is their weighted Pearson r.

    Rows with (numerically) zero weighted variance come back as zeros and are flagged.
    """
    if windows.shape[-1] != len(weights):
        raise WindowError(
            f"windows have length {windows.shape[-1]}, weights have length {len(weights)}"
        )
    normalized_omega = weights.omega / weights.omega.sum()
    means = windows @ normalized_omega
    centered = (windows - means[..., np.newaxis]) * np.sqrt(normalized_omega)
    variances = np.sum(centered**2, axis=-1)
    mean_squares = (windows**2) @ normalized_omega
    degenerate = variances <= _DEGENERATE_RTOL * mean_squares
    scale = np.where(degenerate, 1.0, np.sqrt(np.where(degenerate, 1.0, variances)))
    standardized = np.where(degenerate[..., np.newaxis], 0.0, centered / scale[..., np.newaxis])
    return standardized, degenerate


def is_degenerate(window: FloatArray, weights: GaussianWeights) -> bool:
    return bool(_standardize(np.atleast_2d(np.asarray(window, dtype=np.float64)), weights)[1][0])


def weighted_pearson(x_i: FloatArray, x_j: FloatArray, weights: GaussianWeights) -> float:
    """
    Gaussian-weighted Pearson correlation of two full windows.

    A window with zero weighted variance has no correlation; the pair is given
    r = -1 (maximal distance) and logged.
    """
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    if x_i.shape != x_j.shape:
        raise WindowError(f"window shapes differ: {x_i.shape} and {x_j.shape}")
    standardized, degenerate = _standardize(np.stack([x_i, x_j]), weights)
    if np.any(degenerate):
        logger.debug("constant window in weighted_pearson; using r = -1")
        return -1.0
    return float(np.clip(standardized[0] @ standardized[1], -1.0, 1.0))


def neighbor_distance(x_i: FloatArray, x_j: FloatArray, weights: GaussianWeights) -> float:
    """d = 1 - r, in [0, 2]."""
    return 1.0 - weighted_pearson(x_i, x_j, weights)


def pairwise_distances(windows: FloatArray, weights: GaussianWeights) -> Tuple[FloatArray, BoolArray]:
    """All-pairs distance matrix (N x N) of one channel's full windows and the degenerate flags."""
    standardized, degenerate = _standardize(np.asarray(windows, dtype=np.float64), weights)
    correlation = standardized @ standardized.T
    correlation = 0.5 * (correlation + correlation.T)
    correlation[degenerate, :] = -1.0
    correlation[:, degenerate] = -1.0
    return np.clip(1.0 - correlation, 0.0, 2.0), degenerate


@dataclass(frozen=True)
class NeighborCache:
    """Per channel and window, the k_max nearest other windows sorted by distance (ties by index)."""

    k_max: int
    sigma: float
    indices: IntArray  # C x N x k_max
    distances: FloatArray  # C x N x k_max
    degenerate: BoolArray  # C x N

    @property
    def n_channels(self) -> int:
        return int(self.indices.shape[0])

    @property
    def n_windows(self) -> int:
        return int(self.indices.shape[1])

    def truncated(self, k_max: int) -> "NeighborCache":
        """The same cache keeping only the k_max nearest neighbors of every window."""
        if not 1 <= k_max <= self.k_max:
            raise ValueError(f"k_max must be in [1, {self.k_max}], got {k_max}")
        return replace(
            self,
            k_max=k_max,
            indices=self.indices[:, :, :k_max].copy(),
            distances=self.distances[:, :, :k_max].copy(),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "k_max": self.k_max,
            "sigma": self.sigma,
            "channels": [
                {
                    "channel": channel,
                    "degenerate_windows": np.flatnonzero(self.degenerate[channel]).tolist(),
                    "neighbors": self.indices[channel].tolist(),
                    "distances": self.distances[channel].tolist(),
                }
                for channel in range(self.n_channels)
            ],
        }

    def dump(
        self, path: Union[str, Path], provenance: Optional[Dict[str, Any]] = None
    ) -> None:
        Path(path).write_text(
            json.dumps({**self.to_dict(), **(provenance or {})}, indent=2, sort_keys=True),
            encoding="utf-8",
        )


def _channel_neighbors(
    windows: FloatArray, weights: GaussianWeights, k_max: int
) -> Tuple[IntArray, FloatArray, BoolArray]:
    distances, degenerate = pairwise_distances(windows, weights)
    np.fill_diagonal(distances, np.inf)
    order = np.argsort(distances, axis=1, kind="stable")[:, :k_max]
    nearest = np.take_along_axis(distances, order, axis=1)
    if np.any(degenerate):
        logger.warning(
            f"{int(degenerate.sum())} constant windows get the maximal neighbor distance"
        )
    return order.astype(np.int64), nearest, degenerate


def build_cache(
    channel_windows: Sequence[FloatArray],
    l_in: int,
    k_max: int,
    sigma: float = DEFAULT_SIGMA,
    threads: Optional[int] = None,
) -> NeighborCache:
    """
    Exhaustive neighbor search per channel, keeping the k_max nearest windows.

    channel_windows holds one N x (L_in + L_out) array per channel. Channels are
    processed on up to ``threads`` workers and merged in channel order.
    """
    if k_max < 1:
        raise ValueError(f"k_max must be >= 1, got {k_max}")
    if not channel_windows:
        raise WindowError("no channels to build a neighbor cache for")
    n_windows, length = channel_windows[0].shape
    if n_windows < k_max + 1:
        raise WindowError(
            f"{n_windows} windows per channel; at least {k_max + 1} are needed for "
            f"{k_max} neighbors"
        )
    weights = gaussian_weights(l_in, length - l_in, sigma)
    threads = threads or thread_count()
    with ThreadPoolExecutor(max_workers=min(threads, len(channel_windows))) as executor:
        results = list(
            executor.map(
                lambda windows: _channel_neighbors(windows, weights, k_max), channel_windows
            )
        )
    logger.info(
        f"neighbor cache built: {len(results)} channels, {n_windows} windows, k_max {k_max}"
    )
    return NeighborCache(
        k_max=k_max,
        sigma=float(sigma),
        indices=np.stack([result[0] for result in results]),
        distances=np.stack([result[1] for result in results]),
        degenerate=np.stack([result[2] for result in results]),
    )


def neighborhood_scores(
    cache: NeighborCache, channel: int, pool_mask: BoolArray, k: int
) -> FloatArray:
    """
    Score every window of a channel by its mean distance to its k nearest pool members.

    Only cached neighbors are considered: when fewer than k of them are in the pool
    the mean runs over those that are, and when none are it falls back to the
    window's k nearest cached neighbors regardless of the pool.
    """
    if not 1 <= k <= cache.k_max:
        raise ValueError(f"k must be in [1, {cache.k_max}], got {k}")
    pool_mask = np.asarray(pool_mask, dtype=bool)
    if pool_mask.shape != (cache.n_windows,):
        raise WindowError(
            f"pool mask has shape {pool_mask.shape}, expected ({cache.n_windows},)"
        )
    if not np.any(pool_mask):
        raise ValueError("neighbor pool is empty")
    distances = cache.distances[channel]
    in_pool = pool_mask[cache.indices[channel]]
    selected = in_pool & (np.cumsum(in_pool, axis=1) <= k)
    counts = selected.sum(axis=1)
    in_pool_mean = np.where(selected, distances, 0.0).sum(axis=1) / np.maximum(counts, 1)
    fallback = distances[:, :k].mean(axis=1)
    short = counts < k
    if np.any(short):
        logger.debug(
            f"channel {channel}: {int(short.sum())} windows have fewer than {k} cached "
            f"neighbors in the pool"
        )
    return np.where(counts > 0, in_pool_mean, fallback)


def neighborhood_score(
    window: int, neighbor_pool: Iterable[int], k: int, cache: NeighborCache, channel: int
) -> float:
    """Score of a single window against a pool given as window indices."""
    pool_mask = np.zeros(cache.n_windows, dtype=bool)
    pool_mask[list(neighbor_pool)] = True
    return float(neighborhood_scores(cache, channel, pool_mask, k)[window])
