"""
Baseline robust aggregation rules

Every rule takes the round's gradient matrix G of shape (d, n), one column
per client in client-id order, and returns a single direction of length d.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from utils import ConfigError, DomainError

logger = logging.getLogger(__name__)

AGGREGATOR_KINDS = ('fedavg', 'krum', 'trimmed_mean', 'cwmed', 'bulyan', 'cclip', 'rfa', 'huber')
HUBER_TOLERANCE = 1e-8
HUBER_MAX_ITERS = 100


@dataclass(frozen=True)
class AggregatorSpec:
    """Aggregation rule and its parameters; None means "fill from the run in with_defaults()" """
    kind: str = 'fedavg'
    krum_m: Optional[int] = None
    trim_fraction: Optional[float] = None
    bulyan_pool: Optional[int] = None
    bulyan_inner: Optional[int] = None
    cclip_tau: float = 10.0
    cclip_iters: int = 1
    rfa_nu: float = 1e-6
    rfa_iters: int = 3
    huber_tau: float = 0.2
    bucketing: Optional[int] = None
    clip_radius: Optional[float] = None

    def __post_init__(self):
        if self.kind not in AGGREGATOR_KINDS:
            raise ConfigError(f"unknown aggregator {self.kind!r}", 'aggregator', 'kind')
        if self.krum_m is not None and self.krum_m < 1:
            raise ConfigError("krum_m must be at least 1", 'aggregator', 'krum_m')
        if self.trim_fraction is not None and not 0.0 <= self.trim_fraction < 0.5:
            raise ConfigError("trim_fraction must lie in [0, 0.5)", 'aggregator', 'trim_fraction')
        if self.bulyan_pool is not None and self.bulyan_pool < 1:
            raise ConfigError("bulyan_pool must be at least 1", 'aggregator', 'bulyan_pool')
        if self.bulyan_inner is not None and self.bulyan_inner < 1:
            raise ConfigError("bulyan_inner must be at least 1", 'aggregator', 'bulyan_inner')
        if self.cclip_tau <= 0 or self.cclip_iters < 1:
            raise ConfigError("cclip needs tau > 0 and iters ≥ 1", 'aggregator', 'cclip_tau')
        if self.rfa_nu <= 0 or self.rfa_iters < 1:
            raise ConfigError("rfa needs nu > 0 and iters ≥ 1", 'aggregator', 'rfa_nu')
        if self.huber_tau <= 0:
            raise ConfigError("huber_tau must be positive", 'aggregator', 'huber_tau')
        if self.bucketing is not None and self.bucketing < 1:
            raise ConfigError("bucketing factor must be at least 1", 'aggregator', 'bucketing')
        if self.clip_radius is not None and self.clip_radius <= 0:
            raise ConfigError("clip_radius must be positive", 'aggregator', 'clip_radius')

    def with_defaults(self, n: int, malicious_fraction: float) -> 'AggregatorSpec':
        """Fill the unset size parameters for n clients.

        Krum keeps (1 - fraction)·n - 2 clients and Trimmed Mean trims the
        malicious fraction. Bulyan's inner size uses the Krum retained count
        and its pool is 20% of n, raised to at least the inner size.
        """
        retained = max(1, round((1.0 - malicious_fraction) * n) - 2)
        krum_m = self.krum_m if self.krum_m is not None else retained
        trim = self.trim_fraction if self.trim_fraction is not None else malicious_fraction
        if self.kind == 'trimmed_mean' and not 0.0 <= trim < 0.5:
            raise ConfigError(f"trim fraction {trim} must lie in [0, 0.5)", 'aggregator', 'trim_fraction')
        inner = self.bulyan_inner if self.bulyan_inner is not None else min(retained, n)
        pool = self.bulyan_pool if self.bulyan_pool is not None else min(n, max(inner, round(0.2 * n)))
        return replace(self, krum_m=krum_m, trim_fraction=min(trim, 0.499999),
                       bulyan_pool=pool, bulyan_inner=inner)


def _check_matrix(G: np.ndarray) -> np.ndarray:
    G = np.asarray(G)
    if G.ndim != 2 or G.shape[1] == 0:
        raise DomainError(f"gradient matrix must be (d, n) with n ≥ 1, got shape {G.shape}")
    if not np.all(np.isfinite(G)):
        raise DomainError("gradient matrix contains NaN or Inf")
    return G


def fedavg(G: np.ndarray) -> np.ndarray:
    return _check_matrix(G).mean(axis=1)


def _squared_distances(G: np.ndarray) -> np.ndarray:
    sq = np.einsum('ij,ij->j', G, G)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (G.T @ G)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return d2


def _krum_scores(d2: np.ndarray, neighbors: int) -> np.ndarray:
    """Sum of squared distances to the `neighbors` closest other columns"""
    n = d2.shape[0]
    if neighbors <= 0 or n == 1:
        return np.zeros(n)
    others = np.sort(d2 + np.diag(np.full(n, np.inf)), axis=1)
    return others[:, :neighbors].sum(axis=1)


def krum(G: np.ndarray, m: int) -> np.ndarray:
    """Multi-Krum: mean of the m columns with the smallest neighbour scores"""
    G = _check_matrix(G)
    n = G.shape[1]
    if not 1 <= m <= n:
        raise ConfigError(f"krum retained count must lie in [1, {n}], got {m}", 'aggregator', 'krum_m')
    b_f = max(0, n - m - 2)
    neighbors = n - b_f - 2
    if neighbors < 1:
        raise ConfigError(f"{n} clients are too few for Krum scoring", 'aggregator', 'krum_m')
    scores = _krum_scores(_squared_distances(G), neighbors)
    chosen = np.argsort(scores, kind='stable')[:m]
    logger.debug(f"Krum kept clients {sorted(chosen.tolist())}")
    return G[:, np.sort(chosen)].mean(axis=1)


def trimmed_mean(G: np.ndarray, trim_fraction: float) -> np.ndarray:
    """Per coordinate, drop the ⌈fraction·n⌉ largest and smallest values and average the rest"""
    G = _check_matrix(G)
    n = G.shape[1]
    if not 0.0 <= trim_fraction < 0.5:
        raise ConfigError("trim_fraction must lie in [0, 0.5)", 'aggregator', 'trim_fraction')
    k = math.ceil(trim_fraction * n - 1e-12)
    if n - 2 * k < 1:
        raise ConfigError(f"trimming {k} per side leaves no survivors among {n}",
                          'aggregator', 'trim_fraction')
    ordered = np.sort(G, axis=1)
    return ordered[:, k:n - k].mean(axis=1)


def coordinate_median(G: np.ndarray) -> np.ndarray:
    return np.median(_check_matrix(G), axis=1)


def _exact_squared_distances(G: np.ndarray) -> np.ndarray:
    """Squared distances summed column by column, so d2[i, j] == d2[j, i] bit for bit"""
    n = G.shape[1]
    d2 = np.empty((n, n))
    for i in range(n):
        d2[i] = np.sum((G - G[:, i:i + 1]) ** 2, axis=0)
    return d2


def bulyan(G: np.ndarray, pool_size: int, inner_size: int) -> np.ndarray:
    """Krum-selected candidate pool, then per coordinate the mean of the
    inner_size values closest to the pool's coordinate median"""
    G = _check_matrix(G)
    n = G.shape[1]
    if not 1 <= pool_size <= n or not 1 <= inner_size <= pool_size:
        raise ConfigError(
            f"bulyan needs 1 ≤ inner ≤ pool ≤ n, got inner={inner_size}, pool={pool_size}, n={n}",
            'aggregator', 'bulyan_pool')
    b_f = max(0, n - inner_size - 2)
    neighbors = max(1, n - b_f - 2)
    d2 = _exact_squared_distances(G)

    remaining = list(range(n))
    pool = []
    while len(pool) < pool_size:
        r = len(remaining)
        scores = _krum_scores(d2[np.ix_(remaining, remaining)], min(neighbors, r - 1))
        tied = np.flatnonzero(scores == scores.min())
        if tied.size > 1:
            # equal scores: the lexicographically smallest column wins, whatever its position
            columns = G[:, [remaining[i] for i in tied]]
            tied = tied[np.lexsort(columns[::-1])]
        pool.append(remaining.pop(int(tied[0])))

    # sorted per coordinate so equal distances to the median resolve by value
    candidates = np.sort(G[:, pool], axis=1)
    median = np.median(candidates, axis=1, keepdims=True)
    closest = np.argsort(np.abs(candidates - median), axis=1, kind='stable')[:, :inner_size]
    return np.take_along_axis(candidates, closest, axis=1).mean(axis=1)


def cclip(G: np.ndarray, tau: float, iters: int = 1,
          initial_center: Optional[np.ndarray] = None) -> np.ndarray:
    """Centered clipping around the previous aggregate"""
    G = _check_matrix(G)
    if tau <= 0 or iters < 1:
        raise DomainError("cclip needs tau > 0 and iters ≥ 1")
    center = np.zeros(G.shape[0]) if initial_center is None else np.asarray(initial_center, dtype=np.float64)
    for _ in range(iters):
        diff = G - center[:, None]
        norms = np.linalg.norm(diff, axis=0)
        scale = tau / np.maximum(norms, tau)
        center = center + (diff * scale).mean(axis=1)
    return center


def rfa(G: np.ndarray, nu: float = 1e-6, iters: int = 3) -> np.ndarray:
    """Smoothed Weiszfeld approximation of the geometric median"""
    G = _check_matrix(G)
    if nu <= 0 or iters < 1:
        raise DomainError("rfa needs nu > 0 and iters ≥ 1")
    center = G.mean(axis=1)
    for _ in range(iters):
        weights = 1.0 / np.maximum(nu, np.linalg.norm(G - center[:, None], axis=0))
        center = G @ weights / weights.sum()
    return center


def huber(G: np.ndarray, tau: float) -> np.ndarray:
    """Huber M-estimate of location by iteratively reweighted averaging"""
    G = _check_matrix(G)
    if tau <= 0:
        raise DomainError("huber needs tau > 0")
    center = G.mean(axis=1)
    for _ in range(HUBER_MAX_ITERS):
        norms = np.linalg.norm(G - center[:, None], axis=0)
        weights = tau / np.maximum(norms, tau)
        updated = G @ weights / weights.sum()
        shift = np.linalg.norm(updated - center)
        center = updated
        if shift <= HUBER_TOLERANCE * max(1.0, np.linalg.norm(center)):
            break
    return center


def clip_to_ball(g: np.ndarray, radius: float) -> np.ndarray:
    if radius <= 0:
        raise DomainError("clip radius must be positive")
    norm = float(np.linalg.norm(g))
    if norm <= radius:
        return g
    return g * (radius / norm)


def _rescaled(spec: AggregatorSpec, n: int, buckets: int) -> AggregatorSpec:
    """Size parameters scaled to the bucket count; fractions are kept"""
    def scale(value):
        return None if value is None else max(1, min(buckets, round(value * buckets / n)))

    pool = scale(spec.bulyan_pool)
    inner = scale(spec.bulyan_inner)
    if pool is not None and inner is not None:
        inner = min(inner, pool)
    return replace(spec, krum_m=scale(spec.krum_m), bulyan_pool=pool, bulyan_inner=inner, bucketing=None)


def bucketing(G: np.ndarray, factor: int, inner: AggregatorSpec, seed: int,
              previous: Optional[np.ndarray] = None) -> np.ndarray:
    """Average shuffled buckets of at most `factor` columns, then apply the inner rule"""
    G = _check_matrix(G)
    if factor < 1:
        raise DomainError("bucketing factor must be at least 1")
    n = G.shape[1]
    inner = replace(inner, bucketing=None, clip_radius=None)
    if factor == 1:
        return _dispatch(G, inner, previous)
    order = np.random.default_rng(seed).permutation(n)
    n_buckets = math.ceil(n / factor)
    means = np.stack([G[:, order[b * factor:(b + 1) * factor]].mean(axis=1)
                      for b in range(n_buckets)], axis=1)
    if n_buckets == 1:
        return means[:, 0]
    return _dispatch(means, _rescaled(inner, n, n_buckets), previous)


def _dispatch(G: np.ndarray, spec: AggregatorSpec, previous: Optional[np.ndarray]) -> np.ndarray:
    kind = spec.kind
    if kind == 'fedavg':
        return fedavg(G)
    if kind == 'krum':
        return krum(G, _required(spec.krum_m, 'krum_m'))
    if kind == 'trimmed_mean':
        return trimmed_mean(G, _required(spec.trim_fraction, 'trim_fraction'))
    if kind == 'cwmed':
        return coordinate_median(G)
    if kind == 'bulyan':
        return bulyan(G, _required(spec.bulyan_pool, 'bulyan_pool'), _required(spec.bulyan_inner, 'bulyan_inner'))
    if kind == 'cclip':
        return cclip(G, spec.cclip_tau, spec.cclip_iters, previous)
    if kind == 'rfa':
        return rfa(G, spec.rfa_nu, spec.rfa_iters)
    return huber(G, spec.huber_tau)


def _required(value, key: str):
    if value is None:
        raise ConfigError("parameter unset; call with_defaults() first", 'aggregator', key)
    return value


def aggregate(G: np.ndarray, spec: AggregatorSpec, previous: Optional[np.ndarray] = None,
              seed: int = 0) -> np.ndarray:
    """Apply the configured rule with its optional clipping and bucketing wrappers.

    Computation is carried out in float64 and cast back to G's dtype.
    """
    G = _check_matrix(G)
    dtype = G.dtype
    G = G.astype(np.float64)
    if spec.clip_radius is not None:
        G = np.stack([clip_to_ball(G[:, i], spec.clip_radius) for i in range(G.shape[1])], axis=1)
    if spec.bucketing is not None and spec.bucketing > 1:
        result = bucketing(G, spec.bucketing, spec, seed, previous)
    else:
        result = _dispatch(G, spec, previous)
    return result.astype(dtype)
