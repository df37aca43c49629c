"""
Projections onto the unit-capped simplex and the sparse unit-capped simplex

    Δ⁺_t       = {w : Σw = 1, 0 ≤ w ≤ t}
    Δ⁺_{t,ℓ0}  = Δ⁺_t ∩ {w : ‖w‖₀ ≤ s}

All arithmetic is done in float64 whatever the model precision is.
"""

import logging
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from utils import DomainError, InfeasibleError

logger = logging.getLogger(__name__)

SUM_TOLERANCE = 1e-9
CAP_TOLERANCE = 1e-12
FEASIBILITY_TOLERANCE = 1e-9

# Stand-ins for y_0 = -inf and y_{n+1} = +inf; only ever compared through
# the explicit boundary branches in project_capped_simplex.
_LOWEST = -np.finfo(np.float64).max
_HIGHEST = np.finfo(np.float64).max


@dataclass(frozen=True)
class SimplexSpec:
    """Constraint parameters (n, s, t) of the sparse unit-capped simplex"""
    n: int
    s: int
    t: float

    def __post_init__(self):
        if self.n < 1:
            raise DomainError(f"n must be positive, got {self.n}")
        if not 1 <= self.s <= self.n:
            raise DomainError(f"sparsity s must lie in [1, {self.n}], got {self.s}")
        if not 0.0 < self.t <= 1.0:
            raise DomainError(f"cap t must lie in (0, 1], got {self.t}")

    def feasible(self) -> bool:
        # slack so that t = 1/s and decimal inputs like 0.3333333333 survive rounding
        return self.s * self.t >= 1.0 - FEASIBILITY_TOLERANCE

    def require_feasible(self):
        if not self.feasible():
            raise InfeasibleError(
                f"sparse capped simplex is empty: s·t = {self.s}·{self.t} < 1")


@dataclass(frozen=True)
class WeightVector:
    """Aggregation weights living in Δ⁺_{t,ℓ0}"""
    values: np.ndarray
    spec: SimplexSpec

    def __post_init__(self):
        if not is_feasible(self.values, self.spec):
            raise DomainError("weight vector violates the sparse capped simplex constraints")

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.values > 0.0)

    @classmethod
    def uniform(cls, n: int) -> 'WeightVector':
        """1/n on every client, governed by the dense simplex (s = n, t = 1)"""
        return cls(np.full(n, 1.0 / n), SimplexSpec(n, n, 1.0))


def is_feasible(w: np.ndarray, spec: SimplexSpec) -> bool:
    """Check the sum, cap and sparsity invariants"""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (spec.n,) or not np.all(np.isfinite(w)):
        return False
    if np.any(w < -CAP_TOLERANCE) or np.any(w > spec.t + CAP_TOLERANCE):
        return False
    if abs(w.sum() - 1.0) > SUM_TOLERANCE:
        return False
    return int(np.count_nonzero(w)) <= spec.s


def _as_finite_vector(y, name: str) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1 or y.size == 0:
        raise DomainError(f"{name} must be a non-empty vector, got shape {y.shape}")
    if not np.all(np.isfinite(y)):
        raise DomainError(f"{name} contains NaN or Inf")
    return y


def project_capped_simplex(y, t: float) -> np.ndarray:
    """Euclidean projection of y onto Δ⁺_t.

    Sorted-prefix-sum KKT search over the break indices (a, b): entries
    below index a are clamped to 0, entries above b to t, and the middle
    block is shifted by t·γ.
    """
    y = _as_finite_vector(y, 'y')
    n = y.size
    if not 0.0 < t <= 1.0:
        raise DomainError(f"cap t must lie in (0, 1], got {t}")
    if n * t < 1.0 - FEASIBILITY_TOLERANCE:
        raise InfeasibleError(f"capped simplex is empty: n·t = {n}·{t} < 1")
    if n * t <= 1.0 + CAP_TOLERANCE:
        # the set is (numerically) the single point t·1
        return np.full(n, t)

    if (np.all(y >= 0.0) and np.all(y <= t) and abs(y.sum() - 1.0) <= CAP_TOLERANCE):
        return y.copy()

    order = np.argsort(y, kind='stable')
    ys = y[order]
    inv_t = 1.0 / t
    # padded[j] = y_j for j = 1..n; padded[0] and padded[n+1] are the sentinels
    padded = np.concatenate(([_LOWEST], ys, [_HIGHEST]))
    prefix = np.concatenate(([0.0], np.cumsum(ys) * inv_t))

    x_sorted = None
    for a in range(n + 1):
        if abs(inv_t - (n - a)) <= CAP_TOLERANCE * max(1.0, inv_t):
            gap_ok = a == 0 or a == n or padded[a + 1] - padded[a] >= t
            if gap_ok:
                x_sorted = np.zeros(n)
                x_sorted[a:] = t
                break

        b = np.arange(a + 1, n + 1)
        if b.size == 0:
            continue
        gamma = (inv_t + b - n + prefix[a] - prefix[b]) / (b - a)
        low_ok = True if a == 0 else padded[a] * inv_t + gamma <= 0.0
        first_ok = padded[a + 1] * inv_t + gamma > 0.0
        last_ok = padded[b] * inv_t + gamma < 1.0
        # y_{b+1} = +inf when b = n
        next_ok = np.where(b == n, True, padded[np.minimum(b + 1, n)] * inv_t + gamma >= 1.0)
        hits = np.flatnonzero(low_ok & first_ok & last_ok & next_ok)
        if hits.size:
            bb = int(b[hits[0]])
            g = float(gamma[hits[0]])
            x_sorted = np.zeros(n)
            x_sorted[a:bb] = ys[a:bb] + t * g
            x_sorted[bb:] = t
            break

    if x_sorted is None:
        # only reachable when rounding puts an entry exactly on a break boundary
        logger.debug("KKT scan found no break pair; falling back to bisection")
        return _capped_projection_bisection(y, t)

    x = np.empty(n)
    x[order] = np.clip(x_sorted, 0.0, t)
    return x


def _capped_projection_bisection(y: np.ndarray, t: float) -> np.ndarray:
    """Solve Σ clip(y - λ, 0, t) = 1 for λ; used only when rounding defeats the scan"""
    lo, hi = y.min() - t, y.max()
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.clip(y - mid, 0.0, t).sum() > 1.0:
            lo = mid
        else:
            hi = mid
    return np.clip(y - 0.5 * (lo + hi), 0.0, t)


def top_s(h, s: int) -> Tuple[np.ndarray, np.ndarray]:
    """Keep the s largest entries of h by value (lowest index wins ties).

    Returns the masked vector and the sorted retained indices.
    """
    h = _as_finite_vector(h, 'h')
    if not 1 <= s <= h.size:
        raise DomainError(f"s must lie in [1, {h.size}], got {s}")
    support = np.sort(np.argsort(-h, kind='stable')[:s])
    values = np.zeros_like(h)
    values[support] = h[support]
    return values, support


def project_sparse_capped_simplex(h, spec: SimplexSpec) -> WeightVector:
    """Global minimiser of ‖w - h‖₂ over Δ⁺_{t,ℓ0}: top-s support, then capped projection on it"""
    spec.require_feasible()
    h = _as_finite_vector(h, 'h')
    if h.size != spec.n:
        raise DomainError(f"expected a vector of length {spec.n}, got {h.size}")

    h_lambda, support = top_s(h, spec.s)
    w = np.zeros(spec.n)
    w[support] = project_capped_simplex(h_lambda[support], spec.t)
    return WeightVector(w, spec)


def max_pairwise_distance(spec: SimplexSpec) -> float:
    """Largest ‖w₁ - w₂‖₂ over Δ⁺_{t,ℓ0}: √(2(k·t² + r²)), k = ⌊1/t⌋, r = 1 - k·t"""
    spec.require_feasible()
    t = spec.t
    inv_t = 1.0 / t
    k = math.floor(inv_t + CAP_TOLERANCE)
    if abs(inv_t - k) <= CAP_TOLERANCE * inv_t:
        return math.sqrt(2.0 * t)
    r = max(0.0, 1.0 - k * t)
    return math.sqrt(2.0 * (k * t * t + r * r))
