"""
Client-side behaviour: honest local training and the attack families
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Set

import numpy as np
from scipy.stats import norm

from models import Batch, ModelArch, gradient, loss
from utils import ConfigError, DomainError

logger = logging.getLogger(__name__)

ATTACK_KINDS = ('none', 'flip_labels', 'backdoor', 'inverse_gradient', 'global_param', 'double', 'lie')
LIE_FALLBACK_Z = 0.1
BACKDOOR_PATCH = 8


@dataclass
class ClientReport:
    """(gradient, loss) pair sent back by a client"""
    gradient: np.ndarray
    loss: float


@dataclass(frozen=True)
class AttackSpec:
    """Attack family and its parameters"""
    kind: str = 'none'
    nu1: float = -5.0
    nu2: float = 1.5
    z: Optional[float] = None            # None → stealth bound from (n, b_f)
    double_inverse_round: int = 2
    double_global_round: int = 5

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack {self.kind!r}", 'attack', 'kind')
        if self.nu2 <= 0:
            raise ConfigError("nu2 must be positive", 'attack', 'nu2')
        if self.double_inverse_round < 1 or self.double_global_round < 1:
            raise ConfigError("double attack rounds are 1-based", 'attack', 'double_inverse_round')

    @property
    def poisons_data(self) -> bool:
        return self.kind in ('flip_labels', 'backdoor')


@dataclass(frozen=True)
class RoundContext:
    """What a client receives with a broadcast"""
    epoch: int
    theta: np.ndarray
    alpha: float
    local_epochs: int
    batch_size: int
    seed: int

    def __post_init__(self):
        if self.alpha <= 0 or self.local_epochs < 0 or self.batch_size < 1:
            raise DomainError("need alpha > 0, local_epochs ≥ 0 and batch_size ≥ 1")


def client_update(ctx: RoundContext, shard: Batch, arch: ModelArch) -> ClientReport:
    """E epochs of mini-batch SGD from θ; returns g = -(ψ - θ)/α and the shard loss at ψ"""
    m = len(shard)
    if m == 0:
        raise DomainError("client shard is empty")
    rng = np.random.default_rng(ctx.seed)
    psi = ctx.theta.copy()
    # Σ of step gradients equals -(ψ - θ)/α without the cancellation error
    displacement = np.zeros_like(psi)
    for _ in range(ctx.local_epochs):
        if ctx.batch_size >= m:
            batches = [np.arange(m)]
        else:
            order = rng.permutation(m)
            batches = [order[i:i + ctx.batch_size] for i in range(0, m, ctx.batch_size)]
        for idx in batches:
            step = gradient(psi, arch, Batch(shard.features[idx], shard.labels[idx]))
            psi -= ctx.alpha * step
            displacement += step
    return ClientReport(displacement, loss(psi, arch, shard))


def poison_flip_labels(shard: Batch, num_classes: int) -> Batch:
    """Label l becomes L - l - 1"""
    return Batch(shard.features.copy(), (num_classes - 1 - shard.labels).astype(shard.labels.dtype))


def poison_backdoor(shard: Batch, image_side: int, num_classes: int, seed: int,
                    patch: int = BACKDOOR_PATCH) -> Batch:
    """Black patch×patch square at the image centre, labels redrawn uniformly"""
    if shard.features.ndim != 2 or shard.features.shape[1] != image_side * image_side:
        raise DomainError(
            f"features of length {shard.features.shape[-1]} are not {image_side}×{image_side} images")
    if image_side < patch:
        raise DomainError(f"image side {image_side} is smaller than the {patch}-pixel patch")
    images = shard.features.reshape(-1, image_side, image_side).copy()
    start = (image_side - patch) // 2
    images[:, start:start + patch, start:start + patch] = 0
    labels = np.random.default_rng(seed).integers(0, num_classes, size=len(shard))
    return Batch(images.reshape(len(shard), -1), labels.astype(shard.labels.dtype))


def attack_inverse_gradient(report: ClientReport) -> ClientReport:
    return ClientReport(-report.gradient, report.loss)


def attack_global_param(theta: np.ndarray, nu1: float, nu2: float, seed: int) -> np.ndarray:
    """θ + ε with ε ~ N(ν₁·mean(θ), ν₂·var(θ)) per coordinate"""
    if nu2 <= 0:
        raise DomainError("nu2 must be positive")
    theta64 = theta.astype(np.float64)
    noise = np.random.default_rng(seed).normal(
        nu1 * theta64.mean(), math.sqrt(nu2 * theta64.var()), size=theta.size)
    return (theta64 + noise).astype(theta.dtype)


def lie_z(n: int, b_f: int) -> float:
    """Stealth quantile Φ⁻¹((n - b_f - ⌊n/2 + 1⌋)/(n - b_f)), clamped to 0.1 when the argument is ≤ 0"""
    honest = n - b_f
    if honest <= 0:
        raise ConfigError(f"LIE needs at least one honest client (n = {n}, b_f = {b_f})", 'attack', 'kind')
    arg = (honest - math.floor(n / 2 + 1)) / honest
    if arg <= 0:
        return LIE_FALLBACK_Z
    return float(norm.ppf(arg))


def attack_lie(reports: List[ClientReport], malicious_ids: Set[int], n: int, b_f: int,
               z: Optional[float] = None) -> List[ClientReport]:
    """Replace every malicious report by μ + z·σ of all submitted gradients, loss by the mean loss"""
    if len(reports) != n:
        raise DomainError(f"expected {n} reports, got {len(reports)}")
    if len(malicious_ids) >= n or n - b_f <= 0:
        raise ConfigError(f"LIE needs at least one honest client (n = {n}, b_f = {b_f})", 'attack', 'kind')
    if z is None:
        z = lie_z(n, b_f)
    stacked = np.stack([r.gradient for r in reports]).astype(np.float64)
    mu = stacked.mean(axis=0)
    sigma = stacked.std(axis=0)
    dtype = reports[0].gradient.dtype
    forged = (mu + z * sigma).astype(dtype)
    mean_loss = float(np.mean([r.loss for r in reports]))
    return [ClientReport(forged.copy(), mean_loss) if i in malicious_ids else r
            for i, r in enumerate(reports)]


def schedule_double_attack(round_number: int, malicious_ids: Set[int], seed: int,
                           inverse_round: int = 2, global_round: int = 5) -> Dict[int, str]:
    """Active attack per malicious client for a 1-based communication round.

    A seeded half of the attackers inverts gradients from `inverse_round` on,
    the other half corrupts the global parameters from `global_round` on.
    """
    ids = sorted(malicious_ids)
    shuffled = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    n_inverse = (len(ids) + 1) // 2
    active = {}
    for position, client_id in enumerate(shuffled):
        if position < n_inverse:
            active[client_id] = 'inverse_gradient' if round_number >= inverse_round else 'none'
        else:
            active[client_id] = 'global_param' if round_number >= global_round else 'none'
    return active


def _client_seed(seed: int, epoch: int, client_id: int, phase: int, stream: int = 0) -> int:
    return int(np.random.SeedSequence([seed, epoch, client_id, phase, stream]).generate_state(1)[0])


class ClientPopulation:
    """All clients of a federation, honest and malicious.

    One call to collect() is one broadcast/collect cycle.
    """

    def __init__(self, shards: List[Batch], arch: ModelArch, attack: AttackSpec,
                 malicious: Set[int], alpha: float, local_epochs: int, batch_size: int,
                 seed: int, threads: int = 1, image_side: Optional[int] = None):
        self.logger = logging.getLogger(__name__)
        self.arch = arch
        self.attack = attack
        self.malicious = set(malicious)
        self.alpha = alpha
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.seed = seed
        self.threads = max(1, threads)
        self.n = len(shards)

        for client_id, shard in enumerate(shards):
            if len(shard) == 0:
                raise ConfigError(f"client {client_id} received no training data",
                                  'partition', 'n_clients')
        if any(c < 0 or c >= self.n for c in self.malicious):
            raise DomainError("malicious ids outside the client range")

        self.shards = [self._poison(client_id, shard, image_side) for client_id, shard in enumerate(shards)]
        self.collect_calls = 0

    def _poison(self, client_id: int, shard: Batch, image_side: Optional[int]) -> Batch:
        if client_id not in self.malicious or not self.attack.poisons_data:
            return shard
        if self.attack.kind == 'flip_labels':
            return poison_flip_labels(shard, self.arch.num_classes)
        side = image_side if image_side is not None else math.isqrt(shard.features.shape[1])
        return poison_backdoor(shard, side, self.arch.num_classes,
                               _client_seed(self.seed, 0, client_id, 0, stream=2))

    def active_attacks(self, round_number: int) -> Dict[int, str]:
        """Attack each malicious client applies to its report in this round"""
        kind = self.attack.kind
        if kind == 'double':
            return schedule_double_attack(round_number, self.malicious, self.seed,
                                          self.attack.double_inverse_round,
                                          self.attack.double_global_round)
        if kind in ('inverse_gradient', 'global_param'):
            return {c: kind for c in self.malicious}
        return {}

    def _update(self, client_id: int, theta: np.ndarray, epoch: int, phase: int,
                mode: str) -> ClientReport:
        start = theta
        if mode == 'global_param':
            start = attack_global_param(theta, self.attack.nu1, self.attack.nu2,
                                        _client_seed(self.seed, epoch, client_id, phase, 1))
        ctx = RoundContext(epoch, start, self.alpha, self.local_epochs, self.batch_size,
                           _client_seed(self.seed, epoch, client_id, phase))
        report = client_update(ctx, self.shards[client_id], self.arch)
        if mode == 'inverse_gradient':
            report = attack_inverse_gradient(report)
        return report

    def collect(self, theta: np.ndarray, epoch: int, phase: int = 0) -> List[ClientReport]:
        """Broadcast θ and gather every client's report, ordered by client id"""
        active = self.active_attacks(epoch + 1)
        modes = [active.get(c, 'none') for c in range(self.n)]

        if self.threads > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as executor:
                reports = list(executor.map(
                    lambda c: self._update(c, theta, epoch, phase, modes[c]), range(self.n)))
        else:
            reports = [self._update(c, theta, epoch, phase, modes[c]) for c in range(self.n)]

        if self.attack.kind == 'lie' and self.malicious:
            reports = attack_lie(reports, self.malicious, self.n, len(self.malicious), self.attack.z)

        self.collect_calls += 1
        self.logger.debug(f"Epoch {epoch} phase {phase}: collected {self.n} reports "
                          f"({sum(m != 'none' for m in modes)} attacking)")
        return reports
