"""
Training loops: FedLAW, its BSUM ablation and the baseline-aggregator loop

One epoch of FedLAW is two broadcast/collect cycles:

    collect (g_i, f_i) at θ_k           → θ̃ = θ_k − α·G w_k
    collect (g̃_i, f̃_i) at θ̃              → h = w_k + αβ·Gᵀ(G̃ w_k) − β·f̃
    w_{k+1} = P_{Δ⁺_{t,ℓ0}}(h)          → θ_{k+1} = θ_k − α·G w_{k+1}
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np

from adversary import ClientPopulation, ClientReport
from aggregators import AggregatorSpec, aggregate, clip_to_ball
from models import ModelArch, accuracy, init_params
from simplex import (FEASIBILITY_TOLERANCE, SimplexSpec, WeightVector, max_pairwise_distance,
                     project_sparse_capped_simplex)
from utils import ConfigError, DivergenceError, DomainError, InfeasibleError

logger = logging.getLogger(__name__)

ALGORITHMS = ('fedlaw', 'bsum', 'baseline')
BETA_SCHEDULES = ('fixed', 'robbins_monro')
PRECISIONS = {'float32': np.float32, 'float64': np.float64}
DIVERGENCE_LOSS = 1e6


@dataclass(frozen=True)
class EngineConfig:
    """Hyper-parameters of one training run"""
    alpha: float = 0.01
    beta: float = 0.01
    beta_schedule: str = 'fixed'
    beta_power: float = 0.75
    epochs: int = 100
    local_epochs: int = 1
    batch_size: int = 10
    s: Optional[int] = None
    t: Optional[float] = None
    weight_update_rounds: Optional[int] = None
    clip_radius: Optional[float] = None
    algorithm: str = 'fedlaw'
    aggregator: AggregatorSpec = field(default_factory=AggregatorSpec)
    seed: int = 0
    precision: str = 'float32'

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive", 'engine', 'alpha')
        if self.beta <= 0:
            raise ConfigError("beta must be positive", 'engine', 'beta')
        if self.beta_schedule not in BETA_SCHEDULES:
            raise ConfigError(f"unknown beta schedule {self.beta_schedule!r}", 'engine', 'beta_schedule')
        if self.beta_schedule == 'robbins_monro' and not 0.5 < self.beta_power <= 1.0:
            raise ConfigError("Robbins-Monro exponent must lie in (0.5, 1]", 'engine', 'beta_power')
        if self.epochs < 0 or self.local_epochs < 0 or self.batch_size < 1:
            raise ConfigError("need epochs ≥ 0, local_epochs ≥ 0 and batch_size ≥ 1", 'engine', 'epochs')
        if self.weight_update_rounds is not None and not 0 <= self.weight_update_rounds <= self.epochs:
            raise ConfigError("weight_update_rounds must lie in [0, epochs]", 'engine', 'weight_update_rounds')
        if self.clip_radius is not None and self.clip_radius <= 0:
            raise ConfigError("clip_radius must be positive", 'engine', 'clip_radius')
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}", 'engine', 'algorithm')
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}", 'engine', 'precision')
        if (self.s is None) != (self.t is None):
            raise ConfigError("set both s and t or neither", 'engine', 's')
        if self.s is not None and self.s * self.t < 1.0 - FEASIBILITY_TOLERANCE:
            raise ConfigError(f"s·t = {self.s}·{self.t} < 1 leaves no feasible weights", 'engine', 't')

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @property
    def update_rounds(self) -> int:
        return self.epochs if self.weight_update_rounds is None else self.weight_update_rounds


@dataclass
class RoundTrace:
    """Snapshot emitted after every epoch"""
    epoch: int
    w: WeightVector
    theta_norm: float
    losses: np.ndarray
    test_accuracy: float
    validation_accuracy: float
    comm_rounds: int


@dataclass
class TrainingState:
    theta: np.ndarray
    w: WeightVector
    epoch: int = 0
    previous_aggregate: Optional[np.ndarray] = None


def default_sparsity(n: int, malicious_fraction: float) -> Tuple[int, float]:
    """s = (1 − fraction)·n; t = 1/(s − 10) when s > 10, else 1/s"""
    if n < 1 or not 0.0 <= malicious_fraction < 1.0:
        raise DomainError("need n ≥ 1 and malicious_fraction in [0, 1)")
    s = max(1, round((1.0 - malicious_fraction) * n))
    t = 1.0 / (s - 10) if s > 10 else 1.0 / s
    return s, t


def beta_at(config: EngineConfig, k: int) -> float:
    if config.beta_schedule == 'robbins_monro':
        return config.beta / (1.0 + k) ** config.beta_power
    return config.beta


def compute_h(w: np.ndarray, G: np.ndarray, G_tilde: np.ndarray, f_tilde: np.ndarray,
              alpha: float, beta: float) -> np.ndarray:
    """h = w + αβ·Gᵀ(G̃w) − β·f̃ without forming the n×n matrix"""
    w = np.asarray(w, dtype=np.float64)
    f_tilde = np.asarray(f_tilde, dtype=np.float64)
    n = w.size
    if G.ndim != 2 or G.shape[1] != n or G_tilde.shape != G.shape or f_tilde.shape != (n,):
        raise DomainError(
            f"inconsistent shapes: w {w.shape}, G {G.shape}, G̃ {G_tilde.shape}, f̃ {f_tilde.shape}")
    if alpha < 0 or beta < 0:
        raise DomainError("alpha and beta must be non-negative")
    z = G_tilde.astype(np.float64) @ w
    return w + alpha * beta * (G.astype(np.float64).T @ z) - beta * f_tilde


def bsum_weights(losses: np.ndarray, spec: SimplexSpec) -> WeightVector:
    """Minimiser of Σ wᵢfᵢ over Δ⁺_{t,ℓ0}: cap t on the smallest losses until the mass is 1"""
    spec.require_feasible()
    losses = np.asarray(losses, dtype=np.float64)
    if losses.shape != (spec.n,) or not np.all(np.isfinite(losses)):
        raise DomainError("losses must be a finite vector of length n")
    w = np.zeros(spec.n)
    remaining = 1.0
    for idx in np.argsort(losses, kind='stable')[:spec.s]:
        if remaining <= 0.0:
            break
        w[idx] = min(spec.t, remaining)
        remaining -= w[idx]
    return WeightVector(w, spec)


def lw_bound(alpha: float, C: float, n: int, L_max: float, spec: SimplexSpec) -> float:
    """Lipschitz bound αC²(n^{3/2} + n + αnL + αn²Lϱ/2) with ϱ the simplex diameter"""
    if alpha < 0 or C < 0 or L_max < 0 or n < 1:
        raise DomainError("lw_bound needs non-negative alpha, C, L_max and n ≥ 1")
    rho = max_pairwise_distance(spec)
    return alpha * C * C * (n ** 1.5 + n + alpha * n * L_max + alpha * n * n * L_max * rho / 2.0)


def _stack(reports: List[ClientReport]) -> Tuple[np.ndarray, np.ndarray]:
    G = np.stack([r.gradient for r in reports], axis=1).astype(np.float64)
    f = np.array([r.loss for r in reports], dtype=np.float64)
    return G, f


class FederatedTrainer:
    """Deterministic round driver for one run"""

    def __init__(self, config: EngineConfig, population: ClientPopulation, arch: ModelArch,
                 validation, test, theta0: Optional[np.ndarray] = None):
        self.logger = logging.getLogger(__name__)
        self.config = config
        self.population = population
        self.arch = arch
        self.validation = validation
        self.test = test
        n = population.n
        malicious_fraction = len(population.malicious) / n

        s, t = (config.s, config.t) if config.s is not None else default_sparsity(n, malicious_fraction)
        if s > n:
            raise ConfigError(f"s = {s} exceeds the {n} clients", 'engine', 's')
        try:
            self.spec = SimplexSpec(n, s, t)
            self.spec.require_feasible()
        except (DomainError, InfeasibleError) as e:
            raise ConfigError(str(e), 'engine', 't') from e

        self.aggregator = config.aggregator.with_defaults(n, malicious_fraction)
        if config.clip_radius is not None and self.aggregator.clip_radius is None:
            self.aggregator = replace(self.aggregator, clip_radius=config.clip_radius)

        dtype = config.dtype
        theta = init_params(arch, config.seed, dtype) if theta0 is None else np.asarray(theta0, dtype=dtype).copy()
        self.state = TrainingState(theta=theta, w=WeightVector.uniform(n))
        self.traces: List[RoundTrace] = []

    def _clip(self, G: np.ndarray) -> np.ndarray:
        if self.config.clip_radius is None:
            return G
        return np.stack([clip_to_ball(G[:, i], self.config.clip_radius) for i in range(G.shape[1])], axis=1)

    def _evaluate(self, theta: np.ndarray, dataset) -> float:
        if dataset is None or len(dataset) == 0:
            return float('nan')
        return accuracy(theta, self.arch, dataset.features, dataset.labels)

    def _check_divergence(self, k: int, theta: np.ndarray, *losses: np.ndarray):
        for f in losses:
            if not np.all(np.isfinite(f)):
                raise DivergenceError(k, "non-finite client loss", list(self.traces))
            if np.max(f) > DIVERGENCE_LOSS:
                raise DivergenceError(k, f"client loss {np.max(f):.3g} exceeds {DIVERGENCE_LOSS:g}",
                                      list(self.traces))
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(k, "non-finite model parameters", list(self.traces))

    def _finish(self, theta: np.ndarray, w: WeightVector, losses: np.ndarray,
                comm_rounds: int, aggregate_direction: Optional[np.ndarray] = None) -> RoundTrace:
        k = self.state.epoch
        trace = RoundTrace(
            epoch=k,
            w=w,
            theta_norm=float(np.linalg.norm(theta.astype(np.float64))),
            losses=losses,
            test_accuracy=self._evaluate(theta, self.test),
            validation_accuracy=self._evaluate(theta, self.validation),
            comm_rounds=comm_rounds,
        )
        self.state = TrainingState(theta, w, k + 1, aggregate_direction)
        self.traces.append(trace)
        return trace

    def fedlaw_epoch(self) -> RoundTrace:
        """Two communication rounds, learnable weights, model update"""
        cfg = self.config
        k = self.state.epoch
        theta, w = self.state.theta, self.state.w

        G, f = _stack(self.population.collect(theta, k, phase=0))
        G = self._clip(G)
        theta_tilde = (theta - cfg.alpha * (G @ w.values)).astype(theta.dtype)
        G_tilde, f_tilde = _stack(self.population.collect(theta_tilde, k, phase=1))
        G_tilde = self._clip(G_tilde)
        self._check_divergence(k, theta_tilde, f, f_tilde)

        if k < cfg.update_rounds:
            h = compute_h(w.values, G, G_tilde, f_tilde, cfg.alpha, beta_at(cfg, k))
            w = project_sparse_capped_simplex(h, self.spec)

        theta_next = (theta - cfg.alpha * (G @ w.values)).astype(theta.dtype)
        self._check_divergence(k, theta_next)
        return self._finish(theta_next, w, f_tilde, comm_rounds=2)

    def bsum_epoch(self) -> RoundTrace:
        """Block-successive variant: weights minimise the linearised loss at θ̃"""
        cfg = self.config
        k = self.state.epoch
        theta, w = self.state.theta, self.state.w

        G, f = _stack(self.population.collect(theta, k, phase=0))
        G = self._clip(G)
        theta_tilde = (theta - cfg.alpha * (G @ w.values)).astype(theta.dtype)
        _, f_tilde = _stack(self.population.collect(theta_tilde, k, phase=1))
        self._check_divergence(k, theta_tilde, f, f_tilde)

        if k < cfg.update_rounds:
            w = bsum_weights(f_tilde, self.spec)

        theta_next = (theta - cfg.alpha * (G @ w.values)).astype(theta.dtype)
        self._check_divergence(k, theta_next)
        return self._finish(theta_next, w, f_tilde, comm_rounds=2)

    def baseline_epoch(self) -> RoundTrace:
        """One communication round aggregated by a fixed rule"""
        cfg = self.config
        k = self.state.epoch
        theta = self.state.theta

        G, f = _stack(self.population.collect(theta, k, phase=0))
        self._check_divergence(k, theta, f)
        seed = int(np.random.SeedSequence([cfg.seed, k, 2]).generate_state(1)[0])
        direction = aggregate(G, self.aggregator, self.state.previous_aggregate, seed)
        theta_next = (theta - cfg.alpha * direction).astype(theta.dtype)
        self._check_divergence(k, theta_next)
        return self._finish(theta_next, WeightVector.uniform(self.population.n), f,
                            comm_rounds=1, aggregate_direction=direction)

    def step(self) -> RoundTrace:
        algorithm = self.config.algorithm
        if algorithm == 'fedlaw':
            return self.fedlaw_epoch()
        if algorithm == 'bsum':
            return self.bsum_epoch()
        return self.baseline_epoch()

    def train(self) -> List[RoundTrace]:
        cfg = self.config
        name = cfg.algorithm if cfg.algorithm != 'baseline' else self.aggregator.kind
        self.logger.info(f"Training {name} for {cfg.epochs} epochs on {self.population.n} clients "
                         f"(s={self.spec.s}, t={self.spec.t:.6g}, seed={cfg.seed})")
        report_every = max(1, math.ceil(cfg.epochs / 10))
        for _ in range(cfg.epochs):
            trace = self.step()
            if (trace.epoch + 1) % report_every == 0:
                self.logger.info(f"Epoch {trace.epoch + 1}/{cfg.epochs}: test accuracy "
                                 f"{trace.test_accuracy:.4f}, support {trace.w.support.tolist()}")
            else:
                self.logger.debug(f"Epoch {trace.epoch}: test accuracy {trace.test_accuracy:.4f}")
        return self.traces


def run_training(config: EngineConfig, population: ClientPopulation, arch: ModelArch,
                 validation, test, theta0: Optional[np.ndarray] = None) -> List[RoundTrace]:
    """Run config.epochs epochs of the configured loop; raises DivergenceError with the partial traces"""
    return FederatedTrainer(config, population, arch, validation, test, theta0).train()
