"""
Experiment harness: config parsing, multi-seed runs, sweeps and debug subcommands

    python main.py run --config config.ini --output results
    python main.py sweep --config config.ini --param beta --values 0.01,0.001
    python main.py project --input 0.9,0.1,0.5,0.3,0.7 --s 3 --t 0.3333333333
    python main.py partition-stats --config config.ini
"""

import argparse
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional, Sequence, Set, Tuple

import numpy as np

import env_loader
from adversary import AttackSpec, ClientPopulation
from aggregators import AggregatorSpec
from data import (LabeledDataset, PartitionSpec, load_idx, partition_concentration,
                  partition_label_histogram, select_malicious_group_oriented,
                  select_malicious_random, split_80_10_10, synthetic_blobs)
from engine import EngineConfig, RoundTrace, default_sparsity, run_training
from metrics import (DETECTION_EPSILON, accuracy_curve, detection_confusion, mean_std,
                     padded_curves, validation_curve)
from models import Batch, ModelArch
from simplex import SimplexSpec, project_sparse_capped_simplex
from stats_manager import RunStatsManager
from utils import (ConfigError, ConfigManager, DivergenceError, SimulatorError,
                   format_float, setup_logging)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

# sections every experiment is expected to spell out; the rest default quietly
CONFIG_SECTIONS = ('experiment', 'dataset', 'partition', 'engine')

SWEEP_PARAMS = {
    'beta': ('engine', 'beta'),
    'malicious_fraction': ('experiment', 'malicious_fraction'),
    'q': ('partition', 'q'),
    'aggregator': ('aggregator', 'kind'),
}


@dataclass(frozen=True)
class DatasetConfig:
    source: str = 'synthetic'
    images: Optional[str] = None
    labels: Optional[str] = None
    num_classes: int = 10
    dim: int = 20
    per_class: int = 100
    spread: float = 0.5

    def __post_init__(self):
        if self.source not in ('synthetic', 'mnist'):
            raise ConfigError(f"unknown source {self.source!r}", 'dataset', 'source')
        if self.source == 'mnist' and (not self.images or not self.labels):
            raise ConfigError("mnist needs images and labels paths", 'dataset', 'images')


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one `run` needs, fully resolved"""
    name: str
    dataset: DatasetConfig
    n_clients: int
    q: float
    num_groups: int
    model_kind: str
    hidden: Tuple[int, ...]
    attack: AttackSpec
    malicious_fraction: float
    selection: str
    engine: EngineConfig
    repeats: int = 1
    seed: int = 0
    threads: int = 1
    detection_epsilon: float = DETECTION_EPSILON
    output_dir: str = 'results'
    save_stats: bool = False
    env: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.repeats < 1:
            raise ConfigError("repeats must be at least 1", 'experiment', 'repeats')
        if self.seed < 0:
            raise ConfigError("seed must be non-negative", 'experiment', 'seed')
        if not 0.0 <= self.malicious_fraction < 1.0:
            raise ConfigError("malicious_fraction must lie in [0, 1)", 'experiment', 'malicious_fraction')
        if self.selection not in ('group', 'random'):
            raise ConfigError(f"unknown selection {self.selection!r}", 'experiment', 'selection')
        if self.detection_epsilon <= 0:
            raise ConfigError("detection_epsilon must be positive", 'experiment', 'detection_epsilon')
        # validates n_clients, q and num_groups
        PartitionSpec(self.n_clients, self.q, self.num_groups)

    @property
    def n_malicious(self) -> int:
        return int(round(self.malicious_fraction * self.n_clients))


@dataclass
class RunResult:
    run: int
    seed: int
    traces: List[RoundTrace]
    malicious: Set[int]
    diverged: bool = False
    divergence_epoch: Optional[int] = None
    reason: Optional[str] = None


def build_experiment(cm: ConfigManager, seed: Optional[int] = None, threads: Optional[int] = None,
                     output: Optional[str] = None) -> ExperimentConfig:
    """Resolve the INI file, FEDLAW_* environment and CLI flags (in rising precedence)"""
    for section in CONFIG_SECTIONS:
        if not cm.has_section(section):
            logger.warning(f"No [{section}] section in {cm.config_path}; using defaults")
    images = env_loader.get_env('MNIST_IMAGES') or cm.get('dataset', 'images', fallback='') or None
    labels = env_loader.get_env('MNIST_LABELS') or cm.get('dataset', 'labels', fallback='') or None
    dataset = DatasetConfig(
        source=cm.get('dataset', 'source', fallback='synthetic'),
        images=images,
        labels=labels,
        num_classes=cm.getint('dataset', 'num_classes', fallback=10),
        dim=cm.getint('dataset', 'dim', fallback=20),
        per_class=cm.getint('dataset', 'per_class', fallback=100),
        spread=cm.getfloat('dataset', 'spread', fallback=0.5),
    )

    attack = AttackSpec(
        kind=cm.get('attack', 'kind', fallback='none'),
        nu1=cm.getfloat('attack', 'nu1', fallback=-5.0),
        nu2=cm.getfloat('attack', 'nu2', fallback=1.5),
        z=cm.get_optional_float('attack', 'z'),
        double_inverse_round=cm.getint('attack', 'double_inverse_round', fallback=2),
        double_global_round=cm.getint('attack', 'double_global_round', fallback=5),
    )

    aggregator = AggregatorSpec(
        kind=cm.get('aggregator', 'kind', fallback='fedavg'),
        krum_m=cm.get_optional_int('aggregator', 'krum_m'),
        trim_fraction=cm.get_optional_float('aggregator', 'trim_fraction'),
        bulyan_pool=cm.get_optional_int('aggregator', 'bulyan_pool'),
        bulyan_inner=cm.get_optional_int('aggregator', 'bulyan_inner'),
        cclip_tau=cm.getfloat('aggregator', 'cclip_tau', fallback=10.0),
        cclip_iters=cm.getint('aggregator', 'cclip_iters', fallback=1),
        rfa_nu=cm.getfloat('aggregator', 'rfa_nu', fallback=1e-6),
        rfa_iters=cm.getint('aggregator', 'rfa_iters', fallback=3),
        huber_tau=cm.getfloat('aggregator', 'huber_tau', fallback=0.2),
        bucketing=cm.get_optional_int('aggregator', 'bucketing'),
    )

    engine = EngineConfig(
        alpha=cm.getfloat('engine', 'alpha', fallback=0.01),
        beta=cm.getfloat('engine', 'beta', fallback=0.01),
        beta_schedule=cm.get('engine', 'beta_schedule', fallback='fixed'),
        beta_power=cm.getfloat('engine', 'beta_power', fallback=0.75),
        epochs=cm.getint('engine', 'epochs', fallback=100),
        local_epochs=cm.getint('engine', 'local_epochs', fallback=1),
        batch_size=cm.getint('engine', 'batch_size', fallback=10),
        s=cm.get_optional_int('engine', 's'),
        t=cm.get_optional_float('engine', 't'),
        weight_update_rounds=cm.get_optional_int('engine', 'weight_update_rounds'),
        clip_radius=cm.get_optional_float('engine', 'clip_radius'),
        algorithm=cm.get('engine', 'algorithm', fallback='fedlaw'),
        aggregator=aggregator,
        precision=cm.get('engine', 'precision', fallback='float32'),
    )

    env_threads = env_loader.get_env_int('THREADS')
    resolved_threads = threads if threads is not None else (
        env_threads if env_threads is not None else cm.getint('experiment', 'threads', fallback=1))

    return ExperimentConfig(
        name=cm.get('experiment', 'name', fallback='fedlaw'),
        dataset=dataset,
        n_clients=cm.getint('partition', 'n_clients', fallback=10),
        q=cm.getfloat('partition', 'q', fallback=0.9),
        num_groups=cm.get_optional_int('partition', 'num_groups') or dataset.num_classes,
        model_kind=cm.get('model', 'kind', fallback='logistic'),
        hidden=tuple(cm.get_int_list('model', 'hidden')),
        attack=attack,
        malicious_fraction=cm.getfloat('experiment', 'malicious_fraction', fallback=0.0),
        selection=cm.get('experiment', 'selection', fallback='group'),
        engine=engine,
        repeats=cm.getint('experiment', 'repeats', fallback=1),
        seed=seed if seed is not None else cm.getint('experiment', 'seed', fallback=0),
        threads=max(1, resolved_threads),
        detection_epsilon=cm.getfloat('experiment', 'detection_epsilon', fallback=DETECTION_EPSILON),
        output_dir=output or cm.get('experiment', 'output', fallback='results'),
        save_stats=cm.getboolean('experiment', 'save_stats', fallback=False),
        env=env_loader.get_config_summary(),
    )


def _load_dataset(cfg: ExperimentConfig, seed: int) -> LabeledDataset:
    ds = cfg.dataset
    if ds.source == 'mnist':
        return load_idx(ds.images, ds.labels, ds.num_classes)
    return synthetic_blobs(ds.num_classes, ds.dim, ds.per_class, ds.spread, seed)


def _stream_seeds(run_seed: int) -> Tuple[int, int, int, int]:
    """Independent seeds for data, split, partition and attacker selection"""
    state = np.random.SeedSequence(run_seed).generate_state(4)
    return tuple(int(x) for x in state)


def prepare_run(cfg: ExperimentConfig, run_seed: int):
    """Dataset, splits, shards and attacker set for one seed"""
    data_seed, split_seed, partition_seed, selection_seed = _stream_seeds(run_seed)
    dataset = _load_dataset(cfg, data_seed)
    train, validation, test = split_80_10_10(dataset, split_seed)
    pspec = PartitionSpec(cfg.n_clients, cfg.q, cfg.num_groups, partition_seed)
    shards = partition_concentration(train, pspec)
    if cfg.selection == 'group':
        malicious = select_malicious_group_oriented(pspec, cfg.n_malicious, selection_seed)
    else:
        malicious = select_malicious_random(cfg.n_clients, cfg.n_malicious, selection_seed)
    return dataset, train, validation, test, shards, malicious


def resolve_engine(cfg: ExperimentConfig, run_seed: int) -> EngineConfig:
    engine = replace(cfg.engine, seed=run_seed)
    if engine.s is None:
        s, t = default_sparsity(cfg.n_clients, cfg.n_malicious / cfg.n_clients)
        engine = replace(engine, s=s, t=t)
    return engine


def execute_run(cfg: ExperimentConfig, run: int, stats: Optional[RunStatsManager] = None) -> RunResult:
    run_seed = cfg.seed + run
    if stats is not None:
        stats.start_run(run, run_seed)
    dataset, train, validation, test, shards, malicious = prepare_run(cfg, run_seed)
    engine = resolve_engine(cfg, run_seed)

    arch = ModelArch(cfg.model_kind, dataset.features.shape[1], dataset.num_classes, cfg.hidden)
    dtype = engine.dtype
    batches = [Batch(train.features[shard.indices].astype(dtype), train.labels[shard.indices])
               for shard in shards]
    image_side = math.isqrt(arch.input_dim) if cfg.dataset.source == 'mnist' else None
    population = ClientPopulation(batches, arch, cfg.attack, malicious, engine.alpha,
                                  engine.local_epochs, engine.batch_size, run_seed,
                                  threads=cfg.threads, image_side=image_side)
    logger.info(f"Run {run}: seed {run_seed}, malicious clients {sorted(malicious)}")

    result = RunResult(run, run_seed, [], malicious)
    try:
        result.traces = run_training(engine, population, arch, validation, test)
    except DivergenceError as e:
        logger.warning(f"Run {run}: {e}")
        result.traces = e.traces
        result.diverged = True
        result.divergence_epoch = e.epoch
        result.reason = e.reason
    if stats is not None:
        stats.finish_run(len(result.traces), result.diverged, result.divergence_epoch, result.reason)
    return result


def _write_curve_csv(path: str, curves: List[np.ndarray], epochs: int):
    matrix = padded_curves(curves, epochs)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['epoch'] + [f'run_{r}' for r in range(len(curves))] + ['mean', 'std'])
        for epoch in range(epochs):
            mean, std = mean_std(matrix[epoch])
            writer.writerow([epoch] + [format_float(v) for v in matrix[epoch]]
                            + [format_float(mean), format_float(std)])


def write_outputs(cfg: ExperimentConfig, results: List[RunResult], output_dir: str,
                  stats: Optional[RunStatsManager] = None):
    """acc_epoch.csv, validation.csv, weights.csv, detection.csv and manifest.json"""
    os.makedirs(output_dir, exist_ok=True)
    epochs = cfg.engine.epochs

    _write_curve_csv(os.path.join(output_dir, 'acc_epoch.csv'),
                     [accuracy_curve(r.traces) if r.traces else np.array([]) for r in results], epochs)
    _write_curve_csv(os.path.join(output_dir, 'validation.csv'),
                     [validation_curve(r.traces) if r.traces else np.array([]) for r in results], epochs)

    with open(os.path.join(output_dir, 'weights.csv'), 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['run', 'epoch', 'client_id', 'weight', 'is_malicious'])
        for r in results:
            for trace in r.traces:
                for client_id, weight in enumerate(trace.w.values):
                    writer.writerow([r.run, trace.epoch, client_id, format_float(weight),
                                     int(client_id in r.malicious)])

    with open(os.path.join(output_dir, 'detection.csv'), 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['run', 'seed', 'tp', 'fp', 'fn', 'tn', 'precision', 'recall', 'f1', 'accuracy'])
        for r in results:
            if not r.traces:
                continue
            report = detection_confusion(r.traces[-1].w, r.malicious, cfg.detection_epsilon)
            writer.writerow([r.run, r.seed, report.tp, report.fp, report.fn, report.tn,
                             format_float(report.precision), format_float(report.recall),
                             format_float(report.f1), format_float(report.accuracy)])

    engine = resolve_engine(cfg, cfg.seed)
    manifest = {
        'config': asdict(cfg),
        'runs': [{'run': r.run, 'seed': r.seed, 'malicious': sorted(r.malicious),
                  'epochs_completed': len(r.traces), 'diverged': r.diverged,
                  'divergence_epoch': r.divergence_epoch, 'divergence_reason': r.reason}
                 for r in results],
        'resolved_sparsity': {'s': engine.s, 't': engine.t},
        'diverged': any(r.diverged for r in results),
    }
    if stats is not None:
        manifest['stats'] = stats.get_comprehensive_stats()
    with open(os.path.join(output_dir, 'manifest.json'), 'w', encoding='utf-8') as f:
        json.dump(manifest, f, ensure_ascii=False, indent=2)


def final_accuracies(results: List[RunResult], epochs: int) -> List[float]:
    """Test accuracy after the last epoch per run; nan for runs that stopped early"""
    finals = []
    for r in results:
        finals.append(r.traces[-1].test_accuracy if len(r.traces) == epochs and epochs > 0 else float('nan'))
    return finals


def run_experiment(cfg: ExperimentConfig, output_dir: str) -> List[RunResult]:
    stats = RunStatsManager()
    logger.info(f"🚀 Experiment '{cfg.name}': {cfg.repeats} run(s), output {output_dir}")
    results = [execute_run(cfg, run, stats) for run in range(cfg.repeats)]
    write_outputs(cfg, results, output_dir, stats)
    if cfg.save_stats:
        stats.save(os.path.join(output_dir, 'run_stats.json'))
    if stats.any_diverged:
        logger.warning(f"⚠️ At least one run diverged; see manifest.json in {output_dir}")
    mean, std = mean_std(final_accuracies(results, cfg.engine.epochs))
    logger.info(f"✅ Final test accuracy {mean:.4f} ± {std:.4f}")
    return results


def cmd_run(args) -> int:
    cfg = build_experiment(ConfigManager(args.config), args.seed, args.threads, args.output)
    run_experiment(cfg, cfg.output_dir)
    return EXIT_OK


def apply_sweep_value(cm: ConfigManager, param: str, value: str):
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"cannot sweep {param!r}; choose one of {sorted(SWEEP_PARAMS)}")
    if param == 'aggregator':
        if value in ('fedlaw', 'bsum'):
            cm.set('engine', 'algorithm', value)
        else:
            cm.set('engine', 'algorithm', 'baseline')
            cm.set('aggregator', 'kind', value)
        return
    section, key = SWEEP_PARAMS[param]
    cm.set(section, key, value)


def _sweep_value(job) -> Tuple[str, List[float], int]:
    config_path, param, value, seed, threads, output_dir = job
    cm = ConfigManager(config_path)
    apply_sweep_value(cm, param, value)
    cfg = build_experiment(cm, seed, threads, output_dir)
    results = run_experiment(cfg, output_dir)
    return value, final_accuracies(results, cfg.engine.epochs), sum(r.diverged for r in results)


def cmd_sweep(args) -> int:
    values = [v.strip() for v in args.values.split(',') if v.strip()]
    if args.param not in SWEEP_PARAMS:
        raise ConfigError(f"cannot sweep {args.param!r}; choose one of {sorted(SWEEP_PARAMS)}")
    if not values:
        raise ConfigError("no sweep values given")
    base = build_experiment(ConfigManager(args.config), args.seed, args.threads, args.output)
    jobs = [(args.config, args.param, value, args.seed, args.threads,
             os.path.join(base.output_dir, f"{args.param}={value}")) for value in values]

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as executor:
            outcomes = list(executor.map(_sweep_value, jobs))
    else:
        outcomes = [_sweep_value(job) for job in jobs]

    os.makedirs(base.output_dir, exist_ok=True)
    with open(os.path.join(base.output_dir, 'summary.csv'), 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['value', 'final_mean', 'final_std', 'runs', 'diverged'])
        for value, finals, diverged in outcomes:
            mean, std = mean_std(finals)
            writer.writerow([value, format_float(mean), format_float(std), len(finals), diverged])
    logger.info(f"Sweep over {args.param}: {len(values)} value(s) written to {base.output_dir}")
    return EXIT_OK


def _parse_vector(text: str) -> np.ndarray:
    try:
        return np.array([float(part) for part in text.split(',') if part.strip()], dtype=np.float64)
    except ValueError:
        raise ConfigError(f"expected comma separated numbers, got {text!r}")


def cmd_project(args) -> int:
    h = _parse_vector(args.input)
    w = project_sparse_capped_simplex(h, SimplexSpec(h.size, args.s, args.t))
    print(','.join(format_float(v) for v in w.values))
    return EXIT_OK


def cmd_partition_stats(args) -> int:
    cfg = build_experiment(ConfigManager(args.config), args.seed, args.threads, args.output)
    _, train, _, _, shards, malicious = prepare_run(cfg, cfg.seed)
    histogram = partition_label_histogram(train, shards)
    writer = csv.writer(sys.stdout, lineterminator='\n')
    writer.writerow(['client_id', 'size', 'is_malicious'] + [f'label_{l}' for l in range(train.num_classes)])
    for shard in shards:
        writer.writerow([shard.client_id, shard.indices.size, int(shard.client_id in malicious)]
                        + histogram[shard.client_id].tolist())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='fedlaw', description='Byzantine-robust federated learning simulator')
    parser.add_argument('--log-level', default=None, help='DEBUG, INFO, WARNING (default: FEDLAW_LOG_LEVEL or INFO)')
    sub = parser.add_subparsers(dest='command', required=True)

    def experiment_flags(p):
        p.add_argument('--config', required=True, help='experiment .ini file')
        p.add_argument('--output', default=None, help='output directory')
        p.add_argument('--seed', type=int, default=None, help='base seed; run r uses seed + r')
        p.add_argument('--threads', type=int, default=None, help='client worker threads')

    run = sub.add_parser('run', help='run the configured experiment')
    experiment_flags(run)
    run.set_defaults(handler=cmd_run)

    sweep = sub.add_parser('sweep', help='one experiment per parameter value')
    experiment_flags(sweep)
    sweep.add_argument('--param', required=True, help=f"one of {', '.join(sorted(SWEEP_PARAMS))}")
    sweep.add_argument('--values', required=True, help='comma separated values')
    sweep.add_argument('--jobs', type=int, default=1, help='values run in parallel processes')
    sweep.set_defaults(handler=cmd_sweep)

    project = sub.add_parser('project', help='project a vector onto the sparse capped simplex')
    project.add_argument('--input', required=True, help='comma separated vector')
    project.add_argument('--s', type=int, required=True)
    project.add_argument('--t', type=float, required=True)
    project.set_defaults(handler=cmd_project)

    stats = sub.add_parser('partition-stats', help='per-client shard sizes and label counts as CSV')
    experiment_flags(stats)
    stats.set_defaults(handler=cmd_partition_stats)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    env_loader.load_environment()
    # keep stdout clean for the commands that print CSV or vectors
    default_level = 'WARNING' if args.command in ('project', 'partition-stats') else 'INFO'
    setup_logging(args.log_level or env_loader.get_env('LOG_LEVEL') or default_level,
                  env_loader.get_env('LOG_FILE'))
    try:
        return args.handler(args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except (SimulatorError, OSError) as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return EXIT_RUNTIME
