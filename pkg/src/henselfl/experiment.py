"""Scenario grid runner: preparation, federated training, evaluation, reports."""

import csv
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import (PipelineConfig, compress_normalize, dump_image, load_mnist, load_private_dataset,
                   prepare_compressed_dataset, prepare_private_dataset, save_private_dataset)
from .exceptions import ConfigError
from .federated import (Hyperparameters, ProtocolConfig, append_metrics, client_pretrain,
                        partition_iid, run_round, server_init)
from .hensel import CompressionConfig
from .nn import Architecture, evaluate_accuracy, save_checkpoint
from .privacy import STREAM_CLIENT, STREAM_TEST_NOISE, PrivacyParams, cumulative_leakage, derive_seed

log = logging.getLogger(__name__)

DATA_DIR_ENV = "HENSELFL_DATA_DIR"
MNIST_SIDE = 28

# scenario -> (block side, default base, data size %)
SCENARIOS = {1: (1, 256, 100.0), 2: (2, 256, 25.0), 3: (4, 16, 6.25)}
GRID_EPSILONS = (2.0, 1.5, 1.25)

# Reference values reported for each grid cell (variance as printed, test accuracy %).
REFERENCE_VARIANCE = {2.0: 0.25, 1.5: 0.44, 1.25: 0.64}
REFERENCE_ACCURACY = {
    (1, 2.0): ">97", (1, 1.5): ">97", (1, 1.25): ">97",
    (2, 2.0): "97.53", (2, 1.5): "96.56", (2, 1.25): "94.09",
    (3, 2.0): "82.28", (3, 1.5): "76.56", (3, 1.25): "69.84",
}

FAST_TRAIN_IMAGES = 8000
FAST_TEST_IMAGES = 2000
FAST_ROUNDS = 5


def default_data_dir():
    return os.environ.get(DATA_DIR_ENV, "data/mnist")


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: int = 2
    epsilon: float = 2.0
    base: int = None
    sensitivity: float = 1.0
    n_clients: int = 4
    rounds: int = 10
    local_epochs: int = 1
    batch_size: int = 64
    lr: float = 0.05
    server_lr: float = 1.0
    conv_channels: tuple = (8, 16)
    hidden: tuple = (128, 64)
    dropout: float = 0.5
    seed: int = 0
    noise_test: bool = False
    train_limit: int = None
    test_limit: int = None
    data_dir: str = field(default_factory=default_data_dir)
    out_dir: str = "runs"

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {sorted(SCENARIOS)}, got {self.scenario}")
        if self.base is None:
            object.__setattr__(self, "base", SCENARIOS[self.scenario][1])
        object.__setattr__(self, "epsilon", float(self.epsilon))
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        object.__setattr__(self, "hidden", tuple(self.hidden))
        object.__setattr__(self, "data_dir", str(self.data_dir))
        object.__setattr__(self, "out_dir", str(self.out_dir))
        try:
            PrivacyParams(self.epsilon, self.sensitivity, self.seed)
            self.compression()
            self.hyper()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.n_clients < 1 or self.rounds < 0:
            raise ConfigError(f"need n_clients >= 1 and rounds >= 0, got {self.n_clients}, {self.rounds}")

    @classmethod
    def fast(cls, **overrides):
        """Desk-check settings: 8k training images, 2k test images, 5 rounds."""
        settings = dict(train_limit=FAST_TRAIN_IMAGES, test_limit=FAST_TEST_IMAGES, rounds=FAST_ROUNDS)
        settings.update(overrides)
        return cls(**settings)

    @property
    def test_treatment(self):
        return "compressed+noised" if self.noise_test else "compressed"

    @property
    def block(self):
        return SCENARIOS[self.scenario][0]

    @property
    def dimension(self):
        return MNIST_SIDE // self.block

    @property
    def data_size_percent(self):
        return SCENARIOS[self.scenario][2]

    def compression(self):
        return CompressionConfig(self.base, self.block, self.block)

    def pipeline(self):
        return PipelineConfig(self.compression(), self.epsilon, self.sensitivity, self.seed)

    def hyper(self):
        return Hyperparameters(self.local_epochs, self.batch_size, self.lr, self.server_lr)

    def architecture(self):
        return Architecture(self.dimension, self.conv_channels, self.hidden, self.dropout)

    def protocol(self):
        return ProtocolConfig(self.architecture(), self.n_clients, self.seed, self.hyper())

    def to_dict(self):
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["hidden"] = list(self.hidden)
        return d

    def config_hash(self):
        """Hash of every setting except where outputs are written."""
        settings = self.to_dict()
        del settings["out_dir"]
        blob = json.dumps(settings, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def preparation_hash(self):
        """Hash of only the fields that influence the private datasets."""
        keys = ("scenario", "epsilon", "base", "sensitivity", "n_clients", "seed",
                "train_limit", "test_limit", "data_dir")
        blob = json.dumps({k: getattr(self, k) for k in keys}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def run_dir(self):
        return Path(self.out_dir) / f"scenario{self.scenario}_eps{self.epsilon:g}_{self.config_hash()}"

    @property
    def cache_dir(self):
        return Path(self.out_dir) / "cache" / self.preparation_hash()


@dataclass
class RunReport:
    config_hash: str
    scenario: int
    epsilon: float
    dimension: int
    data_size_percent: float
    variance: float
    leakage: float
    baseline_leakage: float
    rounds: int
    train_images: int
    test_images: int
    test_treatment: str
    final_accuracy: float
    clean_test_accuracy: float
    noisy_test_accuracy: float
    accuracy_per_round: list

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def write_manifest(config, path):
    lines = [f"{f.name} = {getattr(config, f.name)!r}" for f in fields(config)]
    lines += [
        f"block_shape = {config.block}x{config.block}",
        f"dimension = {config.dimension}",
        f"gaussian_variance = {config.pipeline().privacy().variance()!r}",
        f"config_hash = {config.config_hash()}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def _prepare_test(config, noised, cache=True):
    path = config.cache_dir / ("test_noised.npz" if noised else "test_clean.npz")
    if cache and path.exists():
        return load_private_dataset(path)
    raw = load_mnist(config.data_dir, "test", config.test_limit)
    if noised:
        prepared = prepare_private_dataset(raw, config, STREAM_TEST_NOISE)
    else:
        prepared = prepare_compressed_dataset(raw, config)
    if cache:
        save_private_dataset(prepared, path)
    return prepared


def prepare_test_sets(config, cache=True):
    """Return ``(evaluation set, other set)``; which one is noised follows ``config.noise_test``."""
    clean = _prepare_test(config, False, cache)
    noisy = _prepare_test(config, True, cache)
    return (noisy, clean) if config.noise_test else (clean, noisy)


def prepare_clients(config, broadcast, cache=True):
    """Load the training set, deal it to clients and run each client's preprocessing."""
    raw = load_mnist(config.data_dir, "train", config.train_limit)
    clients = []
    for k, idx in enumerate(partition_iid(len(raw), config.n_clients, config.seed)):
        path = config.cache_dir / f"client{k}.npz" if cache else None
        seed = derive_seed(config.seed, STREAM_CLIENT, k)
        clients.append(client_pretrain(raw.subset(idx), broadcast, config, k, idx, seed, path))
    return clients


def prepare(config, cache=True):
    """Build (or load from cache) every client shard and the test set."""
    _, broadcast = server_init(config)
    clients = prepare_clients(config, broadcast, cache)
    return clients, prepare_test_sets(config, cache)[0]


def run_scenario(config, cache=True, write=True):
    """Prepare, train and evaluate one grid cell; returns its :class:`RunReport`."""
    log.info("scenario %d, epsilon %g: preparing data", config.scenario, config.epsilon)
    test_set, other_set = prepare_test_sets(config, cache)
    server, broadcast = server_init(config, eval_set=test_set)
    clients = prepare_clients(config, broadcast, cache)
    run_dir = config.run_dir
    metrics = None
    if write:
        run_dir.mkdir(parents=True, exist_ok=True)
        metrics = run_dir / "metrics.csv"
        metrics.unlink(missing_ok=True)
        write_manifest(config, run_dir / "manifest.txt")
    for _ in range(config.rounds):
        server, record = run_round(server, clients)
        log.info("round %d: accuracy %.4f (%.1fs)", record.round, record.accuracy, record.wall_time)
        if metrics is not None:
            append_metrics(metrics, record)
    accuracies = [r.accuracy for r in server.history]
    final = accuracies[-1] if accuracies else evaluate_accuracy(server.params, test_set.images, test_set.labels)
    other = evaluate_accuracy(server.params, other_set.images, other_set.labels)
    clean_acc, noisy_acc = (other, final) if config.noise_test else (final, other)
    report = RunReport(
        config_hash=config.config_hash(),
        scenario=config.scenario,
        epsilon=config.epsilon,
        dimension=config.dimension,
        data_size_percent=config.data_size_percent,
        variance=config.pipeline().privacy().variance(),
        leakage=cumulative_leakage(config.epsilon, 1),
        baseline_leakage=cumulative_leakage(config.epsilon, config.rounds),
        rounds=config.rounds,
        train_images=sum(len(c.private) for c in clients),
        test_images=len(test_set),
        test_treatment=config.test_treatment,
        final_accuracy=final,
        clean_test_accuracy=clean_acc,
        noisy_test_accuracy=noisy_acc,
        accuracy_per_round=accuracies,
    )
    if write:
        (run_dir / "report.json").write_text(report.to_json())
        save_checkpoint(server.params, run_dir / "model.ckpt")
    return report


def grid_configs(base):
    return [replace(base, scenario=s, epsilon=e, base=SCENARIOS[s][1])
            for s in sorted(SCENARIOS) for e in GRID_EPSILONS]


SUMMARY_HEADER = ["scenario", "dimension", "data_size_percent", "epsilon", "variance", "reference_variance",
                  "final_accuracy", "noisy_test_accuracy", "reference_accuracy", "leakage", "baseline_leakage"]


def summary_rows(reports):
    return [[r.scenario, f"{r.dimension}x{r.dimension}", r.data_size_percent, r.epsilon,
             round(r.variance, 6), REFERENCE_VARIANCE.get(r.epsilon, ""), round(r.final_accuracy, 6),
             round(r.noisy_test_accuracy, 6), REFERENCE_ACCURACY.get((r.scenario, r.epsilon), ""),
             r.leakage, r.baseline_leakage]
            for r in reports]


def write_grid_outputs(reports, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "grid_summary.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_HEADER)
        writer.writerows(summary_rows(reports))
    with (out_dir / "grid_accuracy.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenario", "epsilon", "round", "accuracy"])
        for r in reports:
            for i, acc in enumerate(r.accuracy_per_round, start=1):
                writer.writerow([r.scenario, r.epsilon, i, acc])


def format_summary(reports):
    rows = [SUMMARY_HEADER] + [[str(v) for v in row] for row in summary_rows(reports)]
    widths = [max(len(row[i]) for row in rows) for i in range(len(SUMMARY_HEADER))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in rows)


def run_grid(base, cache=True):
    """Run all nine scenario/epsilon cells in grid order and write the summary CSVs."""
    reports = [run_scenario(cfg, cache) for cfg in grid_configs(base)]
    write_grid_outputs(reports, base.out_dir)
    return reports


def dump_samples(config, count, out_dir=None):
    """Write ``count`` noisy and pre-noise PGM samples for one grid cell."""
    if count <= 0:
        return []
    out_dir = Path(out_dir or Path(config.out_dir) / "samples" / f"scenario{config.scenario}_eps{config.epsilon:g}")
    raw = load_mnist(config.data_dir, "train", count)
    clean = compress_normalize(raw.images, config.compression())
    noisy = prepare_private_dataset(raw, config).images
    written = []
    for i in range(len(raw)):
        written.append(dump_image(clean[i], out_dir / f"{i:04d}_label{raw.labels[i]}_clean.pgm", (0.0, 1.0)))
        written.append(dump_image(noisy[i], out_dir / f"{i:04d}_label{raw.labels[i]}_noisy.pgm"))
    return written
