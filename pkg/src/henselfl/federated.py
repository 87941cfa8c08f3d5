"""In-process simulation of the federated training protocol.

Pre-training: the server broadcasts the architecture, initial parameters and
the (compressed) input side length; every client turns its raw shard into a
private dataset exactly once.  Each round: clients train locally from the
current global parameters and upload a pseudo-gradient, the server averages
them in client-id order and takes one descent step.
"""

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import (PipelineConfig, PrivateDataset, RawDataset, load_private_dataset,
                   prepare_private_dataset, save_private_dataset)
from .exceptions import AggregationError, ClientError, ConfigError, ProtocolError
from .hensel import CompressionConfig
from .nn import Architecture, ModelParams, evaluate_accuracy, init_params, predict_logits, sgd_step, train_epoch
from .privacy import (STREAM_CLIENT, STREAM_INIT, STREAM_PARTITION, STREAM_TEST_NOISE,
                      STREAM_TRAIN_NOISE, derive_seed, make_generator)


@dataclass(frozen=True)
class Hyperparameters:
    local_epochs: int = 1
    batch_size: int = 64
    lr: float = 0.05
    server_lr: float = 1.0

    def __post_init__(self):
        if self.local_epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.server_lr <= 0:
            raise ConfigError(f"invalid hyperparameters: {self}")


@dataclass(frozen=True)
class ProtocolConfig:
    arch: Architecture
    n_clients: int = 4
    seed: int = 0
    hyper: Hyperparameters = Hyperparameters()


def _protocol(config):
    return config if isinstance(config, ProtocolConfig) else config.protocol()


@dataclass(frozen=True)
class Broadcast:
    arch: Architecture
    vector: np.ndarray
    dimension: int
    round: int = 0

    def params(self):
        return ModelParams(self.arch, self.vector)


@dataclass(frozen=True)
class RoundRecord:
    round: int
    client_grad_norms: tuple
    aggregate_grad_norm: float
    accuracy: float = float("nan")
    wall_time: float = 0.0


@dataclass
class ServerState:
    params: ModelParams
    roster: tuple
    hyper: Hyperparameters
    round: int = 0
    eval_set: PrivateDataset = None
    history: list = field(default_factory=list)

    @property
    def arch(self):
        return self.params.arch

    def broadcast(self):
        return Broadcast(self.arch, self.params.flatten(), self.arch.side, self.round)


def server_init(config, eval_set=None):
    """Build the initial server state and the pre-training broadcast."""
    proto = _protocol(config)
    if proto.n_clients < 1:
        raise ConfigError(f"roster needs at least one client, got {proto.n_clients}")
    params = init_params(proto.arch, derive_seed(proto.seed, STREAM_INIT))
    server = ServerState(params, tuple(range(proto.n_clients)), proto.hyper, eval_set=eval_set)
    return server, server.broadcast()


def partition_iid(n_items, n_clients, seed):
    """Deal a seeded permutation of ``range(n_items)`` round-robin to clients."""
    order = make_generator(seed, STREAM_PARTITION).permutation(n_items)
    return [np.sort(order[k::n_clients]) for k in range(n_clients)]


@dataclass
class ClientState:
    client_id: int
    shard: RawDataset
    indices: np.ndarray
    seed: int
    private: PrivateDataset = None
    params: ModelParams = None

    def prepare(self, config, cache_path=None):
        """Build the private shard; later calls return the cached one untouched."""
        if self.private is not None:
            return self.private
        if cache_path is not None and Path(cache_path).exists():
            self.private = load_private_dataset(cache_path)
        else:
            self.private = prepare_private_dataset(self.shard, config, STREAM_TRAIN_NOISE, self.indices)
            if cache_path is not None:
                save_private_dataset(self.private, cache_path)
        return self.private


def client_pretrain(shard, broadcast, config, client_id=0, indices=None, seed=None, cache_path=None):
    """Create a client and run its one-time compress-and-noise preprocessing."""
    if indices is None:
        indices = np.arange(len(shard))
    if seed is None:
        seed = derive_seed(getattr(config, "seed", 0), STREAM_CLIENT, client_id)
    client = ClientState(client_id, shard, np.asarray(indices), seed)
    private = client.prepare(config, cache_path)
    if len(private) and private.side != broadcast.dimension:
        raise ProtocolError(
            f"client {client_id} produced {private.side}x{private.side} images, "
            f"server expects {broadcast.dimension}")
    client.params = broadcast.params()
    return client


def client_round(client, global_params, hyper, round_index=0):
    """Local training from ``global_params``; returns the uploaded pseudo-gradient.

    The upload is the sum of the local step gradients, which equals
    ``(global - local) / lr`` for the constant local learning rate and is
    exactly the loss gradient when training is a single full batch step.
    """
    if client.private is None:
        raise ClientError(client.client_id, "private dataset not prepared")
    if len(client.private) == 0:
        raise ClientError(client.client_id, "empty shard")
    if isinstance(global_params, Broadcast):
        global_params = global_params.params()
    params = global_params.copy()
    upload = np.zeros_like(params.vector)
    seed = derive_seed(client.seed, round_index)
    for epoch in range(hyper.local_epochs):
        params, grad_sum = train_epoch(params, client.private.images, client.private.labels,
                                       hyper.lr, hyper.batch_size, seed, epoch)
        upload += grad_sum
    client.params = params
    return upload


def aggregate(gradients):
    """Unweighted component-wise mean, summed in the order given."""
    gradients = list(gradients)
    if not gradients:
        raise AggregationError("no gradients to aggregate")
    length = len(gradients[0])
    total = np.zeros(length)
    for k, g in enumerate(gradients):
        if len(g) != length:
            raise ProtocolError(f"gradient {k} has length {len(g)}, expected {length}")
        total += g
    return total / len(gradients)


def run_round(server, clients, hyper=None):
    """One synchronous round; returns the new server state and its record."""
    hyper = hyper or server.hyper
    if not clients:
        raise ProtocolError("round aborted: no participating clients")
    start = time.perf_counter()
    broadcast = server.broadcast()
    uploads = []
    for client in sorted(clients, key=lambda c: c.client_id):
        try:
            uploads.append(client_round(client, broadcast, hyper, server.round))
        except ClientError:
            raise
        except Exception as exc:
            raise ClientError(client.client_id, f"dropped out: {exc}") from exc
    mean = aggregate(uploads)
    params = sgd_step(server.params, mean, hyper.server_lr * hyper.lr)
    accuracy = float("nan")
    if server.eval_set is not None and len(server.eval_set):
        accuracy = evaluate_accuracy(params, server.eval_set.images, server.eval_set.labels)
    record = RoundRecord(
        round=server.round + 1,
        client_grad_norms=tuple(float(np.linalg.norm(u)) for u in uploads),
        aggregate_grad_norm=float(np.linalg.norm(mean)),
        accuracy=accuracy,
        wall_time=time.perf_counter() - start,
    )
    new_server = replace(server, params=params, round=server.round + 1,
                         history=[*server.history, record])
    return new_server, record


METRICS_HEADER = ["round", "client_grad_norms", "aggregate_grad_norm", "accuracy", "wall_time_s"]


def append_metrics(path, record):
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(METRICS_HEADER)
        writer.writerow([
            record.round,
            ";".join(f"{n:.6g}" for n in record.client_grad_norms),
            f"{record.aggregate_grad_norm:.6g}",
            f"{record.accuracy:.6f}",
            f"{record.wall_time:.3f}",
        ])


def run_federated(server, clients, rounds, hyper=None, metrics_path=None, log=None):
    for _ in range(rounds):
        server, record = run_round(server, clients, hyper)
        if metrics_path is not None:
            append_metrics(metrics_path, record)
        if log is not None:
            log(record)
    return server


class FederatedHenselClassifier(ClassifierMixin, BaseEstimator):
    """Federated training on privately preprocessed 8-bit images.

    ``fit`` deals the training images to ``n_clients`` clients, has each one
    compress and noise its shard once, then runs ``rounds`` rounds.
    ``predict`` pushes images through the same pipeline on a separate noise
    stream before classifying them.
    """

    def __init__(self, base=256, block_shape=(2, 2), epsilon=2.0, sensitivity=1.0,
                 n_clients=4, rounds=10, local_epochs=1, batch_size=64, learning_rate=0.05,
                 server_lr=1.0, conv_channels=(8, 16), hidden=(128, 64), dropout=0.5,
                 random_state=0):
        self.base = base
        self.block_shape = block_shape
        self.epsilon = epsilon
        self.sensitivity = sensitivity
        self.n_clients = n_clients
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.server_lr = server_lr
        self.conv_channels = conv_channels
        self.hidden = hidden
        self.dropout = dropout
        self.random_state = random_state

    def _pipeline(self):
        compression = CompressionConfig(self.base, *self.block_shape)
        return PipelineConfig(compression, self.epsilon, self.sensitivity, self.random_state)

    def fit(self, X, y):
        raw = RawDataset(X, np.asarray(y, dtype=np.int64))
        pipe = self._pipeline()
        side, cols = pipe.compression.reduced_shape(*raw.images.shape[1:])
        if side != cols:
            raise ConfigError(f"compressed images must be square, got {side}x{cols}")
        arch = Architecture(side, self.conv_channels, self.hidden, self.dropout)
        hyper = Hyperparameters(self.local_epochs, self.batch_size, self.learning_rate, self.server_lr)
        proto = ProtocolConfig(arch, self.n_clients, self.random_state, hyper)
        server, broadcast = server_init(proto)
        clients = [
            client_pretrain(raw.subset(idx), broadcast, pipe, k, idx,
                            derive_seed(self.random_state, STREAM_CLIENT, k))
            for k, idx in enumerate(partition_iid(len(raw), self.n_clients, self.random_state))
        ]
        server = run_federated(server, clients, self.rounds)
        self.params_ = server.params
        self.history_ = server.history
        self.classes_ = np.arange(arch.n_classes)
        return self

    def transform_private(self, X):
        raw = RawDataset(X, np.zeros(len(np.asarray(X)), dtype=np.int64))
        return prepare_private_dataset(raw, self._pipeline(), STREAM_TEST_NOISE).images

    def predict(self, X):
        check_is_fitted(self, "params_")
        return self.classes_[predict_logits(self.params_, self.transform_private(X)).argmax(axis=1)]
