"""Federated training loop: sampling, local training, weighting, aggregation, evaluation."""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .aggregation import (
    ClientUpdate,
    FedVGConfig,
    Hyperparams,
    Strategy,
    StrategyState,
    Weighting,
    aggregate,
    client_payload,
    fedavg_weights,
    fedvg_weights,
    hybrid_mean_weights,
    init_state,
    local_gradient,
    parse_strategy,
)
from .data import Dataset, dirichlet_partition, imbalance_sample, load_csv, make_blobs, split_train_val_test
from .errors import ConfigError, InputError, NumericError
from .models import ModelTopology, build_mlp, build_tiny_cnn
from .nn import SGD, LayeredParams, accuracy, backward, cross_entropy, forward
from .scoring import Granularity, NormKind, ScoreVector

log = logging.getLogger(__name__)

# stream tags for SeedSequence([master_seed, tag, ...])
_DATA, _SPLIT, _PARTITION, _INIT, _IMBALANCE, _SAMPLE, _CLIENT = range(1, 8)


@dataclass
class ExperimentConfig:
    # data
    dataset: str = "blobs"
    num_classes: int = 5
    samples_per_class: int = 200
    feature_dim: int = 8
    class_separation: float = 3.0
    noise_std: float = 1.0
    csv_path: str | None = None
    image_shape: tuple[int, ...] | None = None
    val_frac: float = 0.10
    test_frac: float = 0.25
    imbalance_rho: float | None = None
    # model
    model: str = "mlp"
    hidden: tuple[int, ...] = (16,)
    # federation
    num_clients: int = 10
    join_ratio: float = 0.1
    alpha: float = 0.1
    rounds: int = 200
    strategy: str = "fedvg"
    weighting: str | None = None
    # local training
    local_epochs: int = 5
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.0
    # validation-gradient scoring
    norm: str = "l1"
    granularity: str = "modelwise"
    epsilon: float = 1e-8
    delta_inner: str = "l2"
    # baseline hyperparameters
    server_momentum: float = 0.9
    mu: float = 0.01
    feddyn_alpha: float = 0.1
    max_grad_norm: float = 10.0
    global_lr: float = 1.0
    seed: int = 0
    threads: int = 1

    def validate(self) -> None:
        def bad(name, why):
            raise ConfigError(f"invalid value {getattr(self, name)!r}: {why}", field=name)

        if self.dataset not in ("blobs", "csv"):
            bad("dataset", "expected 'blobs' or 'csv'")
        if self.dataset == "csv" and not self.csv_path:
            bad("csv_path", "required when dataset = csv")
        if self.model not in ("mlp", "cnn"):
            bad("model", "expected 'mlp' or 'cnn'")
        if self.model == "cnn" and not self.image_shape:
            bad("image_shape", "required for the cnn model")
        for name in ("num_classes", "samples_per_class", "feature_dim", "num_clients", "rounds",
                     "batch_size", "threads"):
            if getattr(self, name) < 1:
                bad(name, "must be >= 1")
        if self.local_epochs < 0:
            bad("local_epochs", "must be >= 0")
        if not 0 < self.join_ratio <= 1:
            bad("join_ratio", "must lie in (0, 1]")
        if not self.alpha > 0:
            bad("alpha", "must be positive")
        if self.lr < 0:
            bad("lr", "must be non-negative")
        if not 0 <= self.momentum < 1:
            bad("momentum", "must lie in [0, 1)")
        if self.epsilon < 0:
            bad("epsilon", "must be non-negative")
        if self.imbalance_rho is not None and not 0 < self.imbalance_rho <= 1:
            bad("imbalance_rho", "must lie in (0, 1]")
        try:
            _, weighting = parse_strategy(self.strategy, self.weighting)
        except ValueError:
            bad("strategy", "unknown strategy")
        for name, enum in (("norm", NormKind), ("granularity", Granularity), ("delta_inner", NormKind)):
            try:
                enum(getattr(self, name))
            except ValueError:
                bad(name, f"expected one of {[e.value for e in enum]}")
        if self.delta_inner not in ("l1", "l2"):
            bad("delta_inner", "expected l1 or l2")
        if weighting is not Weighting.SIZE and self.val_frac <= 0:
            bad("val_frac", "validation-gradient weighting needs a non-empty validation set")

    @property
    def fedvg(self) -> FedVGConfig:
        return FedVGConfig(NormKind(self.norm), Granularity(self.granularity), self.epsilon,
                           NormKind(self.delta_inner))

    @property
    def hyper(self) -> Hyperparams:
        return Hyperparams(self.server_momentum, self.mu, self.feddyn_alpha, self.max_grad_norm, self.global_lr)


@dataclass
class RoundRecord:
    round: int
    sampled: list[int]
    scores: dict[int, float]
    mean_norms: dict[int, float] | None
    val_loss: float
    test_acc: float
    wall_time: float = 0.0


@dataclass
class ExperimentResult:
    records: list[RoundRecord]
    final_params: LayeredParams
    topology: ModelTopology
    best_round: int
    best_acc: float
    best_params: LayeredParams
    wall_time: float = 0.0

    @property
    def final_acc(self) -> float:
        return self.records[-1].test_acc if self.records else float("nan")


@dataclass
class RoundContext:
    """What a per-round callback sees, before aggregation."""

    round: int
    sampled: list[int]
    global_params: LayeredParams
    client_params: dict[int, LayeredParams]
    weights: ScoreVector
    topology: ModelTopology
    val: Dataset


@dataclass
class FederatedData:
    clients: list[Dataset]
    val: Dataset
    test: Dataset
    partition_alpha: float = field(default=float("nan"))


def seed_stream(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def _sub_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def num_sampled(num_clients: int, join_ratio: float) -> int:
    # round() guards against 0.3 * 10 = 3.0000000000000004
    return max(1, math.ceil(round(join_ratio * num_clients, 9)))


def sample_clients(num_clients: int, join_ratio: float, master_seed: int, round_index: int) -> list[int]:
    """ceil(p*K) distinct client ids, sorted; all ids when p = 1."""
    m = num_sampled(num_clients, join_ratio)
    if m >= num_clients:
        return list(range(num_clients))
    rng = seed_stream(master_seed, _SAMPLE, round_index)
    return sorted(int(k) for k in rng.choice(num_clients, size=m, replace=False))


def local_train(global_params: LayeredParams, topology, data: Dataset, config: ExperimentConfig,
                strategy: Strategy, state: StrategyState | None, client_id: int,
                seed: int) -> tuple[LayeredParams, ClientUpdate]:
    """E epochs of shuffled mini-batch SGD on the strategy's local objective."""
    n = len(data)
    if n == 0:
        raise InputError(f"client {client_id} has no samples")
    rng = np.random.default_rng(seed)
    opt = SGD(config.lr, config.momentum)
    theta = global_params
    steps = 0
    for _ in range(config.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = backward(theta, data.features[idx], data.labels[idx], topology)
            if not math.isfinite(loss) or not grads.is_finite():
                raise NumericError(f"client {client_id}: non-finite loss/gradient at local step {steps}")
            grads = local_gradient(strategy, grads, theta, global_params, state, client_id)
            theta = opt.step(theta, grads)
            steps += 1
    if not theta.is_finite():
        raise NumericError(f"client {client_id}: parameters became non-finite")
    delta = global_params - theta
    payload = client_payload(strategy, state, client_id, delta, steps, config.lr) if state else {}
    return theta, ClientUpdate(client_id, delta, n, payload)


def build_model(config: ExperimentConfig, num_classes: int, input_dim: int, seed: int):
    if config.model == "cnn":
        return build_tiny_cnn(config.image_shape, num_classes, seed)
    return build_mlp(input_dim, config.hidden, num_classes, seed)


def prepare_data(config: ExperimentConfig) -> FederatedData:
    s = config.seed
    if config.dataset == "csv":
        ds = load_csv(config.csv_path)
        if ds.num_classes < config.num_classes:
            ds = Dataset(ds.features, ds.labels, config.num_classes)
    else:
        ds = make_blobs(config.num_classes, config.samples_per_class, config.feature_dim,
                        config.class_separation, config.noise_std, _sub_seed(s, _DATA))
    if config.model == "cnn":
        ds = ds.reshape_features(config.image_shape)
    train, val, test = split_train_val_test(ds, config.val_frac, config.test_frac, _sub_seed(s, _SPLIT))
    if config.imbalance_rho is not None and len(val):
        val = imbalance_sample(val, config.imbalance_rho, _sub_seed(s, _IMBALANCE))
    part = dirichlet_partition(train, config.num_clients, config.alpha, _sub_seed(s, _PARTITION))
    return FederatedData([train.subset(ix) for ix in part.client_indices], val, test, config.alpha)


def _evaluate(params, topology, val: Dataset, test: Dataset) -> tuple[float, float]:
    val_loss = cross_entropy(forward(params, val.features, topology), val.labels) if len(val) else float("nan")
    return val_loss, accuracy(params, test.features, test.labels, topology)


def _thread_count(config: ExperimentConfig) -> int:
    cap = os.environ.get("FEDVG_THREADS")
    n = config.threads
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            pass
    return n


def run_federated(config: ExperimentConfig, topology: ModelTopology, init: LayeredParams, data: FederatedData,
                  callback: Callable[[RoundContext], None] | None = None) -> ExperimentResult:
    """The training loop proper, on already prepared client data."""
    strategy, weighting = parse_strategy(config.strategy, config.weighting)
    if weighting is not Weighting.SIZE and len(data.val) == 0:
        raise InputError("validation-gradient weighting needs a non-empty validation set")
    num_clients = len(data.clients)
    state = init_state(strategy, init, num_clients, config.hyper)
    fedvg_cfg = config.fedvg
    theta_g = init
    records: list[RoundRecord] = []
    best = (-1.0, 0, init)
    threads = _thread_count(config)
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    t_start = time.perf_counter()
    try:
        for t in range(1, config.rounds + 1):
            t0 = time.perf_counter()
            sampled = sample_clients(num_clients, config.join_ratio, config.seed, t)

            def train(k, theta_g=theta_g, t=t):
                try:
                    return local_train(theta_g, topology, data.clients[k], config, strategy, state, k,
                                       _sub_seed(config.seed, _CLIENT, t, k))
                except NumericError as exc:
                    raise NumericError(f"round {t}: {exc}") from exc

            results = list(pool.map(train, sampled)) if pool else [train(k) for k in sampled]
            client_params = {k: theta for k, (theta, _) in zip(sampled, results)}
            updates = [u for _, u in results]

            if weighting is Weighting.SIZE:
                weights = fedavg_weights(updates)
            else:
                weights = fedvg_weights(client_params, topology, data.val, fedvg_cfg, theta_g)
                if weighting is Weighting.MEAN:
                    size_w = fedavg_weights(updates)
                    if weights.table is not None:
                        size_w = size_w.broadcast(weights.granularity, weights.layer_groups)
                    weights = hybrid_mean_weights(size_w, weights)
            if callback is not None:
                callback(RoundContext(t, sampled, theta_g, client_params, weights, topology, data.val))

            theta_g = aggregate(theta_g, updates, weights, state)
            if not theta_g.is_finite():
                raise NumericError(f"round {t}: global model became non-finite")
            val_loss, acc = _evaluate(theta_g, topology, data.val, data.test)
            records.append(RoundRecord(t, sampled, dict(weights.scores), dict(weights.norms) or None,
                                       val_loss, acc, time.perf_counter() - t0))
            if acc > best[0]:
                best = (acc, t, theta_g)
            log.debug("round %d acc %.4f val_loss %.4f", t, acc, val_loss)
    finally:
        if pool:
            pool.shutdown()
    return ExperimentResult(records, theta_g, topology, best[1], best[0], best[2], time.perf_counter() - t_start)


def run_experiment(config: ExperimentConfig, callback: Callable[[RoundContext], None] | None = None,
                   rounds: int | None = None) -> ExperimentResult:
    """Build data and model from ``config`` and run it. ``rounds`` truncates the run."""
    config.validate()
    if rounds is not None:
        config = replace(config, rounds=rounds)
    data = prepare_data(config)
    input_dim = int(np.prod(data.clients[0].features.shape[1:]))
    topology, init = build_model(config, data.test.num_classes, input_dim, _sub_seed(config.seed, _INIT))
    return run_federated(config, topology, init, data, callback)
