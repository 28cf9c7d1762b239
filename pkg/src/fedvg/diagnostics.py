"""Self-checks: finite-difference gradient audit, Fisher identity audit, norm ablation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, apportion, make_blobs
from .errors import InputError, SamplingError
from .federated import ExperimentConfig, FederatedData, run_federated
from .models import LayerSpec, ModelTopology, build_mlp, build_tiny_cnn, init_params
from .nn import LayeredParams, accuracy, backward, cross_entropy, forward, log_softmax
from .scoring import fisher_diag, per_sample_grads


@dataclass
class GradAuditReport:
    name: str
    max_rel_error: float
    tolerance: float
    num_params: int
    passed: bool

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FisherAuditReport:
    name: str
    trace: float
    fisher_sum: float
    max_rel_error: float
    max_sample_grad_norm: float
    max_fisher_entry: float
    zero_limit_ok: bool
    passed: bool

    def to_dict(self) -> dict:
        return asdict(self)


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, abs_floor: float = 1e-10) -> np.ndarray:
    """|a - n| / max(|a|, |n|), with differences below ``abs_floor`` counted as exact."""
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.divide(diff, scale, out=np.zeros_like(diff), where=scale > 0)
    rel[diff <= abs_floor] = 0.0
    return rel


def finite_difference_grad(params: LayeredParams, x, y, topology, h: float = 1e-5) -> np.ndarray:
    flat = params.flat()
    out = np.empty_like(flat)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        up = cross_entropy(forward(params.with_flat(flat), x, topology), y)
        flat[i] = saved - h
        down = cross_entropy(forward(params.with_flat(flat), x, topology), y)
        flat[i] = saved
        out[i] = (up - down) / (2 * h)
    return out


def grad_audit(topology: ModelTopology, seed: int = 0, tolerance: float = 1e-4, batch: int = 3,
               h: float = 1e-5, inject_fault: bool = False, abs_floor: float = 1e-10,
               name: str = "grad_audit") -> GradAuditReport:
    """Backprop vs central differences on a random model and batch."""
    params = init_params(topology, seed)
    rng = np.random.default_rng([seed, 7])
    # biases start at zero; perturb them so every parameter is exercised
    params = params.map(lambda t: t + 0.1 * rng.standard_normal(t.shape) if t.ndim == 1 else t)
    x = rng.standard_normal((batch, *topology.input_shape))
    y = rng.integers(0, topology.num_classes, size=batch)
    _, grads = backward(params, x, y, topology)
    analytic = grads.flat()
    if inject_fault:
        analytic = analytic.copy()
        analytic[0] += 1e-2
    numeric = finite_difference_grad(params, x, y, topology, h)
    err = float(relative_errors(analytic, numeric, abs_floor).max())
    return GradAuditReport(name, err, tolerance, analytic.size, err < tolerance)


def fisher_audit(topology: ModelTopology, dataset: Dataset, seed: int = 0, params: LayeredParams | None = None,
                 tolerance: float = 1e-9, max_entry_bound: float | None = None,
                 name: str = "fisher_audit") -> FisherAuditReport:
    """Trace identity E||g||^2 == sum(J) and the zero-limit implication ||g|| < d => J < d^2.

    ``max_entry_bound`` additionally requires every Fisher entry to lie below it.
    """
    if params is None:
        params = init_params(topology, seed)
    sq_norms = [float(g.flat() @ g.flat()) for g in per_sample_grads(params, topology, dataset)]
    trace = math.fsum(sq_norms) / len(sq_norms)
    fisher = fisher_diag(params, topology, dataset).flat()
    total = math.fsum(fisher)
    denom = max(abs(trace), abs(total))
    rel = abs(trace - total) / denom if denom > 0 else 0.0
    max_norm = math.sqrt(max(sq_norms))
    max_entry = float(fisher.max())
    # J_j = mean_i g_ij^2 <= max_i ||g_i||^2
    zero_ok = max_entry <= max_norm ** 2 * (1 + 1e-12)
    if max_entry_bound is not None:
        zero_ok = zero_ok and max_entry < max_entry_bound
    return FisherAuditReport(name, trace, total, rel, max_norm, max_entry, zero_ok, rel < tolerance and zero_ok)


def per_sample_losses(params, topology, ds: Dataset) -> np.ndarray:
    logp = log_softmax(forward(params, ds.features, topology))
    return -logp[np.arange(len(ds)), ds.labels]


def fit_to_interpolation(topology: ModelTopology, ds: Dataset, seed: int = 0, target: float = 1e-8,
                         lr: float = 0.5, max_steps: int = 20_000) -> LayeredParams:
    """Full-batch GD until every sample is classified, then scale the head until every CE < target."""
    params = init_params(topology, seed)
    for _ in range(max_steps):
        if accuracy(params, ds.features, ds.labels, topology) == 1.0:
            break
        _, g = backward(params, ds.features, ds.labels, topology)
        params = params - g.scale(lr)
    else:
        raise InputError("could not fit the dataset exactly")
    head = params.layer_ids[-1]
    scaled = params
    factor = 1.0
    while per_sample_losses(scaled, topology, ds).max() >= target:
        factor *= 2.0
        if factor > 2.0 ** 40:
            raise InputError("head scaling did not reach the target loss")
        scaled = LayeredParams((lid, [factor * t for t in ts] if lid == head else ts) for lid, ts in params.items())
    return scaled


def linear_topology(input_dim: int, num_classes: int) -> ModelTopology:
    return ModelTopology((LayerSpec("dense", "head", (num_classes, input_dim)),), (input_dim,), num_classes,
                         {"head": "B0"})


def random_dataset(n: int, input_shape, num_classes: int, seed: int) -> Dataset:
    rng = np.random.default_rng([seed, 11])
    labels = np.arange(n) % num_classes
    return Dataset(rng.standard_normal((n, *input_shape)), rng.permutation(labels), num_classes)


def audit_suite(seed: int = 0, inject_fault: bool = False) -> list[GradAuditReport | FisherAuditReport]:
    """The fixed set of audits run by the ``check`` command."""
    mlp, _ = build_mlp(4, [8], 3, seed)
    cnn, _ = build_tiny_cnn((12, 12, 1), 3, seed)
    reports: list = [
        grad_audit(linear_topology(4, 3), seed, 1e-6, name="grad_linear"),
        grad_audit(mlp, seed, 1e-4, inject_fault=inject_fault, name="grad_mlp"),
        grad_audit(cnn, seed, 1e-4, batch=2, name="grad_cnn"),
        fisher_audit(mlp, random_dataset(16, (4,), 3, seed), seed, name="fisher_mlp"),
    ]
    small = random_dataset(4, (4,), 3, seed)
    fitted = fit_to_interpolation(mlp, small, seed)
    reports.append(fisher_audit(mlp, small, params=fitted, max_entry_bound=1e-6, name="fisher_interpolating"))
    return reports


# -- balanced-client norm ablation --------------------------------------------


@dataclass
class AblationConfig:
    num_classes: int = 5
    feature_dim: int = 8
    class_separation: float = 3.0
    noise_std: float = 1.5
    hidden: tuple[int, ...] = (16,)
    n_heterogeneous: int = 9
    alpha: float = 0.05
    samples_per_client: int = 200
    val_per_class: int = 40
    test_per_class: int = 100
    rounds: int = 60
    local_epochs: int = 5
    batch_size: int = 32
    lr: float = 0.01
    norms: tuple[str, ...] = ("l1", "l2", "spectral", "delta")
    all_balanced: bool = False
    seed: int = 0


@dataclass
class AblationResult:
    traces: list[tuple[int, str, int, float]]
    balanced_client: int
    final_mean_weights: dict[str, dict[int, float]] = field(default_factory=dict)
    test_acc: dict[str, float] = field(default_factory=dict)

    def argmax_client(self, norm: str) -> int:
        w = self.final_mean_weights[norm]
        return max(w, key=w.get)


def ablation_clients(cfg: AblationConfig) -> FederatedData:
    """Client 0 is class-balanced; clients 1..n draw class mixes from Dirichlet(alpha)."""
    c, m = cfg.num_classes, cfg.samples_per_client
    k_total = cfg.n_heterogeneous + 1
    rng = np.random.default_rng([cfg.seed, 101])
    pool_per_class = cfg.val_per_class + cfg.test_per_class + k_total * m
    pool = make_blobs(c, pool_per_class, cfg.feature_dim, cfg.class_separation, cfg.noise_std,
                      int(rng.integers(2**31)))
    queues = [list(rng.permutation(np.flatnonzero(pool.labels == cls))) for cls in range(c)]
    val_idx = [i for q in queues for i in q[: cfg.val_per_class]]
    test_idx = [i for q in queues for i in q[cfg.val_per_class: cfg.val_per_class + cfg.test_per_class]]
    queues = [q[cfg.val_per_class + cfg.test_per_class:] for q in queues]

    uniform = apportion(m, np.ones(c))
    clients = []
    for k in range(k_total):
        if k == 0 or cfg.all_balanced:
            counts = uniform
        else:
            g = rng.gamma(cfg.alpha, 1.0, size=c)
            while g.sum() <= 0:
                g = rng.gamma(cfg.alpha, 1.0, size=c)
            counts = apportion(m, g / g.sum())
        idx = []
        for cls, n in enumerate(counts):
            if n > len(queues[cls]):
                raise SamplingError(f"class {cls} exhausted while building client {k}")
            idx.extend(queues[cls][:n])
            queues[cls] = queues[cls][n:]
        clients.append(pool.subset(np.sort(idx)))
    return FederatedData(clients, pool.subset(np.sort(val_idx)), pool.subset(np.sort(test_idx)), cfg.alpha)


def balanced_client_ablation(cfg: AblationConfig) -> AblationResult:
    """FedVG with each norm kind on identical data/init; records every client's weight per round."""
    data = ablation_clients(cfg)
    topology, init = build_mlp(cfg.feature_dim, cfg.hidden, cfg.num_classes, cfg.seed)
    result = AblationResult([], 0)
    tail = max(1, math.ceil(cfg.rounds * 0.25))
    for norm in cfg.norms:
        exp = ExperimentConfig(
            num_classes=cfg.num_classes, feature_dim=cfg.feature_dim, hidden=cfg.hidden,
            num_clients=len(data.clients), join_ratio=1.0, alpha=cfg.alpha, rounds=cfg.rounds,
            strategy="fedvg", norm=norm, local_epochs=cfg.local_epochs, batch_size=cfg.batch_size,
            lr=cfg.lr, seed=cfg.seed,
        )
        res = run_federated(exp, topology, init, data)
        for rec in res.records:
            for k, w in rec.scores.items():
                result.traces.append((rec.round, norm, k, w))
        last = res.records[-tail:]
        result.final_mean_weights[norm] = {
            k: math.fsum(r.scores[k] for r in last) / len(last) for k in range(len(data.clients))
        }
        result.test_acc[norm] = res.best_acc
    return result
